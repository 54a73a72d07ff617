//! Euclidean graph backbones. Both kinds share one shape: an input projection
//! into the hidden width followed by `layers` propagation steps over the
//! normalized adjacency. `gcn` stacks plain convolutions; `gcnii` mixes each
//! step with the projected input and shrinks the weight toward identity as
//! depth grows.

use std::collections::BTreeSet;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{ops, DenseMatrix, DiffNode, SparseAdjacency};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Gcn,
    Gcnii,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(&self, x: &DiffNode) -> Result<DiffNode> {
        match self {
            Activation::Relu => ops::relu(x),
            Activation::Identity => Ok(x.clone()),
        }
    }
}

fn default_alpha() -> f64 {
    0.1
}

fn default_theta() -> f64 {
    0.5
}

fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Input-anchor mixing weight; gcnii only.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Identity-map decay rate; gcnii only.
    #[serde(default = "default_theta")]
    pub theta: f64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("backbone hidden width must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0,1), got {}",
                self.dropout
            )));
        }
        if self.kind == BackboneKind::Gcnii {
            if !(0.0..=1.0).contains(&self.alpha) {
                return Err(Error::Config(format!("alpha must lie in [0,1], got {}", self.alpha)));
            }
            if !(self.theta.is_finite() && self.theta > 0.0) {
                return Err(Error::Config(format!("theta must be positive, got {}", self.theta)));
            }
        }
        Ok(())
    }
}

/// Symmetric normalization with self-loops: D^{-1/2} (A + I) D^{-1/2}.
/// Input edges are treated as undirected; duplicates and explicit self-loops
/// are dropped before the loop insertion.
pub fn normalize_adjacency(edges: &[(usize, usize)], n: usize) -> Result<SparseAdjacency> {
    if n == 0 {
        return Err(Error::Data("empty graph".to_string()));
    }
    let mut neighbors: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (k, &(a, b)) in edges.iter().enumerate() {
        if a >= n || b >= n {
            return Err(Error::Data(format!(
                "edge {k} = ({a}, {b}) references a node outside 0..{n}"
            )));
        }
        if a != b {
            neighbors[a].insert(b);
            neighbors[b].insert(a);
        }
    }
    let inv_sqrt_deg: Vec<f64> = neighbors
        .iter()
        .map(|nb| 1.0 / ((nb.len() + 1) as f64).sqrt())
        .collect();
    let mut entries = Vec::new();
    for i in 0..n {
        let mut row: Vec<usize> = neighbors[i].iter().copied().collect();
        row.push(i);
        row.sort_unstable();
        for j in row {
            entries.push((i, j, inv_sqrt_deg[i] * inv_sqrt_deg[j]));
        }
    }
    SparseAdjacency::new(n, entries)
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    let lim = (6.0 / (rows + cols) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-lim..lim))
}

#[derive(Clone, Debug)]
struct Linear {
    w: DiffNode,
    b: DiffNode,
}

impl Linear {
    fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: DiffNode::leaf(glorot(in_dim, out_dim, rng), true),
            b: DiffNode::leaf(DenseMatrix::zeros(1, out_dim), true),
        }
    }

    fn apply(&self, x: &DiffNode) -> Result<DiffNode> {
        let xw = ops::matmul(x, &self.w)?;
        let ones = DiffNode::constant(DenseMatrix::ones(x.rows(), 1));
        ops::add(&xw, &ops::matmul(&ones, &self.b)?)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    input_proj: Linear,
    layers: Vec<Linear>,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, in_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if in_dim == 0 {
            return Err(Error::Config("backbone input width must be positive".to_string()));
        }
        let input_proj = Linear::new(in_dim, cfg.hidden, rng);
        let layers = (0..cfg.layers)
            .map(|_| Linear::new(cfg.hidden, cfg.hidden, rng))
            .collect();
        Ok(Backbone {
            cfg: cfg.clone(),
            input_proj,
            layers,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.hidden
    }

    pub fn params(&self) -> Vec<DiffNode> {
        let mut out = vec![self.input_proj.w.clone(), self.input_proj.b.clone()];
        for l in &self.layers {
            out.push(l.w.clone());
            out.push(l.b.clone());
        }
        out
    }

    fn dropout(&self, x: &DiffNode, rng: &mut Option<&mut dyn FnMut() -> f64>) -> Result<DiffNode> {
        let p = self.cfg.dropout;
        let Some(draw) = rng.as_mut() else {
            return Ok(x.clone());
        };
        if p == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let (r, c) = x.shape();
        let mask = DenseMatrix::from_fn(r, c, |_, _| if draw() < p { 0.0 } else { keep });
        ops::mul(x, &DiffNode::constant(mask))
    }

    /// Node embedding matrix, n x hidden. Pass a generator to enable dropout
    /// (training); `None` runs the deterministic eval path.
    pub fn forward(
        &self,
        adj: &Rc<SparseAdjacency>,
        features: &DiffNode,
        dropout_rng: Option<&mut dyn FnMut() -> f64>,
    ) -> Result<DiffNode> {
        if features.rows() != adj.n() {
            return Err(Error::Contract(format!(
                "{} feature rows for a {}-node graph",
                features.rows(),
                adj.n()
            )));
        }
        let mut rng = dropout_rng;
        let act = self.cfg.activation;
        match self.cfg.kind {
            BackboneKind::Gcn => {
                // linear lift, then H' = act(A H W + b) per layer, last layer linear
                let mut h = self.input_proj.apply(&self.dropout(features, &mut rng)?)?;
                let depth = self.layers.len();
                for (l, layer) in self.layers.iter().enumerate() {
                    let hd = self.dropout(&h, &mut rng)?;
                    let mixed = layer.apply(&ops::spmm(adj, &hd)?)?;
                    h = if l + 1 == depth { mixed } else { act.apply(&mixed)? };
                }
                Ok(h)
            }
            BackboneKind::Gcnii => {
                // H0 = act(X W0 + b0); each step anchors back to H0 and blends
                // the layer weight with identity: beta_l = ln(theta/l + 1)
                let h0 = act.apply(&self.input_proj.apply(&self.dropout(features, &mut rng)?)?)?;
                let mut h = h0.clone();
                let alpha = self.cfg.alpha;
                for (l, layer) in self.layers.iter().enumerate() {
                    let beta = (self.cfg.theta / (l + 1) as f64).ln_1p();
                    let hd = self.dropout(&h, &mut rng)?;
                    let s = ops::add(
                        &ops::scale(&ops::spmm(adj, &hd)?, 1.0 - alpha)?,
                        &ops::scale(&h0, alpha)?,
                    )?;
                    let sw = ops::matmul(&s, &layer.w)?;
                    let ones = DiffNode::constant(DenseMatrix::ones(s.rows(), 1));
                    let mixed = ops::add(
                        &ops::add(&ops::scale(&s, 1.0 - beta)?, &ops::scale(&sw, beta)?)?,
                        &ops::matmul(&ones, &layer.b)?,
                    )?;
                    h = act.apply(&mixed)?;
                }
                Ok(h)
            }
        }
    }
}

/// Largest observed ratio of output to input displacement over row pairs of
/// `inputs`, using `f` as the embedding map. Exhaustive when the pair count
/// stays under `max_pairs`, otherwise a seeded sample. Rows that coincide in
/// the input are skipped; an estimate, not a certified bound.
pub fn empirical_lipschitz(
    f: &dyn Fn(&DenseMatrix) -> Result<DenseMatrix>,
    inputs: &DenseMatrix,
    max_pairs: usize,
    seed: u64,
) -> Result<f64> {
    use rand::SeedableRng;
    let n = inputs.rows();
    if n < 2 {
        return Err(Error::Contract("need at least two inputs".to_string()));
    }
    let out = f(inputs)?;
    if out.rows() != n {
        return Err(Error::Contract(format!(
            "map returned {} rows for {} inputs",
            out.rows(),
            n
        )));
    }
    let norm = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let total = n * (n - 1) / 2;
    let mut best = 0.0f64;
    let mut seen = 0usize;
    let mut consider = |i: usize, j: usize| {
        let din = norm(inputs.row(i), inputs.row(j));
        if din > 0.0 {
            seen += 1;
            best = best.max(norm(out.row(i), out.row(j)) / din);
        }
    };
    if total <= max_pairs {
        for i in 0..n {
            for j in (i + 1)..n {
                consider(i, j);
            }
        }
    } else {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        for _ in 0..max_pairs {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i != j {
                consider(i, j);
            }
        }
    }
    if seen == 0 {
        return Err(Error::Contract("all input rows coincide".to_string()));
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn driver(rng: &mut ChaCha20Rng) -> impl FnMut() -> f64 + '_ {
        move || rng.random::<f64>()
    }

    #[test]
    fn single_node_operator_is_unit() {
        let a = normalize_adjacency(&[], 1).unwrap();
        assert_eq!(a.densify().data(), &[1.0]);
    }

    #[test]
    fn two_node_operator_is_uniform_half() {
        let a = normalize_adjacency(&[(0, 1)], 2).unwrap();
        for &v in a.densify().data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn operator_is_symmetric_with_unit_spectral_bound() {
        // row sums can exceed 1 once degrees differ (middle of a path: ~1.075),
        // but the spectrum always stays inside [-1, 1]
        let a = normalize_adjacency(&[(0, 1), (1, 2), (2, 3)], 4).unwrap();
        let d = a.densify();
        for i in 0..4 {
            for j in 0..4 {
                assert!((d.get(i, j) - d.get(j, i)).abs() < 1e-15);
            }
        }
        let m = nalgebra::DMatrix::from_row_slice(4, 4, d.data());
        for &e in m.symmetric_eigen().eigenvalues.iter() {
            assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&e), "eigenvalue {e}");
        }
    }

    #[test]
    fn out_of_range_edge_rejected() {
        let err = normalize_adjacency(&[(0, 5)], 3).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn duplicate_and_self_edges_ignored() {
        let a = normalize_adjacency(&[(0, 1), (1, 0), (0, 0)], 2).unwrap();
        let b = normalize_adjacency(&[(0, 1)], 2).unwrap();
        assert_eq!(a.densify(), b.densify());
    }

    fn gcn_cfg(layers: usize) -> BackboneConfig {
        BackboneConfig {
            kind: BackboneKind::Gcn,
            hidden: 3,
            layers,
            dropout: 0.0,
            activation: Activation::Relu,
            alpha: 0.1,
            theta: 0.5,
        }
    }

    #[test]
    fn zero_layer_backbone_is_the_projection() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let bb = Backbone::new(&gcn_cfg(0), 4, &mut rng).unwrap();
        let adj = Rc::new(normalize_adjacency(&[(0, 1)], 2).unwrap());
        let x = DiffNode::constant(DenseMatrix::from_fn(2, 4, |i, j| (i + j) as f64));
        let out = bb.forward(&adj, &x, None).unwrap();
        let expect = bb.input_proj.apply(&x).unwrap();
        assert_eq!(*out.value(), *expect.value());
    }

    #[test]
    fn gcn_matches_dense_reference() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let cfg = gcn_cfg(2);
        let bb = Backbone::new(&cfg, 4, &mut rng).unwrap();
        let adj = Rc::new(normalize_adjacency(&[(0, 1), (1, 2), (2, 3)], 4).unwrap());
        let x = DenseMatrix::eye(4);
        let out = bb.forward(&adj, &DiffNode::constant(x.clone()), None).unwrap();

        // hand-rolled dense forward with the same parameters
        let a = adj.densify();
        let lift = |h: &DenseMatrix, lin: &Linear| {
            let mut m = h.matmul(&lin.w.value()).unwrap();
            let b = lin.b.value();
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    m.set(i, j, m.get(i, j) + b.get(0, j));
                }
            }
            m
        };
        let mut h = lift(&x, &bb.input_proj);
        h = lift(&a.matmul(&h).unwrap(), &bb.layers[0]).map(|v| v.max(0.0));
        h = lift(&a.matmul(&h).unwrap(), &bb.layers[1]);
        let got = out.value();
        for (g, e) in got.data().iter().zip(h.data()) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_train_uses_seed() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut cfg = gcn_cfg(2);
        cfg.dropout = 0.5;
        let bb = Backbone::new(&cfg, 3, &mut rng).unwrap();
        let adj = Rc::new(normalize_adjacency(&[(0, 1), (1, 2)], 3).unwrap());
        let x = DiffNode::constant(DenseMatrix::from_fn(3, 3, |i, j| ((i * 3 + j) as f64).cos()));
        let e1 = bb.forward(&adj, &x, None).unwrap();
        let e2 = bb.forward(&adj, &x, None).unwrap();
        assert_eq!(*e1.value(), *e2.value());

        let run = |seed: u64| {
            let mut r = ChaCha20Rng::seed_from_u64(seed);
            let mut d = driver(&mut r);
            bb.forward(&adj, &x, Some(&mut d)).unwrap().value().clone()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn no_edges_means_rowwise_map() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let bb = Backbone::new(&gcn_cfg(2), 3, &mut rng).unwrap();
        let adj = Rc::new(normalize_adjacency(&[], 4).unwrap());
        let base = DenseMatrix::from_fn(4, 3, |i, j| ((i + 2 * j) as f64).sin());
        let mut bumped = base.clone();
        bumped.set(2, 1, bumped.get(2, 1) + 0.25);
        let o1 = bb.forward(&adj, &DiffNode::constant(base), None).unwrap();
        let o2 = bb.forward(&adj, &DiffNode::constant(bumped), None).unwrap();
        for i in 0..4 {
            let same = o1.value().row(i) == o2.value().row(i);
            assert_eq!(same, i != 2, "row {i}");
        }
    }

    #[test]
    fn permuting_nodes_permutes_outputs() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let cfg = BackboneConfig {
            kind: BackboneKind::Gcnii,
            hidden: 5,
            layers: 3,
            dropout: 0.0,
            activation: Activation::Relu,
            alpha: 0.1,
            theta: 0.5,
        };
        let bb = Backbone::new(&cfg, 4, &mut rng).unwrap();
        let edges = [(0usize, 1usize), (1, 2), (2, 3), (3, 0)];
        let x = DenseMatrix::from_fn(4, 4, |i, j| ((i * 5 + j) as f64).sin());
        let adj = Rc::new(normalize_adjacency(&edges, 4).unwrap());
        let out = bb.forward(&adj, &DiffNode::constant(x.clone()), None).unwrap();

        // relabel nodes with the cycle 0->1->2->3->0
        let perm = [1usize, 2, 3, 0];
        let pedges: Vec<_> = edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let mut px = DenseMatrix::zeros(4, 4);
        for i in 0..4 {
            px.row_mut(perm[i]).copy_from_slice(x.row(i));
        }
        let padj = Rc::new(normalize_adjacency(&pedges, 4).unwrap());
        let pout = bb.forward(&padj, &DiffNode::constant(px), None).unwrap();
        for i in 0..4 {
            let a = out.value().row(i).to_vec();
            let b = pout.value().row(perm[i]).to_vec();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        use crate::ndcore::gradcheck::check_gradients;
        for kind in [BackboneKind::Gcn, BackboneKind::Gcnii] {
            let mut rng = ChaCha20Rng::seed_from_u64(17);
            let cfg = BackboneConfig {
                kind,
                hidden: 3,
                layers: 2,
                dropout: 0.0,
                activation: Activation::Relu,
                alpha: 0.1,
                theta: 0.5,
            };
            let bb = Backbone::new(&cfg, 3, &mut rng).unwrap();
            let adj = Rc::new(normalize_adjacency(&[(0, 1), (1, 2)], 3).unwrap());
            let build = move |p: &[DiffNode]| {
                let h = bb.forward(&adj, &p[0], None)?;
                ops::mean(&ops::mul(&h, &h)?)
            };
            // offsets keep every relu pre-activation away from the kink
            let x = DenseMatrix::from_fn(3, 3, |i, j| 0.21 + ((i * 3 + j) as f64) * 0.13);
            let r = check_gradients(&[x], &build, 1e-6).unwrap();
            assert!(r.max_rel_err < 1e-5, "{kind:?}: {}", r.max_rel_err);
        }
    }

    #[test]
    fn gcnii_identity_blend_decays_with_depth() {
        let b1 = (0.5f64 / 1.0).ln_1p();
        let b2 = (0.5f64 / 2.0).ln_1p();
        assert!((b1 - 0.4054651081081644).abs() < 1e-15);
        assert!((b2 - 0.22314355131420976).abs() < 1e-15);
        assert!(b1 > b2);
    }

    #[test]
    fn lipschitz_of_identity_and_scaling() {
        let x = DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let id = |m: &DenseMatrix| Ok(m.clone());
        assert!((empirical_lipschitz(&id, &x, 1000, 0).unwrap() - 1.0).abs() < 1e-12);
        let tri = |m: &DenseMatrix| {
            let mut o = m.clone();
            o.scale_in_place(3.0);
            Ok(o)
        };
        assert!((empirical_lipschitz(&tri, &x, 1000, 0).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_contract_errors() {
        let id = |m: &DenseMatrix| Ok(m.clone());
        let one = DenseMatrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(empirical_lipschitz(&id, &one, 10, 0).is_err());
        let dup = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(empirical_lipschitz(&id, &dup, 10, 0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = gcn_cfg(2);
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        cfg.dropout = 0.6;
        assert!(cfg.validate().is_ok());
        cfg.hidden = 0;
        assert!(cfg.validate().is_err());
    }
}
