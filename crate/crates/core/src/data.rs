//! On-disk graph bundles, the synthetic hierarchy generator, split handling,
//! and the four-point hyperbolicity estimate.
//!
//! A bundle directory holds five files: `meta.json`, `features.bin` (16-byte
//! header: magic "HYPB", version, n, dim as little-endian u32s, then row-major
//! little-endian f64), `edges.tsv`, `labels.tsv` (-1 = unlabeled) and
//! `masks.tsv` (train/val/test columns of 0/1).

use std::collections::VecDeque;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::DenseMatrix;

const MAGIC: &[u8; 4] = b"HYPB";
const VERSION: u32 = 1;

/// Feature width used by the synthetic generator.
pub const HIERARCHY_FEATURE_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub name: String,
    pub n: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphBundle {
    pub meta: GraphMeta,
    pub features: DenseMatrix,
    pub edges: Vec<(usize, usize)>,
    pub labels: Vec<i64>,
    pub train_mask: Vec<bool>,
    pub val_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
}

impl GraphBundle {
    pub fn n(&self) -> usize {
        self.meta.n
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.meta.n;
        if self.features.shape() != (n, self.meta.feature_dim) {
            return Err(Error::Data(format!(
                "feature matrix is {:?}, meta says {}x{}",
                self.features.shape(),
                n,
                self.meta.feature_dim
            )));
        }
        for (what, len) in [
            ("labels", self.labels.len()),
            ("train mask", self.train_mask.len()),
            ("val mask", self.val_mask.len()),
            ("test mask", self.test_mask.len()),
        ] {
            if len != n {
                return Err(Error::Data(format!("{what} has {len} entries for {n} nodes")));
            }
        }
        for i in 0..n {
            let hits = self.train_mask[i] as u8 + self.val_mask[i] as u8 + self.test_mask[i] as u8;
            if hits > 1 {
                return Err(Error::Data(format!("node {i} appears in multiple split masks")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for (k, &(a, b)) in self.edges.iter().enumerate() {
            if a >= n || b >= n {
                return Err(Error::Data(format!(
                    "edge {k} = ({a}, {b}) references a node outside 0..{n}"
                )));
            }
            if a == b {
                return Err(Error::Data(format!("edge {k} is a self-loop at node {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Data(format!("edge {k} = ({a}, {b}) duplicates an earlier edge")));
            }
        }
        let mut max_label: i64 = -1;
        for (i, &y) in self.labels.iter().enumerate() {
            if y < -1 {
                return Err(Error::Data(format!("label {y} at node {i} is invalid")));
            }
            max_label = max_label.max(y);
        }
        let classes = (max_label + 1) as usize;
        if classes != self.meta.num_classes {
            return Err(Error::Data(format!(
                "labels span {classes} classes, meta says {}",
                self.meta.num_classes
            )));
        }
        Ok(())
    }
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn save_bundle(bundle: &GraphBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir)?;
    serde_json::to_writer_pretty(create(&dir.join("meta.json"))?, &bundle.meta)?;

    let mut f = std::io::BufWriter::new(create(&dir.join("features.bin"))?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(bundle.meta.n as u32).to_le_bytes())?;
    f.write_all(&(bundle.meta.feature_dim as u32).to_le_bytes())?;
    for &v in bundle.features.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;

    let mut e = String::new();
    for &(a, b) in &bundle.edges {
        e.push_str(&format!("{a}\t{b}\n"));
    }
    fs::write(dir.join("edges.tsv"), e)?;

    let mut l = String::new();
    for &y in &bundle.labels {
        l.push_str(&format!("{y}\n"));
    }
    fs::write(dir.join("labels.tsv"), l)?;

    let mut m = String::new();
    for i in 0..bundle.meta.n {
        m.push_str(&format!(
            "{}\t{}\t{}\n",
            bundle.train_mask[i] as u8, bundle.val_mask[i] as u8, bundle.test_mask[i] as u8
        ));
    }
    fs::write(dir.join("masks.tsv"), m)?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<GraphBundle> {
    let meta: GraphMeta = serde_json::from_reader(open(&dir.join("meta.json"))?)?;

    let mut f = std::io::BufReader::new(open(&dir.join("features.bin"))?);
    let mut head = [0u8; 16];
    f.read_exact(&mut head)
        .map_err(|_| Error::Data("features.bin shorter than its 16-byte header".to_string()))?;
    if &head[0..4] != MAGIC {
        return Err(Error::Data("features.bin magic is not HYPB".to_string()));
    }
    let word = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
    if word(4) != VERSION {
        return Err(Error::Data(format!("features.bin version {} unsupported", word(4))));
    }
    let (n, dim) = (word(8) as usize, word(12) as usize);
    if n != meta.n || dim != meta.feature_dim {
        return Err(Error::Data(format!(
            "features.bin header says {n}x{dim}, meta.json says {}x{}",
            meta.n, meta.feature_dim
        )));
    }
    let mut raw = Vec::new();
    f.read_to_end(&mut raw)?;
    if raw.len() != n * dim * 8 {
        return Err(Error::Data(format!(
            "features.bin payload is {} bytes, expected {}",
            raw.len(),
            n * dim * 8
        )));
    }
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let features = DenseMatrix::from_vec(n, dim, data)?;

    let parse_line = |line: &str, file: &str, k: usize| -> Result<Vec<i64>> {
        line.split('\t')
            .map(|t| {
                t.trim().parse::<i64>().map_err(|_| {
                    Error::Data(format!("{file} line {}: unparsable field {t:?}", k + 1))
                })
            })
            .collect()
    };

    let mut edges = Vec::new();
    for (k, line) in fs::read_to_string(dir.join("edges.tsv"))
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("edges.tsv: {e}"))))?
        .lines()
        .enumerate()
    {
        let v = parse_line(line, "edges.tsv", k)?;
        if v.len() != 2 || v[0] < 0 || v[1] < 0 {
            return Err(Error::Data(format!("edges.tsv line {}: expected two node ids", k + 1)));
        }
        edges.push((v[0] as usize, v[1] as usize));
    }

    let mut labels = Vec::new();
    for (k, line) in fs::read_to_string(dir.join("labels.tsv"))
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("labels.tsv: {e}"))))?
        .lines()
        .enumerate()
    {
        labels.push(parse_line(line, "labels.tsv", k)?[0]);
    }

    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (k, line) in fs::read_to_string(dir.join("masks.tsv"))
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("masks.tsv: {e}"))))?
        .lines()
        .enumerate()
    {
        let v = parse_line(line, "masks.tsv", k)?;
        if v.len() != 3 || v.iter().any(|&x| !(0..=1).contains(&x)) {
            return Err(Error::Data(format!("masks.tsv line {}: expected three 0/1 columns", k + 1)));
        }
        train.push(v[0] == 1);
        val.push(v[1] == 1);
        test.push(v[2] == 1);
    }

    let bundle = GraphBundle {
        meta,
        features,
        edges,
        labels,
        train_mask: train,
        val_mask: val,
        test_mask: test,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Write a matrix with the same binary header convention as features.bin.
pub fn save_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(m.rows() as u32).to_le_bytes())?;
    f.write_all(&(m.cols() as u32).to_le_bytes())?;
    for &v in m.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<DenseMatrix> {
    let mut f = std::io::BufReader::new(open(path)?);
    let mut head = [0u8; 16];
    f.read_exact(&mut head)
        .map_err(|_| Error::Data(format!("{}: shorter than its 16-byte header", path.display())))?;
    if &head[0..4] != MAGIC {
        return Err(Error::Data(format!("{}: magic is not HYPB", path.display())));
    }
    let word = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
    if word(4) != VERSION {
        return Err(Error::Data(format!("{}: version {} unsupported", path.display(), word(4))));
    }
    let (n, dim) = (word(8) as usize, word(12) as usize);
    let mut raw = Vec::new();
    f.read_to_end(&mut raw)?;
    if raw.len() != n * dim * 8 {
        return Err(Error::Data(format!(
            "{}: payload is {} bytes, expected {}",
            path.display(),
            raw.len(),
            n * dim * 8
        )));
    }
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DenseMatrix::from_vec(n, dim, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyGenSpec {
    pub branching: usize,
    pub depth: usize,
    pub nodes_per_leaf_class: usize,
    pub intra_p: f64,
    pub inter_decay: f64,
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for HierarchyGenSpec {
    fn default() -> Self {
        HierarchyGenSpec {
            branching: 2,
            depth: 3,
            nodes_per_leaf_class: 16,
            intra_p: 0.5,
            inter_decay: 0.15,
            feature_noise: 0.3,
            seed: 0,
        }
    }
}

impl HierarchyGenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.branching < 2 || self.depth < 2 {
            return Err(Error::Config(format!(
                "hierarchy needs branching >= 2 and depth >= 2, got {} and {}",
                self.branching, self.depth
            )));
        }
        if self.nodes_per_leaf_class == 0 {
            return Err(Error::Config("nodes_per_leaf_class must be positive".to_string()));
        }
        for (what, v) in [("intra_p", self.intra_p), ("inter_decay", self.inter_decay)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{what} must lie in [0,1], got {v}")));
            }
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::Config(format!(
                "feature_noise must be nonnegative, got {}",
                self.feature_noise
            )));
        }
        Ok(())
    }

    pub fn leaf_classes(&self) -> usize {
        self.branching.pow(self.depth as u32)
    }
}

/// Hop distance between two leaves of the complete class tree: up to the
/// lowest common ancestor and back down.
pub fn leaf_tree_distance(branching: usize, depth: usize, a: usize, b: usize) -> usize {
    if a == b {
        return 0;
    }
    let digits = |mut x: usize| {
        let mut d = vec![0usize; depth];
        for slot in d.iter_mut().rev() {
            *slot = x % branching;
            x /= branching;
        }
        d
    };
    let (da, db) = (digits(a), digits(b));
    let shared = da.iter().zip(&db).take_while(|(x, y)| x == y).count();
    2 * (depth - shared)
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller on two uniforms
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Random graph over `branching^depth` leaf classes. Edge probability between
/// two nodes is `intra_p` within a class and decays with the class-tree
/// distance as `intra_p * inter_decay^distance` across classes. Features are
/// the class centroid (built by walking the tree, each level contributing a
/// smaller random offset) plus Gaussian noise. Masks are a stratified
/// 60/20/20 split.
pub fn generate_hierarchy(spec: &HierarchyGenSpec) -> Result<GraphBundle> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let leaves = spec.leaf_classes();
    let n = leaves * spec.nodes_per_leaf_class;
    let dim = HIERARCHY_FEATURE_DIM;

    // one offset per tree node, by (level, index-within-level)
    let mut offsets: Vec<Vec<Vec<f64>>> = Vec::with_capacity(spec.depth);
    for level in 1..=spec.depth {
        let count = spec.branching.pow(level as u32);
        let scale = 4.0 * 0.5f64.powi(level as i32 - 1);
        offsets.push(
            (0..count)
                .map(|_| (0..dim).map(|_| scale * gaussian(&mut rng)).collect())
                .collect(),
        );
    }
    let centroid = |leaf: usize| -> Vec<f64> {
        let mut c = vec![0.0; dim];
        let mut idx = leaf;
        for level in (1..=spec.depth).rev() {
            for (ci, &o) in c.iter_mut().zip(&offsets[level - 1][idx]) {
                *ci += o;
            }
            idx /= spec.branching;
        }
        c
    };
    let centroids: Vec<Vec<f64>> = (0..leaves).map(centroid).collect();

    let mut features = DenseMatrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i / spec.nodes_per_leaf_class;
        labels.push(class as i64);
        let row = features.row_mut(i);
        for (r, &c) in row.iter_mut().zip(&centroids[class]) {
            *r = c + spec.feature_noise * gaussian(&mut rng);
        }
    }

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let (ci, cj) = (i / spec.nodes_per_leaf_class, j / spec.nodes_per_leaf_class);
            let p = if ci == cj {
                spec.intra_p
            } else {
                spec.intra_p
                    * spec
                        .inter_decay
                        .powi(leaf_tree_distance(spec.branching, spec.depth, ci, cj) as i32)
            };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }

    let mut train = vec![false; n];
    let mut val = vec![false; n];
    let mut test = vec![false; n];
    for class in 0..leaves {
        let mut ids: Vec<usize> = (0..spec.nodes_per_leaf_class)
            .map(|k| class * spec.nodes_per_leaf_class + k)
            .collect();
        ids.shuffle(&mut rng);
        let t = (ids.len() * 6).div_ceil(10);
        let v = (ids.len() - t).div_ceil(2);
        for (pos, &id) in ids.iter().enumerate() {
            if pos < t {
                train[id] = true;
            } else if pos < t + v {
                val[id] = true;
            } else {
                test[id] = true;
            }
        }
    }

    let bundle = GraphBundle {
        meta: GraphMeta {
            name: format!("hierarchy-b{}-d{}", spec.branching, spec.depth),
            n,
            feature_dim: dim,
            num_classes: leaves,
            split: "generated".to_string(),
        },
        features,
        edges,
        labels,
        train_mask: train,
        val_mask: val,
        test_mask: test,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn adjacency_list(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    adj
}

fn largest_component(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut seen = vec![false; n];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut q = VecDeque::from([start]);
        while let Some(u) = q.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    comp.push(v);
                    q.push_back(v);
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best
}

fn bfs_distances(adj: &[Vec<usize>], source: usize) -> Vec<Option<u32>> {
    let mut dist = vec![None; adj.len()];
    dist[source] = Some(0);
    let mut q = VecDeque::from([source]);
    while let Some(u) = q.pop_front() {
        let du = dist[u].unwrap();
        for &v in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                q.push_back(v);
            }
        }
    }
    dist
}

fn four_point_defect(d: impl Fn(usize, usize) -> f64, q: [usize; 4]) -> f64 {
    let [w, x, y, z] = q;
    let mut sums = [
        d(w, x) + d(y, z),
        d(w, y) + d(x, z),
        d(w, z) + d(x, y),
    ];
    sums.sort_by(f64::total_cmp);
    (sums[2] - sums[1]) / 2.0
}

/// Four-point hyperbolicity estimate over hop distances on the largest
/// connected component. Node and quadruple budgets switch between exhaustive
/// and seeded sampling; the result is an approximation from below.
pub fn gromov_delta(
    bundle: &GraphBundle,
    sample_nodes: usize,
    sample_quadruples: usize,
    seed: u64,
) -> Result<f64> {
    let n = bundle.n();
    if n == 0 {
        return Err(Error::Contract("empty graph".to_string()));
    }
    let adj = adjacency_list(n, &bundle.edges);
    let mut comp = largest_component(&adj);
    if comp.len() < 4 {
        return Ok(0.0);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    if comp.len() > sample_nodes.max(4) {
        comp.shuffle(&mut rng);
        comp.truncate(sample_nodes.max(4));
    }
    let s = comp.len();
    let mut dist = DenseMatrix::zeros(s, s);
    for (si, &node) in comp.iter().enumerate() {
        let d = bfs_distances(&adj, node);
        for (sj, &other) in comp.iter().enumerate() {
            dist.set(si, sj, d[other].expect("same component") as f64);
        }
    }
    let d = |i: usize, j: usize| dist.get(i, j);

    let exhaustive = s.saturating_sub(3) * s.saturating_sub(2) * s.saturating_sub(1) * s / 24;
    let mut best = 0.0f64;
    if exhaustive <= sample_quadruples {
        for a in 0..s {
            for b in (a + 1)..s {
                for c in (b + 1)..s {
                    for e in (c + 1)..s {
                        best = best.max(four_point_defect(d, [a, b, c, e]));
                    }
                }
            }
        }
    } else {
        let mut drawn = 0;
        while drawn < sample_quadruples {
            let mut q = [0usize; 4];
            for slot in q.iter_mut() {
                *slot = rng.random_range(0..s);
            }
            if q[0] != q[1] && q[0] != q[2] && q[0] != q[3] && q[1] != q[2] && q[1] != q[3] && q[2] != q[3] {
                best = best.max(four_point_defect(d, q));
                drawn += 1;
            }
        }
    }
    Ok(best)
}

/// Keep the bundled fixed masks; errors when they are absent.
pub fn split_public(bundle: &GraphBundle) -> Result<GraphBundle> {
    for (what, mask) in [
        ("train", &bundle.train_mask),
        ("val", &bundle.val_mask),
        ("test", &bundle.test_mask),
    ] {
        if !mask.iter().any(|&b| b) {
            return Err(Error::Data(format!("public split requires a bundled {what} mask")));
        }
    }
    let mut out = bundle.clone();
    out.meta.split = "public".to_string();
    Ok(out)
}

/// Regenerate masks: `val_size` and `test_size` labeled nodes drawn by seed,
/// every remaining labeled node trains.
pub fn split_full(bundle: &GraphBundle, seed: u64, val_size: usize, test_size: usize) -> Result<GraphBundle> {
    let labeled: Vec<usize> = (0..bundle.n()).filter(|&i| bundle.labels[i] >= 0).collect();
    if labeled.len() < val_size + test_size {
        return Err(Error::Data(format!(
            "{} labeled nodes cannot fill val={val_size} + test={test_size}",
            labeled.len()
        )));
    }
    let mut order = labeled;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut out = bundle.clone();
    out.train_mask = vec![false; bundle.n()];
    out.val_mask = vec![false; bundle.n()];
    out.test_mask = vec![false; bundle.n()];
    for (pos, &i) in order.iter().enumerate() {
        if pos < test_size {
            out.test_mask[i] = true;
        } else if pos < test_size + val_size {
            out.val_mask[i] = true;
        } else {
            out.train_mask[i] = true;
        }
    }
    out.meta.split = "full".to_string();
    Ok(out)
}
