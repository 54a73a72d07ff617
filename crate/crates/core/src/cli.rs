//! Experiment driver: resolves a JSON config into data, model, and training
//! loop, then writes deterministic reports. All randomness derives from the
//! per-seed generator, so identical config and seed reproduce the metrics
//! file byte for byte; wall-clock numbers go to a separate timing file.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, GraphBundle, HierarchyGenSpec};
use crate::error::{Error, Result};
use crate::gnn::{Backbone, BackboneConfig};
use crate::hyperbolic::{self, Curvature};
use crate::kernels::{self, KernelSpec};
use crate::ndcore::{ops, DenseMatrix, DiffNode, SparseAdjacency};
use crate::objectives::{
    accuracy, argmax_rows, auroc, hyp_proxy_loss, kmeans_cluster, link_pred_loss,
    link_pred_scores, nmi, softmax_cross_entropy, FermiDiracDecoder, ProxyBank,
};
use crate::pooling::{self, LowRankHadamardHead, RandomMaclaurinHead};

pub const SCHEMA_VERSION: u32 = 1;

/// Fixed sizes used when re-splitting a labeled graph per seed.
const FULL_SPLIT_VAL: usize = 500;
const FULL_SPLIT_TEST: usize = 1000;

const LIPSCHITZ_PAIRS: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Nc,
    Lp,
    Cluster,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Public,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    /// Euclidean baseline: backbone output feeds a linear classifier or the
    /// decoder directly; curvature is ignored.
    None,
    FullBp,
    Rm { h: usize },
    LowRank { h: usize, heads: usize, rank: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSpec {
    Path { path: PathBuf },
    Synthetic { synthetic: HierarchyGenSpec },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.01,
            weight_decay: 5e-4,
            epochs: 300,
            patience: 100,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 || self.patience == 0 {
            return Err(Error::Config("epochs and patience must be positive".to_string()));
        }
        Ok(())
    }
}

fn default_split() -> SplitKind {
    SplitKind::Public
}

fn default_kernel() -> KernelSpec {
    KernelSpec::Poly2
}

fn default_curvature() -> f64 {
    1.0
}

fn default_kr_batch() -> usize {
    64
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub dataset: DatasetSpec,
    #[serde(default = "default_split")]
    pub split: SplitKind,
    pub backbone: BackboneConfig,
    pub head: HeadSpec,
    #[serde(default = "default_kernel")]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub lambda_kr: f64,
    #[serde(default = "default_curvature")]
    pub curvature: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_kr_batch")]
    pub kr_batch: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.kernel.validate()?;
        self.optimizer.validate()?;
        if let DatasetSpec::Synthetic { synthetic } = &self.dataset {
            synthetic.validate()?;
        }
        match self.head {
            HeadSpec::None => {
                if self.lambda_kr != 0.0 {
                    return Err(Error::Config(
                        "lambda_kr requires a pooling head; set head or drop the penalty".to_string(),
                    ));
                }
            }
            HeadSpec::Rm { h } => {
                if h == 0 {
                    return Err(Error::Config("rm head width must be positive".to_string()));
                }
            }
            HeadSpec::LowRank { h, heads, rank } => {
                if h == 0 || heads == 0 || rank == 0 {
                    return Err(Error::Config("low_rank head dimensions must be positive".to_string()));
                }
            }
            HeadSpec::FullBp => {}
        }
        if !(self.lambda_kr.is_finite() && self.lambda_kr >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_kr must be a nonnegative number, got {}",
                self.lambda_kr
            )));
        }
        if self.lambda_kr != 0.0 && !(1e-4..=1e-1).contains(&self.lambda_kr) {
            eprintln!(
                "warning: lambda_kr = {} is outside the tuned grid [1e-4, 1e-1]",
                self.lambda_kr
            );
        }
        if self.head != HeadSpec::None && !(self.curvature.is_finite() && self.curvature > 0.0) {
            return Err(Error::Config(format!(
                "curvature must be positive, got {}",
                self.curvature
            )));
        }
        if self.lambda_kr != 0.0 && self.kr_batch == 0 {
            return Err(Error::Config("kr_batch must be positive when the penalty is on".to_string()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("need at least one seed".to_string()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate seeds would overwrite each other's outputs".to_string()));
        }
        Ok(())
    }

    pub fn metric_name(&self) -> &'static str {
        match self.task {
            TaskKind::Nc => "accuracy",
            TaskKind::Lp => "auroc",
            TaskKind::Cluster => "nmi",
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// optimizer

/// Adam with decoupled-from-nothing weight decay: the L2 term is added to the
/// raw gradient before the moment updates, matching the usual GCN recipes.
struct Adam {
    lr: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(opt: &OptimizerConfig, params: &[DiffNode]) -> Self {
        Adam {
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.value().data().len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value().data().len()]).collect(),
        }
    }

    fn step(&mut self, params: &[DiffNode]) -> Result<()> {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for (k, p) in params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let mut value = p.value().clone();
            {
                let vals = value.data().to_vec();
                let (rows, cols) = value.shape();
                for r in 0..rows {
                    for c in 0..cols {
                        let i = r * cols + c;
                        let g = grad.get(r, c) + self.weight_decay * vals[i];
                        self.m[k][i] = B1 * self.m[k][i] + (1.0 - B1) * g;
                        self.v[k][i] = B2 * self.v[k][i] + (1.0 - B2) * g * g;
                        let step = self.lr * (self.m[k][i] / bc1) / ((self.v[k][i] / bc2).sqrt() + EPS);
                        value.set(r, c, vals[i] - step);
                    }
                }
            }
            p.set_value(value)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// model assembly

enum PoolHead {
    Direct,
    FullBp,
    Rm(RandomMaclaurinHead),
    LowRank(LowRankHadamardHead),
}

impl PoolHead {
    fn apply(&self, x: &DiffNode) -> Result<DiffNode> {
        match self {
            PoolHead::Direct => Ok(x.clone()),
            PoolHead::FullBp => pooling::full_bp(x),
            PoolHead::Rm(h) => h.apply(x),
            PoolHead::LowRank(h) => h.apply(x),
        }
    }

    fn params(&self) -> Vec<DiffNode> {
        match self {
            PoolHead::LowRank(h) => h.params(),
            _ => Vec::new(),
        }
    }

    fn output_dim(&self, in_dim: usize) -> usize {
        match self {
            PoolHead::Direct => in_dim,
            PoolHead::FullBp => in_dim * in_dim,
            PoolHead::Rm(h) => h.output_dim(),
            PoolHead::LowRank(h) => h.output_dim(),
        }
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> DenseMatrix {
    let lim = (6.0 / (rows + cols) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-lim..lim))
}

struct Model {
    backbone: Backbone,
    head: PoolHead,
    bank: Option<ProxyBank>,
    clf: Option<(DiffNode, DiffNode)>,
    dec: FermiDiracDecoder,
    curvature: Option<Curvature>,
}

impl Model {
    fn build(cfg: &ExperimentConfig, in_dim: usize, classes: usize, rng: &mut ChaCha20Rng) -> Result<Self> {
        let backbone = Backbone::new(&cfg.backbone, in_dim, rng)?;
        let hid = backbone.output_dim();
        let head = match cfg.head {
            HeadSpec::None => PoolHead::Direct,
            HeadSpec::FullBp => PoolHead::FullBp,
            HeadSpec::Rm { h } => PoolHead::Rm(RandomMaclaurinHead::new(hid, h, rng)?),
            HeadSpec::LowRank { h, heads, rank } => {
                PoolHead::LowRank(LowRankHadamardHead::new(hid, rank, heads, h, rng)?)
            }
        };
        let curvature = match cfg.head {
            HeadSpec::None => None,
            _ => Some(Curvature::new(cfg.curvature)?),
        };
        let pooled_dim = head.output_dim(hid);
        let mut bank = None;
        let mut clf = None;
        if matches!(cfg.task, TaskKind::Nc | TaskKind::Cluster) {
            match curvature {
                Some(c) => bank = Some(ProxyBank::new(classes, pooled_dim, c, rng)?),
                None => {
                    clf = Some((
                        DiffNode::leaf(glorot(pooled_dim, classes, rng), true),
                        DiffNode::leaf(DenseMatrix::zeros(1, classes), true),
                    ));
                }
            }
        }
        Ok(Model {
            backbone,
            head,
            bank,
            clf,
            dec: FermiDiracDecoder::default(),
            curvature,
        })
    }

    fn params(&self) -> Vec<DiffNode> {
        let mut p = self.backbone.params();
        p.extend(self.head.params());
        if let Some(bank) = &self.bank {
            p.extend(bank.params());
        }
        if let Some((w, b)) = &self.clf {
            p.push(w.clone());
            p.push(b.clone());
        }
        p
    }

    /// Backbone output and pooled features; `dropout_rng` switches train mode.
    fn forward(
        &self,
        adj: &Rc<SparseAdjacency>,
        feats: &DiffNode,
        dropout_rng: Option<&mut dyn FnMut() -> f64>,
    ) -> Result<(DiffNode, DiffNode)> {
        let h = self.backbone.forward(adj, feats, dropout_rng)?;
        let pooled = self.head.apply(&h)?;
        Ok((h, pooled))
    }

    /// Embedding space for distances: the ball after exp, or the pooled
    /// features themselves for the Euclidean baseline.
    fn embed(&self, pooled: &DiffNode) -> Result<DiffNode> {
        match self.curvature {
            Some(c) => hyperbolic::exp_map0_rows(pooled, c),
            None => Ok(pooled.clone()),
        }
    }

    fn class_logits(&self, pooled: &DiffNode) -> Result<DiffNode> {
        match (&self.bank, &self.clf) {
            (Some(bank), _) => {
                let z = self.embed(pooled)?;
                let d = hyperbolic::pairwise_distance(&z, &bank.proxies()?, bank.curvature())?;
                ops::scale(&d, -1.0)
            }
            (_, Some((w, b))) => {
                let lin = ops::matmul(pooled, w)?;
                let ones = DiffNode::constant(DenseMatrix::ones(lin.rows(), 1));
                ops::add(&lin, &ops::matmul(&ones, b)?)
            }
            _ => Err(Error::Contract("model has no classifier".to_string())),
        }
    }

    fn link_loss(&self, pooled: &DiffNode, pos: &[(usize, usize)], neg: &[(usize, usize)]) -> Result<DiffNode> {
        let z = self.embed(pooled)?;
        match self.curvature {
            Some(c) => link_pred_loss(&z, c, pos, neg, &self.dec),
            None => euclid_link_pred_loss(&z, pos, neg, &self.dec),
        }
    }

    fn link_scores(&self, z: &DenseMatrix, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        match self.curvature {
            Some(c) => link_pred_scores(z, c, pairs, &self.dec),
            None => Ok(pairs
                .iter()
                .map(|&(i, j)| {
                    let d = row_l2(z.row(i), z.row(j));
                    self.dec.probability(d)
                })
                .collect()),
        }
    }
}

fn row_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Same stable log-loss as the ball version, on plain Euclidean distances.
fn euclid_link_pred_loss(
    z: &DiffNode,
    pos: &[(usize, usize)],
    neg: &[(usize, usize)],
    dec: &FermiDiracDecoder,
) -> Result<DiffNode> {
    dec.validate()?;
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Contract("need both positive and negative pairs".to_string()));
    }
    let total = pos.len() + neg.len();
    let (mut left, mut right) = (Vec::with_capacity(total), Vec::with_capacity(total));
    let mut y = DenseMatrix::zeros(total, 1);
    for (k, &(i, j)) in pos.iter().chain(neg.iter()).enumerate() {
        left.push(i);
        right.push(j);
        if k < pos.len() {
            y.set(k, 0, 1.0);
        }
    }
    let d = ops::row_l2norm(&ops::sub(&ops::gather_rows(z, &left)?, &ops::gather_rows(z, &right)?)?)?;
    let logit = ops::scale(&ops::add_scalar(&ops::mul(&d, &d)?, -dec.r)?, -1.0 / dec.t)?;
    let soft = ops::log(&ops::add_scalar(&ops::exp(&logit)?, 1.0)?)?;
    ops::mean(&ops::sub(&soft, &ops::mul(&logit, &DiffNode::constant(y))?)?)
}

// ---------------------------------------------------------------------------
// link prediction data

struct EdgeSplit {
    train: Vec<(usize, usize)>,
    val_pos: Vec<(usize, usize)>,
    test_pos: Vec<(usize, usize)>,
    val_neg: Vec<(usize, usize)>,
    test_neg: Vec<(usize, usize)>,
    all_edges: HashSet<(usize, usize)>,
}

fn canon(i: usize, j: usize) -> (usize, usize) {
    (i.min(j), i.max(j))
}

fn sample_nonedges(
    rng: &mut ChaCha20Rng,
    n: usize,
    count: usize,
    forbidden: &HashSet<(usize, usize)>,
) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    let mut attempts = 0usize;
    let budget = 200 * count + 1000;
    while out.len() < count {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Data(format!(
                "could not sample {count} non-edges among {n} nodes; graph too dense"
            )));
        }
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j {
            continue;
        }
        let e = canon(i, j);
        if forbidden.contains(&e) || !seen.insert(e) {
            continue;
        }
        out.push(e);
    }
    Ok(out)
}

/// 85/5/10 edge split with fixed validation/test negatives of matching size.
fn split_edges(bundle: &GraphBundle, rng: &mut ChaCha20Rng) -> Result<EdgeSplit> {
    let mut edges: Vec<(usize, usize)> = bundle.edges.iter().map(|&(a, b)| canon(a, b)).collect();
    edges.shuffle(rng);
    let n_test = edges.len() / 10;
    let n_val = edges.len() / 20;
    if n_test == 0 || n_val == 0 || edges.len() - n_test - n_val == 0 {
        return Err(Error::Data(format!(
            "{} edges are too few for an 85/5/10 split",
            edges.len()
        )));
    }
    let test_pos: Vec<_> = edges[..n_test].to_vec();
    let val_pos: Vec<_> = edges[n_test..n_test + n_val].to_vec();
    let train: Vec<_> = edges[n_test + n_val..].to_vec();
    let all_edges: HashSet<_> = edges.iter().copied().collect();
    let val_neg = sample_nonedges(rng, bundle.n(), val_pos.len(), &all_edges)?;
    let test_neg = sample_nonedges(rng, bundle.n(), test_pos.len(), &all_edges)?;
    Ok(EdgeSplit {
        train,
        val_pos,
        test_pos,
        val_neg,
        test_neg,
        all_edges,
    })
}

// ---------------------------------------------------------------------------
// reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub test_metric: f64,
    pub best_val: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct CurvePoint {
    pub seed: u64,
    pub epoch: usize,
    pub total_loss: f64,
    pub task_loss: f64,
    pub kr_loss: f64,
    pub kr_penalty: f64,
    pub val_metric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub metric: String,
    pub config: ExperimentConfig,
    pub per_seed: Vec<SeedMetrics>,
    pub mean: f64,
    pub std: Option<f64>,
    pub lipschitz: Vec<(u64, f64)>,
    pub wall_clock_s: Vec<(u64, f64)>,
    pub curves: Vec<CurvePoint>,
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    schema_version: u32,
    metric: &'a str,
    config: &'a ExperimentConfig,
    per_seed: &'a [SeedMetrics],
    mean: f64,
    std: Option<f64>,
}

#[derive(Serialize)]
struct LipschitzFile {
    per_seed: Vec<LipschitzEntry>,
    mean: f64,
}

#[derive(Serialize)]
struct LipschitzEntry {
    seed: u64,
    lipschitz: f64,
}

#[derive(Serialize)]
struct TimingFile {
    per_seed: Vec<TimingEntry>,
    total_seconds: f64,
}

#[derive(Serialize)]
struct TimingEntry {
    seed: u64,
    seconds: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// the training loop

struct SeedOutcome {
    metrics: SeedMetrics,
    curves: Vec<CurvePoint>,
    embeddings: DenseMatrix,
    lipschitz: f64,
}

fn masked_labels(labels: &[i64], mask: &[bool]) -> Vec<i64> {
    labels
        .iter()
        .zip(mask)
        .map(|(&y, &m)| if m { y } else { -1 })
        .collect()
}

fn train_node_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| if m { Some(i) } else { None })
        .collect()
}

/// Largest output-over-input distance ratio across sampled row pairs, with
/// ball distances on the output side.
fn empirical_lipschitz_hyp(
    out: &DenseMatrix,
    inputs: &DenseMatrix,
    c: Curvature,
    max_pairs: usize,
    seed: u64,
) -> Result<f64> {
    let n = inputs.rows();
    if n < 2 {
        return Err(Error::Contract("need at least two inputs".to_string()));
    }
    let mut pairs = Vec::new();
    if n * (n - 1) / 2 <= max_pairs {
        for i in 0..n {
            for j in (i + 1)..n {
                pairs.push((i, j));
            }
        }
    } else {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        while pairs.len() < max_pairs {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    let mut best: Option<f64> = None;
    for (i, j) in pairs {
        let din = row_l2(inputs.row(i), inputs.row(j));
        if din < 1e-12 {
            continue;
        }
        let dout = hyperbolic::hyp_distance(out.row(i), out.row(j), c)?;
        let r = dout / din;
        best = Some(best.map_or(r, |b: f64| b.max(r)));
    }
    best.ok_or_else(|| Error::Contract("all sampled inputs coincide".to_string()))
}

fn run_seed(cfg: &ExperimentConfig, bundle: &GraphBundle, seed: u64) -> Result<SeedOutcome> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = bundle.n();
    let classes = bundle.meta.num_classes;

    let edge_split = match cfg.task {
        TaskKind::Lp => Some(split_edges(bundle, &mut rng)?),
        _ => None,
    };
    let adj_edges: &[(usize, usize)] = match &edge_split {
        Some(s) => &s.train,
        None => &bundle.edges,
    };
    let adj = Rc::new(crate::gnn::normalize_adjacency(adj_edges, n)?);
    let feats = DiffNode::constant(bundle.features.clone());

    let model = Model::build(cfg, bundle.meta.feature_dim, classes, &mut rng)?;
    let params = model.params();
    let mut adam = Adam::new(&cfg.optimizer, &params);

    let train_labels = masked_labels(&bundle.labels, &bundle.train_mask);
    let kr_pool: Vec<usize> = match cfg.task {
        TaskKind::Lp => (0..n).collect(),
        _ => train_node_indices(&bundle.train_mask),
    };

    let mut curves = Vec::new();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_params: Vec<DenseMatrix> = params.iter().map(|p| p.value().clone()).collect();
    let mut wait = 0;
    let mut epochs_run = 0;

    for epoch in 0..cfg.optimizer.epochs {
        epochs_run = epoch + 1;
        // draw everything the epoch needs up front so borrows stay simple
        let kr_idx: Vec<usize> = if cfg.lambda_kr > 0.0 {
            let mut pool = kr_pool.clone();
            pool.shuffle(&mut rng);
            pool.truncate(cfg.kr_batch.min(kr_pool.len()));
            pool
        } else {
            Vec::new()
        };
        let train_neg = match &edge_split {
            Some(s) => sample_nonedges(&mut rng, n, s.train.len(), &s.all_edges)?,
            None => Vec::new(),
        };

        for p in &params {
            p.zero_grad();
        }
        let (h, pooled) = {
            let use_dropout = model.backbone.config().dropout > 0.0;
            if use_dropout {
                let mut draw = || rng.random::<f64>();
                model.forward(&adj, &feats, Some(&mut draw))?
            } else {
                model.forward(&adj, &feats, None)?
            }
        };

        let task_loss = match cfg.task {
            TaskKind::Nc | TaskKind::Cluster => match &model.bank {
                Some(bank) => hyp_proxy_loss(&model.embed(&pooled)?, &train_labels, bank)?,
                None => softmax_cross_entropy(&model.class_logits(&pooled)?, &train_labels)?,
            },
            TaskKind::Lp => {
                let s = edge_split.as_ref().unwrap();
                model.link_loss(&pooled, &s.train, &train_neg)?
            }
        };

        let (total, kr_val) = if cfg.lambda_kr > 0.0 {
            let b_sub = ops::gather_rows(&pooled, &kr_idx)?;
            let x_sub = {
                let hv = h.value();
                let rows: Vec<Vec<f64>> = kr_idx.iter().map(|&i| hv.row(i).to_vec()).collect();
                DenseMatrix::from_rows(&rows)?
            };
            let kr = kernels::kr_loss(&b_sub, &x_sub, cfg.kernel)?;
            let kv = kr.item()?;
            (ops::add(&task_loss, &ops::scale(&kr, cfg.lambda_kr)?)?, kv)
        } else {
            (task_loss.clone(), 0.0)
        };

        total.backward()?;
        let total_val = total.item()?;
        let task_val = task_loss.item()?;
        adam.step(&params)?;

        // eval pass without dropout
        let (_, pooled_eval) = model.forward(&adj, &feats, None)?;
        let val_metric = match cfg.task {
            TaskKind::Nc | TaskKind::Cluster => {
                let logits = model.class_logits(&pooled_eval)?.value().clone();
                accuracy(&argmax_rows(&logits), &bundle.labels, &bundle.val_mask)?
            }
            TaskKind::Lp => {
                let s = edge_split.as_ref().unwrap();
                let z = model.embed(&pooled_eval)?.value().clone();
                let mut scores = model.link_scores(&z, &s.val_pos)?;
                scores.extend(model.link_scores(&z, &s.val_neg)?);
                let labels: Vec<bool> = (0..scores.len()).map(|k| k < s.val_pos.len()).collect();
                auroc(&scores, &labels)?
            }
        };

        curves.push(CurvePoint {
            seed,
            epoch,
            total_loss: total_val,
            task_loss: task_val,
            kr_loss: kr_val,
            kr_penalty: cfg.lambda_kr * kr_val,
            val_metric,
        });

        if val_metric > best_val {
            best_val = val_metric;
            best_epoch = epoch;
            best_params = params.iter().map(|p| p.value().clone()).collect();
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.optimizer.patience {
                break;
            }
        }
    }

    // restore the best-validation checkpoint before test evaluation
    for (p, v) in params.iter().zip(best_params) {
        p.set_value(v)?;
    }
    let (_, pooled_eval) = model.forward(&adj, &feats, None)?;
    let embeddings = model.embed(&pooled_eval)?.value().clone();

    let test_metric = match cfg.task {
        TaskKind::Nc => {
            let logits = model.class_logits(&pooled_eval)?.value().clone();
            accuracy(&argmax_rows(&logits), &bundle.labels, &bundle.test_mask)?
        }
        TaskKind::Lp => {
            let s = edge_split.as_ref().unwrap();
            let mut scores = model.link_scores(&embeddings, &s.test_pos)?;
            scores.extend(model.link_scores(&embeddings, &s.test_neg)?);
            let labels: Vec<bool> = (0..scores.len()).map(|k| k < s.test_pos.len()).collect();
            auroc(&scores, &labels)?
        }
        TaskKind::Cluster => {
            let assign = kmeans_cluster(&embeddings, classes, seed)?;
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (i, &y) in bundle.labels.iter().enumerate() {
                if y >= 0 {
                    a.push(assign[i] as i64);
                    b.push(y);
                }
            }
            nmi(&a, &b)?
        }
    };

    let lipschitz = {
        let embed_map = |x: &DenseMatrix| -> Result<DenseMatrix> {
            let (_, pooled) = model.forward(&adj, &DiffNode::constant(x.clone()), None)?;
            Ok(model.embed(&pooled)?.value().clone())
        };
        match model.curvature {
            Some(c) => {
                let out = embed_map(&bundle.features)?;
                empirical_lipschitz_hyp(&out, &bundle.features, c, LIPSCHITZ_PAIRS, seed)?
            }
            None => crate::gnn::empirical_lipschitz(&embed_map, &bundle.features, LIPSCHITZ_PAIRS, seed)?,
        }
    };

    Ok(SeedOutcome {
        metrics: SeedMetrics {
            seed,
            test_metric,
            best_val,
            best_epoch,
            epochs_run,
        },
        curves,
        embeddings,
        lipschitz,
    })
}

fn resolve_bundle(cfg: &ExperimentConfig) -> Result<GraphBundle> {
    match &cfg.dataset {
        DatasetSpec::Path { path } => data::load_bundle(path),
        DatasetSpec::Synthetic { synthetic } => data::generate_hierarchy(synthetic),
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    if cfg.out_dir.exists() {
        return Err(Error::Config(format!(
            "output directory {} already exists; refusing to overwrite",
            cfg.out_dir.display()
        )));
    }
    let base = resolve_bundle(cfg)?;
    let public = match cfg.split {
        SplitKind::Public => Some(data::split_public(&base)?),
        SplitKind::Full => None,
    };

    fs::create_dir_all(&cfg.out_dir)?;
    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();

    let mut per_seed = Vec::new();
    let mut curves = Vec::new();
    let mut lipschitz = Vec::new();
    let mut wall_clock = Vec::new();
    for &seed in &seeds {
        let started = std::time::Instant::now();
        let split = match &public {
            Some(b) => b.clone(),
            None => data::split_full(&base, seed, FULL_SPLIT_VAL, FULL_SPLIT_TEST)?,
        };
        let outcome = run_seed(cfg, &split, seed)?;
        data::save_matrix(&cfg.out_dir.join(format!("embeddings_seed{seed}.bin")), &outcome.embeddings)?;
        per_seed.push(outcome.metrics);
        curves.extend(outcome.curves);
        lipschitz.push((seed, outcome.lipschitz));
        wall_clock.push((seed, started.elapsed().as_secs_f64()));
    }

    let mean = per_seed.iter().map(|m| m.test_metric).sum::<f64>() / per_seed.len() as f64;
    let std = if per_seed.len() >= 2 {
        let var = per_seed
            .iter()
            .map(|m| (m.test_metric - mean).powi(2))
            .sum::<f64>()
            / (per_seed.len() - 1) as f64;
        Some(var.sqrt())
    } else {
        None
    };

    write_json(
        &cfg.out_dir.join("metrics.json"),
        &MetricsFile {
            schema_version: SCHEMA_VERSION,
            metric: cfg.metric_name(),
            config: cfg,
            per_seed: &per_seed,
            mean,
            std,
        },
    )?;
    let mut csv = String::from("seed,epoch,total_loss,task_loss,kr_loss,kr_penalty,val_metric\n");
    for p in &curves {
        csv.push_str(&format!(
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            p.seed, p.epoch, p.total_loss, p.task_loss, p.kr_loss, p.kr_penalty, p.val_metric
        ));
    }
    fs::write(cfg.out_dir.join("curves.csv"), csv)?;
    write_json(
        &cfg.out_dir.join("lipschitz.json"),
        &LipschitzFile {
            per_seed: lipschitz
                .iter()
                .map(|&(seed, l)| LipschitzEntry { seed, lipschitz: l })
                .collect(),
            mean: lipschitz.iter().map(|&(_, l)| l).sum::<f64>() / lipschitz.len() as f64,
        },
    )?;
    write_json(
        &cfg.out_dir.join("timing.json"),
        &TimingFile {
            per_seed: wall_clock
                .iter()
                .map(|&(seed, seconds)| TimingEntry { seed, seconds })
                .collect(),
            total_seconds: wall_clock.iter().map(|&(_, s)| s).sum(),
        },
    )?;

    Ok(RunReport {
        metric: cfg.metric_name().to_string(),
        config: cfg.clone(),
        per_seed,
        mean,
        std,
        lipschitz,
        wall_clock_s: wall_clock,
        curves,
    })
}

// ---------------------------------------------------------------------------
// ablations

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Curvature,
    KrDim,
    Kernel,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "curvature" => Ok(AblationAxis::Curvature),
            "kr_dim" => Ok(AblationAxis::KrDim),
            "kernel" => Ok(AblationAxis::Kernel),
            _ => Err(Error::Config(format!(
                "unknown ablation axis {s:?}; expected curvature, kr_dim, or kernel"
            ))),
        }
    }
}

/// One run per grid point along the chosen axis, each in its own
/// subdirectory, plus a comparison table at the base output directory.
pub fn run_ablation(base: &ExperimentConfig, axis: AblationAxis) -> Result<Vec<(String, RunReport)>> {
    base.validate()?;
    let mut points: Vec<(String, ExperimentConfig)> = Vec::new();
    match axis {
        AblationAxis::Curvature => {
            if base.head == HeadSpec::None {
                return Err(Error::Config("curvature ablation needs a pooling head".to_string()));
            }
            for c in [1.0, 10.0, 100.0, 200.0] {
                let mut cfg = base.clone();
                cfg.curvature = c;
                points.push((format!("c{c}"), cfg));
            }
        }
        AblationAxis::KrDim => {
            let HeadSpec::LowRank { heads, rank, .. } = base.head else {
                return Err(Error::Config("kr_dim ablation needs a low_rank head".to_string()));
            };
            for h in [128usize, 256, 512] {
                let mut cfg = base.clone();
                cfg.head = HeadSpec::LowRank { h, heads, rank };
                points.push((format!("h{h}"), cfg));
            }
        }
        AblationAxis::Kernel => {
            for (label, k) in [("poly2", KernelSpec::Poly2), ("exp_r", KernelSpec::ExpR { r: 1.0 })] {
                let mut cfg = base.clone();
                cfg.kernel = k;
                points.push((label.to_string(), cfg));
            }
        }
    }

    fs::create_dir_all(&base.out_dir)?;
    let mut out = Vec::new();
    let mut table = String::from("point,mean,std\n");
    for (label, mut cfg) in points {
        cfg.out_dir = base.out_dir.join(&label);
        let report = run_experiment(&cfg)?;
        table.push_str(&format!(
            "{label},{:.17e},{}\n",
            report.mean,
            report.std.map_or(String::new(), |s| format!("{s:.17e}"))
        ));
        out.push((label, report));
    }
    fs::write(base.out_dir.join("ablation.csv"), table)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::{Activation, BackboneKind};

    fn tiny_spec() -> HierarchyGenSpec {
        HierarchyGenSpec {
            branching: 2,
            depth: 2,
            nodes_per_leaf_class: 8,
            intra_p: 0.7,
            inter_decay: 0.3,
            feature_noise: 0.2,
            seed: 5,
        }
    }

    fn tiny_cfg(task: TaskKind, head: HeadSpec, out: PathBuf) -> ExperimentConfig {
        ExperimentConfig {
            task,
            dataset: DatasetSpec::Synthetic { synthetic: tiny_spec() },
            split: SplitKind::Public,
            backbone: BackboneConfig {
                kind: BackboneKind::Gcn,
                hidden: 8,
                layers: 2,
                dropout: 0.0,
                activation: Activation::Relu,
                alpha: 0.1,
                theta: 0.5,
            },
            head,
            kernel: KernelSpec::Poly2,
            lambda_kr: 0.0,
            curvature: 1.0,
            optimizer: OptimizerConfig {
                lr: 0.01,
                weight_decay: 5e-4,
                epochs: 4,
                patience: 100,
            },
            kr_batch: 16,
            seeds: vec![0],
            out_dir: out,
        }
    }

    #[test]
    fn optimizer_defaults_and_validation() {
        let d = OptimizerConfig::default();
        assert_eq!((d.lr, d.weight_decay, d.epochs, d.patience), (0.01, 5e-4, 300, 100));
        assert!(d.validate().is_ok());
        assert!(OptimizerConfig { lr: 0.0, ..d }.validate().is_err());
        assert!(OptimizerConfig { weight_decay: -1.0, ..d }.validate().is_err());
        assert!(OptimizerConfig { epochs: 0, ..d }.validate().is_err());
    }

    #[test]
    fn lambda_without_head_is_rejected() {
        let mut cfg = tiny_cfg(TaskKind::Nc, HeadSpec::None, PathBuf::from("x"));
        cfg.lambda_kr = 1e-2;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("pooling head"), "{err}");
    }

    #[test]
    fn duplicate_seeds_are_rejected() {
        let mut cfg = tiny_cfg(TaskKind::Nc, HeadSpec::None, PathBuf::from("x"));
        cfg.seeds = vec![3, 1, 3];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn off_grid_lambda_only_warns() {
        let mut cfg = tiny_cfg(TaskKind::Nc, HeadSpec::FullBp, PathBuf::from("x"));
        cfg.lambda_kr = 0.5;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn dataset_spec_parses_both_forms() {
        let p: DatasetSpec = serde_json::from_str(r#"{"path": "some/dir"}"#).unwrap();
        assert!(matches!(p, DatasetSpec::Path { .. }));
        let s: DatasetSpec = serde_json::from_str(
            r#"{"synthetic": {"branching": 2, "depth": 2, "nodes_per_leaf_class": 4,
                "intra_p": 0.5, "inter_decay": 0.2, "feature_noise": 0.1, "seed": 0}}"#,
        )
        .unwrap();
        assert!(matches!(s, DatasetSpec::Synthetic { .. }));
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let target = DenseMatrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let w = DiffNode::leaf(DenseMatrix::zeros(2, 2), true);
        let opt = OptimizerConfig {
            lr: 0.1,
            weight_decay: 0.0,
            epochs: 1,
            patience: 1,
        };
        let mut adam = Adam::new(&opt, std::slice::from_ref(&w));
        for _ in 0..200 {
            w.zero_grad();
            let diff = ops::sub(&w, &DiffNode::constant(target.clone())).unwrap();
            let loss = ops::mean(&ops::mul(&diff, &diff).unwrap()).unwrap();
            loss.backward().unwrap();
            adam.step(std::slice::from_ref(&w)).unwrap();
        }
        let got = w.value().clone();
        for (a, b) in got.data().iter().zip(target.data()) {
            assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        }
    }

    #[test]
    fn edge_split_covers_and_respects_ratios() {
        let bundle = data::generate_hierarchy(&tiny_spec()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let s = split_edges(&bundle, &mut rng).unwrap();
        let total = s.train.len() + s.val_pos.len() + s.test_pos.len();
        assert_eq!(total, bundle.edges.len());
        assert_eq!(s.val_pos.len(), bundle.edges.len() / 20);
        assert_eq!(s.test_pos.len(), bundle.edges.len() / 10);
        assert_eq!(s.val_neg.len(), s.val_pos.len());
        assert_eq!(s.test_neg.len(), s.test_pos.len());
        for e in s.val_neg.iter().chain(&s.test_neg) {
            assert!(!s.all_edges.contains(e));
            assert_ne!(e.0, e.1);
        }
    }

    #[test]
    fn nonedge_sampling_fails_on_complete_graphs() {
        let mut forbidden = HashSet::new();
        for i in 0..5 {
            for j in (i + 1)..5 {
                forbidden.insert((i, j));
            }
        }
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(sample_nonedges(&mut rng, 5, 3, &forbidden).is_err());
    }

    #[test]
    fn euclidean_nc_run_writes_reports() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(TaskKind::Nc, HeadSpec::None, dir.path().join("run"));
        cfg.seeds = vec![0, 1];
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.metric, "accuracy");
        assert_eq!(report.per_seed.len(), 2);
        assert!(report.std.is_some());
        assert!(report.mean >= 0.0 && report.mean <= 1.0);
        for f in ["metrics.json", "curves.csv", "lipschitz.json", "timing.json"] {
            assert!(cfg.out_dir.join(f).exists(), "{f} missing");
        }
        assert!(cfg.out_dir.join("embeddings_seed0.bin").exists());
        assert!(cfg.out_dir.join("embeddings_seed1.bin").exists());

        // rerunning into the same directory must refuse
        let err = run_experiment(&cfg).unwrap_err().to_string();
        assert!(err.contains("refusing"), "{err}");
    }

    #[test]
    fn hyperbolic_run_with_penalty_logs_kr_terms() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(TaskKind::Nc, HeadSpec::FullBp, dir.path().join("run"));
        cfg.lambda_kr = 1e-2;
        let report = run_experiment(&cfg).unwrap();
        assert!(report.curves.iter().all(|p| p.kr_loss > 0.0));
        for p in &report.curves {
            assert!((p.kr_penalty - cfg.lambda_kr * p.kr_loss).abs() < 1e-15);
            assert!((p.total_loss - p.task_loss - p.kr_penalty).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_seed_reproduces_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let run = |name: &str| {
            let cfg = tiny_cfg(TaskKind::Nc, HeadSpec::FullBp, dir.path().join(name));
            run_experiment(&cfg).unwrap()
        };
        let a = run("a");
        let b = run("b");
        assert_eq!(a.per_seed, b.per_seed);
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.lipschitz, b.lipschitz);
        let ca: Vec<f64> = a.curves.iter().map(|p| p.total_loss).collect();
        let cb: Vec<f64> = b.curves.iter().map(|p| p.total_loss).collect();
        assert_eq!(ca, cb);
    }

    #[test]
    fn link_prediction_run_reports_auroc() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(TaskKind::Lp, HeadSpec::FullBp, dir.path().join("run"));
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.metric, "auroc");
        let m = report.per_seed[0].test_metric;
        assert!((0.0..=1.0).contains(&m), "{m}");
    }

    #[test]
    fn cluster_run_reports_nmi() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(TaskKind::Cluster, HeadSpec::None, dir.path().join("run"));
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.metric, "nmi");
        let m = report.per_seed[0].test_metric;
        assert!((0.0..=1.0).contains(&m), "{m}");
    }

    #[test]
    fn ablation_axis_requirements() {
        let cfg = tiny_cfg(TaskKind::Nc, HeadSpec::FullBp, PathBuf::from("x"));
        assert!(run_ablation(&cfg, AblationAxis::KrDim).is_err());
        let cfg = tiny_cfg(TaskKind::Nc, HeadSpec::None, PathBuf::from("x"));
        assert!(run_ablation(&cfg, AblationAxis::Curvature).is_err());
        assert!("bogus".parse::<AblationAxis>().is_err());
        assert_eq!("kernel".parse::<AblationAxis>().unwrap(), AblationAxis::Kernel);
    }

    #[test]
    fn kernel_ablation_runs_both_points() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(TaskKind::Nc, HeadSpec::FullBp, dir.path().join("abl"));
        cfg.optimizer.epochs = 2;
        let out = run_ablation(&cfg, AblationAxis::Kernel).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].0, "poly2");
        assert_eq!(out[1].0, "exp_r");
        assert!(cfg.out_dir.join("ablation.csv").exists());
        assert!(cfg.out_dir.join("poly2/metrics.json").exists());
    }
}
