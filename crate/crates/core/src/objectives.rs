//! Task heads and metrics: the proxy classifier in the ball, the distance
//! decoder for link prediction, k-means for clustering runs, and the
//! evaluation measures (accuracy, NMI, AUROC).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyperbolic::{exp_map0_rows, pairwise_distance, rowwise_distance, Curvature};
use crate::ndcore::{ops, DenseMatrix, DiffNode};

/// Per-class anchor points. Parameters live in the tangent space at the
/// origin and are pushed through the exponential map each forward pass, so
/// the anchors stay inside the ball under plain Euclidean updates.
#[derive(Clone, Debug)]
pub struct ProxyBank {
    tangent: DiffNode,
    curvature: Curvature,
}

impl ProxyBank {
    pub fn new(classes: usize, dim: usize, curvature: Curvature, rng: &mut impl Rng) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::Contract("proxy bank needs classes and width".to_string()));
        }
        // small tangent init keeps the anchors near the origin at the start
        let t = DenseMatrix::from_fn(classes, dim, |_, _| rng.random_range(-0.1..0.1));
        Ok(ProxyBank {
            tangent: DiffNode::leaf(t, true),
            curvature,
        })
    }

    /// Pin exact tangent rows; used by tests and checkpoint reload.
    pub fn from_tangent(tangent: DenseMatrix, curvature: Curvature) -> Result<Self> {
        if tangent.rows() == 0 || tangent.cols() == 0 {
            return Err(Error::Contract("proxy bank needs classes and width".to_string()));
        }
        Ok(ProxyBank {
            tangent: DiffNode::leaf(tangent, true),
            curvature,
        })
    }

    pub fn classes(&self) -> usize {
        self.tangent.rows()
    }

    pub fn dim(&self) -> usize {
        self.tangent.cols()
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn params(&self) -> Vec<DiffNode> {
        vec![self.tangent.clone()]
    }

    /// Ball-side anchors, one row per class.
    pub fn proxies(&self) -> Result<DiffNode> {
        exp_map0_rows(&self.tangent, self.curvature)
    }
}

/// Mean negative log-softmax over rows whose label is nonnegative; rows with
/// label < 0 are ignored. Logits are shifted by their row maximum (treated as
/// constant) before exponentiation, which leaves value and gradient unchanged.
pub fn softmax_cross_entropy(logits: &DiffNode, labels: &[i64]) -> Result<DiffNode> {
    let (n, classes) = logits.shape();
    if labels.len() != n {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("{} labels for {} rows", labels.len(), n),
        ));
    }
    let mut hot = DenseMatrix::zeros(n, classes);
    let mut mask = DenseMatrix::zeros(n, 1);
    let mut count = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if y < 0 {
            continue;
        }
        let y = y as usize;
        if y >= classes {
            return Err(Error::Contract(format!(
                "label {y} at row {i} out of range for {classes} classes"
            )));
        }
        hot.set(i, y, 1.0);
        mask.set(i, 0, 1.0);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Contract("no labeled rows".to_string()));
    }
    let shift = {
        let lv = logits.value();
        DenseMatrix::from_fn(n, classes, |i, _| {
            lv.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        })
    };
    let centered = ops::sub(logits, &DiffNode::constant(shift))?;
    let lse = ops::log(&ops::rowsum(&ops::exp(&centered)?)?)?;
    let picked = ops::rowsum(&ops::mul(&centered, &DiffNode::constant(hot))?)?;
    let per_row = ops::mul(&ops::sub(&lse, &picked)?, &DiffNode::constant(mask))?;
    ops::scale(&ops::sum(&per_row)?, 1.0 / count as f64)
}

/// Classification loss against the proxy bank: logits are negated hyperbolic
/// distances from each embedding to each class anchor.
pub fn hyp_proxy_loss(z: &DiffNode, labels: &[i64], bank: &ProxyBank) -> Result<DiffNode> {
    if z.cols() != bank.dim() {
        return Err(Error::dim(
            "hyp_proxy_loss",
            format!("embedding width {} vs proxy width {}", z.cols(), bank.dim()),
        ));
    }
    let w = bank.proxies()?;
    let d = pairwise_distance(z, &w, bank.curvature())?;
    softmax_cross_entropy(&ops::scale(&d, -1.0)?, labels)
}

/// Column index of the row maximum, first winner on ties.
pub fn argmax_rows(m: &DenseMatrix) -> Vec<i64> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as i64
        })
        .collect()
}

/// Distance-to-probability decoder: p = 1 / (exp((d^2 - r) / t) + 1).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FermiDiracDecoder {
    pub r: f64,
    pub t: f64,
}

impl Default for FermiDiracDecoder {
    fn default() -> Self {
        FermiDiracDecoder { r: 2.0, t: 1.0 }
    }
}

impl FermiDiracDecoder {
    pub fn validate(&self) -> Result<()> {
        if !(self.t.is_finite() && self.t > 0.0) {
            return Err(Error::Config(format!("decoder temperature must be positive, got {}", self.t)));
        }
        if !self.r.is_finite() {
            return Err(Error::Config("decoder offset must be finite".to_string()));
        }
        Ok(())
    }

    pub fn probability(&self, d: f64) -> f64 {
        // clamping the exponent keeps the output strictly inside (0,1)
        let arg = ((d * d - self.r) / self.t).clamp(-30.0, 700.0);
        1.0 / (arg.exp() + 1.0)
    }
}

/// Edge probabilities for the given node pairs.
pub fn link_pred_scores(
    z: &DenseMatrix,
    curvature: Curvature,
    pairs: &[(usize, usize)],
    dec: &FermiDiracDecoder,
) -> Result<Vec<f64>> {
    dec.validate()?;
    let n = z.rows();
    let mut out = Vec::with_capacity(pairs.len());
    for (k, &(i, j)) in pairs.iter().enumerate() {
        if i >= n || j >= n {
            return Err(Error::Data(format!(
                "pair {k} = ({i}, {j}) references a node outside 0..{n}"
            )));
        }
        let d = crate::hyperbolic::hyp_distance(z.row(i), z.row(j), curvature)?;
        out.push(dec.probability(d));
    }
    Ok(out)
}

/// Differentiable binary cross-entropy over labeled node pairs, using the
/// decoder's logit (r - d^2)/t. The exponential is taken on the logit itself,
/// bounded above by r/t, so huge distances stay finite.
pub fn link_pred_loss(
    z: &DiffNode,
    curvature: Curvature,
    pos: &[(usize, usize)],
    neg: &[(usize, usize)],
    dec: &FermiDiracDecoder,
) -> Result<DiffNode> {
    dec.validate()?;
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Contract("need both positive and negative pairs".to_string()));
    }
    let total = pos.len() + neg.len();
    let mut left = Vec::with_capacity(total);
    let mut right = Vec::with_capacity(total);
    let mut y = DenseMatrix::zeros(total, 1);
    for (k, &(i, j)) in pos.iter().chain(neg.iter()).enumerate() {
        left.push(i);
        right.push(j);
        if k < pos.len() {
            y.set(k, 0, 1.0);
        }
    }
    let zi = ops::gather_rows(z, &left)?;
    let zj = ops::gather_rows(z, &right)?;
    let d = rowwise_distance(&zi, &zj, curvature)?;
    let logit = ops::scale(&ops::add_scalar(&ops::mul(&d, &d)?, -dec.r)?, -1.0 / dec.t)?;
    // ln(1 + e^l) - y*l, the log-loss of sigmoid(l) against y
    let soft = ops::log(&ops::add_scalar(&ops::exp(&logit)?, 1.0)?)?;
    ops::mean(&ops::sub(&soft, &ops::mul(&logit, &DiffNode::constant(y))?)?)
}

/// Fraction of masked positions where prediction equals truth.
pub fn accuracy(pred: &[i64], truth: &[i64], mask: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(Error::dim(
            "accuracy",
            format!("{} predictions, {} labels, {} mask entries", pred.len(), truth.len(), mask.len()),
        ));
    }
    let mut hit = 0usize;
    let mut total = 0usize;
    for i in 0..pred.len() {
        if mask[i] {
            total += 1;
            if pred[i] == truth[i] {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Contract("empty evaluation mask".to_string()));
    }
    Ok(hit as f64 / total as f64)
}

fn entropy(counts: &std::collections::HashMap<i64, usize>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information I(X;Y) / sqrt(H(X) H(Y)). A degenerate
/// single-cluster side has zero entropy; that case warns and returns 0.
pub fn nmi(a: &[i64], b: &[i64]) -> Result<f64> {
    use std::collections::HashMap;
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(
            "nmi",
            format!("{} vs {} assignments", a.len(), b.len()),
        ));
    }
    let n = a.len() as f64;
    let mut ca: HashMap<i64, usize> = HashMap::new();
    let mut cb: HashMap<i64, usize> = HashMap::new();
    let mut joint: HashMap<(i64, i64), usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        *joint.entry((x, y)).or_default() += 1;
    }
    let ha = entropy(&ca, n);
    let hb = entropy(&cb, n);
    if ha == 0.0 || hb == 0.0 {
        eprintln!("warning: single-cluster partition in nmi, returning 0");
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        let px = ca[&x] as f64 / n;
        let py = cb[&y] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Area under the ROC curve by the rank statistic; tied scores share their
/// average rank.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::dim(
            "auroc",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    let npos = labels.iter().filter(|&&l| l).count();
    let nneg = labels.len() - npos;
    if npos == 0 || nneg == 0 {
        return Err(Error::Contract("auroc needs both classes".to_string()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut ranks = vec![0.0f64; scores.len()];
    let mut k = 0;
    while k < order.len() {
        let mut m = k;
        while m + 1 < order.len() && scores[order[m + 1]] == scores[order[k]] {
            m += 1;
        }
        let avg = (k + m) as f64 / 2.0 + 1.0;
        for &idx in &order[k..=m] {
            ranks[idx] = avg;
        }
        k = m + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter_map(|(&l, &r)| l.then_some(r))
        .sum();
    let np = npos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nneg as f64))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding; 50 restarts, best inertia kept.
/// Deterministic for a fixed seed.
pub fn kmeans_cluster(emb: &DenseMatrix, k: usize, seed: u64) -> Result<Vec<usize>> {
    use rand::SeedableRng;
    let n = emb.rows();
    if k < 2 {
        return Err(Error::Contract(format!("k must be at least 2, got {k}")));
    }
    if k > n {
        return Err(Error::Contract(format!("k = {k} exceeds {n} points")));
    }
    let dim = emb.cols();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..50 {
        // k-means++ seeding
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
        centers.push(emb.row(rng.random_range(0..n)).to_vec());
        let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(emb.row(i), &centers[0])).collect();
        while centers.len() < k {
            let total: f64 = d2.iter().sum();
            let next = if total > 0.0 {
                let mut target = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, &w) in d2.iter().enumerate() {
                    target -= w;
                    if target <= 0.0 {
                        pick = i;
                        break;
                    }
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            let c = emb.row(next).to_vec();
            for i in 0..n {
                d2[i] = d2[i].min(sq_dist(emb.row(i), &c));
            }
            centers.push(c);
        }

        let mut assign = vec![0usize; n];
        for _ in 0..100 {
            let mut changed = false;
            for i in 0..n {
                let row = emb.row(i);
                let mut besti = 0usize;
                let mut bestd = f64::INFINITY;
                for (c, center) in centers.iter().enumerate() {
                    let d = sq_dist(row, center);
                    if d < bestd {
                        bestd = d;
                        besti = c;
                    }
                }
                if assign[i] != besti {
                    assign[i] = besti;
                    changed = true;
                }
            }
            let mut sums = vec![vec![0.0f64; dim]; k];
            let mut counts = vec![0usize; k];
            for i in 0..n {
                counts[assign[i]] += 1;
                for (s, &v) in sums[assign[i]].iter_mut().zip(emb.row(i)) {
                    *s += v;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    for (center, s) in centers[c].iter_mut().zip(&sums[c]) {
                        *center = s / counts[c] as f64;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = (0..n).map(|i| sq_dist(emb.row(i), &centers[assign[i]])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    Ok(best.expect("at least one restart").1)
}
