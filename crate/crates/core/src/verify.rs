//! Numerical audits of the geometric claims the pooling pipeline rests on:
//! the distance-additivity approximation near the ball boundary, the implicit
//! kernel distance's expansion behavior, the SVD reduction bound, and the
//! inverse of 2-d bilinear pooling. Every claim is emitted as a pass/fail
//! record with the measured value next to the expected bound; failed records
//! are kept, not patched, since several stated expectations do not survive
//! direct evaluation.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::ndcore::{DenseMatrix, DiffNode};
use crate::pooling::full_bp;

#[derive(Clone, Debug, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub bound: f64,
    pub details: String,
}

impl CheckRecord {
    fn new(name: &str, passed: bool, measured: f64, bound: f64, details: impl Into<String>) -> Self {
        CheckRecord {
            name: name.to_string(),
            passed,
            measured,
            bound,
            details: details.into(),
        }
    }
}

/// Distance between exp-mapped tangent vectors with the given norms and
/// angle, in closed form and without the training-path saturation guard.
/// Near the boundary that guard flattens the curve; the audits need the
/// exact value there.
pub fn exact_distance(norm_i: f64, norm_j: f64, cos_theta: f64, c: f64) -> f64 {
    let sc = c.sqrt();
    let zi = (sc * norm_i / 2.0).tanh() / sc;
    let zj = (sc * norm_j / 2.0).tanh() / sc;
    let dot = zi * zj * cos_theta;
    let num = (zi * zi - 2.0 * dot + zj * zj).max(0.0);
    let den = 1.0 - 2.0 * c * dot + c * c * zi * zi * zj * zj;
    let m = (num / den).sqrt();
    2.0 / sc * (sc * m).min(1.0 - f64::EPSILON).atanh()
}

// ---------------------------------------------------------------------------
// distance additivity near the boundary

#[derive(Clone, Debug, Serialize)]
pub struct OrthogonalRow {
    pub c: f64,
    pub norm: f64,
    pub distance: f64,
    pub approx_plain: f64,
    pub approx_scaled: f64,
    pub rel_err_plain: f64,
    pub rel_err_scaled: f64,
}

/// Orthogonal tangent pairs of equal norm: how well does the norm sum (with
/// and without the extra curvature factor) track the true distance?
pub fn orthogonal_additivity(c: f64, norms: &[f64]) -> Result<Vec<OrthogonalRow>> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::Contract(format!("curvature must be positive, got {c}")));
    }
    Ok(norms
        .iter()
        .map(|&norm| {
            let d = exact_distance(norm, norm, 0.0, c);
            let plain = 2.0 * norm;
            let scaled = c.sqrt() * plain;
            OrthogonalRow {
                c,
                norm,
                distance: d,
                approx_plain: plain,
                approx_scaled: scaled,
                rel_err_plain: (plain - d).abs() / d,
                rel_err_scaled: (scaled - d).abs() / d,
            }
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct CollinearRow {
    pub c: f64,
    pub k: f64,
    pub distance: f64,
    pub err_plain: f64,
    pub err_scaled: f64,
    pub scale_factor: f64,
}

/// Collinear pairs x_i = k x_j: the distance collapses to a Euclidean norm of
/// the tangent difference. Two scale candidates are measured; the winner is
/// recorded per row.
pub fn collinear_isometry(c: f64, base_norm: f64, ks: &[f64]) -> Result<Vec<CollinearRow>> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::Contract(format!("curvature must be positive, got {c}")));
    }
    Ok(ks
        .iter()
        .filter(|&&k| k != 1.0)
        .map(|&k| {
            let ni = k.abs() * base_norm;
            let cos = if k >= 0.0 { 1.0 } else { -1.0 };
            let d = exact_distance(ni, base_norm, cos, c);
            let diff = (k - 1.0).abs() * base_norm;
            CollinearRow {
                c,
                k,
                distance: d,
                err_plain: (d - diff).abs(),
                err_scaled: (d - c.sqrt() * diff).abs(),
                scale_factor: d / diff,
            }
        })
        .collect())
}

/// Printed reference list for tanh at the regime boundary, eight decimals.
pub const TANH_TABLE: [(f64, f64, f64); 4] = [
    (3.0, 0.99505475, 0.99013396),
    (4.0, 0.99932929, 0.99865904),
    (5.0, 0.99990920, 0.99981841),
    (6.0, 0.99998771, 0.99997542),
];

pub fn tanh_table_worst_gap() -> f64 {
    TANH_TABLE
        .iter()
        .map(|&(x, t, t2)| (x.tanh() - t).abs().max((x.tanh().powi(2) - t2).abs()))
        .fold(0.0, f64::max)
}

pub fn distance_additivity_records() -> Result<(Vec<OrthogonalRow>, Vec<CollinearRow>, Vec<CheckRecord>)> {
    let mut records = Vec::new();

    let orth = orthogonal_additivity(1.0, &[0.1, 2.0, 6.0, 12.0])?;
    let regime = orth.iter().find(|r| r.norm == 12.0).unwrap();
    let best = regime.rel_err_plain.min(regime.rel_err_scaled);
    records.push(CheckRecord::new(
        "orthogonal-additivity-error-below-1e-2",
        best < 1e-2,
        best,
        1e-2,
        "the norm-sum approximation keeps a constant ln(2) offset near the boundary \
         (d = ni + nj - ln 2 + o(1)), so its relative error at norms 12 stays near 2.9e-2",
    ));
    let small = orth.iter().find(|r| r.norm == 0.1).unwrap();
    records.push(CheckRecord::new(
        "orthogonal-additivity-breaks-at-small-norms",
        small.rel_err_plain.min(small.rel_err_scaled) > 0.1,
        small.rel_err_plain.min(small.rel_err_scaled),
        0.1,
        "outside the large-norm regime the norm-sum approximation is off by tens of percent",
    ));

    let gap = tanh_table_worst_gap();
    records.push(CheckRecord::new(
        "tanh-regime-table-to-8-decimals",
        gap < 1e-8,
        gap,
        1e-8,
        "tanh(3..6) and their squares against the printed eight-decimal reference values",
    ));

    let mut coll = Vec::new();
    let mut worst_plain = 0.0f64;
    let mut worst_scaled = 0.0f64;
    for &c in &[0.5, 1.0, 2.0, 4.0] {
        for row in collinear_isometry(c, 1.0, &[-2.0, -0.5, 0.5, 2.0, 3.0])? {
            worst_plain = worst_plain.max(row.err_plain);
            worst_scaled = worst_scaled.max(row.err_scaled);
            coll.push(row);
        }
    }
    let plain_wins = worst_plain < worst_scaled;
    let winner_err = worst_plain.min(worst_scaled);
    records.push(CheckRecord::new(
        "collinear-tangent-isometry",
        winner_err < 1e-9,
        winner_err,
        1e-9,
        if plain_wins {
            "collinear distance equals the plain tangent difference norm (no extra curvature \
             factor); the scaled candidate misses by the curvature root itself"
        } else {
            "collinear distance matches the curvature-scaled tangent difference"
        },
    ));
    // at unit curvature the candidates coincide, so a tie counts as consistent
    let consistent = coll.iter().all(|r| {
        if plain_wins {
            r.err_plain <= r.err_scaled + 1e-12
        } else {
            r.err_scaled <= r.err_plain + 1e-12
        }
    });
    records.push(CheckRecord::new(
        "collinear-scale-candidate-consistent",
        consistent,
        winner_err,
        1e-9,
        "the same scale candidate wins for every curvature and ratio tested",
    ));

    Ok((orth, coll, records))
}

// ---------------------------------------------------------------------------
// gap between the two inverse-tanh forms

/// atanh(sqrt(K)) - atanh(K) for K = (ki^2+kj^2)/(1+ki^2 kj^2), evaluated in
/// the cancellation-free form ln((1+sqrt(K))^2 / (1+K)) / 2.
pub fn approx_gap(norm_i: f64, norm_j: f64, c: f64) -> f64 {
    let ki = (c.sqrt() * norm_i / 2.0).tanh();
    let kj = (c.sqrt() * norm_j / 2.0).tanh();
    let big = (ki * ki + kj * kj) / (1.0 + ki * ki * kj * kj);
    0.5 * ((1.0 + big.sqrt()).powi(2) / (1.0 + big)).ln()
}

#[derive(Clone, Debug, Serialize)]
pub struct GapRow {
    pub c: f64,
    pub norm: f64,
    pub gap: f64,
}

pub fn approx_gap_curve(c_list: &[f64], norms: &[f64]) -> Vec<GapRow> {
    let mut out = Vec::new();
    for &c in c_list {
        for &norm in norms {
            out.push(GapRow {
                c,
                norm,
                gap: approx_gap(norm, norm, c),
            });
        }
    }
    out
}

pub fn approx_gap_records() -> (Vec<GapRow>, Vec<CheckRecord>) {
    let norms: Vec<f64> = (1..=48).map(|i| i as f64 * 0.25).collect();
    let rows = approx_gap_curve(&[0.5, 1.0, 2.0], &norms);
    let mut records = Vec::new();

    let half_ln2 = 0.5 * std::f64::consts::LN_2;
    let at_regime = approx_gap(12.0, 12.0, 1.0);
    records.push(CheckRecord::new(
        "approx-gap-below-1e-3-at-regime",
        at_regime < 1e-3,
        at_regime,
        1e-3,
        "the gap rises toward ln(2)/2 = 0.34657 as norms grow; it never falls under 1e-3 \
         in the large-norm regime",
    ));

    let c1: Vec<&GapRow> = rows.iter().filter(|r| r.c == 1.0).collect();
    let mut worst_increase = f64::NEG_INFINITY;
    for w in c1.windows(2) {
        worst_increase = worst_increase.max(w[1].gap - w[0].gap);
    }
    records.push(CheckRecord::new(
        "approx-gap-shrinks-past-regime",
        worst_increase <= 0.0,
        worst_increase,
        0.0,
        "largest step between consecutive grid points; positive means the gap widens with \
         the norm instead of shrinking",
    ));
    records.push(CheckRecord::new(
        "approx-gap-saturates-at-half-ln2",
        (at_regime - half_ln2).abs() < 1e-3 && c1.windows(2).all(|w| w[1].gap >= w[0].gap - 1e-12),
        (at_regime - half_ln2).abs(),
        1e-3,
        "what the curve actually does: monotone growth from 0 to the asymptote ln(2)/2",
    ));
    (rows, records)
}

// ---------------------------------------------------------------------------
// angle ratio of the two distances

#[derive(Clone, Debug, Serialize)]
pub struct RatioRow {
    pub theta: f64,
    pub ratio: f64,
}

/// d_ball / d_tangent over an angle grid at fixed tangent norms; the theta=0
/// equal-norm point is skipped (zero Euclidean distance).
pub fn ratio_curve(c: f64, norm_i: f64, norm_j: f64, thetas: &[f64]) -> Vec<RatioRow> {
    thetas
        .iter()
        .filter_map(|&theta| {
            let de = (norm_i * norm_i - 2.0 * norm_i * norm_j * theta.cos() + norm_j * norm_j)
                .max(0.0)
                .sqrt();
            if de == 0.0 {
                return None;
            }
            Some(RatioRow {
                theta,
                ratio: exact_distance(norm_i, norm_j, theta.cos(), c) / de,
            })
        })
        .collect()
}

fn max_jump(rows: &[RatioRow]) -> f64 {
    rows.windows(2)
        .map(|w| (w[1].ratio - w[0].ratio).abs())
        .fold(0.0, f64::max)
}

pub fn ratio_records() -> (Vec<RatioRow>, Vec<CheckRecord>) {
    let grid: Vec<f64> = (0..=256)
        .map(|i| 0.2 + (std::f64::consts::PI - 0.2) * i as f64 / 256.0)
        .collect();
    let rows = ratio_curve(1.0, 12.0, 12.0, &grid);
    let mut records = Vec::new();

    let p_pi = rows.last().unwrap().ratio;
    let p_half: f64 = ratio_curve(1.0, 12.0, 12.0, &[std::f64::consts::FRAC_PI_2])[0].ratio;
    records.push(CheckRecord::new(
        "angle-ratio-collinear-endpoint",
        (p_pi - 1.0).abs() < 1e-6,
        p_pi,
        1.0,
        "opposite-direction pairs give ratio 1 under the empirically consistent scale \
         (no extra curvature factor); tolerance covers the inverse-tanh ulp blowup \
         this close to the boundary",
    ));
    records.push(CheckRecord::new(
        "angle-ratio-orthogonal-doubles-endpoint",
        (p_half / p_pi - 2.0).abs() < 0.05 * 2.0,
        p_half / p_pi,
        2.0,
        "the orthogonal/collinear ratio tends to sqrt(2), not 2: the tangent distance \
         grows from norm sum to norm quadrature while the ball distance barely moves",
    ));
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    records.push(CheckRecord::new(
        "angle-ratio-bounded-on-grid",
        max_ratio.is_finite(),
        max_ratio,
        f64::INFINITY,
        "finite everywhere away from the coincidence point; the theta -> 0 limit is the \
         conformal stretch at the shared radius, large but finite",
    ));

    let coarse: Vec<f64> = (0..=128)
        .map(|i| 0.2 + (std::f64::consts::PI - 0.2) * i as f64 / 128.0)
        .collect();
    let jump_coarse = max_jump(&ratio_curve(1.0, 12.0, 12.0, &coarse));
    let jump_fine = max_jump(&rows);
    records.push(CheckRecord::new(
        "angle-ratio-continuity-refinement",
        jump_fine <= 0.75 * jump_coarse + 1e-12,
        jump_fine / jump_coarse.max(1e-300),
        0.75,
        "halving the grid step roughly halves the largest consecutive jump",
    ));
    (rows, records)
}

// ---------------------------------------------------------------------------
// implicit kernel distance expansion

/// d(x_i, x_j) implied by the kernel map: sqrt(f(|xi|^2) + f(|xj|^2)
/// - 2 f(|xi.xj|)). A numerically negative radicand clamps to zero and is
/// counted by the caller.
pub fn kernel_distance(spec: KernelSpec, xi: &[f64], xj: &[f64]) -> Result<(f64, bool)> {
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let dot: f64 = xi.iter().zip(xj).map(|(a, b)| a * b).sum();
    let radicand = spec.value(sq(xi))? + spec.value(sq(xj))? - 2.0 * spec.value(dot.abs())?;
    let clamped = radicand < 0.0;
    Ok((radicand.max(0.0).sqrt(), clamped))
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpansionRow {
    pub stretch: f64,
    pub d_euclidean: f64,
    pub d_kernel: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpansionReport {
    pub kernel: KernelSpec,
    pub curves: usize,
    pub monotone_violations: usize,
    pub superlinear_violations: usize,
    pub radicand_clamps: usize,
    pub general_pairs: usize,
    pub general_clamps: usize,
    pub example_curve: Vec<ExpansionRow>,
}

/// Stretch one endpoint along each sampled direction, x_j = (1+s) x_i, and
/// check that the kernel distance never falls and outpaces the Euclidean
/// distance. Random unordered pairs are also scanned for negative radicands,
/// since the nonnegativity argument assumes a particular ordering.
pub fn expansion_check(spec: KernelSpec, curves: usize, seed: u64) -> Result<ExpansionReport> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let dim = 5;
    let draw_dir = |rng: &mut ChaCha20Rng| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-3 {
                return v.iter().map(|a| a / n).collect();
            }
        }
    };

    let mut monotone_violations = 0;
    let mut superlinear_violations = 0;
    let mut radicand_clamps = 0;
    let mut example_curve = Vec::new();

    for curve in 0..curves {
        let dir = draw_dir(&mut rng);
        let a = rng.random_range(0.4..0.8);
        let xi: Vec<f64> = dir.iter().map(|d| d * a).collect();
        let mut prev_d = 0.0;
        let mut prev_ratio = 0.0;
        for step in 0..=15 {
            let s = step as f64 * 0.1;
            let xj: Vec<f64> = xi.iter().map(|v| v * (1.0 + s)).collect();
            let (dk, clamped) = kernel_distance(spec, &xi, &xj)?;
            if clamped {
                radicand_clamps += 1;
            }
            let de = s * a;
            if dk + 1e-12 < prev_d {
                monotone_violations += 1;
            }
            prev_d = dk;
            if s > 0.0 {
                let ratio = dk / de;
                if prev_ratio > 0.0 && ratio + 1e-9 < prev_ratio {
                    superlinear_violations += 1;
                }
                prev_ratio = ratio;
                if curve == 0 {
                    example_curve.push(ExpansionRow {
                        stretch: s,
                        d_euclidean: de,
                        d_kernel: dk,
                        ratio,
                    });
                }
            }
        }
    }

    let general_pairs = curves;
    let mut general_clamps = 0;
    for _ in 0..general_pairs {
        let scale_i = rng.random_range(0.2..1.2);
        let scale_j = rng.random_range(0.2..1.2);
        let xi: Vec<f64> = draw_dir(&mut rng).iter().map(|d| d * scale_i).collect();
        let xj: Vec<f64> = draw_dir(&mut rng).iter().map(|d| d * scale_j).collect();
        if kernel_distance(spec, &xi, &xj)?.1 {
            general_clamps += 1;
        }
    }

    Ok(ExpansionReport {
        kernel: spec,
        curves,
        monotone_violations,
        superlinear_violations,
        radicand_clamps,
        general_pairs,
        general_clamps,
        example_curve,
    })
}

pub fn expansion_records(seed: u64) -> Result<(Vec<ExpansionReport>, Vec<CheckRecord>)> {
    let mut reports = Vec::new();
    let mut records = Vec::new();
    for (tag, spec) in [("poly2", KernelSpec::Poly2), ("exp", KernelSpec::ExpR { r: 1.0 })] {
        let rep = expansion_check(spec, 1000, seed)?;
        records.push(CheckRecord::new(
            &format!("expansion-monotone-{tag}"),
            rep.monotone_violations == 0,
            rep.monotone_violations as f64,
            0.0,
            "kernel distance never decreases along norm-growth curves",
        ));
        records.push(CheckRecord::new(
            &format!("expansion-superlinear-{tag}"),
            rep.superlinear_violations == 0,
            rep.superlinear_violations as f64,
            0.0,
            "kernel distance over Euclidean distance keeps growing along the same curves",
        ));
        records.push(CheckRecord::new(
            &format!("expansion-radicand-nonnegative-{tag}"),
            rep.radicand_clamps == 0 && rep.general_clamps == 0,
            (rep.radicand_clamps + rep.general_clamps) as f64,
            0.0,
            "no squared distance went negative, on curves or on unordered random pairs",
        ));
        reports.push(rep);
    }

    // unit-circle closed form: d = sqrt(2)|sin t|, ratio sqrt(1+cos t)
    let mut worst = 0.0f64;
    for i in 1..=64 {
        let t = std::f64::consts::PI * i as f64 / 65.0;
        let xi = [1.0, 0.0];
        let xj = [t.cos(), t.sin()];
        let (dk, _) = kernel_distance(KernelSpec::Poly2, &xi, &xj)?;
        worst = worst.max((dk - std::f64::consts::SQRT_2 * t.sin().abs()).abs());
        let de = (2.0 - 2.0 * t.cos()).sqrt();
        worst = worst.max((dk / de - (1.0 + t.cos()).sqrt()).abs());
    }
    records.push(CheckRecord::new(
        "expansion-unit-circle-closed-form",
        worst < 1e-12,
        worst,
        1e-12,
        "rotating unit pair reproduces d = sqrt(2)|sin t| and ratio sqrt(1 + cos t)",
    ));
    Ok((reports, records))
}

// ---------------------------------------------------------------------------
// SVD reduction of bilinear features

#[derive(Clone, Debug, Serialize)]
pub struct ReductionReport {
    pub requested_t: usize,
    pub effective_t: usize,
    pub max_pairwise: f64,
    pub bound: f64,
    pub violations: usize,
    pub full_rank_recon_err: f64,
    pub probe_acc_full: f64,
    pub probe_acc_reduced: f64,
}

fn to_na(m: &DenseMatrix) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

/// Left singular vectors of `b`, truncated to `t` columns (rows then have
/// norm at most 1). Rank deficiency shrinks `t` with a warning. Returns the
/// embedding, the descending singular values, and the effective width.
pub fn svd_reduce(b: &DenseMatrix, t: usize) -> Result<(DenseMatrix, Vec<f64>, usize)> {
    if t == 0 || t > b.rows().min(b.cols()) {
        return Err(Error::Contract(format!(
            "target width {t} out of range for a {}x{} matrix",
            b.rows(),
            b.cols()
        )));
    }
    let svd = to_na(b).svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Contract("svd did not produce singular vectors".to_string()))?;
    let sv = svd.singular_values;
    let mut idx: Vec<usize> = (0..sv.len()).collect();
    idx.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let tol = 1e-10 * sv[idx[0]].max(f64::MIN_POSITIVE);
    let rank = idx.iter().filter(|&&i| sv[i] > tol).count();
    let eff = t.min(rank);
    if eff < t {
        eprintln!("warning: input rank {rank} below target width {t}, reducing to {eff}");
    }
    let mut out = DenseMatrix::zeros(b.rows(), eff);
    for (col, &src) in idx.iter().take(eff).enumerate() {
        for row in 0..b.rows() {
            out.set(row, col, u[(row, src)]);
        }
    }
    let sigmas: Vec<f64> = idx.iter().map(|&i| sv[i]).collect();
    Ok((out, sigmas, eff))
}

fn bilinear_values(x: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(full_bp(&DiffNode::constant(x.clone()))?.value().clone())
}

/// Single-layer perceptron with bias; returns training accuracy after the
/// epoch budget. Converges whenever the classes are linearly separable.
fn perceptron_accuracy(feats: &DenseMatrix, labels: &[f64]) -> f64 {
    let (n, d) = feats.shape();
    let mut w = vec![0.0f64; d + 1];
    for _ in 0..500 {
        let mut mistakes = 0;
        for i in 0..n {
            let row = feats.row(i);
            let act: f64 = row.iter().zip(&w).map(|(x, wi)| x * wi).sum::<f64>() + w[d];
            if act * labels[i] <= 0.0 {
                mistakes += 1;
                for (wi, &x) in w.iter_mut().zip(row) {
                    *wi += labels[i] * x;
                }
                w[d] += labels[i];
            }
        }
        if mistakes == 0 {
            break;
        }
    }
    let mut hits = 0;
    for i in 0..n {
        let act: f64 = feats.row(i).iter().zip(&w).map(|(x, wi)| x * wi).sum::<f64>() + w[d];
        if act * labels[i] > 0.0 {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

fn max_pairwise_distance(m: &DenseMatrix) -> f64 {
    let mut best = 0.0f64;
    for i in 0..m.rows() {
        for j in (i + 1)..m.rows() {
            let d: f64 = m
                .row(i)
                .iter()
                .zip(m.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.max(d);
        }
    }
    best
}

pub fn svd_reduction_check(seed: u64) -> Result<ReductionReport> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let x = DenseMatrix::from_fn(20, 6, |_, _| rng.random_range(-1.0..1.0));
    let b = bilinear_values(&x)?;
    let t = 4;
    let (reduced, sigmas, eff) = svd_reduce(&b, t)?;
    let max_pairwise = max_pairwise_distance(&reduced);
    let bound = 2.0 * std::f64::consts::SQRT_2;
    let violations = usize::from(max_pairwise > bound + 1e-9);

    // keep every direction: the kernel matrix must come back exactly
    let rank = sigmas.iter().filter(|&&s| s > 1e-10 * sigmas[0]).count();
    let (u_full, _, _) = svd_reduce(&b, rank)?;
    let gram = b.matmul_nt(&b)?;
    let mut scaled = u_full.clone();
    for row in 0..scaled.rows() {
        for col in 0..rank {
            scaled.set(row, col, u_full.get(row, col) * sigmas[col]);
        }
    }
    let recon = scaled.matmul_nt(&scaled)?;
    let mut recon_err = 0.0f64;
    for (a, b) in gram.data().iter().zip(recon.data()) {
        recon_err = recon_err.max((a - b).abs());
    }

    // two blobs separated by radius: norm-squared is a linear functional of
    // the bilinear features, so both full and reduced features must split them
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..20 {
        let (radius, y) = if i % 2 == 0 { (1.5, 1.0) } else { (4.0, -1.0) };
        let mut v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-9);
        let r = radius * rng.random_range(0.9..1.1);
        v.iter_mut().for_each(|a| *a *= r / n);
        rows.push(v);
        labels.push(y);
    }
    let blob_x = DenseMatrix::from_rows(&rows)?;
    let blob_b = bilinear_values(&blob_x)?;
    let probe_acc_full = perceptron_accuracy(&blob_b, &labels);
    let (blob_red, _, _) = svd_reduce(&blob_b, t)?;
    let probe_acc_reduced = perceptron_accuracy(&blob_red, &labels);

    Ok(ReductionReport {
        requested_t: t,
        effective_t: eff,
        max_pairwise,
        bound,
        violations,
        full_rank_recon_err: recon_err,
        probe_acc_full,
        probe_acc_reduced,
    })
}

pub fn reduction_records(seed: u64) -> Result<(ReductionReport, Vec<CheckRecord>)> {
    let rep = svd_reduction_check(seed)?;
    let records = vec![
        CheckRecord::new(
            "reduction-pairwise-distance-bound",
            rep.violations == 0,
            rep.max_pairwise,
            rep.bound,
            "rows of the truncated left singular vectors have norm at most 1, so no pair \
             can be further apart than twice that, well inside 2*sqrt(2)",
        ),
        CheckRecord::new(
            "reduction-full-rank-reconstruction",
            rep.full_rank_recon_err < 1e-8,
            rep.full_rank_recon_err,
            1e-8,
            "keeping all directions reproduces every pairwise kernel value",
        ),
        CheckRecord::new(
            "reduction-preserves-linear-separability",
            rep.probe_acc_full == 1.0 && rep.probe_acc_reduced == 1.0,
            rep.probe_acc_full.min(rep.probe_acc_reduced),
            1.0,
            "a perceptron separates the two radius blobs perfectly on both the full and \
             the reduced features",
        ),
    ];
    Ok((rep, records))
}

// ---------------------------------------------------------------------------
// inverse of 2-d bilinear pooling

#[derive(Clone, Debug, Serialize)]
pub struct InverseRow {
    pub input: (f64, f64),
    pub clamped: bool,
    pub points: [[f64; 2]; 2],
    pub pooled: (f64, f64),
    pub gram_err: f64,
}

/// Treat [z1, z2] with a fixed corner as the symmetric 2x2 Gram matrix
/// [[z1, z2], [z2, c_fix]], factor it as X X^T via its eigendecomposition
/// (negative eigenvalues clamp to zero), and average-pool the recovered rows.
pub fn invert_bilinear(z1: f64, z2: f64, c_fix: f64) -> InverseRow {
    let tr = z1 + c_fix;
    let disc = ((z1 - c_fix) * (z1 - c_fix) + 4.0 * z2 * z2).sqrt();
    let lams = [(tr + disc) / 2.0, (tr - disc) / 2.0];
    let clamped = lams[1] < -1e-12 || lams[0] < -1e-12;
    if clamped {
        eprintln!(
            "warning: [{z1}, {z2}] with corner {c_fix} is not a valid Gram matrix; \
             negative eigenvalues clamped to zero"
        );
    }

    // orthonormal eigenvectors, columns of q
    let mut q = [[0.0f64; 2]; 2];
    if z2.abs() < 1e-14 {
        // already diagonal; order columns to match the sorted eigenvalues
        if z1 >= c_fix {
            q = [[1.0, 0.0], [0.0, 1.0]];
        } else {
            q = [[0.0, 1.0], [1.0, 0.0]];
        }
    } else {
        for (col, &lam) in lams.iter().enumerate() {
            let v = [z2, lam - z1];
            let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
            let sign = if v[if v[0].abs() >= v[1].abs() { 0 } else { 1 }] < 0.0 {
                -1.0
            } else {
                1.0
            };
            q[0][col] = sign * v[0] / n;
            q[1][col] = sign * v[1] / n;
        }
    }

    let roots = [lams[0].max(0.0).sqrt(), lams[1].max(0.0).sqrt()];
    let mut x = [[0.0f64; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            x[r][c] = q[r][c] * roots[c];
        }
    }
    let gram = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
    let target = [[z1.max(0.0).min(f64::INFINITY), z2], [z2, c_fix]];
    let mut gram_err = 0.0f64;
    if !clamped {
        for r in 0..2 {
            for c in 0..2 {
                gram_err = gram_err.max((gram(x[r], x[c]) - target[r][c]).abs());
            }
        }
    }
    InverseRow {
        input: (z1, z2),
        clamped,
        points: x,
        pooled: ((x[0][0] + x[1][0]) / 2.0, (x[0][1] + x[1][1]) / 2.0),
        gram_err,
    }
}

pub fn inverse_pooling_records() -> (Vec<InverseRow>, Vec<CheckRecord>) {
    let inputs = [(1.0, 0.0), (2.0, 0.5), (1.5, -0.8), (0.7, 0.3)];
    let rows: Vec<InverseRow> = inputs.iter().map(|&(a, b)| invert_bilinear(a, b, 1.0)).collect();
    let mut records = Vec::new();

    let id = &rows[0];
    let id_err = (id.pooled.0 - 0.5).abs().max((id.pooled.1 - 0.5).abs());
    records.push(CheckRecord::new(
        "inverse-pooling-identity-example",
        id_err < 1e-12,
        id_err,
        1e-12,
        "[1, 0] with unit corner factors as the identity; pooled row is (0.5, 0.5)",
    ));

    let mut round_err = 0.0f64;
    for &(z1, z2) in &inputs {
        let row = invert_bilinear(z1, z2, 1.0);
        // forward again from the recovered points and invert once more
        let g00 = row.points[0][0] * row.points[0][0] + row.points[0][1] * row.points[0][1];
        let g01 = row.points[0][0] * row.points[1][0] + row.points[0][1] * row.points[1][1];
        let again = invert_bilinear(g00, g01, 1.0);
        round_err = round_err.max(row.gram_err).max(again.gram_err);
    }
    records.push(CheckRecord::new(
        "inverse-pooling-gram-round-trip",
        round_err < 1e-9,
        round_err,
        1e-9,
        "the recovered points are unique only up to rotation, but their Gram matrix is \
         pinned and survives a forward-and-inverse cycle",
    ));
    (rows, records)
}

// ---------------------------------------------------------------------------
// driver

#[derive(Clone, Debug, Serialize)]
pub struct VerifySummary {
    pub records: Vec<CheckRecord>,
    pub failed: usize,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn write_csv<R, F: Fn(&R) -> String>(path: &Path, header: &str, rows: &[R], line: F) -> Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Check groups selectable from the command line.
pub const VERIFY_TAGS: [&str; 6] = ["additivity", "gap", "ratio", "expansion", "reduction", "inverse"];

/// Run the audits named in `only` (empty = all of them), drop JSON reports
/// and curve CSVs into `out_dir`, and return the combined record list.
/// Failed records are expected for the claims that do not hold numerically;
/// the caller decides the exit status.
pub fn run_verify_selected(out_dir: &Path, only: &[String]) -> Result<VerifySummary> {
    for t in only {
        if !VERIFY_TAGS.contains(&t.as_str()) {
            return Err(Error::Config(format!(
                "unknown check tag {t:?}; valid tags: {}",
                VERIFY_TAGS.join(", ")
            )));
        }
    }
    let want = |tag: &str| only.is_empty() || only.iter().any(|s| s == tag);
    fs::create_dir_all(out_dir)?;
    let mut records = Vec::new();

    if want("additivity") {
        let (orth, coll, r) = distance_additivity_records()?;
        write_json(&out_dir.join("distance_additivity.json"), &(&orth, &coll, &r))?;
        records.extend(r);
    }

    if want("gap") {
        let (gaps, r) = approx_gap_records();
        write_csv(&out_dir.join("approx_gap_curve.csv"), "c,norm,gap", &gaps, |g| {
            format!("{},{},{:.17e}", g.c, g.norm, g.gap)
        })?;
        write_json(&out_dir.join("approx_gap.json"), &r)?;
        records.extend(r);
    }

    if want("ratio") {
        let (ratios, r) = ratio_records();
        write_csv(&out_dir.join("angle_ratio_curve.csv"), "theta,ratio", &ratios, |x| {
            format!("{:.17e},{:.17e}", x.theta, x.ratio)
        })?;
        write_json(&out_dir.join("angle_ratio.json"), &r)?;
        records.extend(r);
    }

    if want("expansion") {
        let (reps, r) = expansion_records(7)?;
        write_csv(
            &out_dir.join("expansion_curve.csv"),
            "stretch,d_euclidean,d_kernel,ratio",
            &reps[0].example_curve,
            |x| format!("{},{:.17e},{:.17e},{:.17e}", x.stretch, x.d_euclidean, x.d_kernel, x.ratio),
        )?;
        write_json(&out_dir.join("expansion.json"), &(&reps, &r))?;
        records.extend(r);
    }

    if want("reduction") {
        let (rep, r) = reduction_records(11)?;
        write_json(&out_dir.join("reduction.json"), &(&rep, &r))?;
        records.extend(r);
    }

    if want("inverse") {
        let (rows, r) = inverse_pooling_records();
        write_json(&out_dir.join("inverse_pooling.json"), &(&rows, &r))?;
        records.extend(r);
    }

    let failed = records.iter().filter(|r| !r.passed).count();
    let summary = VerifySummary { records, failed };
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn run_verify(out_dir: &Path) -> Result<VerifySummary> {
    run_verify_selected(out_dir, &[])
}
