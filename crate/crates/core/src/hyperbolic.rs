//! Poincare-ball operations at curvature c > 0. Points live in the open ball
//! sqrt(c)*||z|| < 1. Scalar functions work on plain slices; the `_rows`
//! variants operate on row-stacked [`DiffNode`]s and are built entirely from
//! ndcore ops so gradients come for free.

use crate::error::{Error, Result};
use crate::ndcore::{ops, DenseMatrix, DiffNode, EPS_NORM};

/// Gap kept between representable points and the ball boundary; atanh
/// arguments are clamped to [0, 1 - EPS_BALL].
pub const EPS_BALL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if !c.is_finite() || c <= 0.0 {
            return Err(Error::Contract(format!(
                "curvature must be finite and positive, got {c}"
            )));
        }
        Ok(Curvature(c))
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }

    /// Largest representable norm, (1 - EPS_BALL) / sqrt(c).
    pub fn max_norm(self) -> f64 {
        (1.0 - EPS_BALL) / self.sqrt()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(op, format!("{} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Scale a point back inside the ball if it drifted onto or past the boundary.
pub fn project_to_ball(z: &[f64], c: Curvature) -> Vec<f64> {
    let n = norm(z);
    let max = c.max_norm();
    if n > max {
        let f = max / n;
        z.iter().map(|v| v * f).collect()
    } else {
        z.to_vec()
    }
}

pub fn mobius_add(a: &[f64], b: &[f64], c: Curvature) -> Result<Vec<f64>> {
    check_dims("mobius_add", a, b)?;
    let c = c.get();
    let ab = dot(a, b);
    let na2 = dot(a, a);
    let nb2 = dot(b, b);
    let denom = 1.0 + 2.0 * c * ab + c * c * na2 * nb2;
    if denom == 0.0 {
        return Err(Error::Domain {
            op: "mobius_add",
            index: 0,
            value: denom,
        });
    }
    let ca = (1.0 + 2.0 * c * ab + c * nb2) / denom;
    let cb = (1.0 - c * na2) / denom;
    Ok(a.iter().zip(b).map(|(&x, &y)| ca * x + cb * y).collect())
}

pub fn hyp_distance(a: &[f64], b: &[f64], c: Curvature) -> Result<f64> {
    check_dims("hyp_distance", a, b)?;
    let neg_a: Vec<f64> = a.iter().map(|v| -v).collect();
    let m = mobius_add(&neg_a, b, c)?;
    let arg = (c.sqrt() * norm(&m)).clamp(0.0, 1.0 - EPS_BALL);
    Ok(2.0 / c.sqrt() * arg.atanh())
}

/// Map a tangent vector at the origin into the ball:
/// tanh(sqrt(c)*||x||/2) * x / (sqrt(c)*||x||). Radial distances from the
/// origin equal the Euclidean norm of the input.
pub fn exp_map0(x: &[f64], c: Curvature) -> Vec<f64> {
    let sc = c.sqrt();
    let n = norm(x).max(EPS_NORM);
    let f = (sc * n / 2.0).tanh() / (sc * n);
    x.iter().map(|v| v * f).collect()
}

/// Inverse of [`exp_map0`]: (2/sqrt(c)) * atanh(sqrt(c)*||z||) * z / ||z||.
pub fn log_map0(z: &[f64], c: Curvature) -> Vec<f64> {
    let sc = c.sqrt();
    let n = norm(z).max(EPS_NORM);
    let arg = (sc * n).clamp(0.0, 1.0 - EPS_BALL);
    let f = 2.0 / sc * arg.atanh() / n;
    z.iter().map(|v| v * f).collect()
}

/// Conformal factor 2 / (1 - c*||z||^2).
pub fn conformal_factor(z: &[f64], c: Curvature) -> f64 {
    2.0 / (1.0 - c.get() * dot(z, z))
}

/// A point constrained to the ball; construction and every update project
/// back inside, so the invariant sqrt(c)*||coords|| <= 1 - EPS_BALL holds.
#[derive(Clone, Debug)]
pub struct PoincarePoint {
    coords: Vec<f64>,
    curvature: Curvature,
}

impl PoincarePoint {
    pub fn new(coords: Vec<f64>, curvature: Curvature) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Contract("zero-dimensional point".to_string()));
        }
        if let Some(i) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "poincare_point",
                index: i,
                value: coords[i],
            });
        }
        Ok(PoincarePoint {
            coords: project_to_ball(&coords, curvature),
            curvature,
        })
    }

    pub fn origin(dim: usize, curvature: Curvature) -> Result<Self> {
        Self::new(vec![0.0; dim], curvature)
    }

    pub fn from_tangent(x: &[f64], curvature: Curvature) -> Result<Self> {
        Self::new(exp_map0(x, curvature), curvature)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn add(&self, other: &PoincarePoint) -> Result<PoincarePoint> {
        self.check_compatible(other)?;
        PoincarePoint::new(
            mobius_add(&self.coords, &other.coords, self.curvature)?,
            self.curvature,
        )
    }

    pub fn distance(&self, other: &PoincarePoint) -> Result<f64> {
        self.check_compatible(other)?;
        hyp_distance(&self.coords, &other.coords, self.curvature)
    }

    pub fn log0(&self) -> Vec<f64> {
        log_map0(&self.coords, self.curvature)
    }

    pub fn conformal_factor(&self) -> f64 {
        conformal_factor(&self.coords, self.curvature)
    }

    fn check_compatible(&self, other: &PoincarePoint) -> Result<()> {
        if self.coords.len() != other.coords.len() {
            return Err(Error::dim(
                "poincare_point",
                format!("{} vs {}", self.coords.len(), other.coords.len()),
            ));
        }
        if self.curvature != other.curvature {
            return Err(Error::Contract(format!(
                "curvature mismatch: {} vs {}",
                self.curvature.get(),
                other.curvature.get()
            )));
        }
        Ok(())
    }
}

/// Row-wise [`exp_map0`] of an (n, d) node.
pub fn exp_map0_rows(x: &DiffNode, c: Curvature) -> Result<DiffNode> {
    let sc = c.sqrt();
    let nrm = ops::row_l2norm(x)?;
    let th = ops::tanh(&ops::scale(&nrm, sc / 2.0)?)?;
    let factor = ops::div(&th, &ops::scale(&nrm, sc)?)?;
    ops::row_scale(x, &factor)
}

/// Row-wise [`log_map0`] of an (n, d) node.
pub fn log_map0_rows(z: &DiffNode, c: Curvature) -> Result<DiffNode> {
    let sc = c.sqrt();
    let nrm = ops::row_l2norm(z)?;
    let arg = ops::clamp(&ops::scale(&nrm, sc)?, 0.0, 1.0 - EPS_BALL)?;
    let at = ops::atanh(&arg)?;
    let factor = ops::scale(&ops::div(&at, &nrm)?, 2.0 / sc)?;
    ops::row_scale(z, &factor)
}

/// All distances between rows of `z` (n, d) and rows of `w` (m, d), shape
/// (n, m). Uses the closed form
/// ||(-z) (+) w||^2 = ||z - w||^2 / (1 - 2c<z,w> + c^2 ||z||^2 ||w||^2),
/// which needs only inner products, so the whole thing stays in matrix ops.
pub fn pairwise_distance(z: &DiffNode, w: &DiffNode, c: Curvature) -> Result<DiffNode> {
    if z.cols() != w.cols() {
        return Err(Error::dim(
            "pairwise_distance",
            format!("{:?} vs {:?}", z.shape(), w.shape()),
        ));
    }
    let (n, m) = (z.rows(), w.rows());
    let cv = c.get();
    let zz = ops::rowsum(&ops::mul(z, z)?)?;
    let ww = ops::rowsum(&ops::mul(w, w)?)?;
    let cross = ops::matmul_nt(z, w)?;
    let ones_row = DiffNode::constant(DenseMatrix::ones(1, m));
    let ones_col = DiffNode::constant(DenseMatrix::ones(n, 1));
    let zz_b = ops::matmul(&zz, &ones_row)?;
    let ww_b = ops::matmul_nt(&ones_col, &ww)?;

    let num = ops::sub(&ops::add(&zz_b, &ww_b)?, &ops::scale(&cross, 2.0)?)?;
    let den = ops::add_scalar(
        &ops::add(
            &ops::scale(&cross, -2.0 * cv)?,
            &ops::scale(&ops::mul(&zz_b, &ww_b)?, cv * cv)?,
        )?,
        1.0,
    )?;
    distance_from_ratio(&num, &den, c)
}

/// Distance between row i of `a` and row i of `b`, shape (n, 1).
pub fn rowwise_distance(a: &DiffNode, b: &DiffNode, c: Curvature) -> Result<DiffNode> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "rowwise_distance",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let cv = c.get();
    let diff = ops::sub(a, b)?;
    let num = ops::rowsum(&ops::mul(&diff, &diff)?)?;
    let aa = ops::rowsum(&ops::mul(a, a)?)?;
    let bb = ops::rowsum(&ops::mul(b, b)?)?;
    let cross = ops::rowsum(&ops::mul(a, b)?)?;
    let den = ops::add_scalar(
        &ops::add(
            &ops::scale(&cross, -2.0 * cv)?,
            &ops::scale(&ops::mul(&aa, &bb)?, cv * cv)?,
        )?,
        1.0,
    )?;
    distance_from_ratio(&num, &den, c)
}

fn distance_from_ratio(num: &DiffNode, den: &DiffNode, c: Curvature) -> Result<DiffNode> {
    let sc = c.sqrt();
    // floor keeps sqrt differentiable when points coincide
    let ratio = ops::clamp(&ops::div(num, den)?, EPS_NORM * EPS_NORM, f64::INFINITY)?;
    let u = ops::sqrt(&ratio)?;
    let arg = ops::clamp(&ops::scale(&u, sc)?, 0.0, 1.0 - EPS_BALL)?;
    ops::scale(&ops::atanh(&arg)?, 2.0 / sc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::gradcheck::check_gradients;
    use proptest::prelude::*;

    fn c1() -> Curvature {
        Curvature::new(1.0).unwrap()
    }

    #[test]
    fn curvature_must_be_positive() {
        assert!(Curvature::new(0.0).is_err());
        assert!(Curvature::new(-1.0).is_err());
        assert!(Curvature::new(f64::NAN).is_err());
    }

    #[test]
    fn antipodal_points_unit_curvature() {
        // ||(-a) (+) b|| = 0.8 for a = (0.5, 0), b = (-0.5, 0)
        let a = [0.5, 0.0];
        let b = [-0.5, 0.0];
        let neg_a = [-0.5, 0.0];
        let m = mobius_add(&neg_a, &b, c1()).unwrap();
        assert!((norm(&m) - 0.8).abs() < 1e-12, "{}", norm(&m));
        let d = hyp_distance(&a, &b, c1()).unwrap();
        assert!((d - 2.0 * 0.8_f64.atanh()).abs() < 1e-12);
        assert!((d - 2.1972245773362196).abs() < 1e-12);
    }

    #[test]
    fn origin_is_identity_and_negation_is_inverse() {
        let z = [0.3, -0.2, 0.1];
        let zero = [0.0; 3];
        let id = mobius_add(&zero, &z, c1()).unwrap();
        for (x, y) in id.iter().zip(&z) {
            assert!((x - y).abs() < 1e-15);
        }
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        let back = mobius_add(&z, &neg, c1()).unwrap();
        assert!(norm(&back) < 1e-15);
    }

    #[test]
    fn exp_log_roundtrip_across_curvatures() {
        for &c in &[0.5, 1.0, 2.0] {
            let c = Curvature::new(c).unwrap();
            for &scale in &[1e-3, 0.5, 2.0, 6.0] {
                let x = [scale * 0.6, scale *(-0.64), scale * 0.48];
                let z = exp_map0(&x, c);
                let back = log_map0(&z, c);
                let err = x
                    .iter()
                    .zip(&back)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0_f64, f64::max)
                    / norm(&x);
                assert!(err < 1e-8, "c={} scale={scale} err={err}", c.get());
            }
        }
    }

    #[test]
    fn radial_distance_equals_tangent_norm() {
        // with this convention exp_map0 is an isometry on rays from zero
        for &cval in &[0.25, 1.0, 4.0] {
            let c = Curvature::new(cval).unwrap();
            let x = [1.2, 0.9, -0.3];
            let z = exp_map0(&x, c);
            let o = vec![0.0; 3];
            let d = hyp_distance(&o, &z, c).unwrap();
            assert!((d - norm(&x)).abs() < 1e-10, "c={cval} d={d}");
        }
    }

    #[test]
    fn projection_enforces_ball_invariant() {
        let c = Curvature::new(4.0).unwrap();
        let p = PoincarePoint::new(vec![5.0, 5.0], c).unwrap();
        let n = norm(p.coords());
        assert!(c.sqrt() * n <= 1.0 - EPS_BALL + 1e-15);
        // interior points are untouched
        let q = PoincarePoint::new(vec![0.1, 0.0], c).unwrap();
        assert_eq!(q.coords(), &[0.1, 0.0]);
    }

    #[test]
    fn conformal_factor_at_origin_is_two() {
        assert_eq!(conformal_factor(&[0.0, 0.0], c1()), 2.0);
    }

    #[test]
    fn batched_maps_match_pointwise() {
        let c = Curvature::new(2.0).unwrap();
        let rows = [
            vec![0.4, -1.1, 0.3],
            vec![0.0, 0.0, 0.0],
            vec![2.5, 1.0, -0.7],
        ];
        let x = DiffNode::constant(DenseMatrix::from_rows(&rows).unwrap());
        let z = exp_map0_rows(&x, c).unwrap();
        let back = log_map0_rows(&z, c).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let zi = exp_map0(row, c);
            for (j, &v) in zi.iter().enumerate() {
                assert!((z.value().get(i, j) - v).abs() < 1e-12);
            }
            for (j, &v) in row.iter().enumerate() {
                assert!((back.value().get(i, j) - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pairwise_matches_scalar_distance() {
        let c = Curvature::new(1.5).unwrap();
        let zr = [vec![0.2, 0.1], vec![-0.3, 0.25], vec![0.05, -0.4]];
        let wr = [vec![0.0, 0.0], vec![0.31, 0.18]];
        let z = DiffNode::constant(DenseMatrix::from_rows(&zr).unwrap());
        let w = DiffNode::constant(DenseMatrix::from_rows(&wr).unwrap());
        let d = pairwise_distance(&z, &w, c).unwrap();
        for (i, zi) in zr.iter().enumerate() {
            for (j, wj) in wr.iter().enumerate() {
                let want = hyp_distance(zi, wj, c).unwrap();
                assert!(
                    (d.value().get(i, j) - want).abs() < 1e-10,
                    "({i},{j}): {} vs {want}",
                    d.value().get(i, j)
                );
            }
        }
    }

    #[test]
    fn coincident_rows_have_tiny_distance() {
        let c = c1();
        let a = DiffNode::constant(
            DenseMatrix::from_rows(&[vec![0.2, -0.1], vec![0.0, 0.3]]).unwrap(),
        );
        let d = rowwise_distance(&a, &a, c).unwrap();
        assert!(d.value().max_abs() < 1e-9);
    }

    #[test]
    fn batched_maps_pass_finite_difference() {
        let c = Curvature::new(1.3).unwrap();
        let x = DenseMatrix::from_rows(&[vec![0.5, -0.8, 0.2], vec![1.1, 0.4, -0.6]]).unwrap();
        let exp_build = move |p: &[DiffNode]| ops::mean(&exp_map0_rows(&p[0], c)?);
        let r = check_gradients(&[x.clone()], &exp_build, 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-6, "exp: {}", r.max_rel_err);

        let z = DenseMatrix::from_rows(&[vec![0.2, -0.3, 0.1], vec![0.4, 0.1, -0.2]]).unwrap();
        let log_build = move |p: &[DiffNode]| ops::mean(&log_map0_rows(&p[0], c)?);
        let r = check_gradients(&[z], &log_build, 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-6, "log: {}", r.max_rel_err);

        let zr = DenseMatrix::from_rows(&[vec![0.2, 0.1], vec![-0.3, 0.25]]).unwrap();
        let wr = DenseMatrix::from_rows(&[vec![0.05, -0.1], vec![0.31, 0.18], vec![0.0, 0.22]])
            .unwrap();
        let pd_build = move |p: &[DiffNode]| ops::mean(&pairwise_distance(&p[0], &p[1], c)?);
        let r = check_gradients(&[zr.clone(), wr], &pd_build, 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-5, "pairwise: {}", r.max_rel_err);

        let br = DenseMatrix::from_rows(&[vec![0.45, -0.2], vec![0.11, 0.06]]).unwrap();
        let rw_build = move |p: &[DiffNode]| ops::mean(&rowwise_distance(&p[0], &p[1], c)?);
        let r = check_gradients(&[zr, br], &rw_build, 1e-6).unwrap();
        assert!(r.max_rel_err < 1e-5, "rowwise: {}", r.max_rel_err);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mobius_add_stays_in_ball(
            ax in -0.9f64..0.9, ay in -0.9f64..0.9,
            bx in -0.9f64..0.9, by in -0.9f64..0.9,
        ) {
            let c = c1();
            let a = project_to_ball(&[ax, ay], c);
            let b = project_to_ball(&[bx, by], c);
            let s = mobius_add(&a, &b, c).unwrap();
            prop_assert!(norm(&s) < 1.0 + 1e-12);
        }

        #[test]
        fn distance_symmetry_and_triangle(
            ax in -2.0f64..2.0, ay in -2.0f64..2.0,
            bx in -2.0f64..2.0, by in -2.0f64..2.0,
            cx in -2.0f64..2.0, cy in -2.0f64..2.0,
            cval in 0.3f64..3.0,
        ) {
            let c = Curvature::new(cval).unwrap();
            let a = exp_map0(&[ax, ay], c);
            let b = exp_map0(&[bx, by], c);
            let t = exp_map0(&[cx, cy], c);
            let dab = hyp_distance(&a, &b, c).unwrap();
            let dba = hyp_distance(&b, &a, c).unwrap();
            prop_assert!((dab - dba).abs() < 1e-9);
            let dat = hyp_distance(&a, &t, c).unwrap();
            let dtb = hyp_distance(&t, &b, c).unwrap();
            prop_assert!(dab <= dat + dtb + 1e-9);
            prop_assert!(dab >= 0.0);
        }
    }
}
