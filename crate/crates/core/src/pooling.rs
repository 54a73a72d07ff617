//! Second-order pooling heads. `full_bp` materializes the exact outer-product
//! features; the other heads approximate its kernel at much lower width, one
//! with frozen random signs, one with trained low-rank factors.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndcore::{ops, DenseMatrix, DiffNode};

/// Row-wise outer product, (n, m) -> (n, m*m) with b[i, p*m+q] = x[i,p]*x[i,q].
/// Inner products of these features reproduce the squared linear kernel:
/// <b_i, b_j> = <x_i, x_j>^2.
pub fn full_bp(x: &DiffNode) -> Result<DiffNode> {
    let (n, m) = x.shape();
    if m == 0 {
        return Err(Error::dim("full_bp", "zero input width".to_string()));
    }
    let value = {
        let xv = x.value();
        let mut out = DenseMatrix::zeros(n, m * m);
        for i in 0..n {
            let row = xv.row(i);
            let orow = out.row_mut(i);
            for (p, &a) in row.iter().enumerate() {
                for (q, &b) in row.iter().enumerate() {
                    orow[p * m + q] = a * b;
                }
            }
        }
        out
    };
    let xn = x.clone();
    Ok(DiffNode::from_parents(
        value,
        vec![(
            x.clone(),
            Box::new(move |g| {
                let xv = xn.value();
                let mut out = DenseMatrix::zeros(n, m);
                for i in 0..n {
                    let row = xv.row(i);
                    let grow = g.row(i);
                    let orow = out.row_mut(i);
                    for p in 0..m {
                        let mut acc = 0.0;
                        for q in 0..m {
                            acc += grow[p * m + q] * row[q] + grow[q * m + p] * row[q];
                        }
                        orow[p] = acc;
                    }
                }
                out
            }),
        )],
    ))
}

/// Frozen random feature head: b = (W1^T x) o (W2^T x) / sqrt(h) with
/// Rademacher sign matrices. Unbiased for the squared linear kernel in
/// expectation over draws.
#[derive(Clone, Debug)]
pub struct RandomMaclaurinHead {
    w1: DiffNode,
    w2: DiffNode,
    h: usize,
}

impl RandomMaclaurinHead {
    pub fn new(input_dim: usize, h: usize, rng: &mut impl Rng) -> Result<Self> {
        if input_dim == 0 || h == 0 {
            return Err(Error::Contract(format!(
                "random maclaurin head needs positive dims, got {input_dim}x{h}"
            )));
        }
        let mut draw = || {
            DenseMatrix::from_fn(input_dim, h, |_, _| {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            })
        };
        let w1 = draw();
        let w2 = draw();
        Self::from_weights(w1, w2)
    }

    /// Explicit sign matrices, mainly for tests pinning a known projection.
    pub fn from_weights(w1: DenseMatrix, w2: DenseMatrix) -> Result<Self> {
        if w1.shape() != w2.shape() {
            return Err(Error::dim(
                "random_maclaurin",
                format!("{:?} vs {:?}", w1.shape(), w2.shape()),
            ));
        }
        let h = w1.cols();
        Ok(RandomMaclaurinHead {
            w1: DiffNode::constant(w1),
            w2: DiffNode::constant(w2),
            h,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.h
    }

    pub fn apply(&self, x: &DiffNode) -> Result<DiffNode> {
        let p1 = ops::matmul(x, &self.w1)?;
        let p2 = ops::matmul(x, &self.w2)?;
        ops::scale(&ops::mul(&p1, &p2)?, 1.0 / (self.h as f64).sqrt())
    }
}

/// Trainable low-rank second-order head:
/// b = [ sum_r (x U_r) o (x V_r) ] P, with K heads of rank width `rank_dim`
/// and a shared projection P to `out_dim`.
#[derive(Clone, Debug)]
pub struct LowRankHadamardHead {
    u: Vec<DiffNode>,
    v: Vec<DiffNode>,
    p: DiffNode,
    out_dim: usize,
}

impl LowRankHadamardHead {
    pub fn new(
        input_dim: usize,
        rank_dim: usize,
        heads: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input_dim == 0 || rank_dim == 0 || heads == 0 || out_dim == 0 {
            return Err(Error::Contract(
                "low-rank head needs positive dimensions".to_string(),
            ));
        }
        let lim_uv = 1.0 / (input_dim as f64).sqrt();
        let lim_p = 1.0 / (rank_dim as f64).sqrt();
        let mut uniform = |rows: usize, cols: usize, lim: f64| {
            DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-lim..lim))
        };
        let u = (0..heads)
            .map(|_| DiffNode::leaf(uniform(input_dim, rank_dim, lim_uv), true))
            .collect::<Vec<_>>();
        let v = (0..heads)
            .map(|_| DiffNode::leaf(uniform(input_dim, rank_dim, lim_uv), true))
            .collect::<Vec<_>>();
        let p = DiffNode::leaf(uniform(rank_dim, out_dim, lim_p), true);
        Ok(LowRankHadamardHead {
            u,
            v,
            p,
            out_dim,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.out_dim
    }

    pub fn heads(&self) -> usize {
        self.u.len()
    }

    pub fn params(&self) -> Vec<DiffNode> {
        let mut out = self.u.clone();
        out.extend(self.v.iter().cloned());
        out.push(self.p.clone());
        out
    }

    pub fn apply(&self, x: &DiffNode) -> Result<DiffNode> {
        let mut acc: Option<DiffNode> = None;
        for (u, v) in self.u.iter().zip(&self.v) {
            let term = ops::mul(&ops::matmul(x, u)?, &ops::matmul(x, v)?)?;
            acc = Some(match acc {
                Some(a) => ops::add(&a, &term)?,
                None => term,
            });
        }
        ops::matmul(&acc.expect("at least one head"), &self.p)
    }
}
