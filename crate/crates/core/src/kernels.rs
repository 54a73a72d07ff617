//! Kernel targets for the pooled features and the alignment regularizer that
//! pulls approximate heads toward them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{ops, DenseMatrix, DiffNode};

/// Scalar map applied to |<x_i, x_j>| to form the target kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// f(a) = a^2, the kernel realized exactly by full bilinear pooling.
    Poly2,
    /// f(a) = exp(r a); distances built from it grow without bound in the
    /// input norms, unlike any fixed polynomial order.
    ExpR { r: f64 },
}

impl KernelSpec {
    pub fn value(&self, a: f64) -> Result<f64> {
        let a = a.abs();
        match *self {
            KernelSpec::Poly2 => Ok(a * a),
            KernelSpec::ExpR { r } => {
                let t = r * a;
                if t > 700.0 {
                    return Err(Error::Scale(format!(
                        "exp kernel overflows at r*|a| = {t:.1}; rescale inputs or lower r"
                    )));
                }
                Ok(t.exp())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let KernelSpec::ExpR { r } = *self {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::Config(format!("exp kernel rate must be positive, got {r}")));
            }
        }
        Ok(())
    }
}

/// K_ij = f(|<x_i, x_j>|) for all row pairs.
pub fn kernel_matrix(x: &DenseMatrix, spec: KernelSpec) -> Result<DenseMatrix> {
    spec.validate()?;
    let n = x.rows();
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        let ri = x.row(i);
        for j in 0..n {
            let dot: f64 = ri.iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
            out.set(i, j, spec.value(dot)?);
        }
    }
    Ok(out)
}

/// Mean squared gap between the pooled-feature Gram matrix and the target
/// kernel on the raw inputs: mean_ij (b_i^T b_j - f(|x_i^T x_j|))^2.
///
/// `x` enters as plain data, so the regularizer shapes the head without
/// pushing gradient back into whatever produced the inputs.
pub fn kr_loss(b: &DiffNode, x: &DenseMatrix, spec: KernelSpec) -> Result<DiffNode> {
    if b.rows() != x.rows() {
        return Err(Error::dim(
            "kr_loss",
            format!("{} pooled rows vs {} input rows", b.rows(), x.rows()),
        ));
    }
    let target = DiffNode::constant(kernel_matrix(x, spec)?);
    let gram = ops::matmul_nt(b, b)?;
    let gap = ops::sub(&gram, &target)?;
    ops::mean(&ops::mul(&gap, &gap)?)
}
