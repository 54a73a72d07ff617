//! Central finite-difference oracle for gradient rules. Rebuilds the forward
//! pass around perturbed copies of each input, so it exercises exactly the
//! public op surface and nothing in the graph internals.

use crate::error::{Error, Result};
use crate::ndcore::{DenseMatrix, DiffNode};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, entry index) of the worst entry, if any entry was checked.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

fn eval(build: &dyn Fn(&[DiffNode]) -> Result<DiffNode>, inputs: &[DenseMatrix]) -> Result<f64> {
    let leaves: Vec<DiffNode> = inputs
        .iter()
        .map(|m| DiffNode::leaf(m.clone(), true))
        .collect();
    build(&leaves)?.item()
}

/// Compare analytic gradients of the scalar `build(inputs)` against central
/// differences with the given step. The error for each entry is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn check_gradients(
    inputs: &[DenseMatrix],
    build: &dyn Fn(&[DiffNode]) -> Result<DiffNode>,
    step: f64,
) -> Result<GradCheckReport> {
    if step <= 0.0 {
        return Err(Error::Contract(format!("non-positive step {step}")));
    }
    let leaves: Vec<DiffNode> = inputs
        .iter()
        .map(|m| DiffNode::leaf(m.clone(), true))
        .collect();
    let loss = build(&leaves)?;
    if loss.shape() != (1, 1) {
        return Err(Error::dim(
            "check_gradients",
            format!("loss must be 1x1, got {:?}", loss.shape()),
        ));
    }
    loss.backward()?;
    let analytic: Vec<DenseMatrix> = leaves
        .iter()
        .map(|l| {
            l.grad()
                .unwrap_or_else(|| DenseMatrix::zeros(l.rows(), l.cols()))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let mut work: Vec<DenseMatrix> = inputs.to_vec();
    for pi in 0..inputs.len() {
        for ei in 0..inputs[pi].len() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + step;
            let plus = eval(build, &work)?;
            work[pi].data_mut()[ei] = orig - step;
            let minus = eval(build, &work)?;
            work[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let exact = analytic[pi].data()[ei];
            let rel = (exact - numeric).abs() / 1.0_f64.max(exact.abs()).max(numeric.abs());
            report.entries_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, ei));
            }
        }
    }
    Ok(report)
}
