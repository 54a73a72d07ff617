use crate::error::{Error, Result};
use crate::ndcore::DenseMatrix;

/// Square sparse matrix in coordinate form, entries sorted by (row, col) with
/// no duplicates. Used for normalized graph operators, which stay constant
/// during training, so no gradient ever flows into the entries.
#[derive(Clone, Debug)]
pub struct SparseAdjacency {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseAdjacency {
    pub fn new(n: usize, entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        for (i, &(r, c, w)) in entries.iter().enumerate() {
            if r >= n || c >= n {
                return Err(Error::Contract(format!(
                    "sparse entry {i} at ({r},{c}) outside {n}x{n}"
                )));
            }
            if !w.is_finite() {
                return Err(Error::Domain {
                    op: "sparse_new",
                    index: i,
                    value: w,
                });
            }
            if i > 0 {
                let (pr, pc, _) = entries[i - 1];
                if (pr, pc) >= (r, c) {
                    return Err(Error::Contract(format!(
                        "sparse entries not strictly sorted at index {i}: ({pr},{pc}) then ({r},{c})"
                    )));
                }
            }
        }
        Ok(SparseAdjacency { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// A * x
    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.rows() != self.n {
            return Err(Error::dim(
                "spmm",
                format!("operator is {}x{}, input has {} rows", self.n, self.n, x.rows()),
            ));
        }
        let mut out = DenseMatrix::zeros(self.n, x.cols());
        for &(r, c, w) in &self.entries {
            let src = x.row(c);
            for (o, &v) in out.row_mut(r).iter_mut().zip(src) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    /// A^T * x
    pub fn apply_transpose(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.rows() != self.n {
            return Err(Error::dim(
                "spmm_t",
                format!("operator is {}x{}, input has {} rows", self.n, self.n, x.rows()),
            ));
        }
        let mut out = DenseMatrix::zeros(self.n, x.cols());
        for &(r, c, w) in &self.entries {
            let src = x.row(r);
            for (o, &v) in out.row_mut(c).iter_mut().zip(src) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    pub fn densify(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.n, self.n);
        for &(r, c, w) in &self.entries {
            m.set(r, c, w);
        }
        m
    }
}
