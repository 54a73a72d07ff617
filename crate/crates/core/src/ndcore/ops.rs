//! Differentiable operations over [`DiffNode`]. Shape and domain checks run
//! at construction time, so the stored gradient rules are infallible.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ndcore::{DenseMatrix, DiffNode, SparseAdjacency, EPS_NORM};

fn same_shape(op: &'static str, a: &DiffNode, b: &DiffNode) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn domain_scan(op: &'static str, m: &DenseMatrix, bad: impl Fn(f64) -> bool) -> Result<()> {
    if let Some(i) = m.data().iter().position(|&v| bad(v)) {
        return Err(Error::Domain {
            op,
            index: i,
            value: m.data()[i],
        });
    }
    Ok(())
}

pub fn matmul(a: &DiffNode, b: &DiffNode) -> Result<DiffNode> {
    let value = a.value().matmul(&b.value())?;
    let (an, bn) = (a.clone(), b.clone());
    Ok(DiffNode::from_parents(
        value,
        vec![
            (
                a.clone(),
                Box::new(move |g| g.matmul_nt(&bn.value()).expect("matmul grad")),
            ),
            (
                b.clone(),
                Box::new(move |g| an.value().matmul_tn(g).expect("matmul grad")),
            ),
        ],
    ))
}

/// a * b^T
pub fn matmul_nt(a: &DiffNode, b: &DiffNode) -> Result<DiffNode> {
    let value = a.value().matmul_nt(&b.value())?;
    let (an, bn) = (a.clone(), b.clone());
    Ok(DiffNode::from_parents(
        value,
        vec![
            (
                a.clone(),
                Box::new(move |g| g.matmul(&bn.value()).expect("matmul_nt grad")),
            ),
            (
                b.clone(),
                Box::new(move |g| g.matmul_tn(&an.value()).expect("matmul_nt grad")),
            ),
        ],
    ))
}

/// Sparse operator times dense node. The operator is constant, gradient only
/// flows into `x`.
pub fn spmm(adj: &Rc<SparseAdjacency>, x: &DiffNode) -> Result<DiffNode> {
    let value = adj.apply(&x.value())?;
    let a = Rc::clone(adj);
    Ok(DiffNode::from_parents(
        value,
        vec![(
            x.clone(),
            Box::new(move |g| a.apply_transpose(g).expect("spmm grad")),
        )],
    ))
}

pub fn add(a: &DiffNode, b: &DiffNode) -> Result<DiffNode> {
    same_shape("add", a, b)?;
    let mut value = a.value().clone();
    value.add_assign(&b.value());
    Ok(DiffNode::from_parents(
        value,
        vec![
            (a.clone(), Box::new(|g| g.clone())),
            (b.clone(), Box::new(|g| g.clone())),
        ],
    ))
}

pub fn sub(a: &DiffNode, b: &DiffNode) -> Result<DiffNode> {
    same_shape("sub", a, b)?;
    let mut value = a.value().clone();
    value.add_assign_scaled(&b.value(), -1.0);
    Ok(DiffNode::from_parents(
        value,
        vec![
            (a.clone(), Box::new(|g| g.clone())),
            (b.clone(), Box::new(|g| g.map(|v| -v))),
        ],
    ))
}

fn zip_value(a: &DiffNode, b: &DiffNode, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
    let av = a.value();
    let bv = b.value();
    let data = av
        .data()
        .iter()
        .zip(bv.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    DenseMatrix::raw(av.rows(), av.cols(), data)
}

pub fn mul(a: &DiffNode, b: &DiffNode) -> Result<DiffNode> {
    same_shape("mul", a, b)?;
    let value = zip_value(a, b, |x, y| x * y);
    let (an, bn) = (a.clone(), b.clone());
    Ok(DiffNode::from_parents(
        value,
        vec![
            (
                a.clone(),
                Box::new(move |g| {
                    let bv = bn.value();
                    let data = g
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&gv, &y)| gv * y)
                        .collect();
                    DenseMatrix::raw(g.rows(), g.cols(), data)
                }),
            ),
            (
                b.clone(),
                Box::new(move |g| {
                    let av = an.value();
                    let data = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&gv, &x)| gv * x)
                        .collect();
                    DenseMatrix::raw(g.rows(), g.cols(), data)
                }),
            ),
        ],
    ))
}

pub fn div(a: &DiffNode, b: &DiffNode) -> Result<DiffNode> {
    same_shape("div", a, b)?;
    domain_scan("div", &b.value(), |v| v == 0.0)?;
    let value = zip_value(a, b, |x, y| x / y);
    let (an, bn) = (a.clone(), b.clone());
    let bn2 = b.clone();
    Ok(DiffNode::from_parents(
        value,
        vec![
            (
                a.clone(),
                Box::new(move |g| {
                    let bv = bn.value();
                    let data = g
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&gv, &y)| gv / y)
                        .collect();
                    DenseMatrix::raw(g.rows(), g.cols(), data)
                }),
            ),
            (
                b.clone(),
                Box::new(move |g| {
                    let av = an.value();
                    let bv = bn2.value();
                    let data = g
                        .data()
                        .iter()
                        .zip(av.data().iter().zip(bv.data()))
                        .map(|(&gv, (&x, &y))| -gv * x / (y * y))
                        .collect();
                    DenseMatrix::raw(g.rows(), g.cols(), data)
                }),
            ),
        ],
    ))
}

pub fn add_scalar(a: &DiffNode, s: f64) -> Result<DiffNode> {
    if !s.is_finite() {
        return Err(Error::Domain {
            op: "add_scalar",
            index: 0,
            value: s,
        });
    }
    Ok(DiffNode::from_parents(
        a.value().map(|v| v + s),
        vec![(a.clone(), Box::new(|g| g.clone()))],
    ))
}

pub fn scale(a: &DiffNode, s: f64) -> Result<DiffNode> {
    if !s.is_finite() {
        return Err(Error::Domain {
            op: "scale",
            index: 0,
            value: s,
        });
    }
    Ok(DiffNode::from_parents(
        a.value().map(|v| v * s),
        vec![(a.clone(), Box::new(move |g| g.map(|v| v * s)))],
    ))
}

pub fn tanh(a: &DiffNode) -> Result<DiffNode> {
    let value = a.value().map(f64::tanh);
    let out = value.clone();
    Ok(DiffNode::from_parents(
        value,
        vec![(
            a.clone(),
            Box::new(move |g| {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &t)| gv * (1.0 - t * t))
                    .collect();
                DenseMatrix::raw(g.rows(), g.cols(), data)
            }),
        )],
    ))
}

pub fn atanh(a: &DiffNode) -> Result<DiffNode> {
    domain_scan("atanh", &a.value(), |v| v.abs() >= 1.0)?;
    let value = a.value().map(f64::atanh);
    let an = a.clone();
    Ok(DiffNode::from_parents(
        value,
        vec![(
            a.clone(),
            Box::new(move |g| {
                let av = an.value();
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gv, &x)| gv / (1.0 - x * x))
                    .collect();
                DenseMatrix::raw(g.rows(), g.cols(), data)
            }),
        )],
    ))
}

pub fn exp(a: &DiffNode) -> Result<DiffNode> {
    // e^710 overflows f64
    domain_scan("exp", &a.value(), |v| v > 709.0)?;
    let value = a.value().map(f64::exp);
    let out = value.clone();
    Ok(DiffNode::from_parents(
        value,
        vec![(
            a.clone(),
            Box::new(move |g| {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &e)| gv * e)
                    .collect();
                DenseMatrix::raw(g.rows(), g.cols(), data)
            }),
        )],
    ))
}

pub fn log(a: &DiffNode) -> Result<DiffNode> {
    domain_scan("log", &a.value(), |v| v <= 0.0)?;
    let value = a.value().map(f64::ln);
    let an = a.clone();
    Ok(DiffNode::from_parents(
        value,
        vec![(
            a.clone(),
            Box::new(move |g| {
                let av = an.value();
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gv, &x)| gv / x)
                    .collect();
                DenseMatrix::raw(g.rows(), g.cols(), data)
            }),
        )],
    ))
}

pub fn sqrt(a: &DiffNode) -> Result<DiffNode> {
    domain_scan("sqrt", &a.value(), |v| v < 0.0)?;
    let value = a.value().map(f64::sqrt);
    let out = value.clone();
    Ok(DiffNode::from_parents(
        value,
        vec![(
            a.clone(),
            Box::new(move |g| {
                // at exactly zero the map is not differentiable, use 0
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &r)| if r == 0.0 { 0.0 } else { gv / (2.0 * r) })
                    .collect();
                DenseMatrix::raw(g.rows(), g.cols(), data)
            }),
        )],
    ))
}

pub fn relu(a: &DiffNode) -> Result<DiffNode> {
    let value = a.value().map(|v| v.max(0.0));
    let an = a.clone();
    Ok(DiffNode::from_parents(
        value,
        vec![(
            a.clone(),
            Box::new(move |g| {
                let av = an.value();
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                DenseMatrix::raw(g.rows(), g.cols(), data)
            }),
        )],
    ))
}

/// Clamp with a straight-through gradient: the forward pass limits the value,
/// the backward pass treats the op as identity. Keeps training stable when
/// values ride the edge of a domain boundary.
pub fn clamp(a: &DiffNode, lo: f64, hi: f64) -> Result<DiffNode> {
    if !(lo <= hi) {
        return Err(Error::Contract(format!("clamp bounds inverted: {lo} > {hi}")));
    }
    Ok(DiffNode::from_parents(
        a.value().map(|v| v.clamp(lo, hi)),
        vec![(a.clone(), Box::new(|g| g.clone()))],
    ))
}

pub fn sum(a: &DiffNode) -> Result<DiffNode> {
    let total: f64 = a.value().data().iter().sum();
    let shape = a.shape();
    Ok(DiffNode::from_parents(
        DenseMatrix::raw(1, 1, vec![total]),
        vec![(
            a.clone(),
            Box::new(move |g| {
                let gv = g.data()[0];
                DenseMatrix::raw(shape.0, shape.1, vec![gv; shape.0 * shape.1])
            }),
        )],
    ))
}

pub fn mean(a: &DiffNode) -> Result<DiffNode> {
    if a.value().is_empty() {
        return Err(Error::Contract("mean of empty matrix".to_string()));
    }
    let n = a.value().len() as f64;
    let total: f64 = a.value().data().iter().sum();
    let shape = a.shape();
    Ok(DiffNode::from_parents(
        DenseMatrix::raw(1, 1, vec![total / n]),
        vec![(
            a.clone(),
            Box::new(move |g| {
                let gv = g.data()[0] / n;
                DenseMatrix::raw(shape.0, shape.1, vec![gv; shape.0 * shape.1])
            }),
        )],
    ))
}

/// Row sums, shape (n, 1).
pub fn rowsum(a: &DiffNode) -> Result<DiffNode> {
    let av = a.value();
    let data = (0..av.rows())
        .map(|i| av.row(i).iter().sum())
        .collect::<Vec<f64>>();
    let (rows, cols) = av.shape();
    drop(av);
    Ok(DiffNode::from_parents(
        DenseMatrix::raw(rows, 1, data),
        vec![(
            a.clone(),
            Box::new(move |g| {
                let mut out = DenseMatrix::zeros(rows, cols);
                for i in 0..rows {
                    let gv = g.get(i, 0);
                    out.row_mut(i).iter_mut().for_each(|o| *o = gv);
                }
                out
            }),
        )],
    ))
}

/// Euclidean norm of each row, shape (n, 1), floored at [`EPS_NORM`] so
/// downstream divisions by the norm stay well defined.
pub fn row_l2norm(a: &DiffNode) -> Result<DiffNode> {
    let av = a.value();
    let norms: Vec<f64> = (0..av.rows())
        .map(|i| {
            av.row(i)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .max(EPS_NORM * EPS_NORM)
                .sqrt()
        })
        .collect();
    let rows = av.rows();
    drop(av);
    let an = a.clone();
    let norms_grad = norms.clone();
    Ok(DiffNode::from_parents(
        DenseMatrix::raw(rows, 1, norms),
        vec![(
            a.clone(),
            Box::new(move |g| {
                let av = an.value();
                let mut out = DenseMatrix::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    let f = g.get(i, 0) / norms_grad[i];
                    for (o, &x) in out.row_mut(i).iter_mut().zip(av.row(i)) {
                        *o = f * x;
                    }
                }
                out
            }),
        )],
    ))
}

/// Multiply row i of `a` by scalar s[i]; `s` must be (n, 1). This is the one
/// explicit row-broadcast in the op set, everything else is scalar-vs-matrix.
pub fn row_scale(a: &DiffNode, s: &DiffNode) -> Result<DiffNode> {
    if s.shape() != (a.rows(), 1) {
        return Err(Error::dim(
            "row_scale",
            format!("scales {:?} for matrix {:?}", s.shape(), a.shape()),
        ));
    }
    let value = {
        let av = a.value();
        let sv = s.value();
        let mut out = av.clone();
        for i in 0..out.rows() {
            let f = sv.get(i, 0);
            out.row_mut(i).iter_mut().for_each(|v| *v *= f);
        }
        out
    };
    let (an, sn) = (a.clone(), s.clone());
    Ok(DiffNode::from_parents(
        value,
        vec![
            (
                a.clone(),
                Box::new(move |g| {
                    let sv = sn.value();
                    let mut out = g.clone();
                    for i in 0..out.rows() {
                        let f = sv.get(i, 0);
                        out.row_mut(i).iter_mut().for_each(|v| *v *= f);
                    }
                    out
                }),
            ),
            (
                s.clone(),
                Box::new(move |g| {
                    let av = an.value();
                    let data = (0..av.rows())
                        .map(|i| {
                            g.row(i)
                                .iter()
                                .zip(av.row(i))
                                .map(|(&gv, &x)| gv * x)
                                .sum()
                        })
                        .collect();
                    DenseMatrix::raw(av.rows(), 1, data)
                }),
            ),
        ],
    ))
}

/// Select rows by index; backward scatter-adds into the source positions.
pub fn gather_rows(a: &DiffNode, idx: &[usize]) -> Result<DiffNode> {
    let av = a.value();
    if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
        return Err(Error::dim(
            "gather_rows",
            format!("row {bad} out of {}", av.rows()),
        ));
    }
    let mut data = Vec::with_capacity(idx.len() * av.cols());
    for &i in idx {
        data.extend_from_slice(av.row(i));
    }
    let (rows, cols) = av.shape();
    drop(av);
    let idx_owned: Vec<usize> = idx.to_vec();
    Ok(DiffNode::from_parents(
        DenseMatrix::raw(idx_owned.len(), cols, data),
        vec![(
            a.clone(),
            Box::new(move |g| {
                let mut out = DenseMatrix::zeros(rows, cols);
                for (k, &i) in idx_owned.iter().enumerate() {
                    for (o, &gv) in out.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += gv;
                    }
                }
                out
            }),
        )],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::gradcheck::check_gradients;

    fn leaf(rows: usize, cols: usize, data: &[f64]) -> DiffNode {
        DiffNode::leaf(
            DenseMatrix::from_vec(rows, cols, data.to_vec()).unwrap(),
            true,
        )
    }

    #[test]
    fn square_sum_hand_gradient() {
        let x = leaf(1, 3, &[1.0, 2.0, 3.0]);
        let y = sum(&mul(&x, &x).unwrap()).unwrap();
        assert_eq!(y.item().unwrap(), 14.0);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn matmul_hand_gradient() {
        // y = sum(A B), dA = ones * B^T, dB = A^T * ones
        let a = leaf(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let y = sum(&matmul(&a, &b).unwrap()).unwrap();
        y.backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad().unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn domain_errors_name_the_entry() {
        let x = leaf(1, 3, &[0.5, 1.0, 0.2]);
        let err = atanh(&x).unwrap_err();
        assert!(err.to_string().contains("entry 1"), "{err}");
        let z = leaf(1, 2, &[1.0, 0.0]);
        assert!(log(&z).is_err());
        assert!(div(&z, &z).is_err());
        let n = leaf(1, 1, &[-0.5]);
        assert!(sqrt(&n).is_err());
    }

    #[test]
    fn clamp_is_straight_through() {
        let x = leaf(1, 2, &[2.0, -0.5]);
        let y = sum(&clamp(&x, -1.0, 1.0).unwrap()).unwrap();
        assert_eq!(y.item().unwrap(), 0.5);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn spmm_gradient_matches_densified_matmul() {
        let adj = Rc::new(
            SparseAdjacency::new(3, vec![(0, 1, 0.5), (1, 0, 0.5), (2, 2, 1.0)]).unwrap(),
        );
        let x = leaf(3, 2, &[0.1, -0.4, 0.7, 0.2, -0.3, 0.9]);
        let y = sum(&spmm(&adj, &x).unwrap()).unwrap();
        y.backward().unwrap();

        let xd = leaf(3, 2, &[0.1, -0.4, 0.7, 0.2, -0.3, 0.9]);
        let dense = DiffNode::constant(adj.densify());
        let yd = sum(&matmul(&dense, &xd).unwrap()).unwrap();
        yd.backward().unwrap();
        assert_eq!(x.grad().unwrap(), xd.grad().unwrap());
    }

    #[test]
    fn gather_scatter_roundtrip_gradient() {
        let x = leaf(4, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let y = sum(&gather_rows(&x, &[2, 0, 2]).unwrap()).unwrap();
        y.backward().unwrap();
        assert_eq!(
            x.grad().unwrap().data(),
            &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]
        );
        assert!(gather_rows(&x, &[4]).is_err());
    }

    #[test]
    fn elementwise_ops_pass_finite_difference() {
        let base = DenseMatrix::from_vec(2, 3, vec![0.3, -0.8, 0.5, 1.4, -0.2, 0.9]).unwrap();
        let builders: Vec<(&str, Box<dyn Fn(&[DiffNode]) -> Result<DiffNode>>)> = vec![
            ("tanh", Box::new(|p: &[DiffNode]| mean(&tanh(&p[0])?))),
            ("relu_shifted", Box::new(|p| mean(&relu(&add_scalar(&p[0], 0.05)?)?))),
            ("exp", Box::new(|p| mean(&exp(&p[0])?))),
            ("sqrt_sq", Box::new(|p| mean(&sqrt(&add_scalar(&mul(&p[0], &p[0])?, 0.1)?)?))),
            ("rowsum", Box::new(|p| mean(&mul(&rowsum(&p[0])?, &rowsum(&p[0])?)?))),
            ("row_l2norm", Box::new(|p| mean(&row_l2norm(&p[0])?))),
        ];
        for (name, build) in builders {
            let report = check_gradients(&[base.clone()], &build, 1e-6).unwrap();
            assert!(
                report.max_rel_err < 1e-6,
                "{name}: rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn binary_ops_pass_finite_difference() {
        let a = DenseMatrix::from_vec(2, 2, vec![0.7, -1.1, 0.4, 1.6]).unwrap();
        let b = DenseMatrix::from_vec(2, 2, vec![1.2, 0.8, -0.6, 2.0]).unwrap();
        let builders: Vec<(&str, Box<dyn Fn(&[DiffNode]) -> Result<DiffNode>>)> = vec![
            ("mul", Box::new(|p: &[DiffNode]| mean(&mul(&p[0], &p[1])?))),
            ("div", Box::new(|p| mean(&div(&p[0], &p[1])?))),
            ("matmul", Box::new(|p| mean(&matmul(&p[0], &p[1])?))),
            ("matmul_nt", Box::new(|p| mean(&matmul_nt(&p[0], &p[1])?))),
            (
                "row_scale",
                Box::new(|p| {
                    let s = rowsum(&p[1])?;
                    mean(&row_scale(&p[0], &s)?)
                }),
            ),
        ];
        for (name, build) in builders {
            let report = check_gradients(&[a.clone(), b.clone()], &build, 1e-6).unwrap();
            assert!(
                report.max_rel_err < 1e-6,
                "{name}: rel err {}",
                report.max_rel_err
            );
        }
    }
}
