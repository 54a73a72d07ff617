//! Python surface over the core library: ball geometry, pooling, kernels,
//! graph statistics, and the experiment runner. Matrices cross the boundary
//! as lists of row lists; experiment configs and reports as JSON strings,
//! mirroring the CLI file formats.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use hypool::data::{GraphBundle, GraphMeta, HierarchyGenSpec};
use hypool::hyperbolic::Curvature;
use hypool::kernels::KernelSpec;
use hypool::ndcore::{DenseMatrix, DiffNode};

fn err(e: hypool::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn curv(c: f64) -> PyResult<Curvature> {
    Curvature::new(c).map_err(err)
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(rows).map_err(err)
}

fn to_rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn kernel_spec(kind: &str, r: Option<f64>) -> PyResult<KernelSpec> {
    let spec = match kind {
        "poly2" => KernelSpec::Poly2,
        "exp_r" => KernelSpec::ExpR { r: r.unwrap_or(1.0) },
        _ => return Err(PyValueError::new_err(format!("unknown kernel {kind:?}"))),
    };
    spec.validate().map_err(err)?;
    Ok(spec)
}

#[pyfunction]
fn mobius_add(a: Vec<f64>, b: Vec<f64>, c: f64) -> PyResult<Vec<f64>> {
    hypool::hyperbolic::mobius_add(&a, &b, curv(c)?).map_err(err)
}

#[pyfunction]
fn hyp_distance(a: Vec<f64>, b: Vec<f64>, c: f64) -> PyResult<f64> {
    hypool::hyperbolic::hyp_distance(&a, &b, curv(c)?).map_err(err)
}

#[pyfunction]
fn exp_map0(x: Vec<f64>, c: f64) -> PyResult<Vec<f64>> {
    Ok(hypool::hyperbolic::exp_map0(&x, curv(c)?))
}

#[pyfunction]
fn log_map0(z: Vec<f64>, c: f64) -> PyResult<Vec<f64>> {
    Ok(hypool::hyperbolic::log_map0(&z, curv(c)?))
}

#[pyfunction]
fn project_to_ball(z: Vec<f64>, c: f64) -> PyResult<Vec<f64>> {
    Ok(hypool::hyperbolic::project_to_ball(&z, curv(c)?))
}

/// Row-wise bilinear expansion: each d-dim row becomes its d*d outer product.
#[pyfunction]
fn full_bp(x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let node = DiffNode::constant(to_matrix(&x)?);
    let out = hypool::pooling::full_bp(&node).map_err(err)?;
    let v = out.value().clone();
    Ok(to_rows(&v))
}

#[pyfunction]
#[pyo3(signature = (x, kind, r=None))]
fn kernel_matrix(x: Vec<Vec<f64>>, kind: &str, r: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
    let m = hypool::kernels::kernel_matrix(&to_matrix(&x)?, kernel_spec(kind, r)?).map_err(err)?;
    Ok(to_rows(&m))
}

/// Four-point hyperbolicity of an undirected edge list.
#[pyfunction]
#[pyo3(signature = (n, edges, sample_nodes=400, quadruples=2000, seed=0))]
fn delta_hyperbolicity(
    n: usize,
    edges: Vec<(usize, usize)>,
    sample_nodes: usize,
    quadruples: usize,
    seed: u64,
) -> PyResult<f64> {
    let bundle = GraphBundle {
        meta: GraphMeta {
            name: "edge-list".to_string(),
            n,
            feature_dim: 1,
            num_classes: 1,
            split: "none".to_string(),
        },
        features: DenseMatrix::zeros(n.max(1), 1),
        edges,
        labels: vec![0; n],
        train_mask: vec![false; n],
        val_mask: vec![false; n],
        test_mask: vec![false; n],
    };
    hypool::data::gromov_delta(&bundle, sample_nodes, quadruples, seed).map_err(err)
}

#[pyfunction]
fn nmi(a: Vec<i64>, b: Vec<i64>) -> PyResult<f64> {
    hypool::objectives::nmi(&a, &b).map_err(err)
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    hypool::objectives::auroc(&scores, &labels).map_err(err)
}

#[pyfunction]
fn accuracy(pred: Vec<i64>, truth: Vec<i64>, mask: Vec<bool>) -> PyResult<f64> {
    hypool::objectives::accuracy(&pred, &truth, &mask).map_err(err)
}

#[pyfunction]
fn kmeans(emb: Vec<Vec<f64>>, k: usize, seed: u64) -> PyResult<Vec<usize>> {
    hypool::objectives::kmeans_cluster(&to_matrix(&emb)?, k, seed).map_err(err)
}

/// Generate a hierarchy bundle and write it under `out_dir`. `spec_json`
/// mirrors the CLI generator spec; omit for the defaults. Returns
/// (nodes, edges, classes).
#[pyfunction]
#[pyo3(signature = (out_dir, spec_json=None))]
fn gen_hierarchy(out_dir: &str, spec_json: Option<&str>) -> PyResult<(usize, usize, usize)> {
    let spec: HierarchyGenSpec = match spec_json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => HierarchyGenSpec::default(),
    };
    let bundle = hypool::data::generate_hierarchy(&spec).map_err(err)?;
    hypool::data::save_bundle(&bundle, std::path::Path::new(out_dir)).map_err(err)?;
    Ok((bundle.meta.n, bundle.edges.len(), bundle.meta.num_classes))
}

/// Run a training experiment from the same JSON config the CLI accepts.
/// Returns the full report as a JSON string.
#[pyfunction]
fn run_experiment(config_json: &str) -> PyResult<String> {
    let cfg: hypool::cli::ExperimentConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let report = hypool::cli::run_experiment(&cfg).map_err(err)?;
    serde_json::to_string_pretty(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Run the numerical audit suite into `out_dir`; returns the number of
/// failed records (several claims fail by measurement, so nonzero is normal).
#[pyfunction]
#[pyo3(signature = (out_dir, only=vec![]))]
fn verify(out_dir: &str, only: Vec<String>) -> PyResult<usize> {
    let summary =
        hypool::verify::run_verify_selected(std::path::Path::new(out_dir), &only).map_err(err)?;
    Ok(summary.failed)
}

#[pymodule]
pub fn hypool_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(mobius_add, m)?)?;
    m.add_function(wrap_pyfunction!(hyp_distance, m)?)?;
    m.add_function(wrap_pyfunction!(exp_map0, m)?)?;
    m.add_function(wrap_pyfunction!(log_map0, m)?)?;
    m.add_function(wrap_pyfunction!(project_to_ball, m)?)?;
    m.add_function(wrap_pyfunction!(full_bp, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(delta_hyperbolicity, m)?)?;
    m.add_function(wrap_pyfunction!(nmi, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(gen_hierarchy, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_conversion_round_trips() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let m = to_matrix(&rows).unwrap();
        assert_eq!(to_rows(&m), rows);
    }

    #[test]
    fn kernel_spec_strings() {
        assert!(kernel_spec("poly2", None).is_ok());
        assert!(kernel_spec("exp_r", Some(2.0)).is_ok());
        assert!(kernel_spec("exp_r", Some(-1.0)).is_err());
        assert!(kernel_spec("rbf", None).is_err());
    }
}
