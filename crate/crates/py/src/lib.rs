//! Python bindings: meshes, synthetic flows, metrics, the SVD baseline and
//! guided sampling from a trained checkpoint.
//!
//! Velocity fields cross the boundary as lists of `(ux, uy)` pairs, one per
//! mesh node.

use std::fs::File;
use std::io::BufReader;

use genda::ad::read_checkpoint;
use genda::baseline_lcsvd::{RankRule, SvdBasis};
use genda::diffusion::{assimilate, SamplerConfig};
use genda::gnn::{Denoiser, DenoiserConfig, GraphTensors};
use genda::mesh::{decimate, synthetic_suite, MultiscaleGraph, NodeType};
use genda::metrics::{self, Quantity, RasterMap, MAC_EPS, RASTER_RES};
use genda::sensors::{SensorSet, Strategy};
use genda::synthdata::{solve_potential_flow, FlowField};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(genda_py, GendaError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    GendaError::new_err(e.to_string())
}

fn field(u: Vec<[f64; 2]>) -> FlowField {
    FlowField { u, phi_dir: 0.0, mesh_id: String::new() }
}

fn pairs(f: &FlowField) -> Vec<(f64, f64)> {
    f.u.iter().map(|v| (v[0], v[1])).collect()
}

fn same_len(a: &[[f64; 2]], n: usize, what: &str) -> PyResult<()> {
    if a.len() != n {
        return Err(err(format!("{what} has {} nodes, mesh has {n}", a.len())));
    }
    Ok(())
}

/// Sensor set at `indices` holding `values` (one pair per index).
fn sensor_set(mesh: &genda::mesh::Mesh, indices: Vec<usize>, values: Vec<[f64; 2]>) -> PyResult<SensorSet> {
    if indices.len() != values.len() {
        return Err(err(format!("{} indices but {} values", indices.len(), values.len())));
    }
    let mut s = SensorSet::new(mesh, indices.clone(), Strategy::Random).map_err(err)?;
    for (i, v) in indices.into_iter().zip(values) {
        s.y[i] = v;
    }
    Ok(s)
}

/// Triangle mesh with node types `fluid`, `wall` or `farfield`.
#[pyclass(module = "genda_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Mesh {
    inner: genda::mesh::Mesh,
}

#[pymethods]
impl Mesh {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: genda::mesh::Mesh::load(path).map_err(err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: genda::mesh::Mesh::from_json(text).map_err(err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.n_nodes()
    }

    #[getter]
    fn n_triangles(&self) -> usize {
        self.inner.n_triangles()
    }

    #[getter]
    fn coords(&self) -> Vec<(f64, f64)> {
        self.inner.coords().iter().map(|p| (p[0], p[1])).collect()
    }

    #[getter]
    fn triangles(&self) -> Vec<[usize; 3]> {
        self.inner.triangles().to_vec()
    }

    #[getter]
    fn node_types(&self) -> Vec<&'static str> {
        self.inner
            .node_types()
            .iter()
            .map(|t| match t {
                NodeType::Fluid => "fluid",
                NodeType::Wall => "wall",
                NodeType::FarField => "farfield",
            })
            .collect()
    }

    fn fluid_nodes(&self) -> Vec<usize> {
        self.inner.fluid_nodes()
    }

    /// Coarse mesh and the fine indices it keeps.
    #[pyo3(signature = (ratio = 5.0))]
    fn decimate<'py>(&self, py: Python<'py>, ratio: f64) -> PyResult<Bound<'py, PyDict>> {
        let d = decimate(&self.inner, ratio).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("retained", d.retained)?;
        out.set_item("feasible", d.feasible)?;
        out.set_item("coarse", Mesh { inner: d.coarse })?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!("Mesh(nodes={}, triangles={})", self.inner.n_nodes(), self.inner.n_triangles())
    }
}

/// `count` seeded channel meshes with circular obstacles.
#[pyfunction]
#[pyo3(signature = (count, nx = 45, seed = 0))]
fn synthetic_meshes(count: usize, nx: usize, seed: u64) -> PyResult<Vec<Mesh>> {
    Ok(synthetic_suite(count, nx, seed).map_err(err)?.into_iter().map(|(_, inner)| Mesh { inner }).collect())
}

/// Inviscid flow past the mesh walls for inflow angle `phi` in degrees.
#[pyfunction]
#[pyo3(signature = (mesh, phi, u_ref = 1.0))]
fn potential_flow(mesh: &Mesh, phi: f64, u_ref: f64) -> PyResult<Vec<(f64, f64)>> {
    Ok(pairs(&solve_potential_flow(&mesh.inner, phi, u_ref).map_err(err)?))
}

#[pyfunction]
fn rrmse(pred: Vec<[f64; 2]>, truth: Vec<[f64; 2]>) -> PyResult<f64> {
    metrics::rrmse(&field(pred), &field(truth), Quantity::U).map_err(err)
}

#[pyfunction]
fn mac(pred: Vec<[f64; 2]>, truth: Vec<[f64; 2]>) -> PyResult<f64> {
    metrics::mac(&field(pred), &field(truth), MAC_EPS).map_err(err)
}

/// Every field metric, with SSIM on the rasterized speed.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, pred: Vec<[f64; 2]>, truth: Vec<[f64; 2]>, mesh: &Mesh) -> PyResult<Bound<'py, PyDict>> {
    let m = &mesh.inner;
    same_len(&pred, m.n_nodes(), "pred")?;
    same_len(&truth, m.n_nodes(), "truth")?;
    let map = RasterMap::new(m, RASTER_RES);
    let r = metrics::evaluate(&field(pred), &field(truth), m, &map).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("rrmse_u", r.rrmse_u)?;
    out.set_item("rrmse_ux", r.rrmse_ux)?;
    out.set_item("rrmse_uy", r.rrmse_uy)?;
    out.set_item("rrmse_mag", r.rrmse_mag)?;
    out.set_item("mac", r.mac)?;
    out.set_item("ssim", r.ssim)?;
    Ok(out)
}

/// Truncated SVD basis with least-squares reconstruction from sensors.
#[pyclass(module = "genda_py", frozen)]
struct Lcsvd {
    inner: SvdBasis,
}

#[pymethods]
impl Lcsvd {
    /// Fits on snapshot fields; `energy=None` keeps every mode.
    #[staticmethod]
    #[pyo3(signature = (snapshots, energy = Some(0.99)))]
    fn fit(snapshots: Vec<Vec<[f64; 2]>>, energy: Option<f64>) -> PyResult<Self> {
        let fields: Vec<FlowField> = snapshots.into_iter().map(field).collect();
        let rule = energy.map_or(RankRule::Full, RankRule::Energy);
        Ok(Self { inner: SvdBasis::fit(&fields, rule).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: SvdBasis::load(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    #[getter]
    fn singular_values(&self) -> Vec<f64> {
        self.inner.singular_values.clone()
    }

    fn reconstruct(&self, mesh: &Mesh, indices: Vec<usize>, values: Vec<[f64; 2]>) -> PyResult<Vec<(f64, f64)>> {
        let s = sensor_set(&mesh.inner, indices, values)?;
        Ok(pairs(&self.inner.reconstruct(&s).map_err(err)?.field))
    }
}

/// Trained denoiser bound to one mesh hierarchy.
#[pyclass(module = "genda_py", frozen)]
struct Model {
    net: Denoiser,
    mesh: genda::mesh::Mesh,
    graph: GraphTensors,
}

#[pymethods]
impl Model {
    /// Loads a checkpoint; `config` is the JSON `model` block it was
    /// trained with (defaults when omitted).
    #[staticmethod]
    #[pyo3(signature = (checkpoint, mesh, config = None, ratio = 5.0))]
    fn load(checkpoint: &str, mesh: &Mesh, config: Option<&str>, ratio: f64) -> PyResult<Self> {
        let cfg: DenoiserConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(err)?,
            None => DenoiserConfig::default(),
        };
        let f = File::open(checkpoint).map_err(|e| err(format!("{checkpoint}: {e}")))?;
        let net = Denoiser::from_store(cfg, read_checkpoint(BufReader::new(f)).map_err(err)?).map_err(err)?;
        let graph = MultiscaleGraph::from_mesh(mesh.inner.clone(), ratio).map_err(err)?;
        Ok(Self { net, mesh: mesh.inner.clone(), graph: GraphTensors::new(&graph) })
    }

    /// Guided reconstruction from `values` at fluid nodes `indices`, in the
    /// model's normalized units. Returns the ensemble mean and per-node
    /// standard deviation.
    #[pyo3(signature = (phi, indices, values, gamma = 2.0, steps = 20, ensemble = 1, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn assimilate(
        &self,
        py: Python<'_>,
        phi: f64,
        indices: Vec<usize>,
        values: Vec<[f64; 2]>,
        gamma: f64,
        steps: usize,
        ensemble: usize,
        seed: u64,
    ) -> PyResult<(Vec<(f64, f64)>, Vec<(f64, f64)>)> {
        let s = sensor_set(&self.mesh, indices, values)?;
        let cfg = SamplerConfig { steps, gamma_cfg: gamma, seed, ..SamplerConfig::default() };
        let e = py.detach(|| assimilate(&self.net, &self.graph, phi, &s, &cfg, ensemble)).map_err(err)?;
        Ok((pairs(&e.mean), e.std.iter().map(|v| (v[0], v[1])).collect()))
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        self.net.store.numel()
    }
}

#[pymodule]
fn genda_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GendaError", m.py().get_type::<GendaError>())?;
    m.add_class::<Mesh>()?;
    m.add_class::<Lcsvd>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synthetic_meshes, m)?)?;
    m.add_function(wrap_pyfunction!(potential_flow, m)?)?;
    m.add_function(wrap_pyfunction!(rrmse, m)?)?;
    m.add_function(wrap_pyfunction!(mac, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
