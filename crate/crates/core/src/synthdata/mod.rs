//! Synthetic steady flow data: potential flow around obstacles solved with
//! P1 finite elements, plus dataset assembly, normalization and file I/O.

mod fem;

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::mesh::{Mesh, MeshError, MultiscaleGraph, TriangleLocator};

pub use fem::{recover_gradient, solve_potential_flow};

pub const FIELD_MAGIC: &[u8; 8] = b"GNDAFLD1";

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("conjugate gradients did not converge after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("mesh has no far-field nodes to carry the inflow condition")]
    NoFarField,
    #[error("mesh `{mesh}`, angle {phi}: {source}")]
    Solve {
        mesh: String,
        phi: f64,
        #[source]
        source: Box<SynthError>,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("bad field file: {0}")]
    Format(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-node velocity for one wind direction on one mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub u: Vec<[f64; 2]>,
    /// Wind direction in degrees.
    pub phi_dir: f64,
    pub mesh_id: String,
}

impl FlowField {
    pub fn zeros(n: usize, phi_dir: f64) -> Self {
        Self { u: vec![[0.0; 2]; n], phi_dir, mesh_id: String::new() }
    }

    pub fn n_nodes(&self) -> usize {
        self.u.len()
    }

    pub fn max_speed(&self) -> f64 {
        self.u.iter().map(|v| v[0].hypot(v[1])).fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { u: self.u.iter().map(|v| [v[0] * s, v[1] * s]).collect(), ..self.clone() }
    }

    /// Interleaved `[ux0, uy0, ux1, uy1, ...]`.
    pub fn flat(&self) -> Vec<f64> {
        self.u.iter().flat_map(|v| *v).collect()
    }

    pub fn from_flat(data: &[f64], phi_dir: f64) -> Self {
        Self { u: data.chunks_exact(2).map(|c| [c[0], c[1]]).collect(), phi_dir, mesh_id: String::new() }
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().all(|v| v[0].is_finite() && v[1].is_finite())
    }

    /// `GNDAFLD1`, node count (u64), angle (f64), then per node Ux, Uy (f64),
    /// all little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(24 + 16 * self.u.len());
        buf.extend_from_slice(FIELD_MAGIC);
        buf.extend_from_slice(&(self.u.len() as u64).to_le_bytes());
        buf.extend_from_slice(&self.phi_dir.to_le_bytes());
        for v in &self.u {
            buf.extend_from_slice(&v[0].to_le_bytes());
            buf.extend_from_slice(&v[1].to_le_bytes());
        }
        w.write_all(&buf)?;
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, SynthError> {
        let mut head = [0u8; 24];
        r.read_exact(&mut head)?;
        if &head[..8] != FIELD_MAGIC {
            return Err(SynthError::Format("bad magic".into()));
        }
        let n = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")) as usize;
        let phi_dir = f64::from_le_bytes(head[16..24].try_into().expect("8 bytes"));
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != 16 * n {
            return Err(SynthError::Format(format!("expected {} data bytes for {n} nodes, found {}", 16 * n, body.len())));
        }
        let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Self::from_flat(&vals, phi_dir))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SynthError> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Linear interpolation of a field from `src` onto the nodes of `dst`. Nodes
/// of `dst` outside `src` (e.g. inside one of its obstacles) take the value
/// of the nearest `src` node.
pub fn transfer_field(src: &Mesh, field: &FlowField, dst: &Mesh) -> FlowField {
    let loc = TriangleLocator::new(src);
    let u = dst
        .coords()
        .iter()
        .map(|&p| match loc.locate(p) {
            Some((t, w)) => {
                let tri = src.triangles()[t];
                let mut v = [0.0; 2];
                for k in 0..3 {
                    v[0] += w[k] * field.u[tri[k]][0];
                    v[1] += w[k] * field.u[tri[k]][1];
                }
                v
            }
            None => {
                let near = (0..src.n_nodes())
                    .min_by(|&a, &b| {
                        let da = (src.coords()[a][0] - p[0]).hypot(src.coords()[a][1] - p[1]);
                        let db = (src.coords()[b][0] - p[0]).hypot(src.coords()[b][1] - p[1]);
                        da.total_cmp(&db)
                    })
                    .expect("source mesh has nodes");
                field.u[near]
            }
        })
        .collect();
    FlowField { u, phi_dir: field.phi_dir, mesh_id: field.mesh_id.clone() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct DatasetMesh {
    pub id: String,
    pub graph: MultiscaleGraph,
    pub split: Split,
}

/// Fields for every (mesh, angle) pair, stored divided by `scale`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub meshes: Vec<DatasetMesh>,
    pub angles: Vec<f64>,
    /// `fields[mesh][angle]`, normalized.
    pub fields: Vec<Vec<FlowField>>,
    pub u_ref: f64,
    /// Max node speed over the training meshes (m/s).
    pub scale: f64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    u_ref: f64,
    scale: f64,
    angles: Vec<f64>,
    meshes: Vec<ManifestMesh>,
}

#[derive(Serialize, Deserialize)]
struct ManifestMesh {
    id: String,
    split: Split,
    mesh_file: String,
    graph_file: String,
    field_files: Vec<String>,
}

pub fn generate_dataset(meshes: Vec<DatasetMesh>, angles: &[f64], u_ref: f64) -> Result<Dataset, SynthError> {
    if meshes.is_empty() {
        return Err(SynthError::Invalid("no meshes".into()));
    }
    for (i, a) in angles.iter().enumerate() {
        if angles[..i].contains(a) {
            return Err(SynthError::Invalid(format!("angle {a} listed twice")));
        }
    }
    if !meshes.iter().any(|m| m.split == Split::Train) {
        return Err(SynthError::Invalid("no training mesh to set the velocity scale".into()));
    }
    let mut fields = Vec::with_capacity(meshes.len());
    for m in &meshes {
        let mut per = Vec::with_capacity(angles.len());
        for &phi in angles {
            let mut f = solve_potential_flow(&m.graph.fine, phi, u_ref)
                .map_err(|e| SynthError::Solve { mesh: m.id.clone(), phi, source: Box::new(e) })?;
            f.mesh_id = m.id.clone();
            per.push(f);
        }
        fields.push(per);
    }
    let scale = meshes
        .iter()
        .zip(&fields)
        .filter(|(m, _)| m.split == Split::Train)
        .flat_map(|(_, f)| f.iter().map(FlowField::max_speed))
        .fold(0.0, f64::max);
    if !(scale > 0.0) {
        return Err(SynthError::Invalid("training fields are identically zero".into()));
    }
    let fields = fields.into_iter().map(|per| per.iter().map(|f| f.scaled(1.0 / scale)).collect()).collect();
    Ok(Dataset { meshes, angles: angles.to_vec(), fields, u_ref, scale })
}

impl Dataset {
    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.meshes.len()).filter(|&i| self.meshes[i].split == Split::Train).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.meshes.len()).filter(|&i| self.meshes[i].split == Split::Test).collect()
    }

    pub fn mesh_index(&self, id: &str) -> Option<usize> {
        self.meshes.iter().position(|m| m.id == id)
    }

    pub fn angle_index(&self, phi: f64) -> Option<usize> {
        self.angles.iter().position(|&a| a == phi)
    }

    /// Writes meshes, hierarchy files and fields (in m/s) under `dir` and
    /// returns the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf, SynthError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (m, per) in self.meshes.iter().zip(&self.fields) {
            let mesh_file = format!("{}.mesh.json", m.id);
            let graph_file = format!("{}.graph.json", m.id);
            m.graph.fine.save(dir.join(&mesh_file))?;
            std::fs::write(dir.join(&graph_file), m.graph.to_json())?;
            let mut field_files = Vec::new();
            for f in per {
                let name = format!("{}_phi{:06.2}.fld", m.id, f.phi_dir);
                f.scaled(self.scale).save(dir.join(&name))?;
                field_files.push(name);
            }
            entries.push(ManifestMesh { id: m.id.clone(), split: m.split, mesh_file, graph_file, field_files });
        }
        let manifest = Manifest { u_ref: self.u_ref, scale: self.scale, angles: self.angles.clone(), meshes: entries };
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let path = manifest_path.as_ref();
        let dir = path.parent().unwrap_or(Path::new("."));
        let man: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if !(man.scale > 0.0) {
            return Err(SynthError::Invalid(format!("scale {} must be positive", man.scale)));
        }
        let mut meshes = Vec::new();
        let mut fields = Vec::new();
        for e in man.meshes {
            let fine = Mesh::load(dir.join(&e.mesh_file))?;
            let graph = MultiscaleGraph::from_json(fine, &std::fs::read_to_string(dir.join(&e.graph_file))?)?;
            if e.field_files.len() != man.angles.len() {
                return Err(SynthError::Invalid(format!("mesh `{}` lists {} fields for {} angles", e.id, e.field_files.len(), man.angles.len())));
            }
            let mut per = Vec::new();
            for (name, &phi) in e.field_files.iter().zip(&man.angles) {
                let mut f = FlowField::load(dir.join(name))?;
                if f.n_nodes() != graph.n_fine() || f.phi_dir != phi {
                    return Err(SynthError::Invalid(format!("field `{name}` does not match its mesh or angle")));
                }
                f = f.scaled(1.0 / man.scale);
                f.mesh_id = e.id.clone();
                per.push(f);
            }
            meshes.push(DatasetMesh { id: e.id, graph, split: e.split });
            fields.push(per);
        }
        Ok(Dataset { meshes, angles: man.angles, fields, u_ref: man.u_ref, scale: man.scale })
    }
}
