//! Unstructured triangle meshes, boundary-preserving decimation, and the
//! two-level multiscale graph (o2o, o2r, r2r, r2o edge sets).

mod decimate;
mod delaunay;
mod generate;
mod locate;
mod multiscale;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use decimate::{decimate, Decimation};
pub use generate::{grid_with_hole, synthetic_suite, Obstacle, SyntheticMeshSpec};
pub use locate::TriangleLocator;
pub use multiscale::{build_multiscale, EdgeSet, MultiscaleGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    Fluid,
    Wall,
    #[serde(rename = "farfield")]
    FarField,
}

impl NodeType {
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            NodeType::Fluid => [1.0, 0.0, 0.0],
            NodeType::Wall => [0.0, 1.0, 0.0],
            NodeType::FarField => [0.0, 0.0, 1.0],
        }
    }

    pub fn is_boundary(self) -> bool {
        !matches!(self, NodeType::Fluid)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("mesh parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{coords} coordinates but {types} node types")]
    LengthMismatch { coords: usize, types: usize },
    #[error("mesh has no triangles")]
    Empty,
    #[error("triangle {index}: {reason}")]
    InvalidTriangle { index: usize, reason: String },
    #[error("triangle {index} duplicates triangle {first}")]
    DuplicateTriangle { index: usize, first: usize },
    #[error("node {0} is not referenced by any triangle")]
    UnreferencedNode(usize),
    #[error("edge ({a}, {b}) is shared by {count} triangles (non-manifold)")]
    NonManifoldEdge { a: usize, b: usize, count: usize },
    #[error("triangles {first} and {second} overlap along edge ({a}, {b}) (inconsistent orientation)")]
    Orientation { first: usize, second: usize, a: usize, b: usize },
    #[error("node {node} is typed {tag:?} but does not lie on a boundary edge")]
    BoundaryType { node: usize, tag: NodeType },
    #[error("invalid hierarchy: {0}")]
    Hierarchy(String),
    #[error("mesh generation failed: {0}")]
    Generation(String),
}

#[derive(Serialize, Deserialize)]
struct MeshFile {
    coords: Vec<[f64; 2]>,
    node_types: Vec<NodeType>,
    triangles: Vec<[usize; 3]>,
}

/// Validated 2D triangle mesh with counter-clockwise triangles.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    coords: Vec<[f64; 2]>,
    node_types: Vec<NodeType>,
    triangles: Vec<[usize; 3]>,
}

impl Mesh {
    /// Validates the triangulation and flips clockwise triangles.
    pub fn new(coords: Vec<[f64; 2]>, node_types: Vec<NodeType>, mut triangles: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let n = coords.len();
        if node_types.len() != n {
            return Err(MeshError::LengthMismatch { coords: n, types: node_types.len() });
        }
        if triangles.is_empty() {
            return Err(MeshError::Empty);
        }
        if let Some(i) = coords.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(MeshError::InvalidTriangle { index: 0, reason: format!("node {i} has non-finite coordinates") });
        }

        let mut seen: HashMap<[usize; 3], usize> = HashMap::with_capacity(triangles.len());
        let mut referenced = vec![false; n];
        for (t, tri) in triangles.iter_mut().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&v| v >= n) {
                return Err(MeshError::InvalidTriangle { index: t, reason: format!("node index {bad} out of range (n = {n})") });
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(MeshError::InvalidTriangle { index: t, reason: "repeated vertex".into() });
            }
            let area = signed_area(coords[tri[0]], coords[tri[1]], coords[tri[2]]);
            if area == 0.0 {
                return Err(MeshError::InvalidTriangle { index: t, reason: "zero area".into() });
            }
            if area < 0.0 {
                tri.swap(1, 2);
            }
            let mut key = *tri;
            key.sort_unstable();
            if let Some(&first) = seen.get(&key) {
                return Err(MeshError::DuplicateTriangle { index: t, first });
            }
            seen.insert(key, t);
            for &v in tri.iter() {
                referenced[v] = true;
            }
        }
        if let Some(i) = referenced.iter().position(|r| !r) {
            return Err(MeshError::UnreferencedNode(i));
        }

        // Directed half-edges must be unique once every triangle is CCW;
        // an undirected edge may carry at most two triangles.
        let mut half: HashMap<(usize, usize), usize> = HashMap::with_capacity(3 * triangles.len());
        let mut count: HashMap<(usize, usize), usize> = HashMap::with_capacity(3 * triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                if let Some(&first) = half.get(&(a, b)) {
                    return Err(MeshError::Orientation { first, second: t, a, b });
                }
                half.insert((a, b), t);
                let c = count.entry((a.min(b), a.max(b))).or_insert(0);
                *c += 1;
                if *c > 2 {
                    return Err(MeshError::NonManifoldEdge { a: a.min(b), b: a.max(b), count: *c });
                }
            }
        }
        let mut on_boundary = vec![false; n];
        for (&(a, b), &c) in &count {
            if c == 1 {
                on_boundary[a] = true;
                on_boundary[b] = true;
            }
        }
        for (i, &tag) in node_types.iter().enumerate() {
            if tag.is_boundary() && !on_boundary[i] {
                return Err(MeshError::BoundaryType { node: i, tag });
            }
        }

        Ok(Self { coords, node_types, triangles })
    }

    pub fn from_json(text: &str) -> Result<Self, MeshError> {
        let f: MeshFile = serde_json::from_str(text)?;
        Self::new(f.coords, f.node_types, f.triangles)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&MeshFile {
            coords: self.coords.clone(),
            node_types: self.node_types.clone(),
            triangles: self.triangles.clone(),
        })
        .expect("mesh serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MeshError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MeshError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn node_types(&self) -> &[NodeType] {
        &self.node_types
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn fluid_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&i| self.node_types[i] == NodeType::Fluid).collect()
    }

    /// Undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|t| (0..3).map(move |k| (t[k].min(t[(k + 1) % 3]), t[k].max(t[(k + 1) % 3]))))
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    /// Sorted neighbour lists.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes()];
        for (a, b) in self.edges() {
            adj[a].push(b);
            adj[b].push(a);
        }
        for l in &mut adj {
            l.sort_unstable();
        }
        adj
    }

    /// Boundary loops as ordered vertex cycles, each rotated to start at its
    /// smallest index. The domain lies to the left of every directed edge.
    pub fn boundary_loops(&self) -> Vec<Vec<usize>> {
        let mut half = std::collections::HashSet::with_capacity(3 * self.triangles.len());
        for t in &self.triangles {
            for k in 0..3 {
                half.insert((t[k], t[(k + 1) % 3]));
            }
        }
        let mut next: HashMap<usize, usize> = HashMap::new();
        for &(a, b) in &half {
            if !half.contains(&(b, a)) {
                next.insert(a, b);
            }
        }
        let mut starts: Vec<usize> = next.keys().copied().collect();
        starts.sort_unstable();
        let mut visited = std::collections::HashSet::new();
        let mut loops = Vec::new();
        for s in starts {
            if visited.contains(&s) {
                continue;
            }
            let mut cycle = vec![s];
            visited.insert(s);
            let mut cur = next[&s];
            while cur != s {
                if !visited.insert(cur) {
                    break;
                }
                cycle.push(cur);
                match next.get(&cur) {
                    Some(&n) => cur = n,
                    None => break,
                }
            }
            loops.push(cycle);
        }
        loops
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        signed_area(self.coords[a], self.coords[b], self.coords[c])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_triangles()).map(|t| self.triangle_area(t)).sum()
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bbox(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.coords {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// Node positions mapped affinely into `[-1, 1]^2` (uniform scale, so
    /// aspect ratio is kept) and the scale factor used.
    pub fn normalized_coords(&self) -> (Vec<[f64; 2]>, f64) {
        let (lo, hi) = self.bbox();
        let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
        let half = ((hi[0] - lo[0]).max(hi[1] - lo[1]) / 2.0).max(f64::MIN_POSITIVE);
        let scale = 1.0 / half;
        let pts = self
            .coords
            .iter()
            .map(|p| [(p[0] - center[0]) * scale, (p[1] - center[1]) * scale])
            .collect();
        (pts, scale)
    }

    /// Same mesh with node ids relabelled: new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, MeshError> {
        let mut inv = vec![usize::MAX; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let coords = perm.iter().map(|&o| self.coords[o]).collect();
        let types = perm.iter().map(|&o| self.node_types[o]).collect();
        let tris = self.triangles.iter().map(|t| [inv[t[0]], inv[t[1]], inv[t[2]]]).collect();
        Self::new(coords, types, tris)
    }
}

/// Twice-halved cross product: positive for counter-clockwise `(a, b, c)`.
pub fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}
