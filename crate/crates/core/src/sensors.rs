//! Sparse observation sets and the three sampling strategies.

use std::collections::VecDeque;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::mesh::{Mesh, NodeType};
use crate::synthdata::FlowField;

/// Default k-hop radius of a cloud cluster.
pub const CLOUD_HOPS: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum SensorError {
    #[error("requested {requested} sensors but only {available} fluid nodes exist")]
    TooMany { requested: usize, available: usize },
    #[error("at least {0} sensors are required")]
    TooFew(usize),
    #[error("mesh has no fluid nodes")]
    NoFluid,
    #[error("sensor index {index} is not a fluid node of a {n}-node mesh")]
    InvalidIndex { index: usize, n: usize },
    #[error("field has {field} nodes, sensor set expects {mask}")]
    MeshMismatch { field: usize, mask: usize },
    #[error("unknown strategy `{0}` (expected random, cloud or trajectory)")]
    UnknownStrategy(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Cloud,
    Trajectory,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::Cloud, Strategy::Trajectory];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Cloud => "cloud",
            Strategy::Trajectory => "trajectory",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = SensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Strategy::Random),
            "cloud" => Ok(Strategy::Cloud),
            "trajectory" => Ok(Strategy::Trajectory),
            other => Err(SensorError::UnknownStrategy(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorSet {
    /// Observed node ids, ascending.
    pub indices: Vec<usize>,
    /// 1.0 at observed nodes, else 0.0.
    pub m: Vec<f64>,
    /// Observed velocity, zero where `m == 0`.
    pub y: Vec<[f64; 2]>,
    pub strategy: Strategy,
    pub noise_std: f64,
}

#[derive(Serialize, Deserialize)]
struct SensorFile {
    strategy: Strategy,
    indices: Vec<usize>,
    noise_std: f64,
    n_nodes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<Vec<[f64; 2]>>,
}

impl SensorSet {
    /// Validates that every index is a distinct fluid node of `mesh`.
    pub fn new(mesh: &Mesh, mut indices: Vec<usize>, strategy: Strategy) -> Result<Self, SensorError> {
        let n = mesh.n_nodes();
        indices.sort_unstable();
        indices.dedup();
        let mut m = vec![0.0; n];
        for &i in &indices {
            if i >= n || mesh.node_types()[i] != NodeType::Fluid {
                return Err(SensorError::InvalidIndex { index: i, n });
            }
            m[i] = 1.0;
        }
        Ok(Self { indices, m, y: vec![[0.0; 2]; n], strategy, noise_std: 0.0 })
    }

    pub fn n_nodes(&self) -> usize {
        self.m.len()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    /// Observed values at sensor nodes in `indices` order.
    pub fn values(&self) -> Vec<[f64; 2]> {
        self.indices.iter().map(|&i| self.y[i]).collect()
    }

    pub fn to_json(&self, include_y: bool) -> String {
        serde_json::to_string(&SensorFile {
            strategy: self.strategy,
            indices: self.indices.clone(),
            noise_std: self.noise_std,
            n_nodes: self.n_nodes(),
            y: include_y.then(|| self.values()),
        })
        .expect("sensor set serializes")
    }

    pub fn from_json(mesh: &Mesh, text: &str) -> Result<Self, SensorError> {
        let f: SensorFile = serde_json::from_str(text)?;
        if f.n_nodes != mesh.n_nodes() {
            return Err(SensorError::MeshMismatch { field: mesh.n_nodes(), mask: f.n_nodes });
        }
        let mut s = Self::new(mesh, f.indices, f.strategy)?.with_noise(f.noise_std);
        if let Some(y) = f.y {
            if y.len() != s.len() {
                return Err(SensorError::MeshMismatch { field: y.len(), mask: s.len() });
            }
            for (&i, v) in s.indices.iter().zip(y) {
                s.y[i] = v;
            }
        }
        Ok(s)
    }
}

fn fluid_adjacency(mesh: &Mesh) -> Vec<Vec<usize>> {
    let types = mesh.node_types();
    let mut adj = mesh.adjacency();
    for (i, nb) in adj.iter_mut().enumerate() {
        if types[i] != NodeType::Fluid {
            nb.clear();
        } else {
            nb.retain(|&j| types[j] == NodeType::Fluid);
        }
    }
    adj
}

/// `n` distinct fluid nodes, uniformly without replacement.
pub fn sample_random<R: Rng + ?Sized>(mesh: &Mesh, n: usize, rng: &mut R) -> Result<SensorSet, SensorError> {
    let fluid = mesh.fluid_nodes();
    if n == 0 {
        return Err(SensorError::TooFew(1));
    }
    if n > fluid.len() {
        return Err(SensorError::TooMany { requested: n, available: fluid.len() });
    }
    let picked = sample(rng, fluid.len(), n).into_iter().map(|k| fluid[k]).collect();
    SensorSet::new(mesh, picked, Strategy::Random)
}

/// Union of the fluid-graph `k_hops` neighbourhoods of `n_seeds` uniformly
/// drawn fluid seeds.
pub fn sample_cloud<R: Rng + ?Sized>(mesh: &Mesh, n_seeds: usize, k_hops: usize, rng: &mut R) -> Result<SensorSet, SensorError> {
    let fluid = mesh.fluid_nodes();
    if n_seeds == 0 {
        return Err(SensorError::TooFew(1));
    }
    if n_seeds > fluid.len() {
        return Err(SensorError::TooMany { requested: n_seeds, available: fluid.len() });
    }
    let seeds: Vec<usize> = sample(rng, fluid.len(), n_seeds).into_iter().map(|k| fluid[k]).collect();
    let hops = multi_source_hops(&fluid_adjacency(mesh), &seeds, k_hops);
    let picked = (0..mesh.n_nodes()).filter(|&i| hops[i] != usize::MAX).collect();
    SensorSet::new(mesh, picked, Strategy::Cloud)
}

/// Hop distance to the nearest source, `usize::MAX` beyond `limit`.
fn multi_source_hops(adj: &[Vec<usize>], sources: &[usize], limit: usize) -> Vec<usize> {
    let mut hops = vec![usize::MAX; adj.len()];
    let mut queue = VecDeque::new();
    for &s in sources {
        if hops[s] != 0 {
            hops[s] = 0;
            queue.push_back(s);
        }
    }
    while let Some(v) = queue.pop_front() {
        if hops[v] == limit {
            continue;
        }
        for &w in &adj[v] {
            if hops[w] == usize::MAX {
                hops[w] = hops[v] + 1;
                queue.push_back(w);
            }
        }
    }
    hops
}

/// Exactly `n` clustered sensors: seeds are drawn one at a time until the
/// union of their `k_hops` neighbourhoods covers `n` nodes, then the nodes
/// farthest from their seed are dropped (hop count, then distance, then id).
pub fn sample_cloud_n<R: Rng + ?Sized>(mesh: &Mesh, n: usize, k_hops: usize, rng: &mut R) -> Result<SensorSet, SensorError> {
    let fluid = mesh.fluid_nodes();
    if n == 0 {
        return Err(SensorError::TooFew(1));
    }
    if n > fluid.len() {
        return Err(SensorError::TooMany { requested: n, available: fluid.len() });
    }
    let adj = fluid_adjacency(mesh);
    let order: Vec<usize> = sample(rng, fluid.len(), fluid.len()).into_iter().map(|k| fluid[k]).collect();
    let mut seeds = Vec::new();
    let mut hops = vec![usize::MAX; mesh.n_nodes()];
    for &s in &order {
        if hops[s] != usize::MAX {
            continue;
        }
        seeds.push(s);
        hops = multi_source_hops(&adj, &seeds, k_hops);
        if hops.iter().filter(|&&h| h != usize::MAX).count() >= n {
            break;
        }
    }
    let xy = mesh.coords();
    let mut scored: Vec<(usize, f64, usize)> = (0..mesh.n_nodes())
        .filter(|&i| hops[i] != usize::MAX)
        .map(|i| {
            let d = seeds
                .iter()
                .map(|&s| (xy[s][0] - xy[i][0]).hypot(xy[s][1] - xy[i][1]))
                .fold(f64::INFINITY, f64::min);
            (hops[i], d, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    scored.truncate(n);
    SensorSet::new(mesh, scored.into_iter().map(|t| t.2).collect(), Strategy::Cloud)
}

/// Self-avoiding random walks over the fluid graph. A walk that gets stuck
/// is abandoned and a new one starts at a fresh uniformly drawn node; walks
/// never revisit nodes of earlier walks. The last walk is cut so exactly
/// `n_target` nodes are returned.
pub fn trajectory_paths<R: Rng + ?Sized>(mesh: &Mesh, n_target: usize, rng: &mut R) -> Result<Vec<Vec<usize>>, SensorError> {
    let fluid = mesh.fluid_nodes();
    if fluid.is_empty() {
        return Err(SensorError::NoFluid);
    }
    if n_target < 2 {
        return Err(SensorError::TooFew(2));
    }
    if n_target > fluid.len() {
        return Err(SensorError::TooMany { requested: n_target, available: fluid.len() });
    }
    let adj = fluid_adjacency(mesh);
    let mut used = vec![false; mesh.n_nodes()];
    let mut paths: Vec<Vec<usize>> = Vec::new();
    let mut total = 0;
    while total < n_target {
        let free: Vec<usize> = fluid.iter().copied().filter(|&i| !used[i]).collect();
        let mut cur = free[rng.random_range(0..free.len())];
        let mut path = vec![cur];
        used[cur] = true;
        total += 1;
        while total < n_target {
            let options: Vec<usize> = adj[cur].iter().copied().filter(|&j| !used[j]).collect();
            if options.is_empty() {
                break;
            }
            cur = options[rng.random_range(0..options.len())];
            used[cur] = true;
            path.push(cur);
            total += 1;
        }
        paths.push(path);
    }
    Ok(paths)
}

pub fn sample_trajectory<R: Rng + ?Sized>(mesh: &Mesh, n_target: usize, rng: &mut R) -> Result<SensorSet, SensorError> {
    let paths = trajectory_paths(mesh, n_target, rng)?;
    SensorSet::new(mesh, paths.concat(), Strategy::Trajectory)
}

/// Any strategy at a matched count `n`.
pub fn sample_strategy<R: Rng + ?Sized>(mesh: &Mesh, strategy: Strategy, n: usize, rng: &mut R) -> Result<SensorSet, SensorError> {
    match strategy {
        Strategy::Random => sample_random(mesh, n, rng),
        Strategy::Cloud => sample_cloud_n(mesh, n, CLOUD_HOPS, rng),
        Strategy::Trajectory => sample_trajectory(mesh, n.max(2), rng),
    }
}

/// Fills `y` with the field at the sensor nodes plus i.i.d. Gaussian noise of
/// standard deviation `noise_std` per component.
pub fn observe<R: Rng + ?Sized>(field: &FlowField, sensors: &SensorSet, rng: &mut R) -> Result<SensorSet, SensorError> {
    if field.n_nodes() != sensors.n_nodes() {
        return Err(SensorError::MeshMismatch { field: field.n_nodes(), mask: sensors.n_nodes() });
    }
    let mut out = sensors.clone();
    out.y = vec![[0.0; 2]; field.n_nodes()];
    let noise = (sensors.noise_std > 0.0).then(|| Normal::new(0.0, sensors.noise_std).expect("positive std"));
    for &i in &sensors.indices {
        let mut v = field.u[i];
        if let Some(d) = &noise {
            v[0] += d.sample(rng);
            v[1] += d.sample(rng);
        }
        out.y[i] = v;
    }
    Ok(out)
}
