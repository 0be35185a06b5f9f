//! Boundary-preserving vertex decimation.
//!
//! Interior fluid vertices are removed one at a time in order of a local
//! cost, each removal leaving a star-shaped hole that is re-filled by ear
//! clipping. The cost of removing `v` is the largest triangle area its
//! retriangulation would create, scaled up for vertices that touch a wall so
//! resolution near obstacles survives longer.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{signed_area, Mesh, MeshError, NodeType};

const MIN_ANGLE_DEG: f64 = 5.0;
const WALL_WEIGHT: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct Decimation {
    pub coarse: Mesh,
    /// `retained[c]` is the fine node that coarse node `c` came from.
    pub retained: Vec<usize>,
    /// False when protected nodes or quality limits kept the reduction
    /// ratio below `0.7 * target_ratio`.
    pub feasible: bool,
}

#[derive(PartialEq)]
struct Entry {
    cost: f64,
    vertex: usize,
    version: u32,
}

impl Eq for Entry {}

impl Ord for Entry {
    // Min-heap on cost, ties to the lower vertex index.
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Work<'a> {
    coords: &'a [[f64; 2]],
    tris: Vec<[usize; 3]>,
    tri_alive: Vec<bool>,
    vtris: Vec<Vec<usize>>,
}

impl Work<'_> {
    fn incident(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.vtris[v].iter().copied().filter(|&t| self.tri_alive[t])
    }

    fn has_edge(&self, a: usize, b: usize) -> bool {
        self.incident(a).any(|t| self.tris[t].contains(&b))
    }

    /// CCW one-ring polygon around an interior vertex, or `None` when the
    /// link is not a single closed cycle.
    fn link(&self, v: usize) -> Option<Vec<usize>> {
        let mut next = Vec::new();
        for t in self.incident(v) {
            let tri = self.tris[t];
            let k = tri.iter().position(|&x| x == v)?;
            next.push((tri[(k + 1) % 3], tri[(k + 2) % 3]));
        }
        if next.len() < 3 {
            return None;
        }
        next.sort_unstable();
        let start = next[0].0;
        let mut ring = vec![start];
        let mut cur = start;
        loop {
            let i = next.binary_search_by(|e| e.0.cmp(&cur)).ok()?;
            cur = next[i].1;
            if cur == start {
                break;
            }
            if ring.len() > next.len() {
                return None;
            }
            ring.push(cur);
        }
        (ring.len() == next.len()).then_some(ring)
    }

    /// Ear-clipped triangulation of `ring`, choosing the best-shaped ear at
    /// every step. Fails on a degenerate ear or an edge that already exists.
    fn retriangulate(&self, ring: &[usize]) -> Option<Vec<[usize; 3]>> {
        let mut poly = ring.to_vec();
        let mut out = Vec::with_capacity(ring.len() - 2);
        while poly.len() > 3 {
            let n = poly.len();
            let mut best: Option<(f64, usize)> = None;
            for i in 0..n {
                let (a, b, c) = (poly[(i + n - 1) % n], poly[i], poly[(i + 1) % n]);
                let (pa, pb, pc) = (self.coords[a], self.coords[b], self.coords[c]);
                if signed_area(pa, pb, pc) <= 0.0 {
                    continue;
                }
                let blocked = poly
                    .iter()
                    .any(|&q| q != a && q != b && q != c && point_in_triangle(self.coords[q], pa, pb, pc));
                if blocked || self.has_edge(a, c) {
                    continue;
                }
                let q = min_angle(pa, pb, pc);
                if best.is_none_or(|(bq, _)| q > bq) {
                    best = Some((q, i));
                }
            }
            let (q, i) = best?;
            if q < MIN_ANGLE_DEG.to_radians() {
                return None;
            }
            out.push([poly[(i + n - 1) % n], poly[i], poly[(i + 1) % n]]);
            poly.remove(i);
        }
        let (pa, pb, pc) = (self.coords[poly[0]], self.coords[poly[1]], self.coords[poly[2]]);
        if signed_area(pa, pb, pc) <= 0.0 || min_angle(pa, pb, pc) < MIN_ANGLE_DEG.to_radians() {
            return None;
        }
        out.push([poly[0], poly[1], poly[2]]);
        Some(out)
    }
}

fn point_in_triangle(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    signed_area(a, b, p) >= 0.0 && signed_area(b, c, p) >= 0.0 && signed_area(c, a, p) >= 0.0
}

fn min_angle(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let ang = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| {
        let u = [q[0] - p[0], q[1] - p[1]];
        let v = [r[0] - p[0], r[1] - p[1]];
        let cross = u[0] * v[1] - u[1] * v[0];
        let dot = u[0] * v[0] + u[1] * v[1];
        cross.abs().atan2(dot)
    };
    ang(a, b, c).min(ang(b, c, a)).min(ang(c, a, b))
}

/// Removes interior fluid vertices until `n_fine / n_coarse` reaches
/// `target_ratio` or no further removal passes the quality checks.
pub fn decimate(mesh: &Mesh, target_ratio: f64) -> Result<Decimation, MeshError> {
    if !(target_ratio >= 1.0) {
        return Err(MeshError::Hierarchy(format!("target ratio must be >= 1, got {target_ratio}")));
    }
    let n = mesh.n_nodes();
    let coords = mesh.coords();
    let mut protected = vec![false; n];
    for l in mesh.boundary_loops() {
        for v in l {
            protected[v] = true;
        }
    }
    let mut near_wall = vec![false; n];
    for (i, &t) in mesh.node_types().iter().enumerate() {
        if t != NodeType::Fluid {
            protected[i] = true;
        }
    }
    let adj = mesh.adjacency();
    for (i, nb) in adj.iter().enumerate() {
        near_wall[i] = nb.iter().any(|&j| mesh.node_types()[j] == NodeType::Wall);
    }

    let mut work = Work {
        coords,
        tris: mesh.triangles().to_vec(),
        tri_alive: vec![true; mesh.n_triangles()],
        vtris: vec![Vec::new(); n],
    };
    for (t, tri) in mesh.triangles().iter().enumerate() {
        for &v in tri {
            work.vtris[v].push(t);
        }
    }

    let cost_of = |work: &Work, v: usize| -> Option<(f64, Vec<[usize; 3]>)> {
        let ring = work.link(v)?;
        let fill = work.retriangulate(&ring)?;
        let area = fill
            .iter()
            .map(|t| signed_area(coords[t[0]], coords[t[1]], coords[t[2]]))
            .fold(0.0, f64::max);
        let w = if near_wall[v] { WALL_WEIGHT } else { 1.0 };
        Some((area * w, fill))
    };

    let target = ((n as f64 / target_ratio).round() as usize).max(3);
    let mut alive = vec![true; n];
    let mut n_alive = n;
    let mut version = vec![0u32; n];
    let mut heap = BinaryHeap::new();
    for v in (0..n).filter(|&v| !protected[v]) {
        if let Some((cost, _)) = cost_of(&work, v) {
            heap.push(Entry { cost, vertex: v, version: 0 });
        }
    }

    while n_alive > target {
        let Some(e) = heap.pop() else { break };
        let v = e.vertex;
        if !alive[v] || e.version != version[v] {
            continue;
        }
        // Neighbouring removals may have invalidated the cached fill.
        let Some((_, fill)) = cost_of(&work, v) else { continue };
        let ring = work.link(v).expect("link exists when fill does");
        let old: Vec<usize> = work.incident(v).collect();
        for t in old {
            work.tri_alive[t] = false;
        }
        for tri in fill {
            let id = work.tris.len();
            work.tris.push(tri);
            work.tri_alive.push(true);
            for &u in &tri {
                work.vtris[u].push(id);
            }
        }
        alive[v] = false;
        n_alive -= 1;
        for &u in &ring {
            work.vtris[u].retain(|&t| work.tri_alive[t]);
            if protected[u] || !alive[u] {
                continue;
            }
            version[u] += 1;
            if let Some((cost, _)) = cost_of(&work, u) {
                heap.push(Entry { cost, vertex: u, version: version[u] });
            }
        }
    }

    let retained: Vec<usize> = (0..n).filter(|&v| alive[v]).collect();
    let mut new_id = vec![usize::MAX; n];
    for (c, &f) in retained.iter().enumerate() {
        new_id[f] = c;
    }
    let tris: Vec<[usize; 3]> = work
        .tris
        .iter()
        .zip(&work.tri_alive)
        .filter(|(_, &a)| a)
        .map(|(t, _)| [new_id[t[0]], new_id[t[1]], new_id[t[2]]])
        .collect();
    let coarse = Mesh::new(
        retained.iter().map(|&f| coords[f]).collect(),
        retained.iter().map(|&f| mesh.node_types()[f]).collect(),
        tris,
    )?;
    let ratio = n as f64 / retained.len() as f64;
    let feasible = ratio >= 0.7 * target_ratio;
    if !feasible {
        log::warn!("decimation reached ratio {ratio:.2} of requested {target_ratio}");
    }
    Ok(Decimation { coarse, retained, feasible })
}
