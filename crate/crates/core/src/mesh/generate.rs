//! Synthetic "urban" meshes: a square domain with circular obstacles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::delaunay::triangulate;
use super::{Mesh, MeshError, NodeType};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeshSpec {
    /// Domain is `[-half_width, half_width] x [-half_height, half_height]` (m).
    pub half_width: f64,
    pub half_height: f64,
    /// Lattice points along x; spacing is `2 * half_width / (nx - 1)`.
    pub nx: usize,
    pub obstacles: Vec<Obstacle>,
    /// Interior lattice jitter as a fraction of the spacing.
    pub jitter: f64,
    pub seed: u64,
}

impl SyntheticMeshSpec {
    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.nx as f64 - 1.0)
    }

    pub fn generate(&self) -> Result<Mesh, MeshError> {
        if self.nx < 3 {
            return Err(MeshError::Generation("nx must be at least 3".into()));
        }
        let h = self.spacing();
        let ny = ((2.0 * self.half_height / h).round() as usize).max(2) + 1;
        let hy = 2.0 * self.half_height / (ny as f64 - 1.0);
        for (k, o) in self.obstacles.iter().enumerate() {
            let m = o.radius + 2.0 * h;
            if o.center[0].abs() + m > self.half_width || o.center[1].abs() + m > self.half_height {
                return Err(MeshError::Generation(format!("obstacle {k} is too close to the outer boundary")));
            }
            for (j, p) in self.obstacles.iter().enumerate().skip(k + 1) {
                let d = dist(o.center, p.center);
                if d < o.radius + p.radius + 2.0 * h {
                    return Err(MeshError::Generation(format!("obstacles {k} and {j} overlap")));
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut coords = Vec::new();
        let mut types = Vec::new();
        for j in 0..ny {
            for i in 0..self.nx {
                let mut p = [-self.half_width + h * i as f64, -self.half_height + hy * j as f64];
                let on_edge = i == 0 || j == 0 || i == self.nx - 1 || j == ny - 1;
                if !on_edge {
                    p[0] += self.jitter * h * rng.random_range(-1.0..1.0);
                    p[1] += self.jitter * h * rng.random_range(-1.0..1.0);
                    let near = self.obstacles.iter().any(|o| dist(p, o.center) < o.radius + 0.7 * h);
                    if near {
                        continue;
                    }
                }
                coords.push(p);
                types.push(if on_edge { NodeType::FarField } else { NodeType::Fluid });
            }
        }
        // Obstacle id of each wall point.
        let mut owner = vec![usize::MAX; coords.len()];
        for (oi, o) in self.obstacles.iter().enumerate() {
            let n = ((2.0 * std::f64::consts::PI * o.radius / (0.8 * h)).ceil() as usize).max(8);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            for k in 0..n {
                let a = phase + std::f64::consts::TAU * k as f64 / n as f64;
                // Exactly cocircular points make the incircle test degenerate.
                let r = o.radius * (1.0 + 1e-6 * rng.random_range(-1.0..1.0));
                coords.push([o.center[0] + r * a.cos(), o.center[1] + r * a.sin()]);
                types.push(NodeType::Wall);
                owner.push(oi);
            }
        }

        let tris: Vec<[usize; 3]> = triangulate(&coords)
            .into_iter()
            // Obstacles are convex, so a triangle lies inside one exactly
            // when all three corners sit on its circle.
            .filter(|t| owner[t[0]] == usize::MAX || owner[t[0]] != owner[t[1]] || owner[t[0]] != owner[t[2]])
            .collect();
        let mesh = Mesh::new(coords, types, tris)?;
        let loops = mesh.boundary_loops().len();
        if loops != 1 + self.obstacles.len() {
            return Err(MeshError::Generation(format!(
                "expected {} boundary loops, found {loops}",
                1 + self.obstacles.len()
            )));
        }
        Ok(mesh)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// `nx x ny` lattice over a 200 m wide domain with one centred circular hole
/// of radius `radius_frac` times the half width.
pub fn grid_with_hole(nx: usize, ny: usize, radius_frac: f64) -> Result<Mesh, MeshError> {
    let half_width = 100.0;
    let h = 2.0 * half_width / (nx as f64 - 1.0);
    SyntheticMeshSpec {
        half_width,
        half_height: h * (ny as f64 - 1.0) / 2.0,
        nx,
        obstacles: vec![Obstacle { center: [0.0, 0.0], radius: radius_frac * half_width }],
        jitter: 0.15,
        seed: 0,
    }
    .generate()
}

/// `count` meshes with 1-4 random non-overlapping circular obstacles each.
pub fn synthetic_suite(count: usize, nx: usize, seed: u64) -> Result<Vec<(SyntheticMeshSpec, Mesh)>, MeshError> {
    let half = 100.0;
    let h = 2.0 * half / (nx as f64 - 1.0);
    let mut out = Vec::with_capacity(count);
    for m in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(m as u64));
        let n_obs = rng.random_range(1..=4);
        let mut obstacles: Vec<Obstacle> = Vec::new();
        let mut attempts = 0;
        while obstacles.len() < n_obs && attempts < 1000 {
            attempts += 1;
            let radius = rng.random_range(0.1 * half..0.25 * half);
            let lim = half - radius - 4.0 * h;
            let center = [rng.random_range(-lim..lim), rng.random_range(-lim..lim)];
            let clear = obstacles.iter().all(|o| dist(o.center, center) > o.radius + radius + 4.0 * h);
            if clear {
                obstacles.push(Obstacle { center, radius });
            }
        }
        let spec = SyntheticMeshSpec {
            half_width: half,
            half_height: half,
            nx,
            obstacles,
            jitter: 0.15,
            seed: seed.wrapping_add(m as u64),
        };
        let mesh = spec.generate()?;
        out.push((spec, mesh));
    }
    Ok(out)
}
