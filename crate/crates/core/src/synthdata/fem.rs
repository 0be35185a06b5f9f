//! P1 finite elements for steady potential flow around obstacles.

use crate::mesh::{Mesh, NodeType};

use super::{FlowField, SynthError};

/// Compressed sparse row matrix.
pub(crate) struct Csr {
    pub(crate) n: usize,
    pub(crate) indptr: Vec<usize>,
    pub(crate) indices: Vec<usize>,
    pub(crate) values: Vec<f64>,
}

impl Csr {
    fn from_triplets(n: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0; n + 1];
        let mut indices = Vec::with_capacity(t.len());
        let mut values: Vec<f64> = Vec::with_capacity(t.len());
        let mut last = (usize::MAX, usize::MAX);
        for (i, j, v) in t {
            if (i, j) == last {
                *values.last_mut().expect("nonempty") += v;
            } else {
                indices.push(j);
                values.push(v);
                indptr[i + 1] += 1;
                last = (i, j);
            }
        }
        for i in 0..n {
            indptr[i + 1] += indptr[i];
        }
        Self { n, indptr, indices, values }
    }

    pub(crate) fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut s = 0.0;
            for k in self.indptr[i]..self.indptr[i + 1] {
                s += self.values[k] * x[self.indices[k]];
            }
            y[i] = s;
        }
    }

    fn diag(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                (self.indptr[i]..self.indptr[i + 1])
                    .find(|&k| self.indices[k] == i)
                    .map_or(0.0, |k| self.values[k])
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradients. Returns the iterate and the
/// final relative residual `|b - Ax| / |b|`.
pub(crate) fn pcg(a: &Csr, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>, SynthError> {
    let n = a.n;
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let inv_d: Vec<f64> = a.diag().iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_d).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for _ in 0..max_iter {
        a.matvec(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= tol * bnorm {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] * inv_d[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(SynthError::NoConvergence { residual: dot(&r, &r).sqrt() / bnorm, iterations: max_iter })
}

/// Gradients of the three P1 basis functions and the triangle area.
fn p1_gradients(p: [[f64; 2]; 3]) -> ([[f64; 2]; 3], f64) {
    let area2 = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let mut g = [[0.0; 2]; 3];
    for k in 0..3 {
        let a = p[(k + 1) % 3];
        let b = p[(k + 2) % 3];
        g[k] = [(a[1] - b[1]) / area2, (b[0] - a[0]) / area2];
    }
    (g, area2 / 2.0)
}

/// Potential flow `u = grad(phi)`, `laplace(phi) = 0`, with the uniform-stream
/// potential imposed on far-field nodes and zero normal flux on walls.
pub fn solve_potential_flow(mesh: &Mesh, phi_dir: f64, u_ref: f64) -> Result<FlowField, SynthError> {
    let n = mesh.n_nodes();
    let coords = mesh.coords();
    let (s, c) = phi_dir.to_radians().sin_cos();
    let dirichlet: Vec<bool> = mesh.node_types().iter().map(|&t| t == NodeType::FarField).collect();
    if !dirichlet.iter().any(|&d| d) {
        return Err(SynthError::NoFarField);
    }
    let mut phi: Vec<f64> = coords
        .iter()
        .zip(&dirichlet)
        .map(|(p, &d)| if d { u_ref * (p[0] * c + p[1] * s) } else { 0.0 })
        .collect();

    // Free unknowns get compact ids.
    let mut free_id = vec![usize::MAX; n];
    let mut free = Vec::new();
    for i in 0..n {
        if !dirichlet[i] {
            free_id[i] = free.len();
            free.push(i);
        }
    }
    let nf = free.len();
    let mut trip = Vec::with_capacity(9 * mesh.n_triangles());
    let mut rhs = vec![0.0; nf];
    for tri in mesh.triangles() {
        let (g, area) = p1_gradients(tri.map(|v| coords[v]));
        for a in 0..3 {
            let ia = free_id[tri[a]];
            if ia == usize::MAX {
                continue;
            }
            for b in 0..3 {
                let k = area * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
                let ib = free_id[tri[b]];
                if ib == usize::MAX {
                    rhs[ia] -= k * phi[tri[b]];
                } else {
                    trip.push((ia, ib, k));
                }
            }
        }
    }
    if nf > 0 {
        let k = Csr::from_triplets(nf, trip);
        let x = pcg(&k, &rhs, 1e-10, 20 * n)?;
        let mut ax = vec![0.0; nf];
        k.matvec(&x, &mut ax);
        let res = ax.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let bn = dot(&rhs, &rhs).sqrt();
        if bn > 0.0 && res / bn > 1e-8 {
            return Err(SynthError::NoConvergence { residual: res / bn, iterations: 20 * n });
        }
        for (f, &i) in free.iter().enumerate() {
            phi[i] = x[f];
        }
    }
    Ok(FlowField { u: recover_gradient(mesh, &phi), phi_dir, mesh_id: String::new() })
}

/// Area-weighted average of the element gradients around each node.
pub fn recover_gradient(mesh: &Mesh, phi: &[f64]) -> Vec<[f64; 2]> {
    let coords = mesh.coords();
    let mut acc = vec![[0.0; 2]; mesh.n_nodes()];
    let mut w = vec![0.0; mesh.n_nodes()];
    for tri in mesh.triangles() {
        let (g, area) = p1_gradients(tri.map(|v| coords[v]));
        let mut grad = [0.0; 2];
        for k in 0..3 {
            grad[0] += phi[tri[k]] * g[k][0];
            grad[1] += phi[tri[k]] * g[k][1];
        }
        for &v in tri {
            acc[v][0] += area * grad[0];
            acc[v][1] += area * grad[1];
            w[v] += area;
        }
    }
    acc.iter().zip(&w).map(|(a, &w)| [a[0] / w, a[1] / w]).collect()
}
