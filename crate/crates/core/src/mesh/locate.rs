//! Point location in a triangle mesh via a uniform bucket grid.

use super::{signed_area, Mesh};

const TOL: f64 = 1e-12;

pub struct TriangleLocator<'m> {
    mesh: &'m Mesh,
    lo: [f64; 2],
    cell: [f64; 2],
    dims: [usize; 2],
    buckets: Vec<Vec<u32>>,
}

impl<'m> TriangleLocator<'m> {
    pub fn new(mesh: &'m Mesh) -> Self {
        let (lo, hi) = mesh.bbox();
        let side = (mesh.n_triangles() as f64).sqrt().ceil().max(1.0) as usize;
        let dims = [side, side];
        let cell = [
            ((hi[0] - lo[0]) / side as f64).max(f64::MIN_POSITIVE),
            ((hi[1] - lo[1]) / side as f64).max(f64::MIN_POSITIVE),
        ];
        let mut loc = Self { mesh, lo, cell, dims, buckets: vec![Vec::new(); side * side] };
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let p = tri.map(|v| mesh.coords()[v]);
            let (i0, j0) = loc.cell_of([p[0][0].min(p[1][0]).min(p[2][0]), p[0][1].min(p[1][1]).min(p[2][1])]);
            let (i1, j1) = loc.cell_of([p[0][0].max(p[1][0]).max(p[2][0]), p[0][1].max(p[1][1]).max(p[2][1])]);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    loc.buckets[j * side + i].push(t as u32);
                }
            }
        }
        loc
    }

    fn cell_of(&self, p: [f64; 2]) -> (usize, usize) {
        let f = |k: usize| (((p[k] - self.lo[k]) / self.cell[k]).floor().max(0.0) as usize).min(self.dims[k] - 1);
        (f(0), f(1))
    }

    /// Containing triangle and barycentric weights of its three vertices.
    /// Points on shared edges resolve to the lowest triangle index.
    pub fn locate(&self, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
        let (lo, hi) = self.mesh.bbox();
        if p[0] < lo[0] - TOL || p[0] > hi[0] + TOL || p[1] < lo[1] - TOL || p[1] > hi[1] + TOL {
            return None;
        }
        let (i, j) = self.cell_of(p);
        for &t in &self.buckets[j * self.dims[0] + i] {
            let t = t as usize;
            let w = barycentric(self.mesh, t, p);
            if w.iter().all(|&x| x >= -TOL) {
                return Some((t, w));
            }
        }
        None
    }

    /// Linear interpolation of per-node values at `p`.
    pub fn interpolate(&self, values: &[f64], p: [f64; 2]) -> Option<f64> {
        let (t, w) = self.locate(p)?;
        let tri = self.mesh.triangles()[t];
        Some(w[0] * values[tri[0]] + w[1] * values[tri[1]] + w[2] * values[tri[2]])
    }
}

fn barycentric(mesh: &Mesh, t: usize, p: [f64; 2]) -> [f64; 3] {
    let [a, b, c] = mesh.triangles()[t].map(|v| mesh.coords()[v]);
    let area = signed_area(a, b, c);
    [signed_area(p, b, c) / area, signed_area(a, p, c) / area, signed_area(a, b, p) / area]
}
