//! Reconstruction metrics on unstructured meshes: relative RMSE, mean
//! cosine similarity, and SSIM on rasterized speed fields.

use serde::{Deserialize, Serialize};

use crate::mesh::{Mesh, TriangleLocator};
use crate::synthdata::FlowField;

pub const MAC_EPS: f64 = 1e-8;
pub const RASTER_RES: usize = 256;
const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const MIN_VALID_FRACTION: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("fields have {pred} and {truth} nodes")]
    SizeMismatch { pred: usize, truth: usize },
    #[error("reference field has zero energy")]
    ZeroEnergy,
    #[error("rasters differ in shape or mask")]
    RasterMismatch,
    #[error("no SSIM window has enough valid cells")]
    EmptyMask,
    #[error("reference raster has zero dynamic range")]
    ZeroRange,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quantity {
    /// Both components jointly.
    U,
    Ux,
    Uy,
    Magnitude,
}

fn check(pred: &FlowField, truth: &FlowField) -> Result<(), MetricError> {
    if pred.n_nodes() != truth.n_nodes() {
        return Err(MetricError::SizeMismatch { pred: pred.n_nodes(), truth: truth.n_nodes() });
    }
    Ok(())
}

/// `sqrt(sum |q_pred - q_true|^2 / sum |q_true|^2)` over nodes.
pub fn rrmse(pred: &FlowField, truth: &FlowField, q: Quantity) -> Result<f64, MetricError> {
    check(pred, truth)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (p, t) in pred.u.iter().zip(&truth.u) {
        let (dp, dt) = match q {
            Quantity::U => ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2), t[0] * t[0] + t[1] * t[1]),
            Quantity::Ux => ((p[0] - t[0]).powi(2), t[0] * t[0]),
            Quantity::Uy => ((p[1] - t[1]).powi(2), t[1] * t[1]),
            Quantity::Magnitude => {
                let (a, b) = (p[0].hypot(p[1]), t[0].hypot(t[1]));
                ((a - b).powi(2), b * b)
            }
        };
        num += dp;
        den += dt;
    }
    if den == 0.0 {
        return Err(MetricError::ZeroEnergy);
    }
    Ok((num / den).sqrt())
}

/// Mean over nodes of `<p, t> / (|p| |t| + eps)`.
pub fn mac(pred: &FlowField, truth: &FlowField, eps: f64) -> Result<f64, MetricError> {
    check(pred, truth)?;
    if truth.n_nodes() == 0 {
        return Err(MetricError::ZeroEnergy);
    }
    let s: f64 = pred
        .u
        .iter()
        .zip(&truth.u)
        .map(|(p, t)| (p[0] * t[0] + p[1] * t[1]) / (p[0].hypot(p[1]) * t[0].hypot(t[1]) + eps))
        .sum();
    Ok(s / truth.n_nodes() as f64)
}

/// Regular grid over a mesh bounding box; `valid` is false outside the
/// domain and inside obstacles. Row `j` runs along +y, column `i` along +x.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub res: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl Raster {
    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len() as f64
    }
}

/// Cell-centre sample locations and their containing triangles.
pub struct RasterMap {
    res: usize,
    hits: Vec<Option<(usize, [f64; 3])>>,
}

impl RasterMap {
    pub fn new(mesh: &Mesh, res: usize) -> Self {
        let (lo, hi) = mesh.bbox();
        let loc = TriangleLocator::new(mesh);
        let (dx, dy) = ((hi[0] - lo[0]) / res as f64, (hi[1] - lo[1]) / res as f64);
        let mut hits = Vec::with_capacity(res * res);
        for j in 0..res {
            for i in 0..res {
                hits.push(loc.locate([lo[0] + (i as f64 + 0.5) * dx, lo[1] + (j as f64 + 0.5) * dy]));
            }
        }
        Self { res, hits }
    }

    /// Barycentric interpolation of nodal values.
    pub fn rasterize(&self, mesh: &Mesh, nodal: &[f64]) -> Raster {
        let tris = mesh.triangles();
        let mut values = vec![0.0; self.res * self.res];
        let mut valid = vec![false; self.res * self.res];
        for (k, h) in self.hits.iter().enumerate() {
            if let Some((t, w)) = h {
                let tri = tris[*t];
                values[k] = w[0] * nodal[tri[0]] + w[1] * nodal[tri[1]] + w[2] * nodal[tri[2]];
                valid[k] = true;
            }
        }
        Raster { res: self.res, values, valid }
    }

    pub fn speed(&self, mesh: &Mesh, field: &FlowField) -> Raster {
        let s: Vec<f64> = field.u.iter().map(|v| v[0].hypot(v[1])).collect();
        self.rasterize(mesh, &s)
    }
}

/// Node speeds interpolated onto a `res x res` grid.
pub fn interpolate_to_grid(field: &FlowField, mesh: &Mesh, res: usize) -> Raster {
    RasterMap::new(mesh, res).speed(mesh, field)
}

fn gaussian_window() -> [f64; SSIM_WIN * SSIM_WIN] {
    let h = (SSIM_WIN / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WIN).map(|i| (-((i as f64 - h).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let mut w = [0.0; SSIM_WIN * SSIM_WIN];
    for a in 0..SSIM_WIN {
        for b in 0..SSIM_WIN {
            w[a * SSIM_WIN + b] = g[a] * g[b];
        }
    }
    w
}

/// Masked SSIM with an 11x11 Gaussian window (sigma 1.5). Window statistics
/// use only valid cells, with weights renormalized; a window counts when at
/// least half its cells are valid. Dynamic range is `range`, or the maximum
/// of `b` over valid cells when `None`.
pub fn ssim(a: &Raster, b: &Raster, range: Option<f64>) -> Result<f64, MetricError> {
    if a.res != b.res || a.valid != b.valid {
        return Err(MetricError::RasterMismatch);
    }
    let res = a.res;
    let l = match range {
        Some(r) => r,
        None => b.values.iter().zip(&b.valid).filter(|(_, &v)| v).map(|(x, _)| *x).fold(f64::NEG_INFINITY, f64::max),
    };
    if !(l > 0.0) {
        return Err(MetricError::ZeroRange);
    }
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let w = gaussian_window();
    let min_valid = (MIN_VALID_FRACTION * (SSIM_WIN * SSIM_WIN) as f64).ceil() as usize;
    let (mut total, mut count) = (0.0, 0usize);
    if res < SSIM_WIN {
        return Err(MetricError::EmptyMask);
    }
    for j0 in 0..=res - SSIM_WIN {
        for i0 in 0..=res - SSIM_WIN {
            let (mut sw, mut ma, mut mb) = (0.0, 0.0, 0.0);
            let mut nvalid = 0;
            for dj in 0..SSIM_WIN {
                for di in 0..SSIM_WIN {
                    let k = (j0 + dj) * res + i0 + di;
                    if a.valid[k] {
                        let wk = w[dj * SSIM_WIN + di];
                        sw += wk;
                        ma += wk * a.values[k];
                        mb += wk * b.values[k];
                        nvalid += 1;
                    }
                }
            }
            if nvalid < min_valid {
                continue;
            }
            ma /= sw;
            mb /= sw;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dj in 0..SSIM_WIN {
                for di in 0..SSIM_WIN {
                    let k = (j0 + dj) * res + i0 + di;
                    if a.valid[k] {
                        let wk = w[dj * SSIM_WIN + di] / sw;
                        let (x, y) = (a.values[k] - ma, b.values[k] - mb);
                        va += wk * x * x;
                        vb += wk * y * y;
                        cov += wk * x * y;
                    }
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricError::EmptyMask);
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rrmse_u: f64,
    pub rrmse_ux: f64,
    pub rrmse_uy: f64,
    pub rrmse_mag: f64,
    pub mac: f64,
    pub ssim: f64,
}

/// Every metric for one prediction. `map` must have been built on `mesh`.
pub fn evaluate(pred: &FlowField, truth: &FlowField, mesh: &Mesh, map: &RasterMap) -> Result<MetricReport, MetricError> {
    Ok(MetricReport {
        rrmse_u: rrmse(pred, truth, Quantity::U)?,
        rrmse_ux: rrmse(pred, truth, Quantity::Ux)?,
        rrmse_uy: rrmse(pred, truth, Quantity::Uy)?,
        rrmse_mag: rrmse(pred, truth, Quantity::Magnitude)?,
        mac: mac(pred, truth, MAC_EPS)?,
        ssim: ssim(&map.speed(mesh, pred), &map.speed(mesh, truth), None)?,
    })
}
