//! Noise schedule, denoiser training, stochastic sampling with churn and
//! classifier-free-guided assimilation of sparse observations.

mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ad::AdError;
use crate::gnn::{Denoiser, GnnError, GraphTensors};
use crate::sensors::{SensorError, SensorSet};
use crate::synthdata::FlowField;

pub use train::{
    loss_weight, predict_supervised, train, train_step, StepReport, TrainConfig, TrainData, TrainGraph, TrainMode,
};

/// Data standard deviation after normalization.
pub const SIGMA_DATA: f64 = 1.0;
pub const SIGMA_MIN: f64 = 0.011028;
pub const TRAIN_SIGMA_MAX: f64 = 48.5232;
pub const SAMPLE_SIGMA_MAX: f64 = 44.112;
pub const RHO: f64 = 7.0;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("schedule position {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss {loss} at step {step} (sigma {sigma}, mesh `{mesh}`, phi {phi})")]
    NonFiniteLoss { loss: f64, step: u64, sigma: f64, mesh: String, phi: f64 },
    #[error("non-finite sampler state at step {step} (sigma {sigma})")]
    NonFiniteState { step: usize, sigma: f64 },
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// `sigma(u) = (smax^(1/rho) + u (smin^(1/rho) - smax^(1/rho)))^rho`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Self, DiffusionError> {
        let s = Self { sigma_min, sigma_max, rho };
        s.validate()?;
        Ok(s)
    }

    pub fn training() -> Self {
        Self { sigma_min: SIGMA_MIN, sigma_max: TRAIN_SIGMA_MAX, rho: RHO }
    }

    pub fn sampling() -> Self {
        Self { sigma_min: SIGMA_MIN, sigma_max: SAMPLE_SIGMA_MAX, rho: RHO }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(DiffusionError::Schedule(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(DiffusionError::Schedule(format!("rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }

    pub fn sigma(&self, u: f64) -> Result<f64, DiffusionError> {
        if !(0.0..=1.0).contains(&u) {
            return Err(DiffusionError::OutOfRange(u));
        }
        // Endpoints exactly, not through the power round trip.
        if u == 0.0 {
            return Ok(self.sigma_max);
        }
        if u == 1.0 {
            return Ok(self.sigma_min);
        }
        let (a, b) = (self.sigma_max.powf(1.0 / self.rho), self.sigma_min.powf(1.0 / self.rho));
        Ok((a + u * (b - a)).powf(self.rho))
    }

    /// `steps + 1` decreasing levels from `sigma_max` to `sigma_min`, then 0.
    pub fn levels(&self, steps: usize) -> Result<Vec<f64>, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::Config("sampler needs at least one step".into()));
        }
        let mut out = Vec::with_capacity(steps + 1);
        if steps == 1 {
            out.push(self.sigma_max);
        } else {
            for i in 0..steps {
                out.push(self.sigma(i as f64 / (steps - 1) as f64)?);
            }
        }
        out.push(0.0);
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub s_churn: f64,
    pub s_tmin: f64,
    /// Upper end of the churn window; `None` means unbounded.
    pub s_tmax: Option<f64>,
    pub s_noise: f64,
    pub gamma_cfg: f64,
    pub seed: u64,
    pub schedule: NoiseSchedule,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            s_churn: 2.5,
            s_tmin: 0.75,
            s_tmax: None,
            s_noise: 1.05,
            gamma_cfg: 2.0,
            seed: 0,
            schedule: NoiseSchedule::sampling(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        self.schedule.validate()?;
        if self.steps == 0 {
            return Err(DiffusionError::Config("steps must be >= 1".into()));
        }
        if !(self.gamma_cfg >= 0.0 && self.gamma_cfg.is_finite()) {
            return Err(DiffusionError::Config(format!("guidance weight {} must be >= 0", self.gamma_cfg)));
        }
        if !(self.s_churn >= 0.0 && self.s_noise >= 0.0) {
            return Err(DiffusionError::Config("churn parameters must be >= 0".into()));
        }
        Ok(())
    }

    /// Churn factor applied at level `sigma`.
    pub fn churn(&self, sigma: f64) -> f64 {
        let upper = self.s_tmax.unwrap_or(f64::INFINITY);
        if sigma >= self.s_tmin && sigma <= upper {
            (self.s_churn / self.steps as f64).min(std::f64::consts::SQRT_2 - 1.0)
        } else {
            0.0
        }
    }
}

/// `D_uncond + gamma (D_cond - D_uncond)`, returning the inputs unchanged at
/// `gamma` 0 and 1.
pub fn cfg_combine(d_uncond: &[[f64; 2]], d_cond: &[[f64; 2]], gamma: f64) -> Result<Vec<[f64; 2]>, DiffusionError> {
    if d_uncond.len() != d_cond.len() {
        return Err(DiffusionError::Shape(format!("{} vs {} nodes", d_uncond.len(), d_cond.len())));
    }
    if gamma == 0.0 {
        return Ok(d_uncond.to_vec());
    }
    if gamma == 1.0 {
        return Ok(d_cond.to_vec());
    }
    Ok(d_uncond
        .iter()
        .zip(d_cond)
        .map(|(u, c)| [u[0] + gamma * (c[0] - u[0]), u[1] + gamma * (c[1] - u[1])])
        .collect())
}

fn normal_field<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<[f64; 2]> {
    (0..n).map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect()
}

/// Stochastic second-order sampler for an arbitrary denoiser
/// `denoise(x, sigma)`, starting from `sigma_max` noise on `n` nodes.
pub fn sample_with<R, F>(n: usize, cfg: &SamplerConfig, rng: &mut R, mut denoise: F) -> Result<Vec<[f64; 2]>, DiffusionError>
where
    R: Rng + ?Sized,
    F: FnMut(&[[f64; 2]], f64) -> Result<Vec<[f64; 2]>, DiffusionError>,
{
    cfg.validate()?;
    let levels = cfg.schedule.levels(cfg.steps)?;
    let mut x: Vec<[f64; 2]> = normal_field(n, rng).into_iter().map(|e| [levels[0] * e[0], levels[0] * e[1]]).collect();
    for i in 0..cfg.steps {
        let (sigma, next) = (levels[i], levels[i + 1]);
        let gamma = cfg.churn(sigma);
        let sigma_hat = sigma * (1.0 + gamma);
        if gamma > 0.0 {
            let k = (sigma_hat * sigma_hat - sigma * sigma).sqrt() * cfg.s_noise;
            for (xi, e) in x.iter_mut().zip(normal_field(n, rng)) {
                xi[0] += k * e[0];
                xi[1] += k * e[1];
            }
        }
        let d = slope(&x, &denoise(&x, sigma_hat)?, sigma_hat)?;
        let h = next - sigma_hat;
        let mut x_next: Vec<[f64; 2]> = x.iter().zip(&d).map(|(xi, di)| [xi[0] + h * di[0], xi[1] + h * di[1]]).collect();
        if next > 0.0 {
            let d2 = slope(&x_next, &denoise(&x_next, next)?, next)?;
            x_next = x
                .iter()
                .zip(d.iter().zip(&d2))
                .map(|(xi, (a, b))| [xi[0] + h * 0.5 * (a[0] + b[0]), xi[1] + h * 0.5 * (a[1] + b[1])])
                .collect();
        }
        if x_next.iter().any(|v| !(v[0].is_finite() && v[1].is_finite())) {
            return Err(DiffusionError::NonFiniteState { step: i, sigma: sigma_hat });
        }
        x = x_next;
    }
    Ok(x)
}

fn slope(x: &[[f64; 2]], d: &[[f64; 2]], sigma: f64) -> Result<Vec<[f64; 2]>, DiffusionError> {
    if d.len() != x.len() {
        return Err(DiffusionError::Shape(format!("denoiser returned {} nodes for {}", d.len(), x.len())));
    }
    Ok(x.iter().zip(d).map(|(a, b)| [(a[0] - b[0]) / sigma, (a[1] - b[1]) / sigma]).collect())
}

/// Draws one field (normalized units) from the model, guided by `sensors`
/// when given. The unconditional pass uses an all-zero mask.
pub fn sample<R: Rng + ?Sized>(
    model: &Denoiser,
    graph: &GraphTensors,
    phi_dir: f64,
    sensors: Option<&SensorSet>,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<FlowField, DiffusionError> {
    let n = graph.n_fine;
    let zeros_m = vec![0.0; n];
    let zeros_y = vec![[0.0; 2]; n];
    if let Some(s) = sensors {
        if s.n_nodes() != n {
            return Err(DiffusionError::Sensor(SensorError::MeshMismatch { field: n, mask: s.n_nodes() }));
        }
    }
    let gamma = cfg.gamma_cfg;
    let u = sample_with(n, cfg, rng, |x, sigma| match sensors {
        None => Ok(model.denoise(graph, x, sigma, phi_dir, &zeros_m, &zeros_y)?),
        Some(_) if gamma == 0.0 => Ok(model.denoise(graph, x, sigma, phi_dir, &zeros_m, &zeros_y)?),
        Some(s) if gamma == 1.0 => Ok(model.denoise(graph, x, sigma, phi_dir, &s.m, &s.y)?),
        Some(s) => {
            let du = model.denoise(graph, x, sigma, phi_dir, &zeros_m, &zeros_y)?;
            let dc = model.denoise(graph, x, sigma, phi_dir, &s.m, &s.y)?;
            cfg_combine(&du, &dc, gamma)
        }
    })?;
    Ok(FlowField { u, phi_dir, mesh_id: String::new() })
}

/// Ensemble members with per-node mean and (population) standard deviation.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub members: Vec<FlowField>,
    pub mean: FlowField,
    pub std: Vec<[f64; 2]>,
}

impl Ensemble {
    pub fn from_members(members: Vec<FlowField>) -> Result<Self, DiffusionError> {
        let Some(first) = members.first() else {
            return Err(DiffusionError::Config("ensemble needs at least one member".into()));
        };
        let (n, k) = (first.n_nodes(), members.len() as f64);
        if members.iter().any(|m| m.n_nodes() != n) {
            return Err(DiffusionError::Shape("ensemble members differ in size".into()));
        }
        let mut mean = vec![[0.0; 2]; n];
        for m in &members {
            for (a, v) in mean.iter_mut().zip(&m.u) {
                a[0] += v[0] / k;
                a[1] += v[1] / k;
            }
        }
        let mut var = vec![[0.0; 2]; n];
        for m in &members {
            for ((s, v), mu) in var.iter_mut().zip(&m.u).zip(&mean) {
                s[0] += (v[0] - mu[0]).powi(2) / k;
                s[1] += (v[1] - mu[1]).powi(2) / k;
            }
        }
        let std = var.iter().map(|v| [v[0].sqrt(), v[1].sqrt()]).collect();
        let mean = FlowField { u: mean, phi_dir: first.phi_dir, mesh_id: first.mesh_id.clone() };
        Ok(Self { members, mean, std })
    }
}

/// `n_ensemble` independent guided samples. Member `k` draws from stream `k`
/// of a generator seeded with `cfg.seed`, so members do not depend on the
/// ensemble size.
pub fn assimilate(
    model: &Denoiser,
    graph: &GraphTensors,
    phi_dir: f64,
    sensors: &SensorSet,
    cfg: &SamplerConfig,
    n_ensemble: usize,
) -> Result<Ensemble, DiffusionError> {
    if n_ensemble == 0 {
        return Err(DiffusionError::Config("n_ensemble must be >= 1".into()));
    }
    let members = (0..n_ensemble)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(k as u64);
            sample(model, graph, phi_dir, Some(sensors), cfg, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ensemble::from_members(members)
}
