use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DiffusionError, NoiseSchedule, SIGMA_DATA};
use crate::ad::{cosine_lr, AdamW, Tape, Tensor};
use crate::gnn::{Denoiser, GraphTensors};
use crate::mesh::Mesh;
use crate::sensors::{observe, sample_random, SensorSet};
use crate::synthdata::{Dataset, FlowField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    /// Probability of dropping the whole sensor input for a sample.
    pub p_uc: f64,
    /// Range of the uniformly drawn sensor coverage ratio.
    pub coverage: [f64; 2],
    pub seed: u64,
    pub weight_decay: f64,
    pub clip: f64,
    pub schedule: NoiseSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 2,
            lr: 1e-4,
            p_uc: 0.1,
            coverage: [0.001, 0.05],
            seed: 0,
            weight_decay: 1e-2,
            clip: 5.0,
            schedule: NoiseSchedule::training(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        self.schedule.validate()?;
        let bad = |msg: String| Err(DiffusionError::Config(msg));
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.p_uc) {
            return bad(format!("p_uc {} outside [0, 1]", self.p_uc));
        }
        let [lo, hi] = self.coverage;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("coverage range [{lo}, {hi}] must lie in (0, 1]"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW { weight_decay: self.weight_decay, clip: self.clip, ..AdamW::default() }
    }
}

/// Denoising objective, or plain regression from an empty state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Diffusion,
    Supervised,
}

/// `(sigma^2 + sigma_d^2) / (sigma sigma_d)^2`.
pub fn loss_weight(sigma: f64) -> f64 {
    (sigma * sigma + SIGMA_DATA * SIGMA_DATA) / (sigma * SIGMA_DATA).powi(2)
}

pub struct TrainGraph {
    pub id: String,
    pub mesh: Mesh,
    pub tensors: GraphTensors,
}

/// Training meshes with their normalized fields.
pub struct TrainData {
    pub graphs: Vec<TrainGraph>,
    /// `(graph index, field)` pairs.
    pub fields: Vec<(usize, FlowField)>,
}

impl TrainData {
    /// Training split of `ds`.
    pub fn from_dataset(ds: &Dataset) -> Self {
        let mut graphs = Vec::new();
        let mut fields = Vec::new();
        for i in ds.train_indices() {
            let m = &ds.meshes[i];
            for f in &ds.fields[i] {
                fields.push((graphs.len(), f.clone()));
            }
            graphs.push(TrainGraph { id: m.id.clone(), mesh: m.graph.fine.clone(), tensors: GraphTensors::new(&m.graph) });
        }
        Self { graphs, fields }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Batch-mean weighted loss.
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

fn random_sensors<R: Rng + ?Sized>(
    mesh: &Mesh,
    field: &FlowField,
    coverage: [f64; 2],
    rng: &mut R,
) -> Result<SensorSet, DiffusionError> {
    let n_fluid = mesh.fluid_nodes().len();
    let c = rng.random_range(coverage[0]..=coverage[1]);
    let n = ((c * n_fluid as f64).round() as usize).clamp(1, n_fluid.max(1));
    let s = sample_random(mesh, n, rng)?;
    Ok(observe(field, &s, rng)?)
}

/// One optimizer step over `cfg.batch` random (mesh, angle) samples.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Denoiser,
    data: &TrainData,
    cfg: &TrainConfig,
    mode: TrainMode,
    step: u64,
    rng: &mut R,
) -> Result<StepReport, DiffusionError> {
    if data.fields.is_empty() {
        return Err(DiffusionError::Config("no training fields".into()));
    }
    model.store.zero_grad();
    let mut total = 0.0;
    for _ in 0..cfg.batch {
        let (gi, field) = &data.fields[rng.random_range(0..data.fields.len())];
        let g = &data.graphs[*gi];
        let n = field.n_nodes();
        let (sigma, x, weight) = match mode {
            TrainMode::Diffusion => {
                let sigma = cfg.schedule.sigma(rng.random::<f64>())?;
                let x = field
                    .u
                    .iter()
                    .map(|v| {
                        let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                        [v[0] + sigma * a, v[1] + sigma * b]
                    })
                    .collect();
                (sigma, x, loss_weight(sigma))
            }
            TrainMode::Supervised => (1.0, vec![[0.0; 2]; n], 1.0),
        };
        let dropped = mode == TrainMode::Diffusion && rng.random::<f64>() < cfg.p_uc;
        let (m, y) = if dropped {
            (vec![0.0; n], vec![[0.0; 2]; n])
        } else {
            let s = random_sensors(&g.mesh, field, cfg.coverage, rng)?;
            (s.m, s.y)
        };
        let grads = {
            let mut tape = Tape::with_params(&model.store);
            let d = model.denoise_on(&mut tape, &g.tensors, &x, sigma, field.phi_dir, &m, &y)?;
            let target = tape.leaf(Tensor::matrix(n, 2, field.flat())?);
            let loss = tape.mse(d, target, weight)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(DiffusionError::NonFiniteLoss { loss: value, step, sigma, mesh: g.id.clone(), phi: field.phi_dir });
            }
            total += value;
            tape.backward(loss)?
        };
        model.store.accumulate(&grads);
    }
    let b = cfg.batch as f64;
    model.store.scale_grads(1.0 / b);
    let lr = cosine_lr(cfg.lr, step, cfg.steps);
    let stats = cfg.optimizer().step(&mut model.store, lr)?;
    Ok(StepReport { step, loss: total / b, lr, grad_norm: stats.grad_norm })
}

/// Runs `cfg.steps` optimizer steps from a generator seeded with `cfg.seed`
/// and returns the per-step losses.
pub fn train(
    model: &mut Denoiser,
    data: &TrainData,
    cfg: &TrainConfig,
    mode: TrainMode,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<f64>, DiffusionError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let r = train_step(model, data, cfg, mode, step, &mut rng)?;
        losses.push(r.loss);
        on_step(&r);
    }
    Ok(losses)
}

/// Single forward pass of a model trained in supervised mode.
pub fn predict_supervised(
    model: &Denoiser,
    graph: &GraphTensors,
    phi_dir: f64,
    sensors: &SensorSet,
) -> Result<FlowField, DiffusionError> {
    let n = graph.n_fine;
    let u = model.denoise(graph, &vec![[0.0; 2]; n], 1.0, phi_dir, &sensors.m, &sensors.y)?;
    Ok(FlowField { u, phi_dir, mesh_id: String::new() })
}
