//! Run configuration, dataset assembly and the evaluation grid shared by the
//! command-line tool and the acceptance suite.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline_lcsvd::{RankRule, SvdBasis, SvdError};
use crate::diffusion::{
    assimilate, predict_supervised, sample, DiffusionError, NoiseSchedule, SamplerConfig, TrainConfig, RHO,
    SAMPLE_SIGMA_MAX, SIGMA_MIN, TRAIN_SIGMA_MAX,
};
use crate::gnn::{Denoiser, DenoiserConfig, GraphTensors};
use crate::mesh::{synthetic_suite, Mesh, MeshError, MultiscaleGraph};
use crate::metrics::{evaluate, MetricError, MetricReport, RasterMap, RASTER_RES};
use crate::sensors::{observe, sample_strategy, SensorError, SensorSet, Strategy};
use crate::synthdata::{generate_dataset, transfer_field, Dataset, DatasetMesh, FlowField, Split, SynthError};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Svd(#[from] SvdError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn bad<T>(msg: impl Into<String>) -> Result<T, ExperimentError> {
    Err(ExperimentError::Config(msg.into()))
}

/// Randomly generated obstacle meshes; the last `n_test` are held out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub count: usize,
    pub nx: usize,
    pub seed: u64,
    pub n_test: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { count: 5, nx: 45, seed: 11, n_test: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshEntry {
    pub id: String,
    pub file: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Saved dataset to load instead of generating one.
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SuiteConfig>,
    pub meshes: Vec<MeshEntry>,
    /// Inflow directions in degrees.
    pub angles: Vec<f64>,
    pub u_ref: f64,
    /// Fine-to-coarse node ratio of the hierarchy.
    pub ratio: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic: Some(SuiteConfig::default()),
            meshes: Vec::new(),
            angles: (0..8).map(|k| 45.0 * k as f64).collect(),
            u_ref: 1.0,
            ratio: 5.0,
        }
    }
}

/// Noise levels used by training and by the sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub sigma_min: f64,
    pub train_sigma_max: f64,
    pub sample_sigma_max: f64,
    pub rho: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { sigma_min: SIGMA_MIN, train_sigma_max: TRAIN_SIGMA_MAX, sample_sigma_max: SAMPLE_SIGMA_MAX, rho: RHO }
    }
}

impl ScheduleConfig {
    pub fn training(&self) -> Result<NoiseSchedule, DiffusionError> {
        NoiseSchedule::new(self.sigma_min, self.train_sigma_max, self.rho)
    }

    pub fn sampling(&self) -> Result<NoiseSchedule, DiffusionError> {
        NoiseSchedule::new(self.sigma_min, self.sample_sigma_max, self.rho)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub counts: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub gammas: Vec<f64>,
    pub ensemble: usize,
    /// Evaluation seeds; one grid point per seed.
    pub seeds: Vec<u64>,
    /// Angles to evaluate (a subset of the dataset angles); all when empty.
    pub angles: Vec<f64>,
    /// Fraction of fluid nodes observed when a sweep does not vary the count.
    pub coverage: f64,
    pub noise_std: f64,
    /// Retained energy fraction of the gappy-SVD baseline.
    pub lcsvd_energy: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            counts: vec![10, 30, 100, 300],
            strategies: Strategy::ALL.to_vec(),
            gammas: vec![0.0, 1.0, 2.0, 4.0],
            ensemble: 1,
            seeds: (0..5).collect(),
            angles: Vec::new(),
            coverage: 0.01,
            noise_std: 0.0,
            lcsvd_energy: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io { path: path.into(), source })?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(m) = &mut cfg.dataset.manifest {
            *m = base.join(&*m);
        }
        for e in &mut cfg.dataset.meshes {
            e.file = base.join(&e.file);
        }
        Ok(cfg)
    }

    /// Copies the schedule block and the run seed into the train and sampler
    /// blocks, then validates everything.
    pub fn resolve(mut self) -> Result<Self, ExperimentError> {
        self.train.schedule = self.schedule.training()?;
        self.sampler.schedule = self.schedule.sampling()?;
        self.train.seed = self.seed;
        self.sampler.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let d = &self.dataset;
        if d.manifest.is_none() {
            if d.synthetic.is_none() && d.meshes.is_empty() {
                return bad("dataset needs a manifest, a synthetic suite or mesh files");
            }
            if d.angles.is_empty() {
                return bad("dataset.angles is empty");
            }
            if !(d.u_ref > 0.0) || !(d.ratio >= 1.0) {
                return bad(format!("u_ref {} must be positive and ratio {} at least 1", d.u_ref, d.ratio));
            }
            if let Some(s) = &d.synthetic {
                if s.n_test > s.count {
                    return bad(format!("synthetic.n_test {} exceeds count {}", s.n_test, s.count));
                }
            }
            let mut ids: Vec<String> = self.synthetic_ids();
            for e in &d.meshes {
                if !e.file.is_file() {
                    return bad(format!("mesh file {} does not exist", e.file.display()));
                }
                ids.push(e.id.clone());
            }
            for (i, id) in ids.iter().enumerate() {
                if id.is_empty() || id.contains([',', '/', '\\', '"', '\n']) {
                    return bad(format!("mesh id `{id}` must be non-empty without separators"));
                }
                if ids[..i].contains(id) {
                    return bad(format!("mesh id `{id}` used twice"));
                }
            }
        } else if let Some(m) = &d.manifest {
            if !m.is_file() {
                return bad(format!("manifest {} does not exist", m.display()));
            }
        }
        self.model.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.train.validate()?;
        self.sampler.validate()?;
        let e = &self.eval;
        if e.gammas.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return bad("gamma grid must be finite and non-negative");
        }
        if e.counts.contains(&0) {
            return bad("observation counts must be positive");
        }
        if e.ensemble == 0 || e.seeds.is_empty() {
            return bad("ensemble size and seed list must be non-empty");
        }
        if !(e.coverage > 0.0 && e.coverage <= 1.0) {
            return bad(format!("coverage {} outside (0, 1]", e.coverage));
        }
        if !(e.noise_std >= 0.0) || !(e.lcsvd_energy > 0.0 && e.lcsvd_energy <= 1.0) {
            return bad("noise_std must be >= 0 and lcsvd_energy in (0, 1]");
        }
        if d.manifest.is_none() {
            if let Some(a) = e.angles.iter().find(|a| !d.angles.contains(a)) {
                return bad(format!("eval angle {a} is not a dataset angle"));
            }
        }
        Ok(())
    }

    fn synthetic_ids(&self) -> Vec<String> {
        let n = self.dataset.synthetic.as_ref().map_or(0, |s| s.count);
        (0..n).map(|i| format!("syn{i}")).collect()
    }

    /// Evaluation angles, defaulting to every dataset angle.
    pub fn eval_angles(&self, ds: &Dataset) -> Result<Vec<f64>, ExperimentError> {
        if self.eval.angles.is_empty() {
            return Ok(ds.angles.clone());
        }
        if let Some(a) = self.eval.angles.iter().find(|a| ds.angle_index(**a).is_none()) {
            return bad(format!("eval angle {a} is not a dataset angle"));
        }
        Ok(self.eval.angles.clone())
    }
}

/// Meshes of the synthetic suite, ids `syn0..`, the last `n_test` held out.
pub fn synthetic_meshes(s: &SuiteConfig) -> Result<Vec<(String, Mesh, Split)>, ExperimentError> {
    Ok(synthetic_suite(s.count, s.nx, s.seed)?
        .into_iter()
        .enumerate()
        .map(|(i, (_, m))| {
            let split = if i + s.n_test >= s.count { Split::Test } else { Split::Train };
            (format!("syn{i}"), m, split)
        })
        .collect())
}

/// Generates (or loads) the dataset described by `cfg`.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset, ExperimentError> {
    if let Some(m) = &cfg.manifest {
        return Ok(Dataset::load(m)?);
    }
    let mut meshes = match &cfg.synthetic {
        Some(s) => synthetic_meshes(s)?,
        None => Vec::new(),
    };
    for e in &cfg.meshes {
        meshes.push((e.id.clone(), Mesh::load(&e.file)?, e.split));
    }
    let meshes = meshes
        .into_iter()
        .map(|(id, mesh, split)| {
            log::info!("decimating `{id}` ({} nodes)", mesh.n_nodes());
            Ok(DatasetMesh { id, graph: MultiscaleGraph::from_mesh(mesh, cfg.ratio)?, split })
        })
        .collect::<Result<Vec<_>, MeshError>>()?;
    Ok(generate_dataset(meshes, &cfg.angles, cfg.u_ref)?)
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of `parts`, stable across platforms and releases.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3, |h, &p| mix64(h ^ p))
}

/// FNV-1a of a string, for folding ids into seeds.
pub fn str_key(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

const SENSOR_TAG: u64 = 1;
const SAMPLER_TAG: u64 = 2;

/// A held-out mesh with everything needed to score reconstructions on it.
pub struct EvalTarget {
    pub id: String,
    pub mesh: Mesh,
    pub tensors: GraphTensors,
    pub map: RasterMap,
    pub angles: Vec<f64>,
    /// Normalized truth per entry of `angles`.
    pub truth: Vec<FlowField>,
}

impl EvalTarget {
    pub fn new(ds: &Dataset, mesh_index: usize) -> Self {
        let m = &ds.meshes[mesh_index];
        Self {
            id: m.id.clone(),
            mesh: m.graph.fine.clone(),
            tensors: GraphTensors::new(&m.graph),
            map: RasterMap::new(&m.graph.fine, RASTER_RES),
            angles: ds.angles.clone(),
            truth: ds.fields[mesh_index].clone(),
        }
    }

    pub fn truth_at(&self, phi: f64) -> Result<&FlowField, ExperimentError> {
        match self.angles.iter().position(|&a| a == phi) {
            Some(i) => Ok(&self.truth[i]),
            None => bad(format!("no truth field at angle {phi} on `{}`", self.id)),
        }
    }

    /// Sensor count matching a coverage fraction of the fluid nodes.
    pub fn coverage_count(&self, coverage: f64) -> usize {
        ((coverage * self.mesh.fluid_nodes().len() as f64).round() as usize).max(1)
    }
}

/// Gappy-SVD basis on the target mesh from every training field, carried
/// over to the target by linear interpolation.
pub fn fit_lcsvd(ds: &Dataset, target: &Mesh, energy: f64) -> Result<SvdBasis, ExperimentError> {
    let mut snaps = Vec::new();
    for i in ds.train_indices() {
        let src = &ds.meshes[i].graph.fine;
        for f in &ds.fields[i] {
            snaps.push(transfer_field(src, f, target));
        }
    }
    let rule = if energy >= 1.0 { RankRule::Full } else { RankRule::Energy(energy) };
    Ok(SvdBasis::fit(&snaps, rule)?)
}

/// How a reconstruction is produced.
pub enum Method<'a> {
    Diffusion { model: &'a Denoiser, sampler: SamplerConfig, ensemble: usize },
    /// Unguided draw from the model, ignoring the sensors.
    Prior { model: &'a Denoiser, sampler: SamplerConfig },
    Supervised(&'a Denoiser),
    Lcsvd(&'a SvdBasis),
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Diffusion { .. } => "diffusion",
            Method::Prior { .. } => "prior",
            Method::Supervised(_) => "supervised",
            Method::Lcsvd(_) => "lcsvd",
        }
    }

    /// Guidance weight, for the methods that have one.
    pub fn gamma(&self) -> Option<f64> {
        match self {
            Method::Diffusion { sampler, .. } => Some(sampler.gamma_cfg),
            Method::Prior { .. } => Some(0.0),
            _ => None,
        }
    }
}

/// One cell of an evaluation grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub phi: f64,
    pub n_obs: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

impl GridPoint {
    /// Seed of the sensor draw. Independent of the method and of gamma so
    /// that every method sees the same sensors.
    pub fn sensor_seed(&self, run_seed: u64, mesh_id: &str) -> u64 {
        derive_seed(&[run_seed, SENSOR_TAG, self.seed, str_key(mesh_id), self.phi.to_bits(), self.n_obs as u64, self.strategy as u64])
    }

    pub fn sampler_seed(&self, run_seed: u64, mesh_id: &str) -> u64 {
        derive_seed(&[run_seed, SAMPLER_TAG, self.seed, str_key(mesh_id), self.phi.to_bits(), self.n_obs as u64, self.strategy as u64])
    }

    pub fn sensors(&self, target: &EvalTarget, run_seed: u64, noise_std: f64) -> Result<SensorSet, ExperimentError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.sensor_seed(run_seed, &target.id));
        let s = sample_strategy(&target.mesh, self.strategy, self.n_obs, &mut rng)?.with_noise(noise_std);
        Ok(observe(target.truth_at(self.phi)?, &s, &mut rng)?)
    }
}

/// Reconstruction of one grid point: the estimate, the first ensemble
/// member (equal to the estimate unless the ensemble is larger than one),
/// the per-node spread and the observed sensors.
pub struct Outcome {
    pub estimate: FlowField,
    pub first_member: FlowField,
    pub std: Option<Vec<[f64; 2]>>,
    pub sensors: SensorSet,
    pub sensor_seed: u64,
}

pub fn reconstruct(
    method: &Method,
    target: &EvalTarget,
    point: &GridPoint,
    run_seed: u64,
    noise_std: f64,
) -> Result<Outcome, ExperimentError> {
    let sensors = point.sensors(target, run_seed, noise_std)?;
    let sampler_seed = point.sampler_seed(run_seed, &target.id);
    let (estimate, first_member, std) = match method {
        Method::Diffusion { model, sampler, ensemble } => {
            let cfg = SamplerConfig { seed: sampler_seed, ..sampler.clone() };
            let e = assimilate(model, &target.tensors, point.phi, &sensors, &cfg, *ensemble)?;
            let first = e.members[0].clone();
            (e.mean, first, Some(e.std))
        }
        Method::Prior { model, sampler } => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[sampler_seed, 0x9e10]));
            let f = sample(model, &target.tensors, point.phi, None, sampler, &mut rng)?;
            (f.clone(), f, None)
        }
        Method::Supervised(model) => {
            let f = predict_supervised(model, &target.tensors, point.phi, &sensors)?;
            (f.clone(), f, None)
        }
        Method::Lcsvd(basis) => {
            let r = basis.reconstruct(&sensors)?;
            if r.rank_reduced {
                log::info!("lcsvd on `{}`: rank reduced to {}", target.id, r.rank_used);
            }
            (r.field.clone(), r.field, None)
        }
    };
    let tag = |mut f: FlowField| {
        f.phi_dir = point.phi;
        f.mesh_id = target.id.clone();
        f
    };
    Ok(Outcome { estimate: tag(estimate), first_member: tag(first_member), std, sensors, sensor_seed: point.sensor_seed(run_seed, &target.id) })
}

/// One line of a metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub mesh: String,
    pub phi: f64,
    pub n_obs: usize,
    pub strategy: String,
    pub gamma: Option<f64>,
    pub rrmse: f64,
    pub mac: f64,
    pub ssim: f64,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "run_id,mesh,phi,n_obs,strategy,gamma,rrmse,mac,ssim,seed";

impl MetricRow {
    pub fn new(run_id: &str, mesh: &str, point: &GridPoint, gamma: Option<f64>, r: &MetricReport) -> Self {
        Self {
            run_id: run_id.to_string(),
            mesh: mesh.to_string(),
            phi: point.phi,
            n_obs: point.n_obs,
            strategy: point.strategy.to_string(),
            gamma,
            rrmse: r.rrmse_u,
            mac: r.mac,
            ssim: r.ssim,
            seed: point.seed,
        }
    }

    pub fn to_csv(&self) -> String {
        let gamma = self.gamma.map(|g| g.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.run_id, self.mesh, self.phi, self.n_obs, self.strategy, gamma, self.rrmse, self.mac, self.ssim, self.seed
        )
    }
}

pub fn write_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Scores of the estimate and of the first ensemble member.
pub struct Scored {
    pub outcome: Outcome,
    pub estimate: MetricReport,
    pub first_member: MetricReport,
}

pub fn score(method: &Method, target: &EvalTarget, point: &GridPoint, run_seed: u64, noise_std: f64) -> Result<Scored, ExperimentError> {
    let outcome = reconstruct(method, target, point, run_seed, noise_std)?;
    let truth = target.truth_at(point.phi)?;
    let estimate = evaluate(&outcome.estimate, truth, &target.mesh, &target.map)?;
    let first_member = if outcome.first_member.u == outcome.estimate.u {
        estimate.clone()
    } else {
        evaluate(&outcome.first_member, truth, &target.mesh, &target.map)?
    };
    Ok(Scored { outcome, estimate, first_member })
}

/// Which axis a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Gamma,
    Obs,
    Strategy,
}

/// A point of a sweep together with the guidance weight it runs at.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub target: usize,
    pub point: GridPoint,
    pub gamma: f64,
}

/// Grid of a sweep over `n_targets` meshes, in output order: mesh, swept
/// value, angle, seed. `count` and `strategy` are the values held fixed.
pub fn sweep_grid(
    kind: SweepKind,
    n_targets: usize,
    eval: &EvalConfig,
    angles: &[f64],
    count: usize,
    strategy: Strategy,
    gamma: f64,
) -> Vec<SweepPoint> {
    let axis: Vec<(usize, Strategy, f64)> = match kind {
        SweepKind::Gamma => eval.gammas.iter().map(|&g| (count, strategy, g)).collect(),
        SweepKind::Obs => eval.counts.iter().map(|&n| (n, strategy, gamma)).collect(),
        SweepKind::Strategy => eval.strategies.iter().map(|&s| (count, s, gamma)).collect(),
    };
    let mut out = Vec::new();
    for target in 0..n_targets {
        for &(n_obs, strategy, gamma) in &axis {
            for &phi in angles {
                for &seed in &eval.seeds {
                    out.push(SweepPoint { target, point: GridPoint { phi, n_obs, strategy, seed }, gamma });
                }
            }
        }
    }
    out
}
