use std::fmt::Write as _;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use genda::ad::{read_checkpoint, write_checkpoint};
use genda::baseline_lcsvd::SvdBasis;
use genda::diffusion::{train as run_training, SamplerConfig, TrainData, TrainMode};
use genda::experiment::{
    build_dataset, fit_lcsvd, score, sweep_grid, synthetic_meshes, write_csv, EvalTarget, GridPoint, Method, MetricRow,
    RunConfig, Scored, SweepKind, SweepPoint,
};
use genda::gnn::{Denoiser, DenoiserConfig};
use genda::mesh::{build_multiscale, decimate, Mesh, MultiscaleGraph, NodeType};
use genda::metrics::{self, RasterMap, RASTER_RES};
use genda::sensors::{SensorSet, Strategy};
use genda::synthdata::{Dataset, FlowField};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::error::{io_err, CliError};
use crate::run::Run;
use crate::{Common, EvalArgs, MethodArg, SweepArg, TrainModeArg};

fn usage<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(msg.into()))
}

fn config(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg.resolve()?)
}

fn out_dir(c: &Common) -> Result<&Path, CliError> {
    match &c.out {
        Some(p) => Ok(p),
        None => usage("--out is required"),
    }
}

/// Starts a run and stores the resolved config next to its outputs.
fn start(c: &Common, cfg: &RunConfig, command: &str, args: &str) -> Result<Run, CliError> {
    let text = serde_json::to_string(cfg)?;
    let mut run = Run::new(out_dir(c)?, command, &text, args, cfg.seed)?;
    run.write("config.json", &serde_json::to_string_pretty(cfg)?)?;
    Ok(run)
}

fn stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    for ext in [".mesh.json", ".json", ".fld"] {
        if let Some(s) = name.strip_suffix(ext) {
            return s.to_string();
        }
    }
    name
}

fn mesh_stats(m: &Mesh) -> Value {
    let count = |t: NodeType| m.node_types().iter().filter(|&&x| x == t).count();
    json!({
        "nodes": m.n_nodes(),
        "triangles": m.n_triangles(),
        "edges": m.edges().len(),
        "fluid": count(NodeType::Fluid),
        "wall": count(NodeType::Wall),
        "farfield": count(NodeType::FarField),
        "area": m.total_area(),
    })
}

fn graph_stats(g: &MultiscaleGraph) -> Value {
    json!({
        "fine": mesh_stats(&g.fine),
        "coarse": mesh_stats(&g.coarse),
        "reduction_ratio": g.n_fine() as f64 / g.n_coarse() as f64,
        "edges": { "o2o": g.o2o.len(), "r2r": g.r2r.len(), "o2r": g.o2r.len(), "r2o": g.r2o.len() },
    })
}

fn schedule_json(cfg: &RunConfig) -> Value {
    json!({ "constants": cfg.schedule, "train": cfg.train.schedule, "sampler": cfg.sampler })
}

pub fn mesh_gen(c: &Common) -> Result<(), CliError> {
    let cfg = config(c)?;
    let mut run = start(c, &cfg, "mesh gen", "")?;
    let mut meshes = match &cfg.dataset.synthetic {
        Some(s) => synthetic_meshes(s)?,
        None => Vec::new(),
    };
    for e in &cfg.dataset.meshes {
        meshes.push((e.id.clone(), Mesh::load(&e.file)?, e.split));
    }
    let mut stats = serde_json::Map::new();
    for (id, mesh, split) in &meshes {
        mesh.save(run.output(&format!("{id}.mesh.json")))?;
        let mut s = mesh_stats(mesh);
        s["split"] = json!(split);
        stats.insert(id.clone(), s);
    }
    run.set("meshes", Value::Object(stats));
    run.finish()
}

pub fn mesh_decimate(c: &Common, path: &Path, ratio: Option<f64>) -> Result<(), CliError> {
    let cfg = config(c)?;
    let ratio = ratio.unwrap_or(cfg.dataset.ratio);
    let mut run = start(c, &cfg, "mesh decimate", &format!("{} {ratio}", path.display()))?;
    let mesh = Mesh::load(path)?;
    let d = decimate(&mesh, ratio)?;
    let feasible = d.feasible;
    let coarse = d.coarse.clone();
    let g = build_multiscale(mesh, d.coarse, d.retained)?;
    let s = stem(path);
    coarse.save(run.output(&format!("{s}.coarse.mesh.json")))?;
    run.write(&format!("{s}.graph.json"), &g.to_json())?;
    run.set("target_ratio", json!(ratio));
    run.set("feasible", json!(feasible));
    run.set("stats", graph_stats(&g));
    run.finish()
}

pub fn mesh_stats_cmd(c: &Common, path: &Path, graph: Option<&Path>, ratio: Option<f64>) -> Result<(), CliError> {
    let mesh = Mesh::load(path)?;
    let stats = match (graph, ratio) {
        (Some(gp), _) => {
            let text = std::fs::read_to_string(gp).map_err(io_err(gp))?;
            graph_stats(&MultiscaleGraph::from_json(mesh, &text)?)
        }
        (None, Some(r)) => graph_stats(&MultiscaleGraph::from_mesh(mesh, r)?),
        (None, None) => mesh_stats(&mesh),
    };
    let text = serde_json::to_string_pretty(&stats)?;
    {
        use std::io::Write;
        let mut out = std::io::stdout().lock();
        if let Err(e) = writeln!(out, "{text}") {
            if e.kind() != std::io::ErrorKind::BrokenPipe {
                return Err(CliError::Io { path: "<stdout>".into(), source: e });
            }
        }
    }
    if c.out.is_some() {
        let args = format!("{} {:?} {:?}", path.display(), graph, ratio);
        let mut run = Run::new(out_dir(c)?, "mesh stats", "{}", &args, c.seed.unwrap_or(0))?;
        run.write("stats.json", &text)?;
        run.finish()?;
    }
    Ok(())
}

pub fn data_synth(c: &Common) -> Result<(), CliError> {
    let cfg = config(c)?;
    let mut run = start(c, &cfg, "data synth", "")?;
    let ds = build_dataset(&cfg.dataset)?;
    let path = ds.save(&run.out)?;
    run.output(&path.file_name().expect("manifest file").to_string_lossy());
    run.set("scale", json!(ds.scale));
    run.set("meshes", json!(ds.meshes.iter().map(|m| json!({"id": m.id, "split": m.split, "stats": graph_stats(&m.graph)})).collect::<Vec<_>>()));
    run.finish()
}

fn load_model(config: &DenoiserConfig, path: &Path) -> Result<Denoiser, CliError> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    Ok(Denoiser::from_store(config.clone(), read_checkpoint(BufReader::new(f))?)?)
}

pub fn train(c: &Common, mode: TrainModeArg, init: Option<&Path>, steps: Option<u64>) -> Result<(), CliError> {
    let cfg = config(c)?;
    let mode = match mode {
        TrainModeArg::Diffusion => TrainMode::Diffusion,
        TrainModeArg::Supervised => TrainMode::Supervised,
    };
    let mut tc = cfg.train.clone();
    if let Some(s) = steps {
        tc.steps = s;
    }
    let name = format!("train {mode:?}").to_lowercase();
    let mut run = start(c, &cfg, &name, &format!("{} {:?}", tc.steps, init))?;
    let ds = build_dataset(&cfg.dataset)?;
    let data = TrainData::from_dataset(&ds);
    let mut model = match init {
        Some(p) => load_model(&cfg.model, p)?,
        None => Denoiser::new(cfg.model.clone(), cfg.seed)?,
    };
    log::info!("{} parameters, {} training fields", model.store.numel(), data.fields.len());
    let mut log_csv = String::from("step,loss,lr,grad_norm\n");
    let t0 = Instant::now();
    let mut window = Vec::new();
    let losses = run_training(&mut model, &data, &tc, mode, |r| {
        let _ = writeln!(log_csv, "{},{},{},{}", r.step, r.loss, r.lr, r.grad_norm);
        window.push(r.loss);
        if window.len() == 50 {
            let mean = window.iter().sum::<f64>() / 50.0;
            log::info!("step {} loss {mean:.4} lr {:.2e} ({:.0}s)", r.step + 1, r.lr, t0.elapsed().as_secs_f64());
            window.clear();
        }
    })?;
    let ckpt = run.output("model.ckpt");
    let f = std::fs::File::create(&ckpt).map_err(io_err(&ckpt))?;
    write_checkpoint(&model.store, BufWriter::new(f))?;
    run.write("loss.csv", &log_csv)?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    run.set("mode", json!(mode));
    run.set("steps", json!(tc.steps));
    run.set("parameters", json!(model.store.numel()));
    run.set("final_loss_100", json!(tail.iter().sum::<f64>() / tail.len().max(1) as f64));
    run.set("dataset_scale", json!(ds.scale));
    run.set("schedule", schedule_json(&cfg));
    run.finish()
}

fn test_targets(ds: &Dataset) -> Result<Vec<EvalTarget>, CliError> {
    let idx = ds.test_indices();
    if idx.is_empty() {
        return usage("the dataset has no held-out mesh");
    }
    Ok(idx.into_iter().map(|i| EvalTarget::new(ds, i)).collect())
}

pub fn lcsvd_fit(c: &Common) -> Result<(), CliError> {
    let cfg = config(c)?;
    let mut run = start(c, &cfg, "baseline lcsvd fit", "")?;
    let ds = build_dataset(&cfg.dataset)?;
    let mut ranks = serde_json::Map::new();
    for i in ds.test_indices() {
        let m = &ds.meshes[i];
        let basis = fit_lcsvd(&ds, &m.graph.fine, cfg.eval.lcsvd_energy)?;
        basis.save(run.output(&format!("{}.svd", m.id)))?;
        ranks.insert(m.id.clone(), json!(basis.rank()));
    }
    run.set("energy", json!(cfg.eval.lcsvd_energy));
    run.set("rank", Value::Object(ranks));
    run.set("units", json!("normalized by dataset_scale"));
    run.set("dataset_scale", json!(ds.scale));
    run.finish()
}

enum Models {
    Net(Denoiser),
    Bases(Vec<SvdBasis>),
}

fn load_models(args: &EvalArgs, cfg: &RunConfig, ds: &Dataset, targets: &[EvalTarget]) -> Result<Models, CliError> {
    match args.method {
        MethodArg::Diffusion | MethodArg::Supervised => match &args.checkpoint {
            Some(p) => Ok(Models::Net(load_model(&cfg.model, p)?)),
            None => usage("--checkpoint is required for this method"),
        },
        MethodArg::Lcsvd => targets
            .iter()
            .map(|t| match &args.checkpoint {
                Some(dir) => Ok(SvdBasis::load(dir.join(format!("{}.svd", t.id)))?),
                None => Ok(fit_lcsvd(ds, &t.mesh, cfg.eval.lcsvd_energy)?),
            })
            .collect::<Result<Vec<_>, CliError>>()
            .map(Models::Bases),
    }
}

fn method<'a>(kind: MethodArg, models: &'a Models, target: usize, sampler: &SamplerConfig, gamma: f64, ensemble: usize) -> Method<'a> {
    match (kind, models) {
        (MethodArg::Diffusion, Models::Net(m)) => {
            Method::Diffusion { model: m, sampler: SamplerConfig { gamma_cfg: gamma, ..sampler.clone() }, ensemble }
        }
        (MethodArg::Supervised, Models::Net(m)) => Method::Supervised(m),
        (_, Models::Bases(b)) => Method::Lcsvd(&b[target]),
        (MethodArg::Lcsvd, Models::Net(_)) => unreachable!("lcsvd always loads bases"),
    }
}

fn strategies(args: &EvalArgs) -> Result<Option<Vec<Strategy>>, CliError> {
    args.strategy
        .as_ref()
        .map(|v| v.iter().map(|s| Strategy::from_str(s).map_err(|e| CliError::Usage(e.to_string()))).collect())
        .transpose()
}

fn single<T: Copy>(flag: &str, v: Option<Vec<T>>) -> Result<Option<T>, CliError> {
    match v.as_deref() {
        None => Ok(None),
        Some([x]) => Ok(Some(*x)),
        Some(_) => usage(format!("--{flag} takes a single value here")),
    }
}

fn run_parallel<T: Send>(jobs: usize, n: usize, f: impl Fn(usize) -> Result<T, CliError> + Sync + Send) -> Result<Vec<T>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| CliError::Usage(e.to_string()))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

fn sensor_record(t: &EvalTarget, p: &SweepPoint, s: &Scored) -> Value {
    json!({
        "mesh": t.id,
        "phi": p.point.phi,
        "n_obs": p.point.n_obs,
        "strategy": p.point.strategy,
        "seed": p.point.seed,
        "gamma": p.gamma,
        "sensor_seed": s.outcome.sensor_seed,
    })
}

struct EvalRun {
    cfg: RunConfig,
    ds: Dataset,
    targets: Vec<EvalTarget>,
    angles: Vec<f64>,
    models: Models,
    ensemble: usize,
}

fn eval_setup(c: &Common, args: &EvalArgs) -> Result<EvalRun, CliError> {
    let cfg = config(c)?;
    let ds = build_dataset(&cfg.dataset)?;
    let angles = cfg.eval_angles(&ds)?;
    let targets = test_targets(&ds)?;
    let models = load_models(args, &cfg, &ds, &targets)?;
    let ensemble = args.ensemble.unwrap_or(cfg.eval.ensemble);
    if ensemble == 0 {
        return usage("--ensemble must be at least 1");
    }
    Ok(EvalRun { cfg, ds, targets, angles, models, ensemble })
}

fn args_key(kind: &str, a: &EvalArgs) -> String {
    format!("{kind} {:?} {:?} {:?} {:?} {:?} {:?}", a.method, a.checkpoint, a.gammas, a.counts, a.strategy, a.ensemble)
}

fn finish_eval(mut run: Run, e: &EvalRun, points: &[SweepPoint], scored: &[Scored], method: MethodArg) -> Result<(), CliError> {
    let gamma_of = |p: &SweepPoint| (method == MethodArg::Diffusion).then_some(p.gamma);
    let rows = |member: bool| -> Vec<MetricRow> {
        points
            .iter()
            .zip(scored)
            .map(|(p, s)| {
                let r = if member { &s.first_member } else { &s.estimate };
                MetricRow::new(&run.run_id, &e.targets[p.target].id, &p.point, gamma_of(p), r)
            })
            .collect()
    };
    let (main, first) = (rows(false), rows(true));
    run.write("metrics.csv", &write_csv(&main))?;
    if e.ensemble > 1 {
        run.write("metrics_member0.csv", &write_csv(&first))?;
    }
    let seeds: Vec<Value> = points.iter().zip(scored).map(|(p, s)| sensor_record(&e.targets[p.target], p, s)).collect();
    run.set("method", json!(method_name(method)));
    run.set("ensemble", json!(e.ensemble));
    run.set("gammas", json!(points.iter().map(|p| p.gamma).fold(Vec::<f64>::new(), |mut v, g| {
        if method == MethodArg::Diffusion && !v.contains(&g) {
            v.push(g);
        }
        v
    })));
    run.set("schedule", schedule_json(&e.cfg));
    run.set("dataset_scale", json!(e.ds.scale));
    run.set("sensor_seeds", Value::Array(seeds));
    run.finish()
}

fn method_name(m: MethodArg) -> &'static str {
    match m {
        MethodArg::Diffusion => "diffusion",
        MethodArg::Supervised => "supervised",
        MethodArg::Lcsvd => "lcsvd",
    }
}

fn score_points(c: &Common, e: &EvalRun, points: &[SweepPoint], kind: MethodArg) -> Result<Vec<Scored>, CliError> {
    let t0 = Instant::now();
    run_parallel(c.jobs, points.len(), |i| {
        let p = &points[i];
        let m = method(kind, &e.models, p.target, &e.cfg.sampler, p.gamma, e.ensemble);
        let s = score(&m, &e.targets[p.target], &p.point, e.cfg.seed, e.cfg.eval.noise_std)?;
        log::debug!("point {i}: rrmse {:.4} ({:.1}s)", s.estimate.rrmse_u, t0.elapsed().as_secs_f64());
        Ok(s)
    })
}

pub fn assimilate(c: &Common, args: &EvalArgs) -> Result<(), CliError> {
    let e = eval_setup(c, args)?;
    let mut run = start(c, &e.cfg, "assimilate", &args_key("", args))?;
    let gamma = single("gammas", args.gammas.clone())?.unwrap_or(e.cfg.sampler.gamma_cfg);
    let count = single("counts", args.counts.clone())?;
    let strategy = single("strategy", strategies(args)?)?.unwrap_or(e.cfg.eval.strategies.first().copied().unwrap_or(Strategy::Random));
    let mut points = Vec::new();
    for (ti, t) in e.targets.iter().enumerate() {
        let n_obs = count.unwrap_or_else(|| t.coverage_count(e.cfg.eval.coverage));
        for &phi in &e.angles {
            for &seed in &e.cfg.eval.seeds {
                points.push(SweepPoint { target: ti, point: GridPoint { phi, n_obs, strategy, seed }, gamma });
            }
        }
    }
    let scored = score_points(c, &e, &points, args.method)?;
    for (p, s) in points.iter().zip(&scored) {
        let q = &p.point;
        let base = format!("{}_phi{:06.2}_n{}_{}_s{}", e.targets[p.target].id, q.phi, q.n_obs, q.strategy, q.seed);
        s.outcome.estimate.scaled(e.ds.scale).save(run.output(&format!("{base}.fld")))?;
        if let (Some(std), true) = (&s.outcome.std, e.ensemble > 1) {
            let f = FlowField { u: std.clone(), phi_dir: q.phi, mesh_id: String::new() };
            f.scaled(e.ds.scale).save(run.output(&format!("{base}_std.fld")))?;
        }
        run.write(&format!("{base}.sensors.json"), &s.outcome.sensors.to_json(false))?;
    }
    finish_eval(run, &e, &points, &scored, args.method)
}

pub fn sweep(c: &Common, kind: SweepArg, args: &EvalArgs) -> Result<(), CliError> {
    let mut e = eval_setup(c, args)?;
    let name = format!("sweep {kind:?}").to_lowercase();
    let mut run = start(c, &e.cfg, &name, &args_key(&name, args))?;
    let kind = match kind {
        SweepArg::Gamma => SweepKind::Gamma,
        SweepArg::Obs => SweepKind::Obs,
        SweepArg::Strategy => SweepKind::Strategy,
    };
    if kind == SweepKind::Gamma && args.method != MethodArg::Diffusion {
        return usage("a guidance sweep needs --method diffusion");
    }
    let mut fixed_gamma = e.cfg.sampler.gamma_cfg;
    let mut fixed_count = None;
    let mut fixed_strategy = e.cfg.eval.strategies.first().copied().unwrap_or(Strategy::Random);
    let eval = &mut e.cfg.eval;
    match kind {
        SweepKind::Gamma => {
            if let Some(g) = &args.gammas {
                eval.gammas = g.clone();
            }
        }
        _ => fixed_gamma = single("gammas", args.gammas.clone())?.unwrap_or(fixed_gamma),
    }
    match kind {
        SweepKind::Obs => {
            if let Some(n) = &args.counts {
                eval.counts = n.clone();
            }
        }
        _ => fixed_count = single("counts", args.counts.clone())?,
    }
    match (kind, strategies(args)?) {
        (SweepKind::Strategy, Some(s)) => eval.strategies = s,
        (SweepKind::Strategy, None) => {}
        (_, s) => fixed_strategy = single("strategy", s)?.unwrap_or(fixed_strategy),
    }
    if eval.gammas.iter().any(|g| !(*g >= 0.0 && g.is_finite())) || eval.counts.contains(&0) {
        return usage("gammas must be non-negative and counts positive");
    }
    let mut points = Vec::new();
    for (ti, t) in e.targets.iter().enumerate() {
        let n = fixed_count.unwrap_or_else(|| t.coverage_count(e.cfg.eval.coverage));
        points.extend(sweep_grid(kind, 1, &e.cfg.eval, &e.angles, n, fixed_strategy, fixed_gamma).into_iter().map(|p| SweepPoint { target: ti, ..p }));
    }
    log::info!("{} grid points", points.len());
    let scored = score_points(c, &e, &points, args.method)?;
    run.set("sweep", json!(kind));
    finish_eval(run, &e, &points, &scored, args.method)
}

pub fn evaluate(c: &Common, pred: &Path, truth: &Path, mesh_path: &Path, sensors: Option<&Path>) -> Result<(), CliError> {
    let mesh = Mesh::load(mesh_path)?;
    let p = FlowField::load(pred)?;
    let t = FlowField::load(truth)?;
    if p.n_nodes() != mesh.n_nodes() || t.n_nodes() != mesh.n_nodes() {
        return usage(format!("fields have {} and {} nodes, mesh has {}", p.n_nodes(), t.n_nodes(), mesh.n_nodes()));
    }
    let s = match sensors {
        Some(path) => Some(SensorSet::from_json(&mesh, &std::fs::read_to_string(path).map_err(io_err(path))?)?),
        None => None,
    };
    let seed = c.seed.unwrap_or(0);
    let args = format!("{} {} {} {:?}", pred.display(), truth.display(), mesh_path.display(), sensors);
    let mut run = Run::new(out_dir(c)?, "evaluate", "{}", &args, seed)?;
    let map = RasterMap::new(&mesh, RASTER_RES);
    let report = metrics::evaluate(&p, &t, &mesh, &map)?;
    let row = MetricRow {
        run_id: run.run_id.clone(),
        mesh: stem(mesh_path),
        phi: t.phi_dir,
        n_obs: s.as_ref().map_or(0, |s| s.len()),
        strategy: s.as_ref().map_or("none".to_string(), |s| s.strategy.to_string()),
        gamma: None,
        rrmse: report.rrmse_u,
        mac: report.mac,
        ssim: report.ssim,
        seed,
    };
    run.write("metrics.csv", &write_csv(&[row]))?;
    run.set("report", serde_json::to_value(&report)?);
    run.finish()
}
