//! Acceptance criteria A1-A11. One sequential test: A5-A7 and A11 reuse the
//! model trained in A4 and share grid points. Each criterion prints a single
//! PASS/FAIL line (written straight to stdout so the harness does not
//! capture it); the test fails if any criterion fails.

use std::io::Write;
use std::time::Instant;

use genda::ad::{Tape, Tensor};
use genda::baseline_lcsvd::{RankRule, SvdBasis};
use genda::diffusion::{
    cfg_combine, sample_with, train, NoiseSchedule, SamplerConfig, TrainConfig, TrainData, TrainMode,
    SIGMA_MIN, TRAIN_SIGMA_MAX,
};
use genda::experiment::{build_dataset, fit_lcsvd, score, DatasetConfig, EvalTarget, GridPoint, Method, Scored, SuiteConfig};
use genda::gnn::{Denoiser, DenoiserConfig, GraphTensors};
use genda::mesh::{decimate, MultiscaleGraph, NodeType, SyntheticMeshSpec};
use genda::metrics::{interpolate_to_grid, mac, rrmse, ssim, Quantity, MAC_EPS};
use genda::sensors::{SensorSet, Strategy};
use genda::synthdata::{solve_potential_flow, FlowField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

const RUN_SEED: u64 = 1;
const TRAIN_STEPS: u64 = 2000;
const LR: f64 = 1e-3;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Inflow angle paired with each evaluation seed.
const SEED_ANGLES: [f64; 5] = [45.0, 135.0, 225.0, 315.0, 90.0];
const COUNTS: [usize; 4] = [10, 30, 100, 300];
const COVERAGE: f64 = 0.01;

struct Report {
    lines: Vec<(String, bool)>,
}

impl Report {
    fn record(&mut self, id: &str, pass: bool, detail: String, secs: f64) {
        let line = format!("{id} {} {detail} [{secs:.1}s]", if pass { "PASS" } else { "FAIL" });
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
        self.lines.push((line, pass));
    }
}

fn log(msg: &str) {
    let _ = writeln!(std::io::stderr(), "  .. {msg}");
}

fn rel_err(an: f64, fd: f64) -> f64 {
    (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6)
}

/// Richardson-extrapolated central difference of `f` at step `h`.
fn fd(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    let c1 = (f(h) - f(-h)) / (2.0 * h);
    let c2 = (f(h / 2.0) - f(-h / 2.0)) / h;
    (4.0 * c2 - c1) / 3.0
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Max relative error of a composite `build(tape, leaves) -> scalar` over
/// every input coordinate.
fn check_primitive(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[genda::ad::Var]) -> genda::ad::Var) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<_> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = build(&mut t, &vs);
        t.value(out).item()
    };
    let mut t = Tape::new();
    let vs: Vec<_> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let out = build(&mut t, &vs);
    let g = t.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let an = g.wrt(vs[k]).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
        for i in 0..x.numel() {
            let h = 1e-4 * (1.0 + x.data()[i].abs());
            let num = fd(
                |d| {
                    let mut xs = inputs.clone();
                    xs[k].data_mut()[i] += d;
                    eval(&xs)
                },
                h,
            );
            worst = worst.max(rel_err(an[i], num));
        }
    }
    worst
}

fn a1_gradients() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut prim: Vec<(&str, f64)> = Vec::new();
    let w = |r: &mut ChaCha8Rng, s: &[usize]| rand_tensor(r, s);
    let (x, wm, b) = (w(&mut rng, &[4, 3]), w(&mut rng, &[3, 5]), w(&mut rng, &[5]));
    prim.push(("affine", check_primitive(vec![x.clone(), wm, b], |t, v| {
        let y = t.affine(v[0], v[1], Some(v[2])).unwrap();
        let y2 = t.silu(y);
        let s = t.scale(y2, 0.7);
        t.sum(s)
    })));
    let (a, c) = (w(&mut rng, &[4, 3]), w(&mut rng, &[4, 2]));
    prim.push(("add_concat_mse", check_primitive(vec![x.clone(), a, c.clone()], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let cat = t.concat(&[s, v[2]]).unwrap();
        let sq = t.concat(&[v[0], v[2]]).unwrap();
        t.mse(cat, sq, 1.3).unwrap()
    })));
    let idx = [2usize, 0, 3, 3, 1, 2];
    prim.push(("gather_scatter", check_primitive(vec![x.clone(), w(&mut rng, &[6, 3])], |t, v| {
        let g = t.gather(v[0], &idx).unwrap();
        let gs = t.gather_sum(&[(v[0], Some(&idx[..])), (v[1], None)]).unwrap();
        let s = t.add(g, gs).unwrap();
        let back = t.scatter_sum(s, &idx, 5).unwrap();
        let sq = t.silu(back);
        t.sum(sq)
    })));
    let (xn, gm, bt) = (w(&mut rng, &[5, 6]), w(&mut rng, &[1, 6]), w(&mut rng, &[1, 6]));
    let target = w(&mut rng, &[5, 6]);
    prim.push(("cond_layer_norm", check_primitive(vec![xn, gm, bt, target], |t, v| {
        let y = t.cond_layer_norm(v[0], v[1], v[2]).unwrap();
        t.mse(y, v[3], 1.0).unwrap()
    })));
    let prim_worst = prim.iter().map(|p| p.1).fold(0.0, f64::max);

    // Full denoiser on a 30-node mesh.
    let mesh = SyntheticMeshSpec { half_width: 50.0, half_height: 40.0, nx: 6, obstacles: vec![], jitter: 0.2, seed: 5 }
        .generate()
        .unwrap();
    let n = mesh.n_nodes();
    let graph = MultiscaleGraph::from_mesh(mesh, 2.0).unwrap();
    let gt = GraphTensors::new(&graph);
    let mut model = Denoiser::new(DenoiserConfig::default(), 3).unwrap();
    let ids: Vec<_> = model.store.ids().collect();
    for &id in &ids {
        for v in model.store.value_mut(id).data_mut() {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
    }
    let u: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let m: Vec<f64> = (0..n).map(|i| if i % 4 == 1 { 1.0 } else { 0.0 }).collect();
    let y: Vec<[f64; 2]> = m.iter().map(|&mi| [0.4 * mi, -0.3 * mi]).collect();
    let target: Vec<f64> = (0..2 * n).map(|i| (i as f64 * 0.37).cos()).collect();
    let loss_of = |store: &genda::ad::ParamStore, grads: bool| {
        let mut t = Tape::with_params(store);
        let d = model.denoise_on(&mut t, &gt, &u, 0.8, 15.0, &m, &y).unwrap();
        let tg = t.leaf(Tensor::matrix(n, 2, target.clone()).unwrap());
        let l = t.mse(d, tg, 1.0).unwrap();
        let g = grads.then(|| t.backward(l).unwrap().param_grads().map(|(id, g)| (id, g.clone())).collect::<Vec<_>>());
        (t.value(l).item(), g)
    };
    let grads = loss_of(&model.store, true).1.unwrap();
    let mut store = model.store.clone();
    let mut full_worst: f64 = 0.0;
    let mut checked = 0;
    for (id, g) in &grads {
        for _ in 0..20 {
            let k = rng.random_range(0..g.numel());
            let x0 = store.value(*id).data()[k];
            let num = fd(
                |d| {
                    store.value_mut(*id).data_mut()[k] = x0 + d;
                    loss_of(&store, false).0
                },
                1e-4 * (1.0 + x0.abs()),
            );
            store.value_mut(*id).data_mut()[k] = x0;
            full_worst = full_worst.max(rel_err(g.data()[k], num));
            checked += 1;
        }
    }
    let pass = full_worst < 1e-4 && prim_worst < 1e-5 && grads.len() == ids.len();
    let detail = format!(
        "full denoiser ({n} nodes, {} tensors, {checked} coords) max rel err {full_worst:.2e} < 1e-4; primitives max {prim_worst:.2e} < 1e-5",
        grads.len()
    );
    (pass, detail)
}

fn a2_cfg() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bad = 0;
    for trial in 0..200 {
        let n = 1 + trial % 17;
        let scale = 10f64.powi(trial as i32 % 13 - 6);
        let du: Vec<[f64; 2]> = (0..n).map(|_| [scale * rng.random_range(-1.0..1.0), scale * rng.random_range(-1.0..1.0)]).collect();
        let dc: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-1e3..1e3), rng.random_range(-1e-3..1e-3)]).collect();
        let g0 = cfg_combine(&du, &dc, 0.0).unwrap();
        let g1 = cfg_combine(&du, &dc, 1.0).unwrap();
        for i in 0..n {
            for c in 0..2 {
                bad += (g0[i][c].to_bits() != du[i][c].to_bits()) as usize;
                bad += (g1[i][c].to_bits() != dc[i][c].to_bits()) as usize;
            }
        }
    }
    (bad == 0, format!("gamma=0 -> uncond, gamma=1 -> cond bit-exact over 200 random cases ({bad} mismatches)"))
}

fn a3_sampler() -> (bool, String) {
    let u0: Vec<[f64; 2]> = (0..64).map(|i| [(i as f64 * 0.3).sin(), 2.0 * (i as f64 * 0.7).cos()]).collect();
    let mut worst: f64 = 0.0;
    for t in [1, 5, 20] {
        let cfg = SamplerConfig { steps: t, s_churn: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        let x = sample_with(u0.len(), &cfg, &mut rng, |_, _| Ok(u0.clone())).unwrap();
        for (a, b) in x.iter().zip(&u0) {
            worst = worst.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
        }
    }
    let s = NoiseSchedule::training();
    let e0 = (s.sigma(0.0).unwrap() - 48.5232).abs();
    let e1 = (s.sigma(1.0).unwrap() - 0.011028).abs();
    let pass = worst < 1e-10 && e0 < 1e-12 && e1 < 1e-12 && TRAIN_SIGMA_MAX == 48.5232 && SIGMA_MIN == 0.011028;
    (pass, format!("perfect denoiser T in {{1,5,20}} max err {worst:.1e} < 1e-10; |sigma(0)-48.5232| = {e0:.1e}, |sigma(1)-0.011028| = {e1:.1e}"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for k in i..=j {
            r[idx[k]] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Two-sided paired t-test p-value.
fn paired_p(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let md = mean(&d);
    let sd = (d.iter().map(|x| (x - md).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd == 0.0 {
        return if md == 0.0 { 1.0 } else { 0.0 };
    }
    let t = md / (sd / n.sqrt());
    2.0 * (1.0 - StudentsT::new(0.0, 1.0, n - 1.0).unwrap().cdf(t.abs()))
}

fn point(k: usize, n_obs: usize, strategy: Strategy) -> GridPoint {
    GridPoint { phi: SEED_ANGLES[k], n_obs, strategy, seed: SEEDS[k] }
}

fn eval_all(method: &Method, target: &EvalTarget, points: &[GridPoint]) -> Vec<Scored> {
    points.iter().map(|p| score(method, target, p, RUN_SEED, 0.0).unwrap()).collect()
}

fn rr(s: &[Scored]) -> Vec<f64> {
    s.iter().map(|x| x.estimate.rrmse_u).collect()
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

fn a8_lcsvd(ds: &genda::synthdata::Dataset) -> (bool, String) {
    let i = ds.train_indices()[0];
    let mesh = &ds.meshes[i].graph.fine;
    let snaps = &ds.fields[i];
    let basis = SvdBasis::fit(snaps, RankRule::Full).unwrap();
    let r = basis.rank();
    let gram = basis.modes.transpose() * &basis.modes;
    let mut ortho: f64 = 0.0;
    for a in 0..r {
        for b in 0..r {
            ortho = ortho.max((gram[(a, b)] - if a == b { 1.0 } else { 0.0 }).abs());
        }
    }
    let fluid = mesh.fluid_nodes();
    let mut worst: f64 = 0.0;
    for f in snaps {
        let mut s = SensorSet::new(mesh, fluid.clone(), Strategy::Random).unwrap();
        for &k in &fluid {
            s.y[k] = f.u[k];
        }
        let rec = basis.reconstruct(&s).unwrap();
        worst = worst.max(rrmse(&rec.field, f, Quantity::U).unwrap());
    }
    let pass = worst < 1e-8 && ortho < 1e-10;
    (pass, format!("{} snapshots, rank {r}, every fluid node observed: max rrmse {worst:.2e} < 1e-8; orthonormality dev {ortho:.1e} < 1e-10", snaps.len()))
}

fn a9_hierarchy(ds: &genda::synthdata::Dataset, ratio: f64) -> (bool, String) {
    let mut pass = true;
    let mut parts = Vec::new();
    for m in &ds.meshes {
        let g = &m.graph;
        let d = decimate(&g.fine, ratio).unwrap();
        let count = |mesh: &genda::mesh::Mesh, t: NodeType| mesh.node_types().iter().filter(|&&x| x == t).count();
        let kept = [NodeType::Wall, NodeType::FarField].iter().all(|&t| count(&g.fine, t) == count(&g.coarse, t));
        let kept_ids = g.fine.node_types().iter().enumerate().filter(|(_, t)| t.is_boundary()).all(|(i, _)| g.retained.contains(&i));
        let o2r = g.o2r.len() == g.n_fine() - g.n_coarse();
        let achieved = g.n_fine() as f64 / g.n_coarse() as f64;
        let in_band = !d.feasible || (0.7 * ratio..=1.3 * ratio).contains(&achieved);
        pass &= kept && kept_ids && o2r && in_band && d.coarse.n_nodes() == g.n_coarse();
        parts.push(format!("{} {}->{} x{achieved:.2}{}", m.id, g.n_fine(), g.n_coarse(), if d.feasible { "" } else { " (infeasible)" }));
    }
    (pass, format!("boundary nodes kept, |o2r| = Nf - Nc, ratio in [0.7, 1.3] x {ratio}: {}", parts.join(", ")))
}

fn a10_metrics() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 200;
    let x = FlowField { u: (0..n).map(|_| [rng.random_range(0.1..2.0), rng.random_range(-2.0..2.0)]).collect(), phi_dir: 0.0, mesh_id: String::new() };
    let zero = FlowField::zeros(n, 0.0);
    let neg = x.scaled(-1.0);
    let mut worst: f64 = 0.0;
    worst = worst.max(rrmse(&x, &x, Quantity::U).unwrap());
    worst = worst.max((rrmse(&zero, &x, Quantity::U).unwrap() - 1.0).abs());
    worst = worst.max((mac(&x, &x, MAC_EPS).unwrap() - 1.0).abs());
    worst = worst.max((mac(&neg, &x, MAC_EPS).unwrap() + 1.0).abs());
    let mesh = SyntheticMeshSpec { half_width: 50.0, half_height: 50.0, nx: 25, obstacles: vec![], jitter: 0.2, seed: 9 }.generate().unwrap();
    let field = FlowField { u: mesh.coords().iter().map(|p| [1.0 + 0.01 * p[0], 0.02 * p[1]]).collect(), phi_dir: 0.0, mesh_id: String::new() };
    let r = interpolate_to_grid(&field, &mesh, 256);
    worst = worst.max((ssim(&r, &r, None).unwrap() - 1.0).abs());
    let mut fem: f64 = 0.0;
    for phi in [0.0, 30.0, 90.0, 200.0] {
        let f = solve_potential_flow(&mesh, phi, 1.0).unwrap();
        let want = [phi.to_radians().cos(), phi.to_radians().sin()];
        for u in &f.u {
            fem = fem.max((u[0] - want[0]).abs()).max((u[1] - want[1]).abs());
        }
    }
    (worst < 1e-6 && fem < 1e-6, format!("metric identities max dev {worst:.1e}, obstacle-free FEM uniform-flow max dev {fem:.1e} (both < 1e-6)"))
}

#[test]
fn acceptance() {
    let suite_start = Instant::now();
    let mut rep = Report { lines: Vec::new() };
    let mut other_secs = 0.0;
    let timed = |f: &mut dyn FnMut() -> (bool, String)| {
        let t = Instant::now();
        let r = f();
        (r.0, r.1, t.elapsed().as_secs_f64())
    };

    for (id, f) in [("A1", a1_gradients as fn() -> (bool, String)), ("A2", a2_cfg), ("A3", a3_sampler)] {
        let (p, d, s) = timed(&mut || f());
        let limit_ok = id != "A1" || s < 120.0;
        rep.record(id, p && limit_ok, if id == "A1" { format!("{d}; runtime {s:.0}s < 120s") } else { d }, s);
        other_secs += s;
    }

    let t = Instant::now();
    let dcfg = DatasetConfig {
        synthetic: Some(SuiteConfig { count: 5, nx: 45, seed: 11, n_test: 1 }),
        ..DatasetConfig::default()
    };
    let ds = build_dataset(&dcfg).unwrap();
    let data = TrainData::from_dataset(&ds);
    let test = ds.test_indices()[0];
    let target = EvalTarget::new(&ds, test);
    let setup = t.elapsed().as_secs_f64();
    other_secs += setup;
    log(&format!("dataset: {} meshes x {} angles, held-out `{}` ({} nodes), {setup:.1}s", ds.meshes.len(), ds.angles.len(), target.id, target.mesh.n_nodes()));

    // A4
    let t = Instant::now();
    let tc = TrainConfig { steps: TRAIN_STEPS, lr: LR, seed: RUN_SEED, ..Default::default() };
    let mut model = Denoiser::new(DenoiserConfig::default(), RUN_SEED).unwrap();
    let losses = train(&mut model, &data, &tc, TrainMode::Diffusion, |r| {
        if (r.step + 1) % 250 == 0 {
            log(&format!("diffusion step {} loss {:.4} ({:.0}s)", r.step + 1, r.loss, t.elapsed().as_secs_f64()));
        }
    })
    .unwrap();
    let a4_secs = t.elapsed().as_secs_f64();
    let smooth = |end: usize| mean(&losses[end.saturating_sub(100)..end]);
    let (base, last) = (smooth(50), smooth(losses.len()));
    let drop = 1.0 - last / base;
    let avg_nodes = mean(&data.graphs.iter().map(|g| g.mesh.n_nodes() as f64).collect::<Vec<_>>());
    rep.record(
        "A4",
        drop >= 0.5 && a4_secs < 1800.0,
        format!(
            "{TRAIN_STEPS} steps on {} meshes (~{avg_nodes:.0} nodes, {} angles): smoothed loss {base:.4} at step 50 -> {last:.4}, reduction {:.1}% >= 50%; runtime {:.1} min < 30",
            data.graphs.len(),
            ds.angles.len(),
            100.0 * drop,
            a4_secs / 60.0
        ),
        a4_secs,
    );

    let sampler = SamplerConfig { seed: RUN_SEED, ..Default::default() };
    let diff = |gamma: f64| Method::Diffusion { model: &model, sampler: SamplerConfig { gamma_cfg: gamma, ..sampler.clone() }, ensemble: 1 };

    // A5
    let t = Instant::now();
    let mut by_count = Vec::new();
    for &n in &COUNTS {
        let pts: Vec<GridPoint> = (0..SEEDS.len()).map(|k| point(k, n, Strategy::Random)).collect();
        let s = eval_all(&diff(2.0), &target, &pts);
        let v = [mean(&rr(&s)), mean(&s.iter().map(|x| x.estimate.ssim).collect::<Vec<_>>()), mean(&s.iter().map(|x| x.estimate.mac).collect::<Vec<_>>())];
        log(&format!("count {n}: rrmse {:.4} ssim {:.4} mac {:.4}", v[0], v[1], v[2]));
        by_count.push(v);
    }
    let cs: Vec<f64> = COUNTS.iter().map(|&c| c as f64).collect();
    let col = |j: usize| by_count.iter().map(|v| v[j]).collect::<Vec<_>>();
    let (r_rr, r_ss, r_mac) = (spearman(&cs, &col(0)), spearman(&cs, &col(1)), spearman(&cs, &col(2)));
    let mono_dn = |v: &[f64]| v.windows(2).all(|w| w[1] <= w[0]);
    let mono_up = |v: &[f64]| v.windows(2).all(|w| w[1] >= w[0]);
    let pass5 = mono_dn(&col(0)) && mono_up(&col(1)) && mono_up(&col(2)) && r_rr <= -0.9 && r_ss >= 0.9 && r_mac >= 0.9;
    let s5 = t.elapsed().as_secs_f64();
    other_secs += s5;
    rep.record(
        "A5",
        pass5,
        format!(
            "counts {COUNTS:?}, mean of 5 seeds: rrmse {} (rho {r_rr:.2} <= -0.9), ssim {} (rho {r_ss:.2} >= 0.9), mac {} (rho {r_mac:.2} >= 0.9)",
            fmt(&col(0)),
            fmt(&col(1)),
            fmt(&col(2))
        ),
        s5,
    );

    // A6
    let t = Instant::now();
    let n1 = target.coverage_count(COVERAGE);
    let pts: Vec<GridPoint> = (0..SEEDS.len()).map(|k| point(k, n1, Strategy::Random)).collect();
    let g2 = eval_all(&diff(2.0), &target, &pts);
    let g0 = eval_all(&diff(0.0), &target, &pts);
    let prior = eval_all(&Method::Prior { model: &model, sampler: sampler.clone() }, &target, &pts);
    let (m2, m0, mp) = (mean(&rr(&g2)), mean(&rr(&g0)), mean(&rr(&prior)));
    let p = paired_p(&rr(&g0), &rr(&prior));
    let s6 = t.elapsed().as_secs_f64();
    other_secs += s6;
    rep.record(
        "A6",
        m2 < m0 && p > 0.05,
        format!("{n1} sensors (1%): mean rrmse gamma=2 {m2:.4} < gamma=0 {m0:.4}; gamma=0 vs prior {mp:.4} paired t p = {p:.3} > 0.05"),
        s6,
    );

    // A7. The regressor gets the same step budget as the diffusion model;
    // like A4, its training time is reported but kept out of the
    // evaluation-time bound.
    let t = Instant::now();
    let basis = fit_lcsvd(&ds, &target.mesh, 0.99).unwrap();
    let lc = eval_all(&Method::Lcsvd(&basis), &target, &pts);
    let ts = Instant::now();
    let mut sup = Denoiser::new(DenoiserConfig::default(), RUN_SEED + 1).unwrap();
    let sup_losses = train(&mut sup, &data, &tc, TrainMode::Supervised, |r| {
        if (r.step + 1) % 500 == 0 {
            log(&format!("supervised step {} loss {:.4}", r.step + 1, r.loss));
        }
    })
    .unwrap();
    let sup_secs = ts.elapsed().as_secs_f64();
    let sv = eval_all(&Method::Supervised(&sup), &target, &pts);
    let (ml, ms) = (mean(&rr(&lc)), mean(&rr(&sv)));
    let s7 = t.elapsed().as_secs_f64() - sup_secs;
    other_secs += s7;
    rep.record(
        "A7",
        m2 < ml && m2 < ms,
        format!(
            "{n1} sensors, 5 seeds: mean rrmse diffusion {m2:.4} < lcsvd {ml:.4} (rank {}) and < supervised {ms:.4} ({TRAIN_STEPS} steps, final loss {:.4}, {:.1} min training); per seed {} | {} | {}",
            basis.rank(),
            mean(&sup_losses[sup_losses.len() - 100..]),
            sup_secs / 60.0,
            fmt(&rr(&g2)),
            fmt(&rr(&lc)),
            fmt(&rr(&sv))
        ),
        s7,
    );

    // A8, A9
    let (p, d, s) = timed(&mut || a8_lcsvd(&ds));
    other_secs += s;
    rep.record("A8", p, d, s);
    let (p, d, s) = timed(&mut || a9_hierarchy(&ds, dcfg.ratio));
    other_secs += s;
    rep.record("A9", p, d, s);

    // A11
    let t = Instant::now();
    let mut strat = vec![(Strategy::Random, mean(&rr(&g2)))];
    for s in [Strategy::Cloud, Strategy::Trajectory] {
        let pts: Vec<GridPoint> = (0..SEEDS.len()).map(|k| point(k, n1, s)).collect();
        strat.push((s, mean(&rr(&eval_all(&diff(2.0), &target, &pts)))));
    }
    let r = strat[0].1;
    let pass11 = strat[1..].iter().all(|&(_, v)| r <= v && v / r < 2.0);
    let s11 = t.elapsed().as_secs_f64();
    other_secs += s11;
    rep.record(
        "A11",
        pass11,
        format!(
            "{n1} sensors, 5 seeds, mean rrmse: {}; random <= others and ratio < 2",
            strat.iter().map(|(s, v)| format!("{} {v:.4} (x{:.2})", s.name(), v / r)).collect::<Vec<_>>().join(", ")
        ),
        s11,
    );

    // A10 last so the runtime bound covers the whole series.
    let (p, d, s) = timed(&mut a10_metrics);
    other_secs += s;
    rep.record("A10", p && other_secs < 600.0, format!("{d}; A-series runtime excluding training {:.1} min < 10", other_secs / 60.0), s);

    let failed: Vec<&String> = rep.lines.iter().filter(|l| !l.1).map(|l| &l.0).collect();
    let _ = writeln!(
        std::io::stdout(),
        "acceptance: {}/{} passed in {:.1} min",
        rep.lines.len() - failed.len(),
        rep.lines.len(),
        suite_start.elapsed().as_secs_f64() / 60.0
    );
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("\n"));
}
