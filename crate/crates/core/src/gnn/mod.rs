//! Multiscale encode-process-decode denoiser on a two-level mesh graph,
//! conditioned on noise level and wind direction, with EDM preconditioning.

mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{AdError, ParamStore, Tape, Tensor, Var};
use crate::mesh::MultiscaleGraph;

pub use layers::{CondMlp, Input, Linear};

/// Node input width: `c_in * u` (2), position (2), type one-hot (3), mask
/// (1), observation (2).
pub const NODE_FEATURES: usize = 10;
pub const EDGE_FEATURES: usize = 3;
const COND_FEATURES: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum GnnError {
    #[error("noise level must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("{what} has {got} rows, expected {expected}")]
    Size { what: &'static str, got: usize, expected: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub hidden: usize,
    pub k_o2o_pre: usize,
    pub k_r2r: usize,
    pub k_o2o_post: usize,
    pub out_channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { hidden: 64, k_o2o_pre: 1, k_r2r: 6, k_o2o_post: 1, out_channels: 2 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<(), GnnError> {
        if self.hidden == 0 || self.k_o2o_pre == 0 || self.k_r2r == 0 || self.out_channels == 0 {
            return Err(GnnError::Config("hidden, k_o2o_pre, k_r2r and out_channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// EDM preconditioning coefficients at noise level `sigma`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Precond {
    pub fn new(sigma: f64, sigma_data: f64) -> Result<Self, GnnError> {
        if !(sigma > 0.0) {
            return Err(GnnError::NonPositiveSigma(sigma));
        }
        let s2 = sigma * sigma + sigma_data * sigma_data;
        Ok(Self {
            c_skip: sigma_data * sigma_data / s2,
            c_out: sigma * sigma_data / s2.sqrt(),
            c_in: 1.0 / s2.sqrt(),
            c_noise: sigma.ln() / 4.0,
        })
    }
}

/// Per-graph constant tensors: normalized positions, one-hot types and edge
/// features scaled by the same factor as the positions.
pub struct GraphTensors {
    pub n_fine: usize,
    pub n_coarse: usize,
    static_nodes: Vec<[f64; 5]>,
    feats: [Tensor; 4],
    o2o: (Vec<usize>, Vec<usize>),
    r2r: (Vec<usize>, Vec<usize>),
    o2r: (Vec<usize>, Vec<usize>),
    r2o: (Vec<usize>, Vec<usize>),
    retained: Vec<usize>,
}

impl GraphTensors {
    pub fn new(graph: &MultiscaleGraph) -> Self {
        let (pos, scale) = graph.fine.normalized_coords();
        let static_nodes = pos
            .iter()
            .zip(graph.fine.node_types())
            .map(|(p, t)| {
                let o = t.one_hot();
                [p[0], p[1], o[0], o[1], o[2]]
            })
            .collect();
        let feat = |es: &crate::mesh::EdgeSet| {
            let data = es.feat.iter().flat_map(|f| f.map(|v| v * scale)).collect();
            Tensor::matrix(es.len(), EDGE_FEATURES, data).expect("edge features")
        };
        let idx = |es: &crate::mesh::EdgeSet| (es.src.clone(), es.dst.clone());
        Self {
            n_fine: graph.n_fine(),
            n_coarse: graph.n_coarse(),
            static_nodes,
            feats: [feat(&graph.o2o), feat(&graph.r2r), feat(&graph.o2r), feat(&graph.r2o)],
            o2o: idx(&graph.o2o),
            r2r: idx(&graph.r2r),
            o2r: idx(&graph.o2r),
            r2o: idx(&graph.r2o),
            retained: graph.retained.clone(),
        }
    }

    /// `[n_fine, 10]` encoder input.
    pub fn node_inputs(&self, u_in: &[[f64; 2]], m: &[f64], y: &[[f64; 2]]) -> Result<Tensor, GnnError> {
        let n = self.n_fine;
        for (what, got) in [("u", u_in.len()), ("mask", m.len()), ("observations", y.len())] {
            if got != n {
                return Err(GnnError::Size { what, got, expected: n });
            }
        }
        let mut data = Vec::with_capacity(n * NODE_FEATURES);
        for i in 0..n {
            let s = self.static_nodes[i];
            data.extend_from_slice(&[u_in[i][0], u_in[i][1], s[0], s[1], s[2], s[3], s[4], m[i], y[i][0], y[i][1]]);
        }
        Ok(Tensor::matrix(n, NODE_FEATURES, data)?)
    }
}

/// One message-passing layer: edge MLP over `(h_src, h_dst, e)` and node
/// MLP over `(h, sum of incoming messages)`, both residual.
#[derive(Clone, Debug)]
struct MpLayer {
    edge: CondMlp,
    node: CondMlp,
}

impl MpLayer {
    fn new(store: &mut ParamStore, name: &str, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self, AdError> {
        Ok(Self {
            edge: CondMlp::new(store, &format!("{name}.edge"), &[hidden, hidden, hidden], hidden, rng)?,
            node: CondMlp::new(store, &format!("{name}.node"), &[hidden, hidden], hidden, rng)?,
        })
    }

    /// Returns `(h', e', aggregate)`.
    fn apply(
        &self,
        tape: &mut Tape,
        g: Var,
        h: Var,
        e: Var,
        edges: &(Vec<usize>, Vec<usize>),
        n: usize,
    ) -> Result<(Var, Var, Var), AdError> {
        let msg = self.edge.apply(tape, g, &[Input::Gathered(h, &edges.0), Input::Gathered(h, &edges.1), Input::Direct(e)])?;
        let e_next = tape.add(e, msg)?;
        let agg = tape.scatter_sum(msg, &edges.1, n)?;
        let upd = self.node.apply(tape, g, &[Input::Direct(h), Input::Direct(agg)])?;
        let h_next = tape.add(h, upd)?;
        Ok((h_next, e_next, agg))
    }
}

/// All trainable weights plus the layer layout.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub store: ParamStore,
    cond: (Linear, Linear),
    node_enc: CondMlp,
    edge_enc: [CondMlp; 4],
    pre: Vec<MpLayer>,
    coarse: Vec<MpLayer>,
    post: Vec<MpLayer>,
    down: CondMlp,
    up_msg: CondMlp,
    up_node: CondMlp,
    head: Linear,
}

/// Intermediate states exposed for tests and diagnostics.
pub struct Trace {
    pub g: Var,
    pub h0: Var,
    pub h_coarse: Var,
    pub out: Var,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self, GnnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let h = config.hidden;
        let cond = (
            Linear::new(&mut s, "cond.l1", COND_FEATURES, h, false, &mut rng)?,
            Linear::new(&mut s, "cond.l2", h, h, false, &mut rng)?,
        );
        let node_enc = CondMlp::new(&mut s, "enc.node", &[NODE_FEATURES], h, &mut rng)?;
        let mut enc = |name: &str, s: &mut ParamStore| CondMlp::new(s, &format!("enc.{name}"), &[EDGE_FEATURES], h, &mut rng);
        let edge_enc = [enc("o2o", &mut s)?, enc("r2r", &mut s)?, enc("o2r", &mut s)?, enc("r2o", &mut s)?];
        let mut layers = |prefix: &str, k: usize, s: &mut ParamStore| -> Result<Vec<MpLayer>, AdError> {
            (0..k).map(|i| MpLayer::new(s, &format!("{prefix}.{i}"), h, &mut rng)).collect()
        };
        let pre = layers("o2o_pre", config.k_o2o_pre, &mut s)?;
        let coarse = layers("r2r", config.k_r2r, &mut s)?;
        let post = layers("o2o_post", config.k_o2o_post, &mut s)?;
        let down = CondMlp::new(&mut s, "down", &[h, h], h, &mut rng)?;
        let up_msg = CondMlp::new(&mut s, "up.msg", &[h, h], h, &mut rng)?;
        let up_node = CondMlp::new(&mut s, "up.node", &[h, h], h, &mut rng)?;
        let head = Linear::new(&mut s, "head", h, config.out_channels, true, &mut rng)?;
        Ok(Self { config, store: s, cond, node_enc, edge_enc, pre, coarse, post, down, up_msg, up_node, head })
    }

    /// Rebuilds the layout for `config` and takes weights and optimizer
    /// state from `store`, which must match name for name and shape for shape.
    pub fn from_store(config: DenoiserConfig, store: ParamStore) -> Result<Self, GnnError> {
        let mut d = Self::new(config, 0)?;
        if d.store.len() != store.len() {
            return Err(GnnError::Config(format!("checkpoint has {} tensors, model expects {}", store.len(), d.store.len())));
        }
        for id in d.store.ids().collect::<Vec<_>>() {
            let name = d.store.name(id).to_string();
            let other = store.id(&name)?;
            if store.value(other).shape() != d.store.value(id).shape() {
                return Err(GnnError::Config(format!("shape mismatch for `{name}`")));
            }
        }
        // Same construction order, so ids coincide.
        d.store = store;
        Ok(d)
    }

    /// Global conditioning vector `g` from `[c_noise, sin phi, cos phi]`.
    pub fn global_cond(&self, tape: &mut Tape, c_noise: f64, phi_dir: f64) -> Result<Var, AdError> {
        let (s, c) = phi_dir.to_radians().sin_cos();
        let x = tape.leaf(Tensor::matrix(1, COND_FEATURES, vec![c_noise, s, c])?);
        let a = self.cond.0.apply(tape, x)?;
        let a = tape.silu(a);
        self.cond.1.apply(tape, a)
    }

    /// Raw network output `F` for a node-input tensor built by
    /// [`GraphTensors::node_inputs`].
    pub fn forward(&self, tape: &mut Tape, graph: &GraphTensors, nodes: Var, c_noise: f64, phi_dir: f64) -> Result<Trace, GnnError> {
        let rows = tape.value(nodes).rows();
        if rows != graph.n_fine {
            return Err(GnnError::Size { what: "node inputs", got: rows, expected: graph.n_fine });
        }
        let g = self.global_cond(tape, c_noise, phi_dir)?;
        let h0 = self.node_enc.apply(tape, g, &[Input::Direct(nodes)])?;
        let mut e = Vec::with_capacity(4);
        for (enc, f) in self.edge_enc.iter().zip(&graph.feats) {
            let x = tape.leaf(f.clone());
            e.push(enc.apply(tape, g, &[Input::Direct(x)])?);
        }
        let (mut e_o2o, mut e_r2r, e_o2r, e_r2o) = (e[0], e[1], e[2], e[3]);

        let mut h = h0;
        for l in &self.pre {
            (h, e_o2o, _) = l.apply(tape, g, h, e_o2o, &graph.o2o, graph.n_fine)?;
        }
        let mut hc = self.downsample(tape, g, h, e_o2r, graph)?;
        for l in &self.coarse {
            (hc, e_r2r, _) = l.apply(tape, g, hc, e_r2r, &graph.r2r, graph.n_coarse)?;
        }
        h = self.upsample(tape, g, hc, h, e_r2o, graph)?;
        for l in &self.post {
            (h, e_o2o, _) = l.apply(tape, g, h, e_o2o, &graph.o2o, graph.n_fine)?;
        }
        let out = self.head.apply(tape, h)?;
        Ok(Trace { g, h0, h_coarse: hc, out })
    }

    /// Coarse states seeded with the retained nodes' fine latents plus the
    /// sum of o2r messages from the fine nodes they own.
    fn downsample(&self, tape: &mut Tape, g: Var, h: Var, e_o2r: Var, graph: &GraphTensors) -> Result<Var, AdError> {
        let seed = tape.gather(h, &graph.retained)?;
        let msg = self.down.apply(tape, g, &[Input::Gathered(h, &graph.o2r.0), Input::Direct(e_o2r)])?;
        let agg = tape.scatter_sum(msg, &graph.o2r.1, graph.n_coarse)?;
        tape.add(seed, agg)
    }

    /// Fine states plus a residual built only from coarse information: r2o
    /// messages for non-retained nodes and a copy of the coarse state at
    /// retained nodes.
    fn upsample(&self, tape: &mut Tape, g: Var, hc: Var, h: Var, e_r2o: Var, graph: &GraphTensors) -> Result<Var, AdError> {
        let msg = self.up_msg.apply(tape, g, &[Input::Gathered(hc, &graph.r2o.0), Input::Direct(e_r2o)])?;
        let agg = tape.scatter_sum(msg, &graph.r2o.1, graph.n_fine)?;
        let skip = tape.scatter_sum(hc, &graph.retained, graph.n_fine)?;
        let upd = self.up_node.apply(tape, g, &[Input::Direct(agg), Input::Direct(skip)])?;
        tape.add(h, upd)
    }

    /// Preconditioned denoiser `D = c_skip u + c_out F(c_in u, ...)` on
    /// `tape`; `m`/`y` are the sensor inputs (all zero for the
    /// unconditional branch).
    #[allow(clippy::too_many_arguments)]
    pub fn denoise_on(
        &self,
        tape: &mut Tape,
        graph: &GraphTensors,
        u: &[[f64; 2]],
        sigma: f64,
        phi_dir: f64,
        m: &[f64],
        y: &[[f64; 2]],
    ) -> Result<Var, GnnError> {
        let p = Precond::new(sigma, 1.0)?;
        let u_in: Vec<[f64; 2]> = u.iter().map(|v| [p.c_in * v[0], p.c_in * v[1]]).collect();
        let nodes = tape.leaf(graph.node_inputs(&u_in, m, y)?);
        let f = self.forward(tape, graph, nodes, p.c_noise, phi_dir)?.out;
        let skip = tape.leaf(Tensor::matrix(u.len(), 2, u.iter().flat_map(|v| [p.c_skip * v[0], p.c_skip * v[1]]).collect())?);
        let out = tape.scale(f, p.c_out);
        Ok(tape.add(skip, out)?)
    }

    /// Inference-only [`Denoiser::denoise_on`].
    pub fn denoise(
        &self,
        graph: &GraphTensors,
        u: &[[f64; 2]],
        sigma: f64,
        phi_dir: f64,
        m: &[f64],
        y: &[[f64; 2]],
    ) -> Result<Vec<[f64; 2]>, GnnError> {
        let mut tape = Tape::with_params(&self.store);
        let d = self.denoise_on(&mut tape, graph, u, sigma, phi_dir, m, y)?;
        Ok(tape.value(d).data().chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }
}

/// Adds Gaussian noise to every weight so zero-initialized heads carry signal.
#[cfg(test)]
pub(crate) fn perturb_for_tests(store: &mut ParamStore, std: f64, seed: u64) {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nd = Normal::new(0.0, std).expect("positive std");
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id).data_mut() {
            *v += nd.sample(&mut rng);
        }
    }
}
