use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ad::{AdError, ParamId, ParamStore, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

/// Normal(0, 0.02) truncated at two standard deviations.
fn trunc_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * INIT_STD;
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

/// Dense layer `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Random weights unless `zero`; bias starts at zero.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        zero: bool,
        rng: &mut R,
    ) -> Result<Self, AdError> {
        let w = if zero { Tensor::zeros(&[d_in, d_out]) } else { trunc_normal(d_in, d_out, rng) };
        Ok(Self {
            w: store.insert(format!("{name}.w"), w)?,
            b: store.insert(format!("{name}.b"), Tensor::zeros(&[d_out]))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var, AdError> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.affine(x, w, Some(b))
    }
}

/// One input block of a [`CondMlp`]: rows used as-is, or node rows projected
/// first and then gathered onto edges.
#[derive(Clone, Copy)]
pub enum Input<'a> {
    Direct(Var),
    Gathered(Var, &'a [usize]),
}

/// `LN_g(W2 silu(sum_k x_k W1k + b1) + b2)` where the layer-norm scale and
/// shift are affine in the global conditioning vector `g`. The scale head
/// starts at the identity (`gamma = 1`) and the shift head at zero.
#[derive(Clone, Debug)]
pub struct CondMlp {
    first: Vec<ParamId>,
    b1: ParamId,
    second: Linear,
    gamma: Linear,
    beta: Linear,
}

impl CondMlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_ins: &[usize],
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, AdError> {
        let mut first = Vec::with_capacity(d_ins.len());
        for (k, &d) in d_ins.iter().enumerate() {
            first.push(store.insert(format!("{name}.l1.w{k}"), trunc_normal(d, hidden, rng))?);
        }
        let b1 = store.insert(format!("{name}.l1.b"), Tensor::zeros(&[hidden]))?;
        let second = Linear::new(store, &format!("{name}.l2"), hidden, hidden, false, rng)?;
        let gamma = Linear::new(store, &format!("{name}.gamma"), hidden, hidden, true, rng)?;
        *store.value_mut(gamma.b) = Tensor::full(&[hidden], 1.0);
        let beta = Linear::new(store, &format!("{name}.beta"), hidden, hidden, true, rng)?;
        Ok(Self { first, b1, second, gamma, beta })
    }

    pub fn n_inputs(&self) -> usize {
        self.first.len()
    }

    pub fn apply(&self, tape: &mut Tape, g: Var, inputs: &[Input]) -> Result<Var, AdError> {
        if inputs.len() != self.first.len() {
            return Err(AdError::shape("cond_mlp", format!("{} inputs for {} blocks", inputs.len(), self.first.len())));
        }
        let mut parts = Vec::with_capacity(inputs.len());
        for (k, (inp, &w)) in inputs.iter().zip(&self.first).enumerate() {
            let w = tape.param(w);
            let b = if k == 0 { Some(tape.param(self.b1)) } else { None };
            parts.push(match *inp {
                Input::Direct(x) => (tape.affine(x, w, b)?, None),
                Input::Gathered(x, idx) => (tape.affine(x, w, b)?, Some(idx)),
            });
        }
        let z = if parts.len() == 1 && parts[0].1.is_none() { parts[0].0 } else { tape.gather_sum(&parts)? };
        let z = tape.silu(z);
        let z = self.second.apply(tape, z)?;
        let gamma = self.gamma.apply(tape, g)?;
        let beta = self.beta.apply(tape, g)?;
        tape.cond_layer_norm(z, gamma, beta)
    }
}
