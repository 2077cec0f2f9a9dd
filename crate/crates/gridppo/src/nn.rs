//! Minimal dense neural-network stack: MLP forward/backward, a diagonal
//! Gaussian policy head, and SGD/Adam updates. Everything the imitation and
//! PPO trainers need, with no external learning framework.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(&self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// in x out.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub act: Activation,
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input width {got} does not match first layer width {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("layer dimensions do not chain at layer {0}")]
    BrokenChain(usize),
    #[error("non-finite parameter encountered")]
    NonFinite,
}

/// Gradients with the same shapes as the parameters they refer to.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| (DMatrix::zeros(l.w.nrows(), l.w.ncols()), DVector::zeros(l.b.len())))
                .collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in self.layers.iter_mut() {
            *w *= s;
            *b *= s;
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }
}

/// Per-layer activations kept from a forward pass for backprop.
pub struct ForwardCache {
    /// inputs[0] is the batch; inputs[l+1] the output of layer l.
    inputs: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.inputs.last().expect("non-empty")
    }
}

impl MlpParams {
    /// Fully-connected net over the given layer widths. Hidden layers get
    /// `hidden` activation with He-uniform weights; the output layer gets
    /// `output` activation with Xavier-uniform weights.
    pub fn new<R: Rng>(dims: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need at least input and output widths");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for k in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let last = k == dims.len() - 2;
            let act = if last { output } else { hidden };
            let bound = if last {
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            let w = DMatrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..bound));
            layers.push(Layer { w, b: DVector::zeros(fan_out), act });
        }
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().expect("non-empty").w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").w.ncols()
    }

    pub fn validate(&self) -> Result<(), NnError> {
        for k in 1..self.layers.len() {
            if self.layers[k - 1].w.ncols() != self.layers[k].w.nrows() {
                return Err(NnError::BrokenChain(k));
            }
        }
        for l in &self.layers {
            if l.w.iter().chain(l.b.iter()).any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite);
            }
        }
        Ok(())
    }

    pub fn forward_cached(&self, batch: &DMatrix<f64>) -> Result<ForwardCache, NnError> {
        if batch.ncols() != self.input_dim() {
            return Err(NnError::ShapeMismatch {
                expected: self.input_dim(),
                got: batch.ncols(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        inputs.push(batch.clone());
        for layer in &self.layers {
            let mut z = inputs.last().expect("non-empty") * &layer.w;
            for mut row in z.row_iter_mut() {
                row += layer.b.transpose();
            }
            inputs.push(z.map(|v| layer.act.apply(v)));
        }
        Ok(ForwardCache { inputs })
    }

    /// Batch forward pass, rows are samples.
    pub fn forward(&self, batch: &DMatrix<f64>) -> Result<DMatrix<f64>, NnError> {
        Ok(self.forward_cached(batch)?.inputs.pop_last())
    }

    /// Single-sample convenience wrapper.
    pub fn forward_one(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        let batch = DMatrix::from_row_slice(1, input.len(), input);
        let out = self.forward(&batch)?;
        Ok(out.row(0).iter().copied().collect())
    }

    /// Backpropagate `upstream` = dL/d(output) (same shape as the forward
    /// output) through a cached forward pass.
    pub fn backward_cached(&self, cache: &ForwardCache, upstream: &DMatrix<f64>) -> MlpGrads {
        let mut grads = MlpGrads::zeros_like(self);
        let mut g = upstream.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let y = &cache.inputs[l + 1];
            let x = &cache.inputs[l];
            // dZ = G .* act'(Z), derivative written via the output
            let dz = DMatrix::from_fn(g.nrows(), g.ncols(), |r, c| {
                g[(r, c)] * layer.act.derivative_from_output(y[(r, c)])
            });
            grads.layers[l].0 = x.transpose() * &dz;
            grads.layers[l].1 = dz.row_sum().transpose();
            if l > 0 {
                g = &dz * layer.w.transpose();
            }
        }
        grads
    }

    /// Gradients of sum(upstream .* output) with respect to every weight
    /// and bias; runs its own forward pass.
    pub fn backward(&self, batch: &DMatrix<f64>, upstream: &DMatrix<f64>) -> Result<MlpGrads, NnError> {
        let cache = self.forward_cached(batch)?;
        if upstream.shape() != cache.output().shape() {
            return Err(NnError::ShapeMismatch {
                expected: cache.output().ncols(),
                got: upstream.ncols(),
            });
        }
        Ok(self.backward_cached(&cache, upstream))
    }
}

trait PopLast {
    type Out;
    fn pop_last(self) -> Self::Out;
}

impl PopLast for Vec<DMatrix<f64>> {
    type Out = DMatrix<f64>;
    fn pop_last(mut self) -> DMatrix<f64> {
        self.pop().expect("non-empty")
    }
}

/// Actor parameters: an MLP producing Gaussian means in (0, 1), plus a
/// state-independent per-dimension log standard deviation.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub actor: MlpParams,
    pub log_std: DVector<f64>,
}

/// Value-network parameters with a single linear output neuron.
#[derive(Debug, Clone)]
pub struct CriticParams {
    pub value: MlpParams,
}

const LN_2PI: f64 = 1.8378770664093453;

/// Log density of a diagonal Gaussian at `action`.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    debug_assert_eq!(mean.len(), log_std.len());
    debug_assert_eq!(mean.len(), action.len());
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((&m, &ls), &a)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// d log N(a; mean, exp(log_std)) / d mean, per dimension.
pub fn gaussian_dlogp_dmean(mean: &[f64], log_std: &[f64], action: &[f64]) -> Vec<f64> {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((&m, &ls), &a)| (a - m) / (2.0 * ls).exp())
        .collect()
}

/// d log N(a; mean, exp(log_std)) / d log_std, per dimension.
pub fn gaussian_dlogp_dlogstd(mean: &[f64], log_std: &[f64], action: &[f64]) -> Vec<f64> {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((&m, &ls), &a)| {
            let z = (a - m) / ls.exp();
            z * z - 1.0
        })
        .collect()
}

/// Entropy of the diagonal Gaussian (state-independent).
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|&ls| ls + 0.5 * (LN_2PI + 1.0)).sum()
}

/// Draw a = mean + sigma .* xi with xi standard normal.
pub fn sample_action<R: Rng>(mean: &[f64], log_std: &[f64], rng: &mut R) -> Vec<f64> {
    mean.iter()
        .zip(log_std)
        .map(|(&m, &ls)| {
            let xi: f64 = rng.sample(StandardNormal);
            m + ls.exp() * xi
        })
        .collect()
}

/// First/second-moment accumulators for Adam, one pair per tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<(DMatrix<f64>, DVector<f64>)>,
    v: Vec<(DMatrix<f64>, DVector<f64>)>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let zeros = || {
            params
                .layers
                .iter()
                .map(|l| (DMatrix::zeros(l.w.nrows(), l.w.ncols()), DVector::zeros(l.b.len())))
                .collect()
        };
        Self { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One Adam update with bias correction; `grads` point uphill, parameters
/// move downhill.
pub fn adam_step(params: &mut MlpParams, grads: &MlpGrads, state: &mut AdamState, lr: f64) {
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (l, layer) in params.layers.iter_mut().enumerate() {
        let (gw, gb) = &grads.layers[l];
        let (mw, mb) = &mut state.m[l];
        let (vw, vb) = &mut state.v[l];
        *mw = &*mw * ADAM_BETA1 + gw * (1.0 - ADAM_BETA1);
        *vw = &*vw * ADAM_BETA2 + gw.component_mul(gw) * (1.0 - ADAM_BETA2);
        *mb = &*mb * ADAM_BETA1 + gb * (1.0 - ADAM_BETA1);
        *vb = &*vb * ADAM_BETA2 + gb.component_mul(gb) * (1.0 - ADAM_BETA2);
        for (p, (m, v)) in layer.w.iter_mut().zip(mw.iter().zip(vw.iter())) {
            *p -= lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
        }
        for (p, (m, v)) in layer.b.iter_mut().zip(mb.iter().zip(vb.iter())) {
            *p -= lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
        }
    }
}

/// Plain gradient descent: params -= lr * grads.
pub fn sgd_step(params: &mut MlpParams, grads: &MlpGrads, lr: f64) {
    for (layer, (gw, gb)) in params.layers.iter_mut().zip(&grads.layers) {
        layer.w -= gw * lr;
        layer.b -= gb * lr;
    }
}

/// Adam over a bare vector (used for the policy log_std).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdamVecState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

pub fn adam_step_vec(params: &mut DVector<f64>, grads: &DVector<f64>, state: &mut AdamVecState, lr: f64) {
    if state.m.len() != params.len() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
        state.t = 0;
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grads[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        params[i] -= lr * (state.m[i] / bc1) / ((state.v[i] / bc2).sqrt() + ADAM_EPS);
    }
}

// --- serialization mirrors -------------------------------------------------

/// Adam moments in plain vectors for checkpointing.
#[derive(Serialize, Deserialize)]
pub struct AdamStateData {
    pub m: Vec<(Vec<f64>, Vec<f64>)>,
    pub v: Vec<(Vec<f64>, Vec<f64>)>,
    pub t: u64,
}

impl AdamState {
    pub fn to_data(&self) -> AdamStateData {
        let dump = |side: &Vec<(DMatrix<f64>, DVector<f64>)>| {
            side.iter()
                .map(|(w, b)| (w.transpose().as_slice().to_vec(), b.as_slice().to_vec()))
                .collect()
        };
        AdamStateData { m: dump(&self.m), v: dump(&self.v), t: self.t }
    }

    /// Rebuild moments against the parameter shapes they belong to.
    pub fn from_data(data: &AdamStateData, params: &MlpParams) -> Option<AdamState> {
        let load = |side: &[(Vec<f64>, Vec<f64>)]| -> Option<Vec<(DMatrix<f64>, DVector<f64>)>> {
            if side.len() != params.layers.len() {
                return None;
            }
            side.iter()
                .zip(&params.layers)
                .map(|((w, b), layer)| {
                    if w.len() != layer.w.len() || b.len() != layer.b.len() {
                        return None;
                    }
                    Some((
                        DMatrix::from_row_slice(layer.w.nrows(), layer.w.ncols(), w),
                        DVector::from_row_slice(b),
                    ))
                })
                .collect()
        };
        Some(AdamState { m: load(&data.m)?, v: load(&data.v)?, t: data.t })
    }
}

#[derive(Serialize, Deserialize)]
pub struct LayerData {
    pub rows: usize,
    pub cols: usize,
    /// Row-major weights.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub act: Activation,
}

#[derive(Serialize, Deserialize)]
pub struct MlpData {
    pub layers: Vec<LayerData>,
}

impl From<&MlpParams> for MlpData {
    fn from(p: &MlpParams) -> Self {
        MlpData {
            layers: p
                .layers
                .iter()
                .map(|l| LayerData {
                    rows: l.w.nrows(),
                    cols: l.w.ncols(),
                    w: l.w.transpose().as_slice().to_vec(),
                    b: l.b.as_slice().to_vec(),
                    act: l.act,
                })
                .collect(),
        }
    }
}

impl TryFrom<&MlpData> for MlpParams {
    type Error = NnError;

    fn try_from(d: &MlpData) -> Result<Self, NnError> {
        let layers = d
            .layers
            .iter()
            .map(|l| Layer {
                w: DMatrix::from_row_slice(l.rows, l.cols, &l.w),
                b: DVector::from_row_slice(&l.b),
                act: l.act,
            })
            .collect();
        let params = MlpParams { layers };
        params.validate()?;
        Ok(params)
    }
}
