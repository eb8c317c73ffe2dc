//! Dense networks with hand-written backpropagation and the Adam optimizer.
//!
//! The topology is fixed: a stack of affine layers with a shared activation on
//! every hidden layer and a linear output layer. Batches are row-major
//! `batch × width` slices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::scalar::{axpy, matmul_acc, transpose, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    #[inline]
    fn apply<F: Scalar>(self, z: F) -> F {
        match self {
            Activation::Relu => z.max(F::zero()),
            Activation::Silu => z * sigmoid(z),
        }
    }

    /// Value and derivative with respect to the pre-activation.
    #[inline]
    fn apply_with_slope<F: Scalar>(self, z: F) -> (F, F) {
        match self {
            Activation::Relu => {
                if z > F::zero() {
                    (z, F::one())
                } else {
                    (F::zero(), F::zero())
                }
            }
            Activation::Silu => {
                let s = sigmoid(z);
                (z * s, s * (F::one() + z * (F::one() - s)))
            }
        }
    }
}

#[inline]
fn sigmoid<F: Scalar>(z: F) -> F {
    // exp(−|z|) never overflows; the sign only selects the numerator.
    let e = (-z.abs()).exp();
    let r = F::one() / (F::one() + e);
    if z >= F::zero() {
        r
    } else {
        e * r
    }
}

/// Shape of a denoising network.
///
/// For diffusion use `input_dim = 2 + time_embed_dim`: the 2D position is
/// concatenated with a sinusoidal embedding of the time value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub time_embed_dim: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self::for_diffusion(vec![64, 64], Activation::Silu, 16)
    }
}

impl MlpConfig {
    /// Network mapping `(x, y, embed(s))` to a 2D prediction.
    pub fn for_diffusion(hidden_dims: Vec<usize>, activation: Activation, time_embed_dim: usize) -> Self {
        Self {
            input_dim: 2 + time_embed_dim,
            hidden_dims,
            output_dim: 2,
            activation,
            time_embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(config("input and output dims must be at least 1"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(config("hidden dims must be at least 1"));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(config(format!(
                "time_embed_dim must be even, got {}",
                self.time_embed_dim
            )));
        }
        if self.time_embed_dim > 0 && self.input_dim != 2 + self.time_embed_dim {
            return Err(config(format!(
                "input_dim {} does not equal 2 + time_embed_dim {}",
                self.input_dim, self.time_embed_dim
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every layer in order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// One affine layer. `weight` is `out × in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> Dense<F> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![F::zero(); in_dim * out_dim],
            bias: vec![F::zero(); out_dim],
        }
    }

    #[inline]
    pub fn row(&self, o: usize) -> &[F] {
        &self.weight[o * self.in_dim..(o + 1) * self.in_dim]
    }
}

/// Network parameters. The same type carries gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<F> {
    pub config: MlpConfig,
    pub layers: Vec<Dense<F>>,
}

/// Parameter-shaped gradient container.
pub type Gradients<F> = MlpParams<F>;

impl<F: Scalar> MlpParams<F> {
    pub fn zeros(config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layers: self.layers.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Every parameter, layer by layer, weights before biases.
    pub fn flat(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Mutable views in the same order as [`MlpParams::flat`].
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<F>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias].into_iter())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Vec<F>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias].into_iter())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.in_dim == b.in_dim && a.out_dim == b.out_dim)
    }

    pub fn scale(&mut self, factor: F) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn cast<G: Scalar>(&self) -> MlpParams<G> {
        let c = |v: &Vec<F>| v.iter().map(|x| G::of(x.to_f64_lossy())).collect();
        MlpParams {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                    weight: c(&l.weight),
                    bias: c(&l.bias),
                })
                .collect(),
        }
    }
}

/// Glorot-uniform weights, zero biases. Deterministic in `seed`.
pub fn mlp_init<F: Scalar>(config: &MlpConfig, seed: u64) -> Result<MlpParams<F>> {
    let mut params = MlpParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut params.layers {
        let limit = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
        for w in &mut layer.weight {
            *w = F::of(rng.random_range(-limit..=limit));
        }
    }
    Ok(params)
}

/// Sinusoidal embedding: `[sin(s·ω_0), cos(s·ω_0), sin(s·ω_1), ...]` with
/// `ω_j = 1000^(2j/dim)`.
pub fn time_embedding<F: Scalar>(s: F, dim: usize) -> Result<Vec<F>> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(config(format!("embedding dim must be even and >= 2, got {dim}")));
    }
    let mut out = vec![F::zero(); dim];
    write_time_embedding(s, &mut out);
    Ok(out)
}

/// Writes the embedding into a slice of even length.
pub(crate) fn write_time_embedding<F: Scalar>(s: F, out: &mut [F]) {
    let dim = out.len();
    for j in 0..dim / 2 {
        let omega = F::of(1000f64.powf(2.0 * j as f64 / dim as f64));
        let (sin, cos) = (s * omega).sin_cos();
        out[2 * j] = sin;
        out[2 * j + 1] = cos;
    }
}

/// Intermediate values of one forward pass, consumed by [`mlp_backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    pub batch: usize,
    /// `inputs[l]` is the input of layer `l`; `inputs[0]` is the batch itself.
    pub inputs: Vec<Vec<F>>,
    /// Activation derivatives at the pre-activations of every hidden layer
    /// (empty for the output layer).
    pub slopes: Vec<Vec<F>>,
}

fn check_batch<F>(params: &MlpParams<F>, inputs: &[F]) -> Result<usize> {
    let width = params.config.input_dim;
    if !inputs.len().is_multiple_of(width) {
        return Err(contract(format!(
            "input length {} is not a multiple of input width {width}",
            inputs.len()
        )));
    }
    Ok(inputs.len() / width)
}

fn affine<F: Scalar>(layer: &Dense<F>, x: &[F], batch: usize, z: &mut Vec<F>) {
    let (n_in, n_out) = (layer.in_dim, layer.out_dim);
    z.clear();
    z.reserve(batch * n_out);
    for _ in 0..batch {
        z.extend_from_slice(&layer.bias);
    }
    let wt = transpose(&layer.weight, n_out, n_in);
    matmul_acc(x, &wt, z, batch, n_in, n_out);
}

/// Forward pass without keeping intermediates.
pub fn mlp_predict<F: Scalar>(params: &MlpParams<F>, inputs: &[F]) -> Result<Vec<F>> {
    let batch = check_batch(params, inputs)?;
    let act = params.config.activation;
    let last = params.layers.len() - 1;
    let mut x = inputs.to_vec();
    let mut z = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        affine(layer, &x, batch, &mut z);
        if l != last {
            z.iter_mut().for_each(|v| *v = act.apply(*v));
        }
        std::mem::swap(&mut x, &mut z);
    }
    Ok(x)
}

/// Forward pass. Returns the `batch × output_dim` outputs and the cache
/// needed for backpropagation.
pub fn mlp_forward<F: Scalar>(params: &MlpParams<F>, inputs: &[F]) -> Result<(Vec<F>, ForwardCache<F>)> {
    let batch = check_batch(params, inputs)?;
    let act = params.config.activation;
    let last = params.layers.len() - 1;
    let mut cache = ForwardCache {
        batch,
        inputs: Vec::with_capacity(params.layers.len()),
        slopes: Vec::with_capacity(params.layers.len()),
    };
    let mut x = inputs.to_vec();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = Vec::new();
        affine(layer, &x, batch, &mut z);
        let mut slope = Vec::new();
        if l != last {
            slope.reserve(z.len());
            for v in z.iter_mut() {
                let (a, d) = act.apply_with_slope(*v);
                *v = a;
                slope.push(d);
            }
        }
        cache.inputs.push(std::mem::replace(&mut x, z));
        cache.slopes.push(slope);
    }
    Ok((x, cache))
}

/// Backpropagates `out_grad` (`∂L/∂outputs`, `batch × output_dim`) through the
/// network. Gradients are summed over the batch.
pub fn mlp_backward<F: Scalar>(params: &MlpParams<F>, cache: &ForwardCache<F>, out_grad: &[F]) -> Result<Gradients<F>> {
    let batch = cache.batch;
    let consistent = cache.inputs.len() == params.layers.len()
        && cache.slopes.len() == params.layers.len()
        && params.layers.iter().enumerate().all(|(l, layer)| {
            let slopes = if l == params.layers.len() - 1 {
                0
            } else {
                batch * layer.out_dim
            };
            cache.inputs[l].len() == batch * layer.in_dim && cache.slopes[l].len() == slopes
        });
    if !consistent {
        return Err(contract("forward cache does not match these parameters"));
    }
    if out_grad.len() != batch * params.config.output_dim {
        return Err(contract(format!(
            "out_grad has length {}, expected {}",
            out_grad.len(),
            batch * params.config.output_dim
        )));
    }

    let last = params.layers.len() - 1;
    let mut grads = params.zeros_like();
    // ∂L/∂z for the current layer.
    let mut delta = out_grad.to_vec();
    for l in (0..params.layers.len()).rev() {
        let layer = &params.layers[l];
        let (n_in, n_out) = (layer.in_dim, layer.out_dim);
        if l != last {
            for (d, &slope) in delta.iter_mut().zip(&cache.slopes[l]) {
                *d *= slope;
            }
        }
        let x = &cache.inputs[l];
        let g = &mut grads.layers[l];
        for row in delta.chunks_exact(n_out) {
            axpy(F::one(), row, &mut g.bias);
        }
        let delta_t = transpose(&delta, batch, n_out);
        matmul_acc(&delta_t, x, &mut g.weight, n_out, batch, n_in);
        if l > 0 {
            let mut prev = vec![F::zero(); batch * n_in];
            matmul_acc(&delta, &layer.weight, &mut prev, batch, n_out, n_in);
            delta = prev;
        }
    }
    Ok(grads)
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub hyper: AdamConfig,
    pub step: u64,
    pub m: MlpParams<F>,
    pub v: MlpParams<F>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &MlpParams<F>, hyper: AdamConfig) -> Self {
        Self {
            hyper,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<F: Scalar>(params: &mut MlpParams<F>, grads: &Gradients<F>, state: &mut AdamState<F>) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) || !params.same_shape(&state.v) {
        return Err(contract("adam_step: parameter, gradient and state shapes differ"));
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let (b1, b2) = (F::of(h.beta1), F::of(h.beta2));
    let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
    let corr1 = F::one() - b1.powi(t);
    let corr2 = F::one() - b2.powi(t);
    let lr = F::of(h.lr);
    let eps = F::of(h.eps);

    let tensors = params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().zip(state.v.tensors_mut()));
    for ((p, g), (m, v)) in tensors {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + one_b1 * gi;
            v[i] = b2 * v[i] + one_b2 * gi * gi;
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
