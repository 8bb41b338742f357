//! Fixed-architecture MLP noise predictor with hand-written backprop.
//!
//! The network maps `[x_t, emb(t / T)]` through `hidden_dims` dense layers
//! (each followed by the activation) and a final linear layer back to the
//! data dimension. Parameters live in one flat vector, layer-major; within a
//! layer the weight matrix comes first (row-major, `fan_out x fan_in`),
//! followed by the bias.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::{Purpose, StreamKey};

/// Anything that predicts the noise in `x_t`.
pub trait Denoiser: Sync {
    fn data_dim(&self) -> usize;

    fn predict(&self, x_t: &[f64], t: usize) -> Vec<f64>;
}

/// A denoiser that can pull an output cotangent back to its parameters.
pub trait DifferentiableDenoiser: Denoiser {
    fn num_params(&self) -> usize;

    /// Evaluates the network at `(x_t, t)` and adds
    /// `scale * (d eps_pred / d theta)^T cotangent(eps_pred)` into `grad`.
    /// The cotangent is computed from the prediction by the caller-supplied
    /// closure so that forward activations are computed once.
    fn predict_and_pullback(
        &self,
        x_t: &[f64],
        t: usize,
        cotangent: &mut dyn FnMut(&[f64]) -> Vec<f64>,
        scale: f64,
        grad: &mut [f64],
    ) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let th = z.tanh();
                1.0 - th * th
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub input_dim: usize,
    pub time_embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    /// `T`, used to normalise the timestep fed to the embedding.
    pub num_timesteps: usize,
}

impl DenoiserArch {
    pub fn new(input_dim: usize, time_embed_dim: usize, hidden_dims: Vec<usize>) -> Self {
        Self {
            input_dim,
            time_embed_dim,
            hidden_dims,
            activation: Activation::Silu,
            num_timesteps: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::param("input_dim must be positive"));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::param("time_embed_dim must be even"));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::param("hidden layer widths must be positive"));
        }
        if self.num_timesteps == 0 {
            return Err(Error::param("num_timesteps must be positive"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every dense layer in order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim + self.time_embed_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.input_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(fan_in, fan_out)| (fan_in + 1) * fan_out)
            .sum()
    }

    /// Sinusoidal embedding of `t / T`: `[sin(f_i s), ..., cos(f_i s), ...]`
    /// with frequencies `f_i` geometric between 1 and `T`.
    pub fn time_embedding(&self, t: usize) -> Vec<f64> {
        let half = self.time_embed_dim / 2;
        let s = t as f64 / self.num_timesteps as f64;
        let t_max = self.num_timesteps as f64;
        let freqs: Vec<f64> = (0..half)
            .map(|i| {
                if half == 1 {
                    1.0
                } else {
                    t_max.powf(i as f64 / (half - 1) as f64)
                }
            })
            .collect();
        let mut emb = Vec::with_capacity(self.time_embed_dim);
        emb.extend(freqs.iter().map(|f| (f * s).sin()));
        emb.extend(freqs.iter().map(|f| (f * s).cos()));
        emb
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: DenoiserArch,
    pub theta: Vec<f64>,
}

/// View of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    weight_offset: usize,
    bias_offset: usize,
}

fn layer_slots(arch: &DenoiserArch) -> Vec<LayerSlot> {
    let mut offset = 0;
    arch.layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let slot = LayerSlot {
                fan_in,
                fan_out,
                weight_offset: offset,
                bias_offset: offset + fan_in * fan_out,
            };
            offset += (fan_in + 1) * fan_out;
            slot
        })
        .collect()
}

/// Fan-in scaled uniform weights (`|w| <= 1/sqrt(fan_in)`), zero biases.
pub fn init_params(arch: &DenoiserArch, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut theta = vec![0.0; arch.num_params()];
    let mut stream = StreamKey::new(seed, Purpose::Init).stream();
    for slot in layer_slots(arch) {
        let bound = 1.0 / (slot.fan_in as f64).sqrt();
        for w in &mut theta[slot.weight_offset..slot.bias_offset] {
            *w = stream.uniform(-bound, bound);
        }
    }
    Ok(ModelParams {
        arch: arch.clone(),
        theta,
    })
}

impl ModelParams {
    pub fn from_flat(arch: DenoiserArch, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        check_len(arch.num_params(), theta.len(), "parameter vector length")?;
        Ok(Self { arch, theta })
    }

    pub fn zeros(arch: DenoiserArch) -> Result<Self> {
        let d = arch.num_params();
        Self::from_flat(arch, vec![0.0; d])
    }

    pub fn flatten(&self) -> &[f64] {
        &self.theta
    }

    /// Per-layer `(weights, bias)` copies, in layer order.
    pub fn unflatten(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        layer_slots(&self.arch)
            .into_iter()
            .map(|s| {
                (
                    self.theta[s.weight_offset..s.bias_offset].to_vec(),
                    self.theta[s.bias_offset..s.bias_offset + s.fan_out].to_vec(),
                )
            })
            .collect()
    }

    /// Inverse of [`ModelParams::unflatten`].
    pub fn from_layers(arch: DenoiserArch, layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let mut theta = Vec::with_capacity(arch.num_params());
        for (w, b) in layers {
            theta.extend_from_slice(w);
            theta.extend_from_slice(b);
        }
        Self::from_flat(arch, theta)
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    /// SHA-256 over the architecture and the little-endian parameter bytes.
    pub fn digest(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.arch).expect("arch serializes");
        for v in &self.theta {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        crate::training::sha256_hex(&bytes)
    }

    /// Checked forward pass.
    pub fn forward(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        check_len(self.arch.input_dim, x_t.len(), "denoiser input")?;
        Ok(self.run(x_t, t, false).output)
    }

    fn run(&self, x_t: &[f64], t: usize, record: bool) -> Trace {
        let slots = layer_slots(&self.arch);
        let mut input = Vec::with_capacity(self.arch.input_dim + self.arch.time_embed_dim);
        input.extend_from_slice(x_t);
        input.extend(self.arch.time_embedding(t));

        let keep = record;
        let mut activations = Vec::new();
        let mut pre_activations = Vec::new();
        let mut current = input;
        let last = slots.len() - 1;
        for (li, slot) in slots.iter().enumerate() {
            let w = &self.theta[slot.weight_offset..slot.bias_offset];
            let b = &self.theta[slot.bias_offset..slot.bias_offset + slot.fan_out];
            let z: Vec<f64> = (0..slot.fan_out)
                .map(|o| {
                    let row = &w[o * slot.fan_in..(o + 1) * slot.fan_in];
                    b[o] + row.iter().zip(&current).map(|(a, c)| a * c).sum::<f64>()
                })
                .collect();
            let next = if li == last {
                z.clone()
            } else {
                z.iter().map(|&v| self.arch.activation.apply(v)).collect()
            };
            if keep {
                activations.push(current);
                pre_activations.push(z);
            }
            current = next;
        }
        Trace {
            output: current,
            activations,
            pre_activations,
        }
    }
}

struct Trace {
    output: Vec<f64>,
    /// Input to each layer.
    activations: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl Denoiser for ModelParams {
    fn data_dim(&self) -> usize {
        self.arch.input_dim
    }

    fn predict(&self, x_t: &[f64], t: usize) -> Vec<f64> {
        debug_assert_eq!(x_t.len(), self.arch.input_dim);
        self.run(x_t, t, false).output
    }
}

impl DifferentiableDenoiser for ModelParams {
    fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn predict_and_pullback(
        &self,
        x_t: &[f64],
        t: usize,
        cotangent: &mut dyn FnMut(&[f64]) -> Vec<f64>,
        scale: f64,
        grad: &mut [f64],
    ) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.theta.len());
        let trace = self.run(x_t, t, true);
        let slots = layer_slots(&self.arch);
        let mut delta = cotangent(&trace.output);
        debug_assert_eq!(delta.len(), self.arch.input_dim);
        for li in (0..slots.len()).rev() {
            let slot = slots[li];
            if li != slots.len() - 1 {
                for (d, &z) in delta.iter_mut().zip(&trace.pre_activations[li]) {
                    *d *= self.arch.activation.derivative(z);
                }
            }
            let input = &trace.activations[li];
            for o in 0..slot.fan_out {
                let g = scale * delta[o];
                if g != 0.0 {
                    let row = &mut grad[slot.weight_offset + o * slot.fan_in
                        ..slot.weight_offset + (o + 1) * slot.fan_in];
                    for (r, a) in row.iter_mut().zip(input) {
                        *r += g * a;
                    }
                }
                grad[slot.bias_offset + o] += g;
            }
            if li > 0 {
                let w = &self.theta[slot.weight_offset..slot.bias_offset];
                let mut back = vec![0.0; slot.fan_in];
                for o in 0..slot.fan_out {
                    let d = delta[o];
                    if d != 0.0 {
                        let row = &w[o * slot.fan_in..(o + 1) * slot.fan_in];
                        for (bk, wv) in back.iter_mut().zip(row) {
                            *bk += d * wv;
                        }
                    }
                }
                delta = back;
            }
        }
        trace.output
    }
}
