//! Parameter tensors, deterministic initialisation and the weight file.
//!
//! File layout: `b"CSCF"`, u32 version, the eight config fields as u32 in
//! [`ConformerConfig`] declaration order, then every tensor as little-endian
//! f32 in the order visited by [`ConformerWeights::visit_mut`].

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::ConformerConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CSCF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 * 4;

/// Affine map `x W + b` with `W` stored `(in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Linear {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }
}

/// Per-channel scale and shift after normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
}

impl Norm {
    fn zeros(dim: usize) -> Self {
        Norm {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub norm: Norm,
    pub expand: Linear,
    pub project: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvModule {
    pub norm: Norm,
    /// Pointwise expansion to twice the model width, split by the GLU.
    pub pointwise_in: Linear,
    /// Depthwise kernel `(tap, channel)`; the last tap multiplies the
    /// current frame.
    pub depthwise: Array2<f32>,
    pub depthwise_bias: Array1<f32>,
    pub group_norm: Norm,
    pub pointwise_out: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub norm: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConformerLayer {
    pub ff_in: FeedForward,
    pub conv: ConvModule,
    pub attention: Attention,
    pub ff_out: FeedForward,
    pub final_norm: Norm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConformerWeights {
    config: ConformerConfig,
    pub input: Linear,
    pub layers: Vec<ConformerLayer>,
    pub head: Linear,
}

/// What a tensor is, for initialisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Weight { fan_in: usize },
    Bias,
    Gamma,
    Beta,
}

fn visit_linear(l: &mut Linear, f: &mut impl FnMut(&mut [f32], TensorRole)) {
    let fan_in = l.weight.nrows();
    f(l.weight.as_slice_mut().expect("standard layout"), TensorRole::Weight { fan_in });
    f(l.bias.as_slice_mut().expect("standard layout"), TensorRole::Bias);
}

fn visit_norm(n: &mut Norm, f: &mut impl FnMut(&mut [f32], TensorRole)) {
    f(n.gamma.as_slice_mut().expect("standard layout"), TensorRole::Gamma);
    f(n.beta.as_slice_mut().expect("standard layout"), TensorRole::Beta);
}

fn visit_ff(ff: &mut FeedForward, f: &mut impl FnMut(&mut [f32], TensorRole)) {
    visit_norm(&mut ff.norm, f);
    visit_linear(&mut ff.expand, f);
    visit_linear(&mut ff.project, f);
}

impl ConformerWeights {
    /// Every parameter set to zero, including normalisation gains.
    pub fn zeros(config: &ConformerConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let ff = || FeedForward {
            norm: Norm::zeros(d),
            expand: Linear::zeros(d, config.ff_dim),
            project: Linear::zeros(config.ff_dim, d),
        };
        let layers = (0..config.num_layers)
            .map(|_| ConformerLayer {
                ff_in: ff(),
                conv: ConvModule {
                    norm: Norm::zeros(d),
                    pointwise_in: Linear::zeros(d, 2 * d),
                    depthwise: Array2::zeros((config.conv_kernel, d)),
                    depthwise_bias: Array1::zeros(d),
                    group_norm: Norm::zeros(d),
                    pointwise_out: Linear::zeros(d, d),
                },
                attention: Attention {
                    norm: Norm::zeros(d),
                    query: Linear::zeros(d, d),
                    key: Linear::zeros(d, d),
                    value: Linear::zeros(d, d),
                    output: Linear::zeros(d, d),
                },
                ff_out: ff(),
                final_norm: Norm::zeros(d),
            })
            .collect();
        Ok(ConformerWeights {
            config: config.clone(),
            input: Linear::zeros(config.input_dim, d),
            layers,
            head: Linear::zeros(d, config.output_dim),
        })
    }

    pub fn config(&self) -> &ConformerConfig {
        &self.config
    }

    /// Visits every tensor in file order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut [f32], TensorRole)) {
        visit_linear(&mut self.input, &mut f);
        for layer in &mut self.layers {
            visit_ff(&mut layer.ff_in, &mut f);
            let conv = &mut layer.conv;
            visit_norm(&mut conv.norm, &mut f);
            visit_linear(&mut conv.pointwise_in, &mut f);
            let kernel = conv.depthwise.nrows();
            f(
                conv.depthwise.as_slice_mut().expect("standard layout"),
                TensorRole::Weight { fan_in: kernel },
            );
            f(
                conv.depthwise_bias.as_slice_mut().expect("standard layout"),
                TensorRole::Bias,
            );
            visit_norm(&mut conv.group_norm, &mut f);
            visit_linear(&mut conv.pointwise_out, &mut f);
            let attn = &mut layer.attention;
            visit_norm(&mut attn.norm, &mut f);
            for l in [&mut attn.query, &mut attn.key, &mut attn.value, &mut attn.output] {
                visit_linear(l, &mut f);
            }
            visit_ff(&mut layer.ff_out, &mut f);
            visit_norm(&mut layer.final_norm, &mut f);
        }
        visit_linear(&mut self.head, &mut f);
    }

    /// Total number of scalars held.
    pub fn num_params(&self) -> usize {
        let mut total = 0;
        self.clone().visit_mut(|t, _| total += t.len());
        total
    }

    pub fn is_finite(&self) -> bool {
        let mut finite = true;
        self.clone()
            .visit_mut(|t, _| finite &= t.iter().all(|v| v.is_finite()));
        finite
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in self.config.fields() {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        self.clone().visit_mut(|t, _| {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        });
        out
    }

    /// Parses a weight file, which must have been written for `expected`.
    pub fn from_bytes(bytes: &[u8], expected: &ConformerConfig) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic("conformer weights"));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated);
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != VERSION {
            return Err(Error::UnsupportedVersion(word(0)));
        }
        let stored: Vec<usize> = (1..=8).map(|i| word(i) as usize).collect();
        let wanted = expected.fields();
        if stored != wanted {
            let names = ConformerConfig::FIELD_NAMES;
            let diff = (0..8)
                .filter(|i| stored[*i] != wanted[*i])
                .map(|i| format!("{} is {} in file, expected {}", names[i], stored[i], wanted[i]))
                .collect::<Vec<_>>()
                .join(", ");
            return Err(Error::ConfigMismatch(diff));
        }
        let mut weights = ConformerWeights::zeros(expected)?;
        let body = &bytes[HEADER_LEN..];
        let needed = 4 * weights.num_params();
        if body.len() < needed {
            return Err(Error::Truncated);
        }
        if body.len() > needed {
            return Err(Error::ConfigMismatch(format!(
                "{} trailing bytes after the last tensor",
                body.len() - needed
            )));
        }
        let mut offset = 0;
        weights.visit_mut(|t, _| {
            for (v, chunk) in t.iter_mut().zip(body[offset..].chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            offset += 4 * t.len();
        });
        if !weights.is_finite() {
            return Err(Error::NonFinite("conformer weights".into()));
        }
        Ok(weights)
    }
}

/// Uniform in `±1/sqrt(fan_in)` for weights, zero biases, unit gains and
/// zero shifts. Deterministic in `seed`.
pub fn init_weights(config: &ConformerConfig, seed: u64) -> Result<ConformerWeights> {
    let mut weights = ConformerWeights::zeros(config)?;
    let mut rng = SplitMix64::seed_from_u64(seed);
    weights.visit_mut(|t, role| match role {
        TensorRole::Weight { fan_in } => {
            let bound = 1.0 / (fan_in as f32).sqrt();
            t.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        }
        TensorRole::Bias | TensorRole::Beta => t.fill(0.0),
        TensorRole::Gamma => t.fill(1.0),
    });
    Ok(weights)
}

pub fn save_weights(weights: &ConformerWeights, path: &Path) -> Result<()> {
    std::fs::write(path, weights.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path, expected: &ConformerConfig) -> Result<ConformerWeights> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ConformerWeights::from_bytes(&bytes, expected)
}

/// Closed-form parameter count for `config`.
pub fn count_params(config: &ConformerConfig) -> usize {
    let d = config.model_dim;
    let linear = |i: usize, o: usize| i * o + o;
    let norm = 2 * d;
    let ff = norm + linear(d, config.ff_dim) + linear(config.ff_dim, d);
    let conv = norm + linear(d, 2 * d) + config.conv_kernel * d + d + norm + linear(d, d);
    let attention = norm + 4 * linear(d, d);
    let layer = 2 * ff + conv + attention + norm;
    linear(config.input_dim, d) + config.num_layers * layer + linear(d, config.output_dim)
}
