//! Causal conformer mask estimator, forward pass only.
//!
//! Each layer runs half-step feed-forward, convolution, windowed
//! self-attention and a second half-step feed-forward, each pre-normed and
//! wrapped in a residual connection, followed by a layer norm. The
//! convolution is causal and attention sees the current frame plus a fixed
//! number of past frames, so every output frame depends only on inputs up to
//! that frame. Computation is in f32; the sigmoid head is evaluated in f64.

mod streaming;
mod weights;

pub use streaming::{forward_streaming, StreamState};
pub use weights::{
    count_params, init_weights, load_weights, save_weights, Attention, ConformerLayer,
    ConformerWeights, ConvModule, FeedForward, Linear, Norm, TensorRole,
};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::StackedFeatures;
use crate::mask::Mask;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConformerConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub conv_kernel: usize,
    pub num_heads: usize,
    /// Past frames visible to attention, in addition to the current one.
    pub attn_past_frames: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Default for ConformerConfig {
    fn default() -> Self {
        ConformerConfig {
            num_layers: 4,
            model_dim: 256,
            ff_dim: 1024,
            conv_kernel: 15,
            num_heads: 8,
            attn_past_frames: 31,
            input_dim: 1024,
            output_dim: 128,
        }
    }
}

impl ConformerConfig {
    pub(crate) const FIELD_NAMES: [&'static str; 8] = [
        "num_layers",
        "model_dim",
        "ff_dim",
        "conv_kernel",
        "num_heads",
        "attn_past_frames",
        "input_dim",
        "output_dim",
    ];

    pub(crate) fn fields(&self) -> Vec<usize> {
        vec![
            self.num_layers,
            self.model_dim,
            self.ff_dim,
            self.conv_kernel,
            self.num_heads,
            self.attn_past_frames,
            self.input_dim,
            self.output_dim,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.model_dim,
            self.ff_dim,
            self.conv_kernel,
            self.num_heads,
            self.input_dim,
            self.output_dim,
        ];
        if sizes.contains(&0) {
            return Err(Error::InvalidConfig("conformer sizes must be positive".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.num_heads
            )));
        }
        if self.fields().iter().any(|v| *v > u32::MAX as usize) {
            return Err(Error::InvalidConfig("conformer size exceeds u32".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

fn sigmoid32(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn swish(x: f32) -> f32 {
    x * sigmoid32(x)
}

/// Normalises one frame over its channels and applies the affine map.
pub(crate) fn normalize_row(x: ArrayView1<'_, f32>, norm: &Norm, mut out: ArrayViewMut1<'_, f32>) {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| *v as f64).sum::<f64>() / n;
    let var = x.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + NORM_EPS).sqrt();
    for (i, o) in out.iter_mut().enumerate() {
        *o = ((x[i] as f64 - mean) * inv) as f32 * norm.gamma[i] + norm.beta[i];
    }
}

fn normalize_rows(x: &Array2<f32>, norm: &Norm) -> Array2<f32> {
    let mut out = Array2::zeros(x.raw_dim());
    for (row, out_row) in x.outer_iter().zip(out.outer_iter_mut()) {
        normalize_row(row, norm, out_row);
    }
    out
}

fn affine(x: &Array2<f32>, l: &Linear) -> Array2<f32> {
    x.dot(&l.weight) + &l.bias
}

/// Sigmoid in f64, kept strictly inside (0, 1).
pub(crate) fn mask_value(logit: f32) -> f64 {
    let p = 1.0 / (1.0 + (-(logit as f64)).exp());
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub(crate) fn check_input(features: &Array2<f64>, config: &ConformerConfig) -> Result<Array2<f32>> {
    if features.ncols() != config.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "features have {} dims, model expects {}",
            features.ncols(),
            config.input_dim
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("conformer input".into()));
    }
    Ok(features.mapv(|v| v as f32))
}

fn feed_forward(x: &mut Array2<f32>, ff: &FeedForward) {
    let h = normalize_rows(x, &ff.norm);
    let h = affine(&h, &ff.expand).mapv_into(swish);
    let h = affine(&h, &ff.project);
    x.scaled_add(0.5, &h);
}

/// Gated linear unit over the last axis: first half times sigmoid of the
/// second half.
pub(crate) fn glu_row(x: ArrayView1<'_, f32>) -> Array1<f32> {
    let d = x.len() / 2;
    Array1::from_shape_fn(d, |i| x[i] * sigmoid32(x[d + i]))
}

/// Depthwise causal convolution for one output frame. `tap(j)` is the GLU
/// output that kernel tap `j` sees, or `None` before the utterance start;
/// the last tap is the current frame.
pub(crate) fn depthwise_frame<'a>(
    conv: &ConvModule,
    tap: impl Fn(usize) -> Option<ArrayView1<'a, f32>>,
) -> Array1<f32> {
    let mut acc = conv.depthwise_bias.clone();
    for j in 0..conv.depthwise.nrows() {
        if let Some(input) = tap(j) {
            Zip::from(&mut acc)
                .and(conv.depthwise.row(j))
                .and(input)
                .for_each(|a, w, g| *a += w * g);
        }
    }
    acc
}

/// Group norm, swish and the output projection for one depthwise frame.
pub(crate) fn conv_output(mixed: ArrayView1<'_, f32>, conv: &ConvModule) -> Array1<f32> {
    let mut normed = Array1::zeros(mixed.len());
    normalize_row(mixed, &conv.group_norm, normed.view_mut());
    normed.mapv_inplace(swish);
    normed.dot(&conv.pointwise_out.weight) + &conv.pointwise_out.bias
}

fn convolution(x: &mut Array2<f32>, conv: &ConvModule) {
    let (frames, d) = x.dim();
    let kernel = conv.depthwise.nrows();
    let h = normalize_rows(x, &conv.norm);
    let expanded = affine(&h, &conv.pointwise_in);
    let mut gated = Array2::zeros((frames, d));
    for (row, mut out) in expanded.outer_iter().zip(gated.outer_iter_mut()) {
        out.assign(&glu_row(row));
    }
    let mut normed = Array2::zeros((frames, d));
    for t in 0..frames {
        let mixed = depthwise_frame(conv, |j| (t + j + 1).checked_sub(kernel).map(|src| gated.row(src)));
        normalize_row(mixed.view(), &conv.group_norm, normed.row_mut(t));
    }
    let out = affine(&normed.mapv_into(swish), &conv.pointwise_out);
    *x += &out;
}

/// Attention output (before the output projection) for one query frame
/// against keys and values `[start, t]`.
pub(crate) fn attend(
    query: ArrayView1<'_, f32>,
    keys: ArrayView2<'_, f32>,
    values: ArrayView2<'_, f32>,
    num_heads: usize,
) -> Array1<f32> {
    let d = query.len();
    let hd = d / num_heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = Array1::zeros(d);
    let mut scores = vec![0.0f32; keys.nrows()];
    for h in 0..num_heads {
        let cols = h * hd..(h + 1) * hd;
        let q = query.slice(s![cols.clone()]);
        for (j, score) in scores.iter_mut().enumerate() {
            *score = q.dot(&keys.slice(s![j, cols.clone()])) * scale;
        }
        let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f32;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        let mut head = out.slice_mut(s![cols.clone()]);
        for (j, p) in scores.iter().enumerate() {
            head.scaled_add(p / total, &values.slice(s![j, cols.clone()]));
        }
    }
    out
}

fn self_attention(x: &mut Array2<f32>, attn: &Attention, config: &ConformerConfig) {
    let frames = x.nrows();
    let h = normalize_rows(x, &attn.norm);
    let q = affine(&h, &attn.query);
    let k = affine(&h, &attn.key);
    let v = affine(&h, &attn.value);
    let mut context = Array2::zeros(q.raw_dim());
    for t in 0..frames {
        let start = t.saturating_sub(config.attn_past_frames);
        context.row_mut(t).assign(&attend(
            q.row(t),
            k.slice(s![start..=t, ..]),
            v.slice(s![start..=t, ..]),
            config.num_heads,
        ));
    }
    *x += &affine(&context, &attn.output);
}

/// Mask for every stacked frame of an utterance.
pub fn forward(features: &StackedFeatures, weights: &ConformerWeights) -> Result<Mask> {
    let config = weights.config();
    let input = check_input(features.values(), config)?;
    let mut x = affine(&input, &weights.input);
    for layer in &weights.layers {
        feed_forward(&mut x, &layer.ff_in);
        convolution(&mut x, &layer.conv);
        self_attention(&mut x, &layer.attention, config);
        feed_forward(&mut x, &layer.ff_out);
        x = normalize_rows(&x, &layer.final_norm);
    }
    let logits = affine(&x, &weights.head);
    Mask::new(logits.mapv(mask_value))
}
