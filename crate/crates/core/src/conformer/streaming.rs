//! Frame-by-frame inference with bounded per-layer history.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, ArrayView1};

use super::{
    attend, conv_output, depthwise_frame, glu_row, mask_value, normalize_row, swish,
    ConformerConfig, ConformerWeights, FeedForward, Linear, Norm,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
struct LayerState {
    /// Post-norm attention inputs of past frames, oldest first.
    attention: VecDeque<Array1<f32>>,
    /// GLU outputs of past frames, oldest first.
    conv: VecDeque<Array1<f32>>,
}

/// History carried between calls to [`forward_streaming`] for one stream.
#[derive(Clone, Debug)]
pub struct StreamState {
    config: ConformerConfig,
    layers: Vec<LayerState>,
    frames_seen: usize,
}

impl StreamState {
    pub fn new(config: &ConformerConfig) -> Self {
        StreamState {
            config: config.clone(),
            layers: vec![LayerState::default(); config.num_layers],
            frames_seen: 0,
        }
    }

    pub fn reset(&mut self) {
        self.layers.iter_mut().for_each(|l| *l = LayerState::default());
        self.frames_seen = 0;
    }

    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// Frames of attention and convolution history held by `layer`.
    pub fn history_len(&self, layer: usize) -> (usize, usize) {
        let l = &self.layers[layer];
        (l.attention.len(), l.conv.len())
    }
}

fn affine_row(x: ArrayView1<'_, f32>, l: &Linear) -> Array1<f32> {
    x.dot(&l.weight) + &l.bias
}

fn normalized(x: &Array1<f32>, norm: &Norm) -> Array1<f32> {
    let mut out = Array1::zeros(x.len());
    normalize_row(x.view(), norm, out.view_mut());
    out
}

fn push_capped(queue: &mut VecDeque<Array1<f32>>, frame: Array1<f32>, cap: usize) {
    queue.push_back(frame);
    while queue.len() > cap {
        queue.pop_front();
    }
}

fn feed_forward_row(x: &mut Array1<f32>, ff: &FeedForward) {
    let h = normalized(x, &ff.norm);
    let h = affine_row(h.view(), &ff.expand).mapv_into(swish);
    let h = affine_row(h.view(), &ff.project);
    x.scaled_add(0.5, &h);
}

/// Mask for the next stacked frame of the stream.
pub fn forward_streaming(
    state: &mut StreamState,
    frame: ArrayView1<'_, f64>,
    weights: &ConformerWeights,
) -> Result<Array1<f64>> {
    let config = weights.config();
    if &state.config != config {
        return Err(Error::ConfigMismatch("stream state built for another model".into()));
    }
    if frame.len() != config.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "frame has {} dims, model expects {}",
            frame.len(),
            config.input_dim
        )));
    }
    if frame.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("conformer input".into()));
    }
    let input = frame.mapv(|v| v as f32);
    let mut x = affine_row(input.view(), &weights.input);
    let conv_cap = config.conv_kernel - 1;

    for (layer, history) in weights.layers.iter().zip(state.layers.iter_mut()) {
        feed_forward_row(&mut x, &layer.ff_in);

        let conv = &layer.conv;
        let h = normalized(&x, &conv.norm);
        let gated = glu_row(affine_row(h.view(), &conv.pointwise_in).view());
        let past = &history.conv;
        let mixed = depthwise_frame(conv, |j| {
            let back = conv_cap - j;
            if back == 0 {
                Some(gated.view())
            } else {
                past.len().checked_sub(back).map(|i| past[i].view())
            }
        });
        x += &conv_output(mixed.view(), conv);
        push_capped(&mut history.conv, gated, conv_cap);

        let attn = &layer.attention;
        let h = normalized(&x, &attn.norm);
        let rows = history.attention.len() + 1;
        let mut window = Array2::zeros((rows, config.model_dim));
        for (i, past) in history.attention.iter().enumerate() {
            window.row_mut(i).assign(past);
        }
        window.row_mut(rows - 1).assign(&h);
        let keys = window.dot(&attn.key.weight) + &attn.key.bias;
        let values = window.dot(&attn.value.weight) + &attn.value.bias;
        let query = affine_row(h.view(), &attn.query);
        let context = attend(query.view(), keys.view(), values.view(), config.num_heads);
        x += &affine_row(context.view(), &attn.output);
        push_capped(&mut history.attention, h, config.attn_past_frames);

        feed_forward_row(&mut x, &layer.ff_out);
        x = normalized(&x, &layer.final_norm);
    }
    state.frames_seen += 1;
    Ok(affine_row(x.view(), &weights.head).mapv(mask_value))
}
