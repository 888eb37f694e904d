//! Log-mel features and the stacked two-source model input.
//!
//! Filters are HTK-style triangles, `mel(f) = 2595 log10(1 + f/700)`, with
//! centres equally spaced in mel between `fmin` and `fmax`. Each weight is
//! the triangle averaged over the frequency span of its STFT bin rather than
//! sampled at the bin centre, so that filters narrower than one bin still
//! receive energy.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::container::{config_hash, MatrixFile, MatrixKind};
use crate::error::{Error, Result};
use crate::stft::{Spectrogram, StftConfig};

/// Base frames per stacked frame.
pub const STACK_FRAMES: usize = 4;
/// Base frames between consecutive stacked frames.
pub const STACK_HOP: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub num_mel: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
    pub stft: StftConfig,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            num_mel: 128,
            fmin_hz: 125.0,
            fmax_hz: 7500.0,
            log_floor: 1e-5,
            stft: StftConfig::default(),
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.stft.sample_rate_hz() as f64 / 2.0;
        if self.num_mel == 0 {
            return Err(Error::InvalidConfig("num_mel must be positive".into()));
        }
        if !(0.0 <= self.fmin_hz && self.fmin_hz < self.fmax_hz && self.fmax_hz <= nyquist) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= fmin < fmax <= {nyquist} Hz, got {}..{}",
                self.fmin_hz, self.fmax_hz
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::InvalidConfig("log_floor must be positive".into()));
        }
        Ok(())
    }

    /// Width of a stacked feature vector: two sources of four frames.
    pub fn stacked_dim(&self) -> usize {
        2 * STACK_FRAMES * self.num_mel
    }

    pub fn hash(&self) -> Result<[u8; 32]> {
        config_hash(self)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// The `num_mel + 2` edge frequencies in Hz: lower edge, the centres, upper
/// edge.
pub fn mel_edges(config: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(config.fmin_hz), hz_to_mel(config.fmax_hz));
    let n = config.num_mel + 1;
    (0..=n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64))
        .collect()
}

/// Integral of the triangle `(left, centre, right)` (peak 1) over `[a, b]`.
fn triangle_integral(left: f64, centre: f64, right: f64, a: f64, b: f64) -> f64 {
    let value = |x: f64| {
        if x <= left || x >= right {
            0.0
        } else if x <= centre {
            (x - left) / (centre - left)
        } else {
            (right - x) / (right - centre)
        }
    };
    // The triangle is linear between its knots, so the trapezoid rule on
    // each knot-delimited piece is exact.
    let mut points = vec![a, b];
    points.extend([left, centre, right].into_iter().filter(|k| *k > a && *k < b));
    points.sort_by(f64::total_cmp);
    points
        .windows(2)
        .map(|w| 0.5 * (w[1] - w[0]) * (value(w[0]) + value(w[1])))
        .sum()
}

/// `(num_mel, num_bins)` filterbank.
pub fn mel_filterbank(config: &MelConfig) -> Result<Array2<f64>> {
    config.validate()?;
    let bins = config.stft.num_bins();
    let df = config.stft.sample_rate_hz() as f64 / config.stft.fft_size() as f64;
    let edges = mel_edges(config);
    let mut weights = Array2::zeros((config.num_mel, bins));
    for f in 0..config.num_mel {
        let (l, c, r) = (edges[f], edges[f + 1], edges[f + 2]);
        for k in 0..bins {
            let centre = k as f64 * df;
            let (a, b) = (centre - 0.5 * df, centre + 0.5 * df);
            if b <= l || a >= r {
                continue;
            }
            weights[[f, k]] = triangle_integral(l, c, r, a, b) / df;
        }
        if weights.row(f).iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidConfig(format!(
                "mel band {f} receives no STFT bins; too many bands for the FFT size"
            )));
        }
    }
    Ok(weights)
}

/// Mel-band magnitudes or their logs, indexed `(frame, band)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    values: Array2<f64>,
    is_log: bool,
}

impl MelSpectrogram {
    /// Linear (not log) mel values; all must be finite and nonnegative.
    pub fn linear(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::NonFinite("linear mel values must be finite and >= 0".into()));
        }
        Ok(MelSpectrogram {
            values,
            is_log: false,
        })
    }

    pub fn log(values: Array2<f64>) -> Self {
        MelSpectrogram {
            values,
            is_log: true,
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn is_log(&self) -> bool {
        self.is_log
    }

    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_bands(&self) -> usize {
        self.values.ncols()
    }
}

/// Applies a filterbank to the magnitudes of a single-channel spectrogram.
pub fn to_mel_with(spec: &Spectrogram, filterbank: ArrayView2<'_, f64>) -> Result<MelSpectrogram> {
    if spec.num_channels() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "mel needs one channel, got {}",
            spec.num_channels()
        )));
    }
    if filterbank.ncols() != spec.num_bins() {
        return Err(Error::ShapeMismatch(format!(
            "filterbank has {} bins, spectrogram {}",
            filterbank.ncols(),
            spec.num_bins()
        )));
    }
    let magnitude: Array2<f64> = spec.data().slice(s![0, .., ..]).mapv(|z| z.norm());
    Ok(MelSpectrogram {
        values: magnitude.dot(&filterbank.t()),
        is_log: false,
    })
}

pub fn to_mel(spec: &Spectrogram, config: &MelConfig) -> Result<MelSpectrogram> {
    if spec.config() != &config.stft {
        return Err(Error::ConfigMismatch("spectrogram STFT differs from mel config".into()));
    }
    to_mel_with(spec, mel_filterbank(config)?.view())
}

pub fn to_log(mel: &MelSpectrogram, log_floor: f64) -> Result<MelSpectrogram> {
    if mel.is_log {
        return Err(Error::AlreadyLog);
    }
    Ok(MelSpectrogram::log(mel.values.mapv(|v| v.max(log_floor).ln())))
}

/// Model input: one row per stacked frame, `[raw x4 | cleaned x4]`, each
/// group oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedFeatures {
    values: Array2<f64>,
}

impl StackedFeatures {
    pub fn new(values: Array2<f64>) -> Self {
        StackedFeatures { values }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn to_file(&self, config: &MelConfig) -> Result<MatrixFile> {
        Ok(MatrixFile {
            kind: MatrixKind::StackedFeatures,
            config_hash: config.hash()?,
            values: self.values.mapv(|v| v as f32),
        })
    }
}

/// Number of stacked frames produced from `base_frames` base frames.
pub fn stacked_count(base_frames: usize) -> usize {
    if base_frames == 0 {
        0
    } else {
        (base_frames - 1) / STACK_HOP + 1
    }
}

/// Base frame index of stacked frame `t`, which ends at base frame
/// `STACK_HOP * t`.
pub fn stacked_frame_end(t: usize) -> usize {
    STACK_HOP * t
}

pub fn stack(raw: &MelSpectrogram, cleaned: &MelSpectrogram) -> Result<StackedFeatures> {
    if !raw.is_log || !cleaned.is_log {
        return Err(Error::NotLog);
    }
    if raw.values.dim() != cleaned.values.dim() {
        return Err(Error::ShapeMismatch(format!(
            "raw {:?} vs cleaned {:?}",
            raw.values.dim(),
            cleaned.values.dim()
        )));
    }
    let (frames, bands) = raw.values.dim();
    let count = stacked_count(frames);
    let mut out = Array2::zeros((count, 2 * STACK_FRAMES * bands));
    for t in 0..count {
        let end = stacked_frame_end(t);
        for (j, offset) in (0..STACK_FRAMES).rev().enumerate() {
            let base = end.saturating_sub(offset);
            for (src, source) in [&raw.values, &cleaned.values].into_iter().enumerate() {
                let start = (src * STACK_FRAMES + j) * bands;
                out.slice_mut(s![t, start..start + bands])
                    .assign(&source.row(base));
            }
        }
    }
    Ok(StackedFeatures { values: out })
}

/// Log-mel of a single-channel spectrogram.
pub fn log_mel(spec: &Spectrogram, config: &MelConfig) -> Result<MelSpectrogram> {
    to_log(&to_mel(spec, config)?, config.log_floor)
}

/// Stacked model input from the raw and cleaned reference spectrograms.
pub fn extract_features(
    raw: &Spectrogram,
    cleaned: &Spectrogram,
    config: &MelConfig,
) -> Result<StackedFeatures> {
    stack(&log_mel(raw, config)?, &log_mel(cleaned, config)?)
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn stacked_frames_cover_every_base_frame(frames in 1usize..60, bands in 1usize..8) {
            let raw = MelSpectrogram::log(Array2::from_shape_fn((frames, bands), |(t, f)| (t * 10 + f) as f64));
            let cleaned = MelSpectrogram::log(raw.values().mapv(|v| -v));
            let st = stack(&raw, &cleaned).unwrap();
            prop_assert_eq!(st.num_frames(), stacked_count(frames));
            prop_assert_eq!(st.dim(), 2 * STACK_FRAMES * bands);
            // The newest slot of the last stacked frame is never more than a hop behind.
            let last = stacked_frame_end(st.num_frames() - 1);
            prop_assert!(last < frames && frames - last <= STACK_HOP);
            for t in 0..st.num_frames() {
                let newest = (STACK_FRAMES - 1) * bands;
                prop_assert_eq!(st.values()[[t, newest]], raw.values()[[stacked_frame_end(t), 0]]);
                prop_assert_eq!(st.values()[[t, STACK_FRAMES * bands + newest]], -raw.values()[[stacked_frame_end(t), 0]]);
            }
        }
    }
}
