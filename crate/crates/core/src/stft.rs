//! Short-time Fourier analysis and least-squares overlap-add synthesis.
//!
//! Frames start at sample 0 with no centre padding, so frame `n` covers
//! samples `[n * hop, n * hop + window_len)`. Synthesis divides the
//! overlap-added, synthesis-windowed frames by the summed squared window,
//! which reconstructs exactly wherever that sum is nonzero.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{s, Array3, ArrayView2, ArrayView3, Axis};
use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted ratio between the minimum and maximum of the summed
/// squared window over one hop period.
const MIN_OVERLAP_RATIO: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
}

impl WindowKind {
    /// Periodic window of length `len`.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
struct RawStftConfig {
    sample_rate_hz: u32,
    window_len: usize,
    hop_len: usize,
    fft_size: usize,
    #[serde(default = "default_window")]
    window_kind: WindowKind,
}

fn default_window() -> WindowKind {
    WindowKind::Hann
}

/// Validated STFT parameters. Construction rejects any configuration whose
/// overlap-added squared window vanishes somewhere, since synthesis could
/// not invert it.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawStftConfig")]
pub struct StftConfig {
    sample_rate_hz: u32,
    window_len: usize,
    hop_len: usize,
    fft_size: usize,
    window_kind: WindowKind,
}

impl TryFrom<RawStftConfig> for StftConfig {
    type Error = Error;

    fn try_from(raw: RawStftConfig) -> Result<Self> {
        StftConfig::new(
            raw.sample_rate_hz,
            raw.window_len,
            raw.hop_len,
            raw.fft_size,
            raw.window_kind,
        )
    }
}

impl Default for StftConfig {
    /// 16 kHz, 32 ms Hann window, 10 ms hop, 512-point FFT.
    fn default() -> Self {
        StftConfig::from_durations(16_000, 0.032, 0.010).expect("default STFT config is valid")
    }
}

impl StftConfig {
    pub fn new(
        sample_rate_hz: u32,
        window_len: usize,
        hop_len: usize,
        fft_size: usize,
        window_kind: WindowKind,
    ) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if hop_len == 0 || hop_len > window_len || window_len > fft_size {
            return Err(Error::InvalidConfig(format!(
                "need 0 < hop_len <= window_len <= fft_size, got hop {hop_len}, window {window_len}, fft {fft_size}"
            )));
        }
        let config = StftConfig {
            sample_rate_hz,
            window_len,
            hop_len,
            fft_size,
            window_kind,
        };
        let (lo, hi) = config.overlap_bounds();
        if !(lo > MIN_OVERLAP_RATIO * hi) {
            return Err(Error::InvalidConfig(format!(
                "window does not overlap-add at hop {hop_len}: summed squared window ranges over [{lo:e}, {hi:e}]"
            )));
        }
        Ok(config)
    }

    /// Builds a Hann config from window/hop durations in seconds, with the
    /// FFT size equal to the window length.
    pub fn from_durations(sample_rate_hz: u32, window_s: f64, hop_s: f64) -> Result<Self> {
        let window_len = (window_s * sample_rate_hz as f64).round() as usize;
        let hop_len = (hop_s * sample_rate_hz as f64).round() as usize;
        StftConfig::new(sample_rate_hz, window_len, hop_len, window_len, WindowKind::Hann)
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop_len(&self) -> usize {
        self.hop_len
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn window_kind(&self) -> WindowKind {
        self.window_kind
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn window(&self) -> Vec<f64> {
        self.window_kind.coefficients(self.window_len)
    }

    /// Centre frequency of bin `k` in Hz.
    pub fn bin_frequency(&self, k: usize) -> f64 {
        k as f64 * self.sample_rate_hz as f64 / self.fft_size as f64
    }

    /// Number of frames `analyze` produces for `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.hop_len + 1
        }
    }

    /// Number of samples covered by `frames` consecutive frames.
    pub fn covered_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop_len + self.window_len
        }
    }

    /// Steady-state min and max of the summed squared window over one hop.
    fn overlap_bounds(&self) -> (f64, f64) {
        let w = self.window();
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for offset in 0..self.hop_len {
            let sum: f64 = w[offset..].iter().step_by(self.hop_len).map(|x| x * x).sum();
            lo = lo.min(sum);
            hi = hi.max(sum);
        }
        (lo, hi)
    }
}

/// Complex STFT indexed `(channel, frame, bin)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    data: Array3<Complex64>,
    config: StftConfig,
}

impl Spectrogram {
    pub fn new(data: Array3<Complex64>, config: StftConfig) -> Result<Self> {
        if data.shape()[2] != config.num_bins() {
            return Err(Error::ShapeMismatch(format!(
                "spectrogram has {} bins, config implies {}",
                data.shape()[2],
                config.num_bins()
            )));
        }
        Ok(Spectrogram { data, config })
    }

    pub fn zeros(channels: usize, frames: usize, config: StftConfig) -> Self {
        let data = Array3::zeros((channels, frames, config.num_bins()));
        Spectrogram { data, config }
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn num_channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn num_frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn num_bins(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn data(&self) -> ArrayView3<'_, Complex64> {
        self.data.view()
    }

    pub fn data_mut(&mut self) -> &mut Array3<Complex64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<Complex64> {
        self.data
    }

    /// `(frame, bin)` view of one channel.
    pub fn channel(&self, m: usize) -> ArrayView2<'_, Complex64> {
        self.data.index_axis(Axis(0), m)
    }

    /// `(channel, bin)` view of one frame.
    pub fn frame(&self, n: usize) -> ArrayView2<'_, Complex64> {
        self.data.index_axis(Axis(1), n)
    }

    pub fn select_frames(&self, range: std::ops::Range<usize>) -> Spectrogram {
        Spectrogram {
            data: self.data.slice(s![.., range, ..]).to_owned(),
            config: self.config.clone(),
        }
    }

    pub fn select_channels(&self, channels: &[usize]) -> Spectrogram {
        Spectrogram {
            data: self.data.select(Axis(0), channels),
            config: self.config.clone(),
        }
    }

    /// Total energy `sum |X|^2` over all entries.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }
}

struct Plans {
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

fn plans(fft_size: usize) -> Plans {
    let mut planner = RealFftPlanner::<f64>::new();
    Plans {
        forward: planner.plan_fft_forward(fft_size),
        inverse: planner.plan_fft_inverse(fft_size),
    }
}

/// Forward STFT of a `(channel, sample)` signal.
pub fn analyze(signal: ArrayView2<'_, f64>, config: &StftConfig) -> Result<Spectrogram> {
    let (channels, len) = signal.dim();
    if channels == 0 {
        return Err(Error::InvalidConfig("signal has no channels".into()));
    }
    if len < config.window_len {
        return Err(Error::InsufficientSamples {
            needed: config.window_len,
            got: len,
        });
    }
    let frames = config.num_frames(len);
    let window = config.window();
    let fft = plans(config.fft_size).forward;
    let mut input = fft.make_input_vec();
    let mut output = fft.make_output_vec();
    let mut scratch = fft.make_scratch_vec();
    let mut data = Array3::zeros((channels, frames, config.num_bins()));

    for m in 0..channels {
        let x = signal.row(m);
        for n in 0..frames {
            let start = n * config.hop_len;
            input.iter_mut().for_each(|v| *v = 0.0);
            for (j, (dst, w)) in input.iter_mut().zip(&window).enumerate() {
                *dst = x[start + j] * w;
            }
            fft.process_with_scratch(&mut input, &mut output, &mut scratch)
                .expect("buffer sizes come from the plan");
            data.slice_mut(s![m, n, ..])
                .iter_mut()
                .zip(&output)
                .for_each(|(d, v)| *d = *v);
        }
    }
    Ok(Spectrogram {
        data,
        config: config.clone(),
    })
}

/// Least-squares overlap-add inverse of a single-channel spectrogram.
///
/// The output has `config.covered_len(frames)` samples. Imaginary parts of
/// the DC and Nyquist bins are discarded, which is the projection onto
/// spectra of real frames.
pub fn synthesize(spec: &Spectrogram) -> Result<Vec<f64>> {
    if spec.num_channels() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "synthesize expects one channel, got {}",
            spec.num_channels()
        )));
    }
    let config = &spec.config;
    let frames = spec.num_frames();
    let out_len = config.covered_len(frames);
    let window = config.window();
    let ifft = plans(config.fft_size).inverse;
    let mut input = ifft.make_input_vec();
    let mut output = ifft.make_output_vec();
    let mut scratch = ifft.make_scratch_vec();
    let scale = 1.0 / config.fft_size as f64;
    let last = input.len() - 1;

    let mut acc = vec![0.0; out_len];
    let mut norm = vec![0.0; out_len];
    for n in 0..frames {
        for (dst, src) in input.iter_mut().zip(spec.data.slice(s![0, n, ..])) {
            *dst = *src;
        }
        input[0].im = 0.0;
        if config.fft_size % 2 == 0 {
            input[last].im = 0.0;
        }
        ifft.process_with_scratch(&mut input, &mut output, &mut scratch)
            .expect("buffer sizes come from the plan");
        let start = n * config.hop_len;
        for (j, w) in window.iter().enumerate() {
            acc[start + j] += output[j] * scale * w;
            norm[start + j] += w * w;
        }
    }
    Ok(acc
        .into_iter()
        .zip(norm)
        .map(|(a, d)| if d > f64::EPSILON { a / d } else { 0.0 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn random_signal(channels: usize, len: usize, seed: u64) -> Array2<f64> {
        let mut rng = SplitMix64::seed_from_u64(seed);
        Array2::from_shape_fn((channels, len), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn default_config_matches_32ms_10ms() {
        let c = StftConfig::default();
        assert_eq!(c.window_len(), 512);
        assert_eq!(c.hop_len(), 160);
        assert_eq!(c.fft_size(), 512);
        assert_eq!(c.num_bins(), 257);
    }

    #[test]
    fn rejects_gapped_hop() {
        assert!(StftConfig::new(16_000, 512, 600, 512, WindowKind::Hann).is_err());
        // Periodic Hann at hop == window leaves a zero at every frame boundary.
        assert!(StftConfig::new(16_000, 512, 512, 512, WindowKind::Hann).is_err());
        assert!(StftConfig::new(16_000, 512, 160, 256, WindowKind::Hann).is_err());
        assert!(StftConfig::new(16_000, 512, 256, 1024, WindowKind::Hann).is_ok());
    }

    #[test]
    fn config_deserialization_validates() {
        let ok: StftConfig = serde_json::from_str(
            r#"{"sample_rate_hz":16000,"window_len":512,"hop_len":160,"fft_size":512}"#,
        )
        .unwrap();
        assert_eq!(ok, StftConfig::default());
        let bad = serde_json::from_str::<StftConfig>(
            r#"{"sample_rate_hz":16000,"window_len":512,"hop_len":700,"fft_size":512}"#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn frame_count_has_no_padding() {
        let c = StftConfig::default();
        let x = random_signal(2, 16_000, 1);
        let spec = analyze(x.view(), &c).unwrap();
        assert_eq!(spec.num_frames(), (16_000 - 512) / 160 + 1);
        assert_eq!(spec.num_channels(), 2);
    }

    #[test]
    fn short_signal_is_rejected() {
        let c = StftConfig::default();
        let x = Array2::zeros((1, 511));
        assert!(matches!(
            analyze(x.view(), &c),
            Err(Error::InsufficientSamples { needed: 512, got: 511 })
        ));
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let c = StftConfig::default();
        let spec = analyze(Array2::zeros((3, 2000)).view(), &c).unwrap();
        assert!(spec.data().iter().all(|z| *z == Complex64::new(0.0, 0.0)));
        let y = synthesize(&spec.select_channels(&[0])).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bin_centred_sinusoid_matches_direct_dft() {
        let c = StftConfig::default();
        let k0 = 40;
        let f0 = c.bin_frequency(k0);
        let fs = c.sample_rate_hz() as f64;
        let x = Array2::from_shape_fn((1, 2048), |(_, t)| (2.0 * PI * f0 * t as f64 / fs).cos());
        let spec = analyze(x.view(), &c).unwrap();
        let w = c.window();
        let n = c.fft_size();
        for frame in 0..spec.num_frames() {
            let start = frame * c.hop_len();
            let row = spec.channel(0).row(frame).to_owned();
            // direct DFT of the windowed frame
            for k in [k0 - 2, k0 - 1, k0, k0 + 1, k0 + 2] {
                let mut z = Complex64::new(0.0, 0.0);
                for j in 0..n {
                    let phase = -2.0 * PI * (k * j) as f64 / n as f64;
                    z += Complex64::from_polar(x[[0, start + j]] * w[j], phase);
                }
                assert!((z - row[k]).norm() < 1e-9 * (1.0 + z.norm()));
            }
            let total: f64 = row.iter().map(|z| z.norm_sqr()).sum();
            let peak = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
                .unwrap()
                .0;
            assert_eq!(peak, k0);
            // Hann main lobe spans k0 +/- 1.
            let lobe: f64 = row.slice(s![k0 - 1..=k0 + 1]).iter().map(|z| z.norm_sqr()).sum();
            assert!(lobe / total >= 0.99, "main lobe fraction {}", lobe / total);
        }
    }

    #[test]
    fn parseval_per_frame() {
        let c = StftConfig::default();
        let x = random_signal(1, 16_000, 7);
        let spec = analyze(x.view(), &c).unwrap();
        let w = c.window();
        let n = c.fft_size() as f64;
        for frame in 0..spec.num_frames() {
            let start = frame * c.hop_len();
            let time: f64 = (0..c.window_len())
                .map(|j| (x[[0, start + j]] * w[j]).powi(2))
                .sum();
            let row = spec.channel(0).row(frame).to_owned();
            let last = row.len() - 1;
            let freq: f64 = row
                .iter()
                .enumerate()
                .map(|(k, z)| {
                    let weight = if k == 0 || k == last { 1.0 } else { 2.0 };
                    weight * z.norm_sqr()
                })
                .sum::<f64>()
                / n;
            assert!((time - freq).abs() <= 1e-9 * time, "frame {frame}: {time} vs {freq}");
        }
    }

    #[test]
    fn impulse_spectrum_gives_windowed_impulse() {
        let c = StftConfig::default();
        let mut spec = Spectrogram::zeros(1, 1, c.clone());
        // A flat unit spectrum is the DFT of a unit impulse at sample 0; use
        // a linear phase to move the impulse to sample 100 instead.
        let n = c.fft_size();
        let d = 100usize;
        for k in 0..c.num_bins() {
            spec.data_mut()[[0, 0, k]] =
                Complex64::from_polar(1.0, -2.0 * PI * (k * d) as f64 / n as f64);
        }
        let y = synthesize(&spec).unwrap();
        // One frame: the synthesis-windowed impulse w[d] divided by w[d]^2.
        let w = c.window();
        for (j, v) in y.iter().enumerate() {
            let expected = if j == d { w[d] / (w[d] * w[d]) } else { 0.0 };
            assert!((v - expected).abs() < 1e-9, "sample {j}: {v}");
        }
    }

    #[test]
    fn round_trip_on_interior() {
        let c = StftConfig::default();
        let x = random_signal(1, 16_000, 3);
        let spec = analyze(x.view(), &c).unwrap();
        let y = synthesize(&spec).unwrap();
        assert_eq!(y.len(), c.covered_len(spec.num_frames()));
        let interior = c.window_len()..y.len() - c.window_len();
        let err: f64 = interior.clone().map(|i| (y[i] - x[[0, i]]).powi(2)).sum();
        let norm: f64 = interior.map(|i| x[[0, i]].powi(2)).sum();
        assert!((err / norm).sqrt() < 1e-6);
    }

    #[test]
    fn linearity() {
        let c = StftConfig::default();
        let a = random_signal(2, 4000, 11);
        let b = random_signal(2, 4000, 12);
        let combo = &a * 0.7 - &b * 2.5;
        let sa = analyze(a.view(), &c).unwrap();
        let sb = analyze(b.view(), &c).unwrap();
        let sc = analyze(combo.view(), &c).unwrap();
        let expected = sa.data().mapv(|z| z * 0.7) - sb.data().mapv(|z| z * 2.5);
        let err: f64 = (&expected - &sc.data()).iter().map(|z| z.norm_sqr()).sum();
        let norm: f64 = expected.iter().map(|z| z.norm_sqr()).sum();
        assert!((err / norm).sqrt() < 1e-9);
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn interior_round_trip(samples in proptest::collection::vec(-1.0f64..1.0, 1200..4000)) {
            let config = StftConfig::default();
            let len = samples.len();
            let x = Array2::from_shape_vec((1, len), samples).unwrap();
            let y = synthesize(&analyze(x.view(), &config).unwrap()).unwrap();
            prop_assert_eq!(y.len(), config.covered_len(config.num_frames(len)));
            for t in config.window_len()..y.len().saturating_sub(config.window_len()) {
                prop_assert!((y[t] - x[[0, t]]).abs() < 1e-9);
            }
        }

        #[test]
        fn analysis_is_linear(
            a in proptest::collection::vec(-1.0f64..1.0, 800),
            b in proptest::collection::vec(-1.0f64..1.0, 800),
            c in -3.0f64..3.0,
        ) {
            let config = StftConfig::default();
            let row = |v: Vec<f64>| Array2::from_shape_vec((1, 800), v).unwrap();
            let combined: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + c * y).collect();
            let sa = analyze(row(a).view(), &config).unwrap();
            let sb = analyze(row(b).view(), &config).unwrap();
            let sc = analyze(row(combined).view(), &config).unwrap();
            for ((x, y), z) in sa.data().iter().zip(sb.data()).zip(sc.data()) {
                prop_assert!((x + y * c - z).norm() < 1e-9);
            }
        }
    }
}
