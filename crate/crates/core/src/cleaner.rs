//! Per-frequency multichannel adaptive noise cancellation.
//!
//! For every STFT bin the reference microphone is predicted from a short
//! tapped delay line on each of the other microphones, and the prediction
//! is subtracted:
//!
//! ```text
//! Z(k,n) = Y_ref(k,n) - u(k)^H y(k,n)
//! y(k,n) = [Y_a(k,n), Y_a(k,n-1), .., Y_a(k,n-L+1), Y_b(k,n), ..]
//! ```
//!
//! The stacked coefficients `u(k)` are fitted jointly across microphones by
//! exponentially weighted RLS while only noise is present, then frozen and
//! applied unchanged to the query.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stft::{analyze, Spectrogram, StftConfig};

const STATE_MAGIC: &[u8; 4] = b"CSCL";
const STATE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleanerConfig {
    pub num_mics: usize,
    #[serde(default = "default_taps")]
    pub taps_per_mic: usize,
    #[serde(default = "default_lambda")]
    pub forgetting_factor: f64,
    #[serde(default = "default_delta")]
    pub init_diag: f64,
    #[serde(default)]
    pub reference_mic: usize,
}

fn default_taps() -> usize {
    3
}

fn default_lambda() -> f64 {
    0.9995
}

fn default_delta() -> f64 {
    0.01
}

impl Default for CleanerConfig {
    fn default() -> Self {
        CleanerConfig::new(3)
    }
}

impl CleanerConfig {
    /// Default filter (3 taps, lambda 0.9995, delta 0.01, reference mic 0)
    /// for `num_mics` microphones.
    pub fn new(num_mics: usize) -> Self {
        CleanerConfig {
            num_mics,
            taps_per_mic: default_taps(),
            forgetting_factor: default_lambda(),
            init_diag: default_delta(),
            reference_mic: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_mics == 0 {
            return Err(Error::InvalidConfig("cleaner needs at least one mic".into()));
        }
        if self.taps_per_mic == 0 {
            return Err(Error::InvalidConfig("taps_per_mic must be >= 1".into()));
        }
        if !(self.forgetting_factor > 0.0 && self.forgetting_factor <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "forgetting factor {} outside (0, 1]",
                self.forgetting_factor
            )));
        }
        if !(self.init_diag > 0.0 && self.init_diag.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "init_diag {} must be positive",
                self.init_diag
            )));
        }
        if self.reference_mic >= self.num_mics {
            return Err(Error::InvalidConfig(format!(
                "reference mic {} out of range for {} mics",
                self.reference_mic, self.num_mics
            )));
        }
        Ok(())
    }

    /// Length of the stacked coefficient vector, `(M - 1) * L`.
    pub fn regressor_len(&self) -> usize {
        (self.num_mics - 1) * self.taps_per_mic
    }

    /// Channel indices of the non-reference microphones, in stacking order.
    pub fn aux_mics(&self) -> Vec<usize> {
        (0..self.num_mics).filter(|&m| m != self.reference_mic).collect()
    }
}

/// Adaptive filter state for every bin.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanerState {
    config: CleanerConfig,
    num_bins: usize,
    /// `(bin, (M-1)L)`
    coeffs: Array2<Complex64>,
    /// `(bin, (M-1)L, (M-1)L)`
    inv_corr: Array3<Complex64>,
    /// `(bin, (M-1)L)`: per bin the stacked regressor, one newest-first
    /// block of `L` taps per auxiliary mic.
    delay: Array2<Complex64>,
    frozen: bool,
}

impl CleanerState {
    pub fn new(config: CleanerConfig, num_bins: usize) -> Result<Self> {
        config.validate()?;
        let d = config.regressor_len();
        let mut inv_corr = Array3::zeros((num_bins, d, d));
        let p0 = Complex64::new(1.0 / config.init_diag, 0.0);
        for k in 0..num_bins {
            for i in 0..d {
                inv_corr[[k, i, i]] = p0;
            }
        }
        Ok(CleanerState {
            coeffs: Array2::zeros((num_bins, d)),
            inv_corr,
            delay: Array2::zeros((num_bins, d)),
            num_bins,
            config,
            frozen: false,
        })
    }

    pub fn config(&self) -> &CleanerConfig {
        &self.config
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Stacked coefficients, `(bin, (M-1)L)`.
    pub fn coefficients(&self) -> ArrayView2<'_, Complex64> {
        self.coeffs.view()
    }

    /// Inverse correlation matrix `P(k)` for one bin.
    pub fn inverse_correlation(&self, bin: usize) -> ArrayView2<'_, Complex64> {
        self.inv_corr.index_axis(Axis(0), bin)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Clears the delay lines without touching coefficients.
    pub fn reset_delay_lines(&mut self) {
        self.delay.fill(Complex64::new(0.0, 0.0));
    }

    fn check_frame(&self, frame: &ArrayView2<'_, Complex64>) -> Result<()> {
        let (channels, bins) = frame.dim();
        if channels != self.config.num_mics || bins != self.num_bins {
            return Err(Error::ShapeMismatch(format!(
                "frame is {channels} channels x {bins} bins, cleaner expects {} x {}",
                self.config.num_mics, self.num_bins
            )));
        }
        Ok(())
    }

    fn push_frame(&mut self, frame: &ArrayView2<'_, Complex64>) {
        let taps = self.config.taps_per_mic;
        for (a, m) in self.config.aux_mics().into_iter().enumerate() {
            let input = frame.row(m);
            for (k, mut line) in self.delay.outer_iter_mut().enumerate() {
                let block = &mut line.as_slice_mut().expect("row-major")[a * taps..(a + 1) * taps];
                block.copy_within(..taps - 1, 1);
                block[0] = input[k];
            }
        }
    }

    /// Filters one `(channel, bin)` frame with the current coefficients.
    /// The frame enters the delay lines before filtering.
    pub fn residual(&mut self, frame: ArrayView2<'_, Complex64>) -> Result<Array1<Complex64>> {
        self.check_frame(&frame)?;
        self.push_frame(&frame);
        let reference = frame.row(self.config.reference_mic);
        Ok(Array1::from_shape_fn(self.num_bins, |k| {
            let u = self.coeffs.row(k);
            let y = self.delay.row(k);
            reference[k] - hermitian_dot(u.as_slice().expect("row-major"), y.as_slice().expect("row-major"))
        }))
    }

    /// One RLS update per bin. Returns the a-priori residual.
    pub fn adapt_frame(&mut self, frame: ArrayView2<'_, Complex64>) -> Result<Array1<Complex64>> {
        if self.frozen {
            return Err(Error::CleanerFrozen);
        }
        self.check_frame(&frame)?;
        self.push_frame(&frame);
        let d = self.config.regressor_len();
        let lambda = self.config.forgetting_factor;
        let reference = frame.row(self.config.reference_mic);
        let mut py = vec![Complex64::new(0.0, 0.0); d];
        let mut out = Array1::zeros(self.num_bins);

        for k in 0..self.num_bins {
            let y = self.delay.row(k);
            let y = y.as_slice().expect("row-major");
            let u = self.coeffs.row_mut(k).into_slice().expect("row-major");
            let z = reference[k] - hermitian_dot(u, y);
            out[k] = z;
            if d == 0 {
                continue;
            }
            let mut p = self.inv_corr.index_axis_mut(Axis(0), k);
            let p = p.as_slice_mut().expect("row-major");
            rls_step(u, p, y, z, lambda, &mut py);
            debug_assert!(is_hermitian_with_positive_diagonal(p, d), "P lost definiteness at bin {k}");
        }
        Ok(out)
    }

    /// Applies the current coefficients to every frame of `spec`, starting
    /// from empty delay lines. Does not modify the state.
    pub fn filter(&self, spec: &Spectrogram) -> Result<Spectrogram> {
        let mut scratch = self.clone();
        scratch.reset_delay_lines();
        let mut out = Spectrogram::zeros(1, spec.num_frames(), spec.config().clone());
        for n in 0..spec.num_frames() {
            let z = scratch.residual(spec.frame(n))?;
            out.data_mut().slice_mut(s![0, n, ..]).assign(&z);
        }
        Ok(out)
    }

    /// Little-endian dump: magic, version, config, bin count, frozen flag,
    /// then every bin's coefficients followed by every bin's `P` (row-major),
    /// each complex value as `(re, im)` f64 pairs. Delay lines are not stored.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(STATE_MAGIC);
        buf.extend_from_slice(&STATE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.config.num_mics as u32).to_le_bytes());
        buf.extend_from_slice(&(self.config.taps_per_mic as u32).to_le_bytes());
        buf.extend_from_slice(&self.config.forgetting_factor.to_le_bytes());
        buf.extend_from_slice(&self.config.init_diag.to_le_bytes());
        buf.extend_from_slice(&(self.config.reference_mic as u32).to_le_bytes());
        buf.extend_from_slice(&(self.num_bins as u32).to_le_bytes());
        buf.push(self.frozen as u8);
        for z in self.coeffs.iter().chain(self.inv_corr.iter()) {
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Truncated)?;
        if &magic != STATE_MAGIC {
            return Err(Error::BadMagic("cleaner state"));
        }
        let version = read_u32(&mut r)?;
        if version != STATE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let config = CleanerConfig {
            num_mics: read_u32(&mut r)? as usize,
            taps_per_mic: read_u32(&mut r)? as usize,
            forgetting_factor: read_f64(&mut r)?,
            init_diag: read_f64(&mut r)?,
            reference_mic: read_u32(&mut r)? as usize,
        };
        let num_bins = read_u32(&mut r)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(|_| Error::Truncated)?;
        let mut state = CleanerState::new(config, num_bins)?;
        let expected = (state.coeffs.len() + state.inv_corr.len()) * 16;
        if r.len() < expected {
            return Err(Error::Truncated);
        }
        for z in state.coeffs.iter_mut().chain(state.inv_corr.iter_mut()) {
            *z = Complex64::new(read_f64(&mut r)?, read_f64(&mut r)?);
        }
        state.frozen = flag[0] != 0;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        CleanerState::from_bytes(&bytes)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Truncated)?;
    Ok(f64::from_le_bytes(b))
}

/// `a^H b`
fn hermitian_dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Complex exponentially weighted RLS update, in place:
///
/// ```text
/// g = P y / (lambda + y^H P y)
/// u <- u + g conj(z)
/// P <- (P - g y^H P) / lambda
/// ```
///
/// `P` is re-symmetrised afterwards so rounding cannot break Hermitian
/// symmetry.
fn rls_step(
    u: &mut [Complex64],
    p: &mut [Complex64],
    y: &[Complex64],
    z: Complex64,
    lambda: f64,
    py: &mut [Complex64],
) {
    let d = u.len();
    for (i, out) in py.iter_mut().enumerate() {
        *out = p[i * d..(i + 1) * d].iter().zip(y).map(|(a, b)| a * b).sum();
    }
    let denom = lambda + hermitian_dot(y, py).re;
    let inv_lambda = 1.0 / lambda;
    for i in 0..d {
        let g = py[i] / denom;
        u[i] += g * z.conj();
        // y^H P = (P y)^H because P is Hermitian.
        for (pij, pyj) in p[i * d..(i + 1) * d].iter_mut().zip(py.iter()) {
            *pij = (*pij - g * pyj.conj()) * inv_lambda;
        }
    }
    for i in 0..d {
        p[i * d + i].im = 0.0;
        for j in i + 1..d {
            let avg = 0.5 * (p[i * d + j] + p[j * d + i].conj());
            p[i * d + j] = avg;
            p[j * d + i] = avg.conj();
        }
    }
}

fn is_hermitian_with_positive_diagonal(p: &[Complex64], d: usize) -> bool {
    (0..d).all(|i| p[i * d + i].re > 0.0 && p[i * d + i].im == 0.0)
        && (0..d).all(|i| (0..d).all(|j| p[i * d + j] == p[j * d + i].conj()))
}

/// Direct regularised least-squares solve over all frames of `spec`:
/// per bin, `(sum y y^H + delta I) u = sum y conj(Y_ref)`, with regressors
/// built from zero-initialised delay lines exactly as the adaptive path
/// builds them.
pub fn batch_ls_oracle(spec: &Spectrogram, config: &CleanerConfig) -> Result<Array2<Complex64>> {
    config.validate()?;
    if spec.num_channels() != config.num_mics {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram has {} channels, config expects {}",
            spec.num_channels(),
            config.num_mics
        )));
    }
    let d = config.regressor_len();
    let bins = spec.num_bins();
    if spec.num_frames() < d {
        return Err(Error::ContextTooShort {
            frames: spec.num_frames(),
            needed: d,
        });
    }
    let mut out = Array2::zeros((bins, d));
    if d == 0 {
        return Ok(out);
    }
    let taps = config.taps_per_mic;
    let aux = config.aux_mics();
    let data = spec.data();
    for k in 0..bins {
        let mut gram = DMatrix::<Complex64>::identity(d, d) * Complex64::new(config.init_diag, 0.0);
        let mut cross = DVector::<Complex64>::zeros(d);
        for n in 0..spec.num_frames() {
            let y = DVector::from_fn(d, |i, _| {
                let (a, l) = (i / taps, i % taps);
                if n >= l {
                    data[[aux[a], n - l, k]]
                } else {
                    Complex64::new(0.0, 0.0)
                }
            });
            gram += &y * y.adjoint();
            cross += &y * data[[config.reference_mic, n, k]].conj();
        }
        let chol = gram.cholesky().ok_or(Error::Singular { bin: k })?;
        let u = chol.solve(&cross);
        for i in 0..d {
            out[[k, i]] = u[i];
        }
    }
    Ok(out)
}

/// Number of frames lying entirely inside the first `context_samples`.
pub fn context_frames(config: &StftConfig, context_samples: usize) -> usize {
    config.num_frames(context_samples)
}

/// Adapts on the first `context_frames` frames of `spec`, freezes, and
/// filters the rest. Returns the post-context residual and the frozen state.
pub fn clean_spectrogram(
    spec: &Spectrogram,
    context_frames: usize,
    config: &CleanerConfig,
) -> Result<(Spectrogram, CleanerState)> {
    config.validate()?;
    let needed = config.regressor_len();
    if context_frames < needed {
        return Err(Error::ContextTooShort {
            frames: context_frames,
            needed,
        });
    }
    if context_frames >= spec.num_frames() {
        return Err(Error::InsufficientSamples {
            needed: context_frames + 1,
            got: spec.num_frames(),
        });
    }
    let mut state = CleanerState::new(config.clone(), spec.num_bins())?;
    for n in 0..context_frames {
        state.adapt_frame(spec.frame(n))?;
    }
    state.freeze();
    let query = spec.num_frames() - context_frames;
    let mut out = Spectrogram::zeros(1, query, spec.config().clone());
    for n in context_frames..spec.num_frames() {
        let z = state.residual(spec.frame(n))?;
        out.data_mut()
            .slice_mut(s![0, n - context_frames, ..])
            .assign(&z);
    }
    Ok((out, state))
}

/// Runs the cleaner on `(channel, sample)` audio whose first `context_s`
/// seconds hold noise only. The returned spectrogram covers the frames
/// after the context.
pub fn clean_utterance(
    audio: ArrayView2<'_, f64>,
    context_s: f64,
    config: &CleanerConfig,
    stft: &StftConfig,
) -> Result<Spectrogram> {
    let context_samples = (context_s * stft.sample_rate_hz() as f64).round() as usize;
    if audio.ncols() <= context_samples {
        return Err(Error::InsufficientSamples {
            needed: context_samples + 1,
            got: audio.ncols(),
        });
    }
    let spec = analyze(audio, stft)?;
    let frames = context_frames(stft, context_samples);
    clean_spectrogram(&spec, frames, config).map(|(out, _)| out)
}
