//! Oracle MVDR beamformer steered by the principal eigenvector of the true
//! speech covariance.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, ArrayView2};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::stft::Spectrogram;

/// Default diagonal loading, relative to the mean noise power per mic.
pub const DEFAULT_LOADING: f64 = 1e-6;

const HERMITIAN_TOL: f64 = 1e-10;

/// Per-bin `M x M` sample covariance, indexed `(bin, row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialCovariance {
    matrices: Array3<Complex64>,
}

impl SpatialCovariance {
    pub fn new(matrices: Array3<Complex64>) -> Result<Self> {
        let (_, rows, cols) = matrices.dim();
        if rows != cols || rows == 0 {
            return Err(Error::ShapeMismatch(format!("covariance blocks are {rows}x{cols}")));
        }
        Ok(SpatialCovariance { matrices })
    }

    pub fn num_bins(&self) -> usize {
        self.matrices.dim().0
    }

    pub fn num_mics(&self) -> usize {
        self.matrices.dim().1
    }

    pub fn bin(&self, k: usize) -> ArrayView2<'_, Complex64> {
        self.matrices.index_axis(ndarray::Axis(0), k)
    }

    pub fn matrices(&self) -> &Array3<Complex64> {
        &self.matrices
    }

    fn to_dmatrix(&self, k: usize) -> DMatrix<Complex64> {
        let m = self.num_mics();
        DMatrix::from_fn(m, m, |i, j| self.matrices[[k, i, j]])
    }

    fn check_hermitian(&self) -> Result<()> {
        let m = self.num_mics();
        for k in 0..self.num_bins() {
            let scale = self.bin(k).iter().fold(1.0f64, |s, z| s.max(z.norm()));
            for i in 0..m {
                for j in i..m {
                    let a = self.matrices[[k, i, j]];
                    let b = self.matrices[[k, j, i]].conj();
                    if !(a.re.is_finite() && a.im.is_finite()) {
                        return Err(Error::NonFinite(format!("covariance at bin {k}")));
                    }
                    if (a - b).norm() > HERMITIAN_TOL * scale {
                        return Err(Error::NotHermitian { bin: k });
                    }
                }
            }
        }
        Ok(())
    }
}

/// `(1/T) sum_n y(k, n) y(k, n)^H` over the given frames.
pub fn covariance(spec: &Spectrogram, frames: Range<usize>) -> Result<SpatialCovariance> {
    if frames.is_empty() || frames.end > spec.num_frames() {
        return Err(Error::InsufficientSamples {
            needed: frames.end.max(frames.start + 1),
            got: spec.num_frames(),
        });
    }
    let (m, bins) = (spec.num_channels(), spec.num_bins());
    let data = spec.data();
    let mut out = Array3::<Complex64>::zeros((bins, m, m));
    let scale = 1.0 / frames.len() as f64;
    for k in 0..bins {
        for n in frames.clone() {
            for i in 0..m {
                let yi = data[[i, n, k]];
                for j in i..m {
                    out[[k, i, j]] += yi * data[[j, n, k]].conj();
                }
            }
        }
        for i in 0..m {
            for j in i..m {
                let v = out[[k, i, j]] * scale;
                out[[k, i, j]] = v;
                out[[k, j, i]] = v.conj();
            }
            out[[k, i, i]].im = 0.0;
        }
    }
    SpatialCovariance::new(out)
}

/// Per-bin weights `w(k)` and the steering vectors they are distortionless
/// towards, both indexed `(bin, mic)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamformerWeights {
    pub weights: Array2<Complex64>,
    pub steering: Array2<Complex64>,
}

impl BeamformerWeights {
    /// Weights that pass `mic` through unchanged.
    pub fn select(num_bins: usize, num_mics: usize, mic: usize) -> Self {
        let mut weights = Array2::zeros((num_bins, num_mics));
        weights.column_mut(mic).fill(Complex64::new(1.0, 0.0));
        BeamformerWeights {
            steering: weights.clone(),
            weights,
        }
    }

    /// Rescales each bin so the output reproduces the desired source as seen
    /// at `mic` rather than in unit-norm steering coordinates. Bins where the
    /// steering vector vanishes at `mic` are left unchanged.
    pub fn referenced_to(&self, mic: usize) -> Self {
        let mut out = self.clone();
        for k in 0..self.num_bins() {
            let anchor = self.steering[[k, mic]];
            if anchor.norm() > 0.0 {
                out.weights.row_mut(k).mapv_inplace(|w| w * anchor.conj());
                out.steering.row_mut(k).mapv_inplace(|d| d / anchor);
            }
        }
        out
    }

    pub fn num_bins(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_mics(&self) -> usize {
        self.weights.ncols()
    }
}

/// Unit principal eigenvector with its largest component made real and
/// positive.
fn principal_eigenvector(matrix: DMatrix<Complex64>) -> DVector<Complex64> {
    let eig = matrix.symmetric_eigen();
    let best = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("at least one mic");
    let v = eig.eigenvectors.column(best).into_owned();
    let anchor = v
        .iter()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .copied()
        .expect("nonempty");
    let phase = if anchor.norm() > 0.0 {
        anchor.conj() / anchor.norm()
    } else {
        Complex64::new(1.0, 0.0)
    };
    v * phase
}

/// MVDR weights `(R^-1 d) / (d^H R^-1 d)` with `R = noise + eps I`,
/// `eps = loading * trace(noise) / M`, and `d` the principal eigenvector of
/// the speech covariance.
pub fn steer(
    speech: &SpatialCovariance,
    noise: &SpatialCovariance,
    loading: f64,
) -> Result<BeamformerWeights> {
    if speech.matrices.dim() != noise.matrices.dim() {
        return Err(Error::ShapeMismatch(format!(
            "speech covariance {:?} vs noise {:?}",
            speech.matrices.dim(),
            noise.matrices.dim()
        )));
    }
    if !(loading >= 0.0) {
        return Err(Error::InvalidConfig("diagonal loading must be >= 0".into()));
    }
    speech.check_hermitian()?;
    noise.check_hermitian()?;
    let (bins, m) = (speech.num_bins(), speech.num_mics());
    let mut weights = Array2::zeros((bins, m));
    let mut steering = Array2::zeros((bins, m));
    for k in 0..bins {
        let d = principal_eigenvector(speech.to_dmatrix(k));
        let mut r = noise.to_dmatrix(k);
        let eps = loading * r.trace().re / m as f64;
        for i in 0..m {
            r[(i, i)] += eps;
        }
        let chol = r.cholesky().ok_or(Error::Singular { bin: k })?;
        let rinv_d = chol.solve(&d);
        let denom = d.dotc(&rinv_d);
        if !(denom.norm() > 0.0 && denom.re.is_finite()) {
            return Err(Error::Singular { bin: k });
        }
        // dotc gives d^H R^-1 d; w = R^-1 d / conj(d^H R^-1 d) keeps w^H d = 1
        // even when rounding leaves a tiny imaginary part.
        let w = rinv_d / denom.conj();
        for i in 0..m {
            weights[[k, i]] = w[i];
            steering[[k, i]] = d[i];
        }
    }
    Ok(BeamformerWeights { weights, steering })
}

/// `out(k, n) = w(k)^H y(k, n)`.
pub fn apply_beamformer(weights: &BeamformerWeights, spec: &Spectrogram) -> Result<Spectrogram> {
    if weights.num_bins() != spec.num_bins() || weights.num_mics() != spec.num_channels() {
        return Err(Error::ShapeMismatch(format!(
            "weights ({} bins, {} mics) vs spectrogram ({} bins, {} mics)",
            weights.num_bins(),
            weights.num_mics(),
            spec.num_bins(),
            spec.num_channels()
        )));
    }
    let data = spec.data();
    let out = Array3::from_shape_fn((1, spec.num_frames(), spec.num_bins()), |(_, n, k)| {
        (0..weights.num_mics())
            .map(|i| weights.weights[[k, i]].conj() * data[[i, n, k]])
            .sum()
    });
    Spectrogram::new(out, spec.config().clone())
}

/// Noise power `w^H R w` at one bin.
pub fn output_power(weights: &BeamformerWeights, cov: &SpatialCovariance, k: usize) -> f64 {
    let m = weights.num_mics();
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..m {
        for j in 0..m {
            acc += weights.weights[[k, i]].conj() * cov.matrices[[k, i, j]] * weights.weights[[k, j]];
        }
    }
    acc.re
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::SplitMix64;
    use crate::stft::{StftConfig, WindowKind};
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn cn(rng: &mut SplitMix64) -> Complex64 {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    }

    fn toy_stft(bins: usize) -> StftConfig {
        let n = 2 * (bins - 1);
        StftConfig::new(16_000, n, n / 2, n, WindowKind::Hann).unwrap()
    }

    fn spec_from(data: Array3<Complex64>) -> Spectrogram {
        let bins = data.dim().2;
        Spectrogram::new(data, toy_stft(bins)).unwrap()
    }

    fn rank_one(d: &[Complex64], scale: f64) -> SpatialCovariance {
        let m = d.len();
        SpatialCovariance::new(Array3::from_shape_fn((1, m, m), |(_, i, j)| d[i] * d[j].conj() * scale))
            .unwrap()
    }

    fn scaled_identity(m: usize, sigma2: f64) -> SpatialCovariance {
        SpatialCovariance::new(Array3::from_shape_fn((1, m, m), |(_, i, j)| {
            if i == j {
                Complex64::new(sigma2, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        }))
        .unwrap()
    }

    #[test]
    fn single_frame_covariance_is_outer_product() {
        let y = [Complex64::new(1.0, 2.0), Complex64::new(-0.5, 0.25), Complex64::new(0.0, -1.0)];
        let data = Array3::from_shape_fn((3, 1, 2), |(m, _, _)| y[m]);
        let cov = covariance(&spec_from(data), 0..1).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((cov.bin(1)[[i, j]] - y[i] * y[j].conj()).norm() < 1e-15);
            }
        }
        let data = Array3::from_shape_fn((2, 3, 2), |(_, n, _)| Complex64::new(n as f64 + 1.0, 0.5));
        let cov = covariance(&spec_from(data.clone()), 0..3).unwrap();
        let first = cov.bin(0)[[0, 0]];
        assert!(cov.bin(0).iter().all(|z| (z - first).norm() < 1e-12));
        assert!(covariance(&spec_from(data), 1..1).is_err());
    }

    #[test]
    fn white_noise_covariance_is_scaled_identity() {
        let mut rng = SplitMix64::seed_from_u64(11);
        let sigma2: f64 = 2.0;
        let data = Array3::from_shape_fn((3, 5000, 2), |_| cn(&mut rng) * sigma2.sqrt());
        let cov = covariance(&spec_from(data), 0..5000).unwrap();
        for k in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let expected = if i == j { sigma2 } else { 0.0 };
                    assert!((cov.bin(k)[[i, j]] - expected).norm() < 0.05 * sigma2);
                }
            }
        }
    }

    #[test]
    fn white_noise_mvdr_is_matched_filter() {
        let d = [Complex64::new(0.6, 0.3), Complex64::new(-0.2, 0.9), Complex64::new(0.4, -0.5)];
        let w = steer(&rank_one(&d, 3.0), &scaled_identity(3, 0.7), 0.0).unwrap();
        // The steering vector is d up to scale and phase; the matched filter
        // d / |d|^2 is invariant to both once w^H d = 1 is imposed.
        let norm2: f64 = d.iter().map(|z| z.norm_sqr()).sum();
        let steer_d: Vec<Complex64> = (0..3).map(|i| w.steering[[0, i]]).collect();
        let ratio = steer_d[0] / d[0];
        for i in 0..3 {
            assert!((steer_d[i] - d[i] * ratio).norm() < 1e-10);
        }
        let ratio_n2 = ratio.norm_sqr();
        for i in 0..3 {
            let expected = d[i] * ratio / (norm2 * ratio_n2);
            assert!((w.weights[[0, i]] - expected).norm() < 1e-10);
        }
        // The largest steering component is real and positive.
        let anchor = steer_d.iter().max_by(|a, b| a.norm().total_cmp(&b.norm())).unwrap();
        assert!(anchor.im.abs() < 1e-12 && anchor.re > 0.0);
    }

    #[test]
    fn single_mic_passthrough() {
        let w = steer(&rank_one(&[Complex64::new(2.0, 0.0)], 1.0), &scaled_identity(1, 1.0), 0.0).unwrap();
        let d = w.steering[[0, 0]];
        assert!((w.weights[[0, 0]] - 1.0 / d.conj()).norm() < 1e-12);
        assert!((w.weights[[0, 0]].conj() * d - 1.0).norm() < 1e-12);
    }

    #[test]
    fn distortionless_and_scale_invariant() {
        let mut rng = SplitMix64::seed_from_u64(3);
        for m in 2..=4 {
            let bins = 6;
            let speech_data = Array3::from_shape_fn((m, 40, bins), |_| cn(&mut rng));
            let noise_data = Array3::from_shape_fn((m, 40, bins), |_| cn(&mut rng));
            let cs = covariance(&spec_from(speech_data), 0..40).unwrap();
            let cn_ = covariance(&spec_from(noise_data), 0..40).unwrap();
            let w = steer(&cs, &cn_, DEFAULT_LOADING).unwrap();
            for k in 0..bins {
                let resp: Complex64 = (0..m).map(|i| w.weights[[k, i]].conj() * w.steering[[k, i]]).sum();
                assert!((resp - 1.0).norm() < 1e-10);
            }
            let scaled = SpatialCovariance::new(cs.matrices().mapv(|z| z * 17.5)).unwrap();
            let w2 = steer(&scaled, &cn_, DEFAULT_LOADING).unwrap();
            for (a, b) in w.weights.iter().zip(&w2.weights) {
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn input_validation() {
        let mut bad = scaled_identity(2, 1.0).matrices().clone();
        bad[[0, 0, 1]] = Complex64::new(0.5, 0.0);
        let bad = SpatialCovariance::new(bad).unwrap();
        let d = [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)];
        assert!(matches!(steer(&rank_one(&d, 1.0), &bad, 0.0), Err(Error::NotHermitian { bin: 0 })));
        let zero = scaled_identity(2, 0.0);
        assert!(matches!(steer(&rank_one(&d, 1.0), &zero, 1e-6), Err(Error::Singular { bin: 0 })));
        assert!(steer(&rank_one(&d, 1.0), &scaled_identity(3, 1.0), 0.0).is_err());
    }

    #[test]
    fn apply_selects_and_zeroes() {
        let mut rng = SplitMix64::seed_from_u64(5);
        let data = Array3::from_shape_fn((3, 7, 4), |_| cn(&mut rng));
        let spec = spec_from(data.clone());
        let out = apply_beamformer(&BeamformerWeights::select(4, 3, 0), &spec).unwrap();
        assert_eq!(out.data().index_axis(ndarray::Axis(0), 0), data.index_axis(ndarray::Axis(0), 0));
        let zero = spec_from(Array3::zeros((3, 7, 4)));
        let w = BeamformerWeights::select(4, 3, 2);
        assert!(apply_beamformer(&w, &zero).unwrap().data().iter().all(|z| z.norm() == 0.0));
        assert!(apply_beamformer(&BeamformerWeights::select(4, 2, 0), &spec).is_err());
    }

    #[test]
    fn bin_permutation_equivariance() {
        let mut rng = SplitMix64::seed_from_u64(8);
        let bins = 5;
        let s = Array3::from_shape_fn((3, 30, bins), |_| cn(&mut rng));
        let n = Array3::from_shape_fn((3, 30, bins), |_| cn(&mut rng));
        let perm = [3, 0, 4, 1, 2];
        let permute = |a: &Array3<Complex64>| Array3::from_shape_fn(a.dim(), |(m, t, k)| a[[m, t, perm[k]]]);
        let w = steer(
            &covariance(&spec_from(s.clone()), 0..30).unwrap(),
            &covariance(&spec_from(n.clone()), 0..30).unwrap(),
            DEFAULT_LOADING,
        )
        .unwrap();
        let wp = steer(
            &covariance(&spec_from(permute(&s)), 0..30).unwrap(),
            &covariance(&spec_from(permute(&n)), 0..30).unwrap(),
            DEFAULT_LOADING,
        )
        .unwrap();
        for k in 0..bins {
            for i in 0..3 {
                assert!((wp.weights[[k, i]] - w.weights[[perm[k], i]]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn mvdr_beats_constrained_grid_search() {
        let mut rng = SplitMix64::seed_from_u64(21);
        let data = Array3::from_shape_fn((2, 6, 2), |_| cn(&mut rng));
        let both = covariance(&spec_from(data), 0..6).unwrap();
        let noise = SpatialCovariance::new(both.matrices().slice(ndarray::s![0..1, .., ..]).to_owned()).unwrap();
        let d = [cn(&mut rng), cn(&mut rng)];
        let w = steer(&rank_one(&d, 1.0), &noise, DEFAULT_LOADING).unwrap();
        let mvdr = output_power(&w, &noise, 0);
        let best = grid_min_power(&w.steering.row(0).to_vec(), noise.bin(0));
        assert!(mvdr <= best * (1.0 + 1e-9), "{mvdr} vs {best}");
        assert!((best - mvdr) / mvdr < 1e-3);
    }

    /// Minimum of `w^H R w` over `w = d/|d|^2 + z d_perp` by a refining grid
    /// over complex `z`.
    fn grid_min_power(d: &[Complex64], r: ArrayView2<'_, Complex64>) -> f64 {
        let norm2 = d[0].norm_sqr() + d[1].norm_sqr();
        let perp = [-d[1].conj(), d[0].conj()];
        let power = |z: Complex64| {
            let w = [d[0] / norm2 + z * perp[0], d[1] / norm2 + z * perp[1]];
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..2 {
                for j in 0..2 {
                    acc += w[i].conj() * r[[i, j]] * w[j];
                }
            }
            acc.re
        };
        let (mut centre, mut span) = (Complex64::new(0.0, 0.0), 10.0 / norm2);
        let mut best = power(centre);
        for _ in 0..40 {
            let mut next = centre;
            for a in -20..=20 {
                for b in -20..=20 {
                    let z = centre + Complex64::new(a as f64, b as f64) * (span / 20.0);
                    let p = power(z);
                    if p < best {
                        best = p;
                        next = z;
                    }
                }
            }
            centre = next;
            span *= 0.25;
        }
        best
    }
}
