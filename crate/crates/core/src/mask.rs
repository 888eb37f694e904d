//! Ratio masks in the mel domain: the ideal ratio mask target, the floored
//! and compressed mask application, and the mask loss with its gradient.

use ndarray::{Array2, Zip};

use crate::container::{MatrixFile, MatrixKind};
use crate::error::{Error, Result};
use crate::features::{MelConfig, MelSpectrogram};

/// Speech-plus-noise level below which the ideal mask is defined as 0.
pub const IRM_EPSILON: f64 = 1e-12;

/// Mask values in `[0, 1]`, indexed `(frame, band)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    values: Array2<f64>,
}

impl Mask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!("mask value {bad} outside [0, 1]")));
        }
        Ok(Mask { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn to_file(&self, config: &MelConfig) -> Result<MatrixFile> {
        Ok(MatrixFile {
            kind: MatrixKind::Mask,
            config_hash: config.hash()?,
            values: self.values.mapv(|v| v as f32),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskPostConfig {
    /// Compression exponent, in `(0, 1]`.
    pub alpha: f64,
    /// Mask floor, in `[0, 1)`.
    pub beta: f64,
}

impl Default for MaskPostConfig {
    fn default() -> Self {
        MaskPostConfig {
            alpha: 0.5,
            beta: 0.01,
        }
    }
}

impl MaskPostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!("alpha {} not in (0, 1]", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!("beta {} not in [0, 1)", self.beta)));
        }
        Ok(())
    }

    /// Gain applied for mask value `m`.
    pub fn gain(&self, m: f64) -> f64 {
        m.max(self.beta).powf(self.alpha)
    }
}

fn same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn require_linear(mel: &MelSpectrogram) -> Result<()> {
    if mel.is_log() {
        return Err(Error::AlreadyLog);
    }
    Ok(())
}

pub fn ideal_ratio_mask(speech: &MelSpectrogram, noise: &MelSpectrogram) -> Result<Mask> {
    require_linear(speech)?;
    require_linear(noise)?;
    same_shape(speech.values().dim(), noise.values().dim())?;
    let values = Zip::from(speech.values())
        .and(noise.values())
        .map_collect(|x, n| {
            let total = x + n;
            if total < IRM_EPSILON {
                0.0
            } else {
                (x / total).clamp(0.0, 1.0)
            }
        });
    Ok(Mask { values })
}

pub fn apply_mask(noisy: &MelSpectrogram, mask: &Mask, config: &MaskPostConfig) -> Result<MelSpectrogram> {
    require_linear(noisy)?;
    config.validate()?;
    same_shape(noisy.values().dim(), mask.dim())?;
    let values = Zip::from(noisy.values())
        .and(&mask.values)
        .map_collect(|y, m| y * config.gain(*m));
    MelSpectrogram::linear(values)
}

/// `sum |d| + d^2` over all cells, `d = target - estimate`.
pub fn spectral_loss(target: &Mask, estimate: &Mask) -> Result<f64> {
    same_shape(target.dim(), estimate.dim())?;
    Ok(Zip::from(&target.values)
        .and(&estimate.values)
        .fold(0.0, |acc, t, e| {
            let d = t - e;
            acc + d.abs() + d * d
        }))
}

/// Gradient of [`spectral_loss`] with respect to the estimate. At cells
/// where target and estimate are equal the subgradient 0 is used.
pub fn loss_gradient(target: &Mask, estimate: &Mask) -> Result<Array2<f64>> {
    same_shape(target.dim(), estimate.dim())?;
    Ok(Zip::from(&target.values)
        .and(&estimate.values)
        .map_collect(|t, e| {
            let d = t - e;
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            -sign - 2.0 * d
        }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    fn lin(v: Array2<f64>) -> MelSpectrogram {
        MelSpectrogram::linear(v).unwrap()
    }

    fn mask(v: Array2<f64>) -> Mask {
        Mask::new(v).unwrap()
    }

    #[test]
    fn irm_values() {
        let m = ideal_ratio_mask(&lin(arr2(&[[3.0, 0.0, 2.0, 0.0]])), &lin(arr2(&[[1.0, 5.0, 0.0, 0.0]])))
            .unwrap();
        assert_eq!(m.values(), &arr2(&[[0.75, 0.0, 1.0, 0.0]]));
        assert!(ideal_ratio_mask(&lin(arr2(&[[1.0]])), &lin(arr2(&[[1.0, 2.0]]))).is_err());
        let log = MelSpectrogram::log(arr2(&[[0.0]]));
        assert!(matches!(ideal_ratio_mask(&log, &lin(arr2(&[[1.0]]))), Err(Error::AlreadyLog)));
    }

    #[test]
    fn apply_mask_values() {
        let cfg = MaskPostConfig::default();
        let out = apply_mask(
            &lin(arr2(&[[2.0, 3.0, 4.0]])),
            &mask(arr2(&[[0.25, 0.0, 1.0]])),
            &cfg,
        )
        .unwrap();
        assert_eq!(out.values()[[0, 0]], 1.0);
        assert!((out.values()[[0, 1]] - 0.3).abs() < 1e-15);
        assert_eq!(out.values()[[0, 2]], 4.0);
        assert!(apply_mask(&lin(arr2(&[[1.0]])), &mask(arr2(&[[1.0, 1.0]])), &cfg).is_err());
        assert!(MaskPostConfig { alpha: 0.0, beta: 0.0 }.validate().is_err());
        assert!(MaskPostConfig { alpha: 1.0, beta: 1.0 }.validate().is_err());
    }

    #[test]
    fn loss_values() {
        let one = mask(arr2(&[[1.0]]));
        let zero = mask(arr2(&[[0.0]]));
        assert_eq!(spectral_loss(&one, &zero).unwrap(), 2.0);
        assert_eq!(spectral_loss(&one, &one).unwrap(), 0.0);
        assert_eq!(loss_gradient(&one, &zero).unwrap()[[0, 0]], -3.0);
        assert!(spectral_loss(&one, &mask(arr2(&[[1.0, 0.0]]))).is_err());
    }

    #[test]
    fn mask_rejects_out_of_range() {
        assert!(Mask::new(arr2(&[[1.5]])).is_err());
        assert!(Mask::new(arr2(&[[f64::NAN]])).is_err());
    }

    fn grid(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(0.0f64..1.0, rows * cols)
            .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    fn nonneg(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(0.0f64..100.0, rows * cols)
            .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    proptest! {
        #[test]
        fn irm_reconstructs_speech(x in nonneg(4, 6), n in nonneg(4, 6)) {
            let m = ideal_ratio_mask(&lin(x.clone()), &lin(n.clone())).unwrap();
            for ((mv, xv), nv) in m.values().iter().zip(&x).zip(&n) {
                prop_assert!((0.0..=1.0).contains(mv));
                if xv + nv >= IRM_EPSILON {
                    prop_assert!((mv * (xv + nv) - xv).abs() <= 1e-12 * (xv + nv).max(1.0));
                }
            }
            // Oracle IRM with alpha 1, beta 0 recovers speech from Y = X + N.
            let y = &x + &n;
            let out = apply_mask(&lin(y), &m, &MaskPostConfig { alpha: 1.0, beta: 0.0 }).unwrap();
            for (o, xv) in out.values().iter().zip(&x) {
                prop_assert!((o - xv).abs() <= 1e-9 * xv.max(1e-12));
            }
        }

        #[test]
        fn irm_monotone_in_speech(x in nonneg(3, 3), bump in nonneg(3, 3), n in nonneg(3, 3)) {
            let a = ideal_ratio_mask(&lin(x.clone()), &lin(n.clone())).unwrap();
            let b = ideal_ratio_mask(&lin(&x + &bump), &lin(n)).unwrap();
            for (lo, hi) in a.values().iter().zip(b.values()) {
                prop_assert!(hi >= lo);
            }
        }

        #[test]
        fn apply_mask_bounds(y in nonneg(3, 5), m in grid(3, 5)) {
            let cfg = MaskPostConfig::default();
            let out = apply_mask(&lin(y.clone()), &mask(m), &cfg).unwrap();
            let floor = cfg.beta.powf(cfg.alpha);
            for (o, yv) in out.values().iter().zip(&y) {
                prop_assert!(*o <= *yv);
                prop_assert!(*o >= floor * yv * (1.0 - 1e-15));
            }
        }

        #[test]
        fn loss_matches_naive_sum(a in grid(5, 7), b in grid(5, 7)) {
            let mut naive = 0.0;
            for i in 0..5 {
                for j in 0..7 {
                    let d = a[[i, j]] - b[[i, j]];
                    naive += d.abs() + d * d;
                }
            }
            let ma = mask(a);
            let mb = mask(b);
            let loss = spectral_loss(&ma, &mb).unwrap();
            prop_assert!((loss - naive).abs() < 1e-12);
            prop_assert!(loss >= 0.0);
            prop_assert!((loss - spectral_loss(&mb, &ma).unwrap()).abs() < 1e-12);
            let ga = loss_gradient(&ma, &mb).unwrap();
            let gb = loss_gradient(&mb, &ma).unwrap();
            for (x, y) in ga.iter().zip(&gb) {
                prop_assert_eq!(*x, -*y);
            }
        }

        #[test]
        fn gradient_matches_finite_differences(
            target in grid(3, 4),
            offsets in proptest::collection::vec(0.05f64..0.3, 12),
            signs in proptest::collection::vec(any::<bool>(), 12),
        ) {
            // Estimates stay 1e-3 inside [0, 1] so perturbed masks stay valid.
            let estimate = Array2::from_shape_fn((3, 4), |(i, j)| {
                let idx = i * 4 + j;
                let step = if signs[idx] { offsets[idx] } else { -offsets[idx] };
                (target[[i, j]] + step).clamp(1e-3, 1.0 - 1e-3)
            });
            prop_assume!(estimate.iter().zip(&target).all(|(e, t)| (e - t).abs() > 1e-3));
            let tm = mask(target);
            let grad = loss_gradient(&tm, &mask(estimate.clone())).unwrap();
            let h = 1e-6;
            for i in 0..3 {
                for j in 0..4 {
                    let loss_at = |delta: f64| {
                        let mut e = estimate.clone();
                        e[[i, j]] += delta;
                        spectral_loss(&tm, &mask(e)).unwrap()
                    };
                    let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
                    prop_assert!((fd - grad[[i, j]]).abs() < 1e-4);
                }
            }
        }
    }
}
