//! Enhancement quality measures.

use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::mask::Mask;

/// Error energy below this fraction of the target energy counts as a
/// perfect reconstruction (about 200 dB).
const PERFECT_RATIO: f64 = 1e-20;

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("lengths {a} and {b}")));
    }
    Ok(())
}

/// `10 log10(sum s^2 / sum n^2)`. Zero noise gives `+inf`, zero signal
/// `-inf`.
pub fn snr_db(signal: &[f64], noise: &[f64]) -> Result<f64> {
    check_lengths(signal.len(), noise.len())?;
    Ok(power_ratio_db(energy(signal), energy(noise)))
}

pub(crate) fn power_ratio_db(signal: f64, noise: f64) -> f64 {
    if noise == 0.0 {
        f64::INFINITY
    } else if signal == 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * (signal / noise).log10()
    }
}

/// Scale-invariant SDR of `estimate` against `reference`; `+inf` when the
/// estimate is a scaled copy of the reference to within rounding.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    check_lengths(estimate.len(), reference.len())?;
    let ref_energy = energy(reference);
    if ref_energy == 0.0 {
        return Err(Error::ZeroPower("reference"));
    }
    let alpha = estimate.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / ref_energy;
    let target = alpha * alpha * ref_energy;
    let error: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| (e - alpha * r).powi(2))
        .sum();
    if error <= PERFECT_RATIO * target {
        return Ok(f64::INFINITY);
    }
    Ok(power_ratio_db(target, error))
}

/// Mean over frames of the RMS over bands of the dB difference between two
/// log-mel spectrograms (natural-log values).
pub fn log_spectral_distance(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    if !a.is_log() || !b.is_log() {
        return Err(Error::NotLog);
    }
    if a.values().dim() != b.values().dim() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.values().dim(),
            b.values().dim()
        )));
    }
    let frames = a.num_frames();
    if frames == 0 || a.num_bands() == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let to_db = 20.0 / std::f64::consts::LN_10;
    let total: f64 = a
        .values()
        .outer_iter()
        .zip(b.values().outer_iter())
        .map(|(ra, rb)| {
            let mean_sq = ra
                .iter()
                .zip(rb)
                .map(|(x, y)| (to_db * (x - y)).powi(2))
                .sum::<f64>()
                / ra.len() as f64;
            mean_sq.sqrt()
        })
        .sum();
    Ok(total / frames as f64)
}

pub fn mask_mse(a: &Mask, b: &Mask) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let n = a.values().len();
    if n == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / n as f64)
}

/// Mean and population standard deviation of the finite values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
