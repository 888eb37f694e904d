//! One enhancement method applied to one scene, with metrics.
//!
//! Linear methods (passthrough, cleaner, beamformer) are scored in the time
//! domain over the post-context region: the speech and noise images are
//! pushed separately through the same frozen linear stage, resynthesised,
//! and compared. Mask methods have no waveform and are scored on mel
//! magnitudes of the reference channel, where the mask gain is applied to
//! the speech and noise mels separately.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::metrics::{log_spectral_distance, mask_mse, power_ratio_db, si_sdr, snr_db};
use crate::beamformer::{apply_beamformer, covariance, steer, SpatialCovariance, DEFAULT_LOADING};
use crate::cleaner::{clean_spectrogram, context_frames, CleanerConfig, CleanerState};
use crate::conformer::{forward, ConformerWeights};
use crate::error::{Error, Result};
use crate::features::{
    extract_features, log_mel, to_log, to_mel, MelConfig, MelSpectrogram, STACK_HOP,
};
use crate::mask::{apply_mask, ideal_ratio_mask, Mask, MaskPostConfig};
use crate::simulator::{Scene, SnrSpec};
use crate::stft::{analyze, synthesize, Spectrogram};

/// Noise floor added to the oracle noise covariance, relative to the mean
/// per-mic speech power, so that noise-free scenes stay solvable.
const BEAM_NOISE_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnhancementMethod {
    Passthrough,
    Cleaner,
    BeamformerOracle,
    CleanformerOracleMask,
    CleanformerModel,
}

impl EnhancementMethod {
    pub const ALL: [EnhancementMethod; 5] = [
        EnhancementMethod::Passthrough,
        EnhancementMethod::Cleaner,
        EnhancementMethod::BeamformerOracle,
        EnhancementMethod::CleanformerOracleMask,
        EnhancementMethod::CleanformerModel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnhancementMethod::Passthrough => "passthrough",
            EnhancementMethod::Cleaner => "cleaner",
            EnhancementMethod::BeamformerOracle => "beamformer_oracle",
            EnhancementMethod::CleanformerOracleMask => "cleanformer_oracle_mask",
            EnhancementMethod::CleanformerModel => "cleanformer_model",
        }
    }

    /// Whether the method produces a waveform (and is scored in time).
    pub fn has_waveform(self) -> bool {
        matches!(
            self,
            EnhancementMethod::Passthrough | EnhancementMethod::Cleaner | EnhancementMethod::BeamformerOracle
        )
    }
}

impl fmt::Display for EnhancementMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnhancementMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnhancementMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct MethodParams {
    pub mel: MelConfig,
    /// Cleaner settings; the mic count is taken from the scene.
    pub cleaner: CleanerConfig,
    pub mask_post: MaskPostConfig,
    pub beam_loading: f64,
    pub weights: Option<Arc<ConformerWeights>>,
    /// Use only the first `n` microphones of each scene.
    pub num_mics: Option<usize>,
}

impl Default for MethodParams {
    fn default() -> Self {
        MethodParams {
            mel: MelConfig::default(),
            cleaner: CleanerConfig::new(1),
            mask_post: MaskPostConfig::default(),
            beam_loading: DEFAULT_LOADING,
            weights: None,
            num_mics: None,
        }
    }
}

/// Domain in which a row's SNRs were measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SnrDomain {
    Time,
    Mel,
}

impl SnrDomain {
    pub fn name(self) -> &'static str {
        match self {
            SnrDomain::Time => "time",
            SnrDomain::Mel => "mel",
        }
    }
}

/// One scene's result for one method. Metrics that do not apply are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub scene_id: String,
    pub snr: SnrSpec,
    pub num_mics: usize,
    pub method: EnhancementMethod,
    pub domain: SnrDomain,
    pub input_snr_db: f64,
    pub output_snr_db: f64,
    pub snr_improvement_db: f64,
    pub si_sdr_db: f64,
    pub lsd_db: f64,
    pub mask_mse: f64,
    /// `None` on success, else the failure message.
    pub error: Option<String>,
}

impl MetricsRow {
    pub fn failed(scene_id: &str, snr: SnrSpec, num_mics: usize, method: EnhancementMethod, err: &Error) -> Self {
        MetricsRow {
            scene_id: scene_id.to_string(),
            snr,
            num_mics,
            method,
            domain: if method.has_waveform() { SnrDomain::Time } else { SnrDomain::Mel },
            input_snr_db: f64::NAN,
            output_snr_db: f64::NAN,
            snr_improvement_db: f64::NAN,
            si_sdr_db: f64::NAN,
            lsd_db: f64::NAN,
            mask_mse: f64::NAN,
            error: Some(err.to_string()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MethodOutput {
    /// Linear mel of the enhanced reference channel over the post-context
    /// frames.
    pub enhanced_mel: MelSpectrogram,
    /// Post-context waveform, for methods that produce one.
    pub waveform: Option<Vec<f64>>,
    /// Mask at base-frame resolution, for mask methods.
    pub mask: Option<Mask>,
    pub metrics: MetricsRow,
}

/// Everything about a scene that every method needs.
struct Prepared<'a> {
    scene: &'a Scene,
    mixture: Spectrogram,
    speech: Spectrogram,
    noise: Spectrogram,
    reference: usize,
    context: usize,
    /// Scored sample region `[start, start + len)`, after the context and
    /// inside full window overlap.
    start: usize,
    len: usize,
}

impl<'a> Prepared<'a> {
    fn new(scene: &'a Scene, params: &MethodParams) -> Result<Self> {
        let stft = &params.mel.stft;
        let reference = params.cleaner.reference_mic;
        if reference >= scene.num_mics() {
            return Err(Error::InvalidConfig(format!(
                "reference mic {reference} but scene has {} mics",
                scene.num_mics()
            )));
        }
        let mixture = analyze(scene.mixture.view(), stft)?;
        let speech = analyze(scene.speech_image.view(), stft)?;
        let noise = analyze(scene.scaled_noise().view(), stft)?;
        let context = context_frames(stft, scene.context_boundary);
        let frames = mixture.num_frames();
        let hop = stft.hop_len();
        // Samples before `lead` hops, or past the last frame's hop, are
        // covered by fewer frames than the rest and are left unscored.
        let lead = (stft.window_len() - 1) / hop;
        let start = context.max(lead) * hop;
        let end = frames * hop;
        if context >= frames || start >= end {
            return Err(Error::InsufficientSamples {
                needed: stft.covered_len(context.max(lead) + 1),
                got: scene.len(),
            });
        }
        Ok(Prepared {
            scene,
            reference,
            context,
            start,
            len: end - start,
            mixture,
            speech,
            noise,
        })
    }

    fn query(&self, spec: &Spectrogram) -> Spectrogram {
        spec.select_frames(self.context..spec.num_frames())
    }

    fn reference_query(&self, spec: &Spectrogram) -> Spectrogram {
        self.query(&spec.select_channels(&[self.reference]))
    }

    fn region(&self, signal: &Array2<f64>, scale: f64) -> Vec<f64> {
        signal
            .slice(s![self.reference, self.start..self.start + self.len])
            .iter()
            .map(|v| scale * v)
            .collect()
    }

    /// Resynthesised single-channel spectrogram restricted to the region.
    fn synthesized_region(&self, spec: &Spectrogram) -> Result<Vec<f64>> {
        Ok(synthesize(spec)?[self.start..self.start + self.len].to_vec())
    }

    fn clean_reference(&self) -> Vec<f64> {
        self.region(&self.scene.speech_image, 1.0)
    }

    fn noise_reference(&self) -> Vec<f64> {
        self.region(&self.scene.noise_image, self.scene.noise_gain)
    }
}

fn cleaner_config(params: &MethodParams, num_mics: usize) -> CleanerConfig {
    CleanerConfig {
        num_mics,
        ..params.cleaner.clone()
    }
}

/// Adapted-and-frozen cleaner for the scene and its post-context output.
fn run_cleaner(prep: &Prepared<'_>, params: &MethodParams) -> Result<(Spectrogram, CleanerState)> {
    clean_spectrogram(&prep.mixture, prep.context, &cleaner_config(params, prep.scene.num_mics()))
}

/// Single-channel outputs over every frame, context included.
struct LinearResult {
    mixture: Spectrogram,
    speech: Spectrogram,
    noise: Spectrogram,
}

fn linear_method(prep: &Prepared<'_>, method: EnhancementMethod, params: &MethodParams) -> Result<LinearResult> {
    let reference = |spec: &Spectrogram| spec.select_channels(&[prep.reference]);
    match method {
        EnhancementMethod::Passthrough => Ok(LinearResult {
            mixture: reference(&prep.mixture),
            speech: reference(&prep.speech),
            noise: reference(&prep.noise),
        }),
        EnhancementMethod::Cleaner => {
            let (_, state) = run_cleaner(prep, params)?;
            Ok(LinearResult {
                mixture: state.filter(&prep.mixture)?,
                speech: state.filter(&prep.speech)?,
                noise: state.filter(&prep.noise)?,
            })
        }
        EnhancementMethod::BeamformerOracle => {
            let frames = prep.mixture.num_frames();
            let speech_cov = covariance(&prep.speech, prep.context..frames)?;
            let mut noise = covariance(&prep.noise, 0..frames)?.matrices().clone();
            let m = prep.scene.num_mics();
            for k in 0..speech_cov.num_bins() {
                let speech_power: f64 = (0..m).map(|i| speech_cov.bin(k)[[i, i]].re).sum::<f64>() / m as f64;
                let floor = BEAM_NOISE_FLOOR * speech_power.max(f64::MIN_POSITIVE);
                for i in 0..m {
                    noise[[k, i, i]].re += floor;
                }
            }
            let noise_cov = SpatialCovariance::new(noise)?;
            let weights = steer(&speech_cov, &noise_cov, params.beam_loading)?.referenced_to(prep.reference);
            Ok(LinearResult {
                mixture: apply_beamformer(&weights, &prep.mixture)?,
                speech: apply_beamformer(&weights, &prep.speech)?,
                noise: apply_beamformer(&weights, &prep.noise)?,
            })
        }
        _ => unreachable!("mask methods are not linear"),
    }
}

fn magnitude_mel(spec: &Spectrogram, params: &MethodParams) -> Result<MelSpectrogram> {
    to_mel(spec, &params.mel)
}

/// Holds each stacked-frame mask row over the base frames it covers.
fn hold_mask(stacked: &Mask, base_frames: usize) -> Result<Mask> {
    let bands = stacked.dim().1;
    Mask::new(Array2::from_shape_fn((base_frames, bands), |(n, f)| {
        stacked.values()[[n / STACK_HOP, f]]
    }))
}

fn run_scene(
    prep: &Prepared<'_>,
    scene_id: &str,
    method: EnhancementMethod,
    params: &MethodParams,
) -> Result<MethodOutput> {
    let clean_log = log_mel(&prep.reference_query(&prep.speech), &params.mel)?;
    let mut row = MetricsRow {
        scene_id: scene_id.to_string(),
        snr: prep.scene.config.snr,
        num_mics: prep.scene.num_mics(),
        method,
        domain: SnrDomain::Time,
        input_snr_db: f64::NAN,
        output_snr_db: f64::NAN,
        snr_improvement_db: f64::NAN,
        si_sdr_db: f64::NAN,
        lsd_db: f64::NAN,
        mask_mse: f64::NAN,
        error: None,
    };

    if method.has_waveform() {
        let clean = prep.clean_reference();
        let noise = prep.noise_reference();
        row.input_snr_db = snr_db(&clean, &noise)?;
        let result = linear_method(prep, method, params)?;
        let (waveform, out_snr) = if method == EnhancementMethod::Passthrough {
            (prep.region(&prep.scene.mixture, 1.0), row.input_snr_db)
        } else {
            let speech = prep.synthesized_region(&result.speech)?;
            let noise = prep.synthesized_region(&result.noise)?;
            (prep.synthesized_region(&result.mixture)?, snr_db(&speech, &noise)?)
        };
        row.output_snr_db = out_snr;
        row.si_sdr_db = match si_sdr(&waveform, &clean) {
            Ok(v) => v,
            Err(Error::ZeroPower(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        let enhanced_mel = magnitude_mel(&prep.query(&result.mixture), params)?;
        row.lsd_db = log_spectral_distance(&to_log(&enhanced_mel, params.mel.log_floor)?, &clean_log)?;
        row.snr_improvement_db = row.output_snr_db - row.input_snr_db;
        return Ok(MethodOutput {
            enhanced_mel,
            waveform: Some(waveform),
            mask: None,
            metrics: row,
        });
    }

    row.domain = SnrDomain::Mel;
    let speech_mel = magnitude_mel(&prep.reference_query(&prep.speech), params)?;
    let noise_mel = magnitude_mel(&prep.reference_query(&prep.noise), params)?;
    let noisy_mel = magnitude_mel(&prep.reference_query(&prep.mixture), params)?;
    let oracle = ideal_ratio_mask(&speech_mel, &noise_mel)?;
    let mask = match method {
        EnhancementMethod::CleanformerOracleMask => oracle.clone(),
        EnhancementMethod::CleanformerModel => {
            let weights = params
                .weights
                .as_ref()
                .ok_or_else(|| Error::MissingWeights(method.name().into()))?;
            let (cleaned, _) = run_cleaner(prep, params)?;
            let features = extract_features(&prep.reference_query(&prep.mixture), &cleaned, &params.mel)?;
            hold_mask(&forward(&features, weights)?, noisy_mel.num_frames())?
        }
        _ => unreachable!("linear methods handled above"),
    };
    let enhanced_mel = apply_mask(&noisy_mel, &mask, &params.mask_post)?;
    let power = |m: &MelSpectrogram, gain: bool| -> f64 {
        m.values()
            .iter()
            .zip(mask.values())
            .map(|(v, g)| {
                let scaled = if gain { v * params.mask_post.gain(*g) } else { *v };
                scaled * scaled
            })
            .sum()
    };
    row.input_snr_db = power_ratio_db(power(&speech_mel, false), power(&noise_mel, false));
    row.output_snr_db = power_ratio_db(power(&speech_mel, true), power(&noise_mel, true));
    row.snr_improvement_db = row.output_snr_db - row.input_snr_db;
    row.lsd_db = log_spectral_distance(&to_log(&enhanced_mel, params.mel.log_floor)?, &clean_log)?;
    row.mask_mse = mask_mse(&mask, &oracle)?;
    Ok(MethodOutput {
        enhanced_mel,
        waveform: None,
        mask: Some(mask),
        metrics: row,
    })
}

/// Runs `method` on `scene` and scores it.
pub fn run_method(
    scene: &Scene,
    scene_id: &str,
    method: EnhancementMethod,
    params: &MethodParams,
) -> Result<MethodOutput> {
    if method == EnhancementMethod::CleanformerModel && params.weights.is_none() {
        return Err(Error::MissingWeights(method.name().into()));
    }
    let subset;
    let scene = match params.num_mics {
        Some(n) if n != scene.num_mics() => {
            subset = scene.with_mics(n)?;
            &subset
        }
        _ => scene,
    };
    let prep = Prepared::new(scene, params)?;
    run_scene(&prep, scene_id, method, params)
}
