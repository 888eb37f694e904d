//! Evaluation scene construction.
//!
//! Sources are placed in the far field of a microphone array and reach each
//! microphone as a pure delay, applied with a 32-tap windowed-sinc
//! fractional-delay filter. There is no reverberation. Every scene starts
//! with a speech-free noise context; speech begins after it and is mixed at
//! a requested SNR measured on the reference microphone over the
//! speech-active interval.
//!
//! All randomness comes from [`SplitMix64`] (increment `0x9E3779B97F4A7C15`,
//! output mix multipliers `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB`),
//! so a seed reproduces a scene bit-for-bit on any platform.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
pub use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::audio_io::{read_wav, write_wav, AudioBuffer, SampleFormat};
use crate::error::{Error, Result};
use crate::stft::{Spectrogram, StftConfig};

/// Half-length of the fractional-delay kernel; the kernel has
/// `2 * SINC_HALF_TAPS` taps.
const SINC_HALF_TAPS: i64 = 16;

/// Peak level scenes are normalised to before they can be written to WAV.
const PEAK_LIMIT: f64 = 0.99;

pub const DEFAULT_SPEED_OF_SOUND: f64 = 343.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    /// Microphone positions in metres. Microphone 0 is the reference.
    pub mic_positions: Vec<[f64; 3]>,
    #[serde(default = "default_speed_of_sound")]
    pub speed_of_sound: f64,
}

fn default_speed_of_sound() -> f64 {
    DEFAULT_SPEED_OF_SOUND
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        ArrayGeometry::triangle(0.071)
    }
}

impl ArrayGeometry {
    /// Equilateral triangle in the horizontal plane with the given side
    /// length, reference mic at the origin.
    pub fn triangle(side_m: f64) -> Self {
        ArrayGeometry {
            mic_positions: vec![
                [0.0, 0.0, 0.0],
                [side_m, 0.0, 0.0],
                [0.5 * side_m, 0.5 * 3f64.sqrt() * side_m, 0.0],
            ],
            speed_of_sound: DEFAULT_SPEED_OF_SOUND,
        }
    }

    /// The 7.1 cm triangle plus a fourth mic above its centroid, so that any
    /// prefix of 2, 3 or 4 mics is a usable array.
    pub fn four_mic() -> Self {
        let mut g = ArrayGeometry::triangle(0.071);
        g.mic_positions
            .push([0.0355, 0.0355 / 3f64.sqrt(), 0.05]);
        g
    }

    pub fn num_mics(&self) -> usize {
        self.mic_positions.len()
    }

    /// The first `n` microphones.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.num_mics() {
            return Err(Error::InvalidConfig(format!(
                "cannot take {n} mics from a {}-mic array",
                self.num_mics()
            )));
        }
        Ok(ArrayGeometry {
            mic_positions: self.mic_positions[..n].to_vec(),
            speed_of_sound: self.speed_of_sound,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.mic_positions.is_empty() {
            return Err(Error::InvalidConfig("array has no microphones".into()));
        }
        if !(self.speed_of_sound > 0.0) {
            return Err(Error::InvalidConfig("speed of sound must be positive".into()));
        }
        for (i, a) in self.mic_positions.iter().enumerate() {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(format!("mic {i} has a non-finite position")));
            }
            for b in &self.mic_positions[i + 1..] {
                if a == b {
                    return Err(Error::InvalidConfig("duplicate microphone position".into()));
                }
            }
        }
        Ok(())
    }

    /// Arrival delay of each mic relative to the reference, in seconds, for
    /// a plane wave coming from `direction`.
    pub fn delays(&self, direction: [f64; 3]) -> Vec<f64> {
        let r0 = self.mic_positions[0];
        self.mic_positions
            .iter()
            .map(|r| {
                let proj: f64 = (0..3).map(|i| (r[i] - r0[i]) * direction[i]).sum();
                -proj / self.speed_of_sound
            })
            .collect()
    }

    /// Largest inter-mic distance from the reference, in metres.
    pub fn aperture(&self) -> f64 {
        let r0 = self.mic_positions[0];
        self.mic_positions
            .iter()
            .map(|r| (0..3).map(|i| (r[i] - r0[i]).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

fn normalize(direction: [f64; 3]) -> Result<[f64; 3]> {
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::InvalidConfig(format!("bad direction {direction:?}")));
    }
    Ok(direction.map(|v| v / norm))
}

/// Unit vector in the horizontal plane at `azimuth_deg` from the x axis.
pub fn azimuth(azimuth_deg: f64) -> [f64; 3] {
    let a = azimuth_deg.to_radians();
    [a.cos(), a.sin(), 0.0]
}

/// Target SNR of a scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SnrSpec {
    Db(f64),
    /// No noise: noise gain 0.
    Clean,
    /// No speech: speech gain 0, noise gain 1.
    NoiseOnly,
}

impl SnrSpec {
    pub fn db(&self) -> f64 {
        match self {
            SnrSpec::Db(v) => *v,
            SnrSpec::Clean => f64::INFINITY,
            SnrSpec::NoiseOnly => f64::NEG_INFINITY,
        }
    }
}

impl fmt::Display for SnrSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SnrSpec::Db(v) => write!(f, "{v}"),
            SnrSpec::Clean => f.write_str("clean"),
            SnrSpec::NoiseOnly => f.write_str("noise_only"),
        }
    }
}

impl Serialize for SnrSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SnrSpec::Db(v) => serializer.serialize_f64(*v),
            SnrSpec::Clean => serializer.serialize_str("clean"),
            SnrSpec::NoiseOnly => serializer.serialize_str("noise_only"),
        }
    }
}

impl<'de> Deserialize<'de> for SnrSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(v) => Ok(SnrSpec::Db(v)),
            Raw::Text(t) if t == "clean" => Ok(SnrSpec::Clean),
            Raw::Text(t) if t == "noise_only" => Ok(SnrSpec::NoiseOnly),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unknown SNR {t:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub snr: SnrSpec,
    #[serde(default = "default_context_s")]
    pub noise_context_s: f64,
    pub speech_direction: [f64; 3],
    /// One independent noise source per direction.
    pub noise_directions: Vec<[f64; 3]>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub geometry: ArrayGeometry,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: u32,
}

fn default_context_s() -> f64 {
    6.0
}

fn default_rate() -> u32 {
    16_000
}

impl SceneConfig {
    pub fn new(snr: SnrSpec, geometry: ArrayGeometry) -> Self {
        SceneConfig {
            snr,
            noise_context_s: default_context_s(),
            speech_direction: azimuth(90.0),
            noise_directions: vec![azimuth(0.0)],
            seed: 0,
            geometry,
            sample_rate_hz: default_rate(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if !(self.noise_context_s >= 0.0) {
            return Err(Error::InvalidConfig("noise_context_s must be >= 0".into()));
        }
        if self.noise_directions.is_empty() {
            return Err(Error::InvalidConfig("need at least one noise direction".into()));
        }
        if self.sample_rate_hz == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(())
    }

    /// Number of samples of silence kept around the speech so that the
    /// fractional-delay kernels cannot leak speech into the noise context.
    pub fn guard_samples(&self) -> usize {
        let max_delay = self.geometry.aperture() / self.geometry.speed_of_sound
            * self.sample_rate_hz as f64;
        SINC_HALF_TAPS as usize + max_delay.ceil() as usize + 1
    }
}

/// A multichannel mixture together with its exact speech and noise parts.
///
/// `mixture[m][t] == speech_image[m][t] + noise_gain * noise_image[m][t]`
/// holds bit-for-bit, and `speech_image` is identically zero before
/// `context_boundary`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub mixture: Array2<f64>,
    pub speech_image: Array2<f64>,
    /// Noise image before the SNR gain is applied.
    pub noise_image: Array2<f64>,
    pub noise_gain: f64,
    pub context_boundary: usize,
    pub config: SceneConfig,
}

impl Scene {
    fn assemble(
        speech_image: Array2<f64>,
        noise_image: Array2<f64>,
        noise_gain: f64,
        context_boundary: usize,
        config: SceneConfig,
    ) -> Scene {
        let mixture = compose(&speech_image, &noise_image, noise_gain);
        Scene {
            mixture,
            speech_image,
            noise_image,
            noise_gain,
            context_boundary,
            config,
        }
    }

    pub fn num_mics(&self) -> usize {
        self.mixture.nrows()
    }

    pub fn len(&self) -> usize {
        self.mixture.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Speech at the reference mic.
    pub fn clean_ref(&self) -> Vec<f64> {
        self.speech_image.row(0).to_vec()
    }

    /// Scaled noise at the reference mic.
    pub fn noise_ref(&self) -> Vec<f64> {
        self.noise_image.row(0).iter().map(|v| self.noise_gain * v).collect()
    }

    /// Scaled noise image for every mic.
    pub fn scaled_noise(&self) -> Array2<f64> {
        self.noise_image.mapv(|v| self.noise_gain * v)
    }

    /// Reference-mic SNR over the speech-active interval.
    pub fn measured_snr_db(&self) -> f64 {
        let b = self.context_boundary;
        let speech: f64 = self.speech_image.slice(s![0, b..]).iter().map(|v| v * v).sum();
        let noise: f64 = self
            .noise_image
            .slice(s![0, b..])
            .iter()
            .map(|v| (self.noise_gain * v).powi(2))
            .sum();
        power_ratio_db(speech, noise)
    }

    /// The scene restricted to its first `n` microphones.
    pub fn with_mics(&self, n: usize) -> Result<Scene> {
        let geometry = self.config.geometry.prefix(n)?;
        let mut config = self.config.clone();
        config.geometry = geometry;
        Ok(Scene {
            mixture: self.mixture.slice(s![..n, ..]).to_owned(),
            speech_image: self.speech_image.slice(s![..n, ..]).to_owned(),
            noise_image: self.noise_image.slice(s![..n, ..]).to_owned(),
            noise_gain: self.noise_gain,
            context_boundary: self.context_boundary,
            config,
        })
    }
}

fn compose(speech: &Array2<f64>, noise: &Array2<f64>, gain: f64) -> Array2<f64> {
    let mut mixture = speech.clone();
    mixture.zip_mut_with(noise, |m, n| *m += gain * n);
    mixture
}

fn power_ratio_db(signal: f64, noise: f64) -> f64 {
    if noise == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal / noise).log10()
    }
}

/// Noise gain that puts `noise_power * g^2` exactly `snr_db` below
/// `speech_power`.
fn gain_for_snr(speech_power: f64, noise_power: f64, snr_db: f64) -> Result<f64> {
    if !(speech_power > 0.0) {
        return Err(Error::ZeroPower("speech"));
    }
    if !(noise_power > 0.0) {
        return Err(Error::ZeroPower("noise"));
    }
    Ok((speech_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Mixes `speech` with the first `speech.len()` samples of `noise` at
/// `snr_db`. Returns the noise gain and the mixture.
pub fn mix_at_snr(speech: &[f64], noise: &[f64], snr_db: f64) -> Result<(f64, Vec<f64>)> {
    if noise.len() < speech.len() {
        return Err(Error::InsufficientNoise {
            needed: speech.len(),
            got: noise.len(),
        });
    }
    let noise = &noise[..speech.len()];
    let ps: f64 = speech.iter().map(|v| v * v).sum();
    let pn: f64 = noise.iter().map(|v| v * v).sum();
    let g = gain_for_snr(ps, pn, snr_db)?;
    let mixture = speech.iter().zip(noise).map(|(s, n)| s + g * n).collect();
    Ok((g, mixture))
}

/// Windowed-sinc kernel for a delay of `frac` in `[0, 1)` samples, taps
/// `j = -15 ..= 16` applied as `y[n] = sum_j h[j] x[n - j]`. Normalised to
/// unit DC gain.
fn fractional_delay_kernel(frac: f64) -> [f64; 2 * SINC_HALF_TAPS as usize] {
    let mut h = [0.0; 2 * SINC_HALF_TAPS as usize];
    let half = SINC_HALF_TAPS as f64;
    for (i, tap) in h.iter_mut().enumerate() {
        let j = i as i64 - (SINC_HALF_TAPS - 1);
        let t = j as f64 - frac;
        let sinc = if t == 0.0 { 1.0 } else { (PI * t).sin() / (PI * t) };
        // Blackman window over (-half, half).
        let x = t / half;
        let window = 0.42 + 0.5 * (PI * x).cos() + 0.08 * (2.0 * PI * x).cos();
        *tap = sinc * window;
    }
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Delays `x` by `delay` samples (any sign), keeping the input length.
pub fn fractional_delay(x: &[f64], delay: f64) -> Vec<f64> {
    let whole = delay.floor();
    let frac = delay - whole;
    let whole = whole as i64;
    let len = x.len() as i64;
    let at = |i: i64| if (0..len).contains(&i) { x[i as usize] } else { 0.0 };
    if frac == 0.0 {
        return (0..len).map(|n| at(n - whole)).collect();
    }
    let h = fractional_delay_kernel(frac);
    // out[n] = sum_i h[i] x[n - offset - i], offset = whole - (half - 1).
    let offset = whole - (SINC_HALF_TAPS - 1);
    let taps = h.len() as i64;
    (0..len)
        .map(|n| {
            let first = n - offset - (taps - 1);
            if first >= 0 && first + taps <= len {
                let window = &x[first as usize..(first + taps) as usize];
                h.iter().zip(window.iter().rev()).map(|(c, v)| c * v).sum()
            } else {
                h.iter()
                    .enumerate()
                    .map(|(i, c)| c * at(n - offset - i as i64))
                    .sum()
            }
        })
        .collect()
}

/// Far-field array image of `source` arriving from `direction`. Channel `m`
/// is the source delayed by `-(r_m - r_0) . direction / c`.
pub fn simulate_array(
    source: &[f64],
    direction: [f64; 3],
    geometry: &ArrayGeometry,
    sample_rate_hz: u32,
) -> Result<Array2<f64>> {
    geometry.validate()?;
    let direction = normalize(direction)?;
    let delays = geometry.delays(direction);
    let mut out = Array2::zeros((geometry.num_mics(), source.len()));
    for (m, tau) in delays.iter().enumerate() {
        let shifted = fractional_delay(source, tau * sample_rate_hz as f64);
        out.row_mut(m).assign(&ndarray::Array1::from(shifted));
    }
    Ok(out)
}

/// Builds a scene from mono speech and noise recordings.
///
/// The noise runs from sample 0. Speech is inserted after the noise
/// context plus a short guard, so its array image is exactly zero before
/// `context_boundary`. With several noise directions, each source is the
/// noise recording circularly shifted by an equal fraction of its length.
pub fn make_scene(speech: &[f64], noise: &[f64], config: &SceneConfig) -> Result<Scene> {
    finish_scene(render_images(speech, noise, config)?, config)
}

/// Unscaled speech and noise images of a scene; they do not depend on the
/// SNR.
struct Images {
    speech: Array2<f64>,
    noise: Array2<f64>,
    boundary: usize,
}

fn render_images(speech: &[f64], noise: &[f64], config: &SceneConfig) -> Result<Images> {
    config.validate()?;
    let fs = config.sample_rate_hz as f64;
    let boundary = (config.noise_context_s * fs).round() as usize;
    let guard = config.guard_samples();
    let total = boundary + guard + speech.len() + guard;
    if noise.len() < total {
        return Err(Error::InsufficientNoise {
            needed: total,
            got: noise.len(),
        });
    }
    let geometry = &config.geometry;

    let mut source = vec![0.0; total];
    source[boundary + guard..boundary + guard + speech.len()].copy_from_slice(speech);
    let speech_image = simulate_array(&source, config.speech_direction, geometry, config.sample_rate_hz)?;

    let sources = config.noise_directions.len();
    let mut noise_image = Array2::zeros((geometry.num_mics(), total));
    for (j, dir) in config.noise_directions.iter().enumerate() {
        let offset = j * noise.len() / sources;
        let src: Vec<f64> = (0..total).map(|t| noise[(t + offset) % noise.len()]).collect();
        noise_image += &simulate_array(&src, *dir, geometry, config.sample_rate_hz)?;
    }
    Ok(Images {
        speech: speech_image,
        noise: noise_image,
        boundary,
    })
}

fn finish_scene(images: Images, config: &SceneConfig) -> Result<Scene> {
    let Images {
        speech: speech_image,
        noise: noise_image,
        boundary,
    } = images;
    let speech_image = if config.snr == SnrSpec::NoiseOnly {
        Array2::zeros(speech_image.dim())
    } else {
        speech_image
    };

    let active = |img: &Array2<f64>| -> f64 { img.slice(s![0, boundary..]).iter().map(|v| v * v).sum() };
    let gain = match config.snr {
        SnrSpec::Db(snr) => gain_for_snr(active(&speech_image), active(&noise_image), snr)?,
        SnrSpec::Clean => 0.0,
        SnrSpec::NoiseOnly => 1.0,
    };

    // Common rescaling keeps the SNR and lets every part be stored as WAV.
    let peak = |a: &Array2<f64>| a.iter().fold(0.0f64, |p, v| p.max(v.abs()));
    let mixture = compose(&speech_image, &noise_image, gain);
    let worst = peak(&mixture).max(peak(&speech_image)).max(peak(&noise_image));
    let (speech_image, noise_image) = if worst > PEAK_LIMIT {
        let c = PEAK_LIMIT / worst;
        (speech_image.mapv(|v| v * c), noise_image.mapv(|v| v * c))
    } else {
        (speech_image, noise_image)
    };
    Ok(Scene::assemble(speech_image, noise_image, gain, boundary, config.clone()))
}

/// One row of a sweep: which recordings and directions make up a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePlan {
    pub id: String,
    pub utterance: usize,
    pub noise: usize,
    pub config: SceneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub noise_context_s: f64,
    pub num_noise_sources: usize,
    pub sample_rate_hz: u32,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            noise_context_s: 6.0,
            num_noise_sources: 3,
            sample_rate_hz: 16_000,
        }
    }
}

/// Deterministic pairing of utterances with noises and directions: one
/// plan per `(utterance, snr)`, utterance-major.
pub fn plan_sweep(
    num_utterances: usize,
    num_noises: usize,
    snr_levels: &[SnrSpec],
    geometry: &ArrayGeometry,
    seed: u64,
    options: &SweepOptions,
) -> Result<Vec<ScenePlan>> {
    if num_utterances == 0 || num_noises == 0 || snr_levels.is_empty() {
        return Err(Error::InvalidConfig("sweep needs utterances, noises and SNR levels".into()));
    }
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut plans = Vec::with_capacity(num_utterances * snr_levels.len());
    for u in 0..num_utterances {
        let noise = rng.random_range(0..num_noises);
        let speech_direction = azimuth(rng.random_range(0.0..360.0));
        let noise_directions = (0..options.num_noise_sources)
            .map(|_| azimuth(rng.random_range(0.0..360.0)))
            .collect::<Vec<_>>();
        let scene_seed: u64 = rng.random();
        for snr in snr_levels {
            plans.push(ScenePlan {
                id: format!("u{u:03}_snr{snr}"),
                utterance: u,
                noise,
                config: SceneConfig {
                    snr: *snr,
                    noise_context_s: options.noise_context_s,
                    speech_direction,
                    noise_directions: noise_directions.clone(),
                    seed: scene_seed,
                    geometry: geometry.clone(),
                    sample_rate_hz: options.sample_rate_hz,
                },
            });
        }
    }
    Ok(plans)
}

/// One scene per `(utterance, snr)`, generated in parallel.
pub fn generate_sweep(
    speech: &[Vec<f64>],
    noise: &[Vec<f64>],
    snr_levels: &[SnrSpec],
    geometry: &ArrayGeometry,
    seed: u64,
    options: &SweepOptions,
) -> Result<Vec<(ScenePlan, Scene)>> {
    let plans = plan_sweep(speech.len(), noise.len(), snr_levels, geometry, seed, options)?;
    // Plans come in runs of one utterance at every SNR; those share images.
    let groups: Vec<Vec<ScenePlan>> = plans.chunks(snr_levels.len()).map(|c| c.to_vec()).collect();
    let scenes: Vec<Vec<(ScenePlan, Scene)>> = groups
        .into_par_iter()
        .map(|group| {
            let first = &group[0];
            let images = render_images(&speech[first.utterance], &noise[first.noise], &first.config)?;
            let mut out = Vec::with_capacity(group.len());
            for plan in group {
                let copy = Images {
                    speech: images.speech.clone(),
                    noise: images.noise.clone(),
                    boundary: images.boundary,
                };
                let scene = finish_scene(copy, &plan.config)?;
                out.push((plan, scene));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(scenes.into_iter().flatten().collect())
}

/// Synthetic voiced "speech": a gliding harmonic source with a decaying
/// spectral envelope, gated into syllables of 120-300 ms separated by short
/// pauses, normalised to RMS 0.1.
pub fn synth_utterance(seed: u64, duration_s: f64, sample_rate_hz: u32) -> Vec<f64> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let fs = sample_rate_hz as f64;
    let len = (duration_s * fs).round() as usize;
    let f0_base: f64 = rng.random_range(100.0..220.0);
    let formant: f64 = rng.random_range(500.0..1500.0);
    let harmonics = ((0.45 * fs / f0_base) as usize).min(30);
    let phase0: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    // Syllable envelope.
    let mut envelope = vec![0.0; len];
    let mut t = (0.05 * fs) as usize;
    while t < len {
        let syl = (rng.random_range(0.12..0.30) * fs) as usize;
        let gap = (rng.random_range(0.03..0.12) * fs) as usize;
        let level: f64 = rng.random_range(0.5..1.0);
        for i in 0..syl.min(len - t) {
            envelope[t + i] = level * (PI * i as f64 / syl as f64).sin();
        }
        t += syl + gap;
    }

    let mut phase = 0.0;
    let mut out = Vec::with_capacity(len);
    for (n, env) in envelope.iter().enumerate() {
        let time = n as f64 / fs;
        let f0 = f0_base * (1.0 + 0.08 * (2.0 * PI * 0.7 * time).sin());
        phase += 2.0 * PI * f0 / fs;
        let mut v = 0.0;
        for h in 1..=harmonics {
            let fh = h as f64 * f0;
            if fh >= 0.48 * fs {
                break;
            }
            let amp = 1.0 / h as f64 * (1.0 + 2.0 * (-((fh - formant) / 300.0).powi(2)).exp());
            v += amp * (h as f64 * phase + phase0[h - 1]).sin();
        }
        let breath: f64 = rng.sample(StandardNormal);
        out.push(env * (v + 0.05 * breath));
    }
    normalize_rms(&mut out, 0.1);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Low-pass coloured Gaussian noise.
    Colored,
    /// Sum of several synthetic talkers.
    Babble,
}

/// Synthetic noise recording normalised to RMS 0.1.
pub fn synth_noise(seed: u64, duration_s: f64, sample_rate_hz: u32, kind: NoiseKind) -> Vec<f64> {
    let len = (duration_s * sample_rate_hz as f64).round() as usize;
    let mut out = match kind {
        NoiseKind::Colored => {
            let mut rng = SplitMix64::seed_from_u64(seed);
            let pole: f64 = rng.random_range(0.6..0.95);
            let mut state = 0.0;
            (0..len)
                .map(|_| {
                    let w: f64 = rng.sample(StandardNormal);
                    state = pole * state + w;
                    state
                })
                .collect::<Vec<f64>>()
        }
        NoiseKind::Babble => {
            let mut acc = vec![0.0; len];
            for talker in 0..4u64 {
                let voice = synth_utterance(seed.wrapping_mul(31).wrapping_add(talker + 1), duration_s, sample_rate_hz);
                acc.iter_mut().zip(voice).for_each(|(a, v)| *a += v);
            }
            acc
        }
    };
    normalize_rms(&mut out, 0.1);
    out
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / rms);
    }
}

/// Parameters of a scene built directly in the STFT domain where the
/// reference mic's noise is an exact per-bin FIR mix of the other mics'
/// noise.
#[derive(Clone, Debug, PartialEq)]
pub struct FirSceneConfig {
    pub num_mics: usize,
    pub taps_per_mic: usize,
    pub context_frames: usize,
    pub query_frames: usize,
    pub stft: StftConfig,
    /// Standard deviation of independent noise added to every mic.
    pub sensor_noise: f64,
    /// Amplitude of the speech copy reaching the non-reference mics.
    pub speech_leakage: f64,
    /// Speech RMS relative to unit-power noise.
    pub speech_level: f64,
    pub seed: u64,
}

impl Default for FirSceneConfig {
    /// Three mics, three taps, 6 s of context and 3 s of query at the
    /// default STFT resolution.
    fn default() -> Self {
        let stft = StftConfig::default();
        let context_frames = stft.num_frames(6 * stft.sample_rate_hz() as usize);
        FirSceneConfig {
            num_mics: 3,
            taps_per_mic: 3,
            context_frames,
            query_frames: 300,
            stft,
            sensor_noise: 0.0,
            speech_leakage: 0.0,
            speech_level: 1.0,
            seed: 0x5EED,
        }
    }
}

/// STFT-domain scene with planted cancellation filters.
#[derive(Clone, Debug)]
pub struct FirScene {
    pub noise: Spectrogram,
    pub speech: Spectrogram,
    /// `(bin, (M-1)L)` coefficients such that the reference noise equals
    /// `planted^H y` with `y` stacked newest-first per non-reference mic.
    pub planted: Array2<Complex64>,
    pub context_frames: usize,
}

impl FirScene {
    pub fn mixture(&self) -> Spectrogram {
        let data = &self.speech.data() + &self.noise.data();
        Spectrogram::new(data, self.noise.config().clone()).expect("same shape as the parts")
    }
}

fn complex_gaussian(rng: &mut SplitMix64) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn fir_coupled_scene(config: &FirSceneConfig) -> FirScene {
    let mut rng = SplitMix64::seed_from_u64(config.seed);
    let m_count = config.num_mics;
    let taps = config.taps_per_mic;
    let d = (m_count - 1) * taps;
    let bins = config.stft.num_bins();
    let frames = config.context_frames + config.query_frames;

    let mut planted = Array2::zeros((bins, d));
    planted.iter_mut().for_each(|c| *c = complex_gaussian(&mut rng) * (1.0 / (d.max(1) as f64).sqrt()));

    let mut noise = Array3::<Complex64>::zeros((m_count, frames, bins));
    for k in 0..bins {
        let level: f64 = rng.random_range(0.5..2.0);
        for m in 1..m_count {
            for n in 0..frames {
                noise[[m, n, k]] = complex_gaussian(&mut rng) * level;
            }
        }
        for n in 0..frames {
            let mut acc = Complex64::new(0.0, 0.0);
            for a in 0..m_count - 1 {
                for l in 0..taps.min(n + 1) {
                    acc += planted[[k, a * taps + l]].conj() * noise[[a + 1, n - l, k]];
                }
            }
            noise[[0, n, k]] = acc;
        }
    }
    if config.sensor_noise > 0.0 {
        noise
            .iter_mut()
            .for_each(|v| *v += complex_gaussian(&mut rng) * config.sensor_noise);
    }

    let mut speech = Array3::<Complex64>::zeros((m_count, frames, bins));
    for n in config.context_frames..frames {
        let syllable = (PI * (n - config.context_frames) as f64 / 25.0).sin().abs();
        for k in 0..bins {
            let v = complex_gaussian(&mut rng) * (config.speech_level * syllable);
            speech[[0, n, k]] = v;
            for m in 1..m_count {
                speech[[m, n, k]] = v * config.speech_leakage;
            }
        }
    }

    FirScene {
        noise: Spectrogram::new(noise, config.stft.clone()).expect("bins match config"),
        speech: Spectrogram::new(speech, config.stft.clone()).expect("bins match config"),
        planted,
        context_frames: config.context_frames,
    }
}

/// Manifest entry for a scene stored on disk. Paths are relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub mixture: PathBuf,
    pub speech_image: PathBuf,
    pub noise_image: PathBuf,
    pub snr: SnrSpec,
    pub noise_gain: f64,
    pub context_boundary: usize,
    pub config: SceneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    /// Reverberation time of the simulated rooms. Only anechoic (0 ms)
    /// scenes are generated.
    pub t60_ms: f64,
    pub scenes: Vec<SceneEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn buffer_of(samples: ArrayView2<'_, f64>, sample_rate_hz: u32) -> AudioBuffer {
    AudioBuffer::new(samples.to_owned(), sample_rate_hz).expect("scene channels have equal length")
}

/// Writes the scene's parts as float32 WAVs under `dir` and returns the
/// manifest entry describing them.
pub fn write_scene(scene: &Scene, id: &str, dir: &Path) -> Result<SceneEntry> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rate = scene.config.sample_rate_hz;
    let names = [
        (format!("{id}_mixture.wav"), scene.mixture.view()),
        (format!("{id}_speech.wav"), scene.speech_image.view()),
        (format!("{id}_noise.wav"), scene.noise_image.view()),
    ];
    for (name, data) in &names {
        write_wav(&buffer_of(*data, rate), &dir.join(name), SampleFormat::Float32)?;
    }
    Ok(SceneEntry {
        id: id.to_string(),
        mixture: names[0].0.clone().into(),
        speech_image: names[1].0.clone().into(),
        noise_image: names[2].0.clone().into(),
        snr: scene.config.snr,
        noise_gain: scene.noise_gain,
        context_boundary: scene.context_boundary,
        config: scene.config.clone(),
    })
}

/// Loads a stored scene. The mixture is recomposed from the stored parts so
/// the decomposition stays exact.
pub fn load_scene(entry: &SceneEntry, base: &Path) -> Result<Scene> {
    let rate = entry.config.sample_rate_hz;
    let speech = read_wav(&base.join(&entry.speech_image))?.expect_rate(rate)?;
    let noise = read_wav(&base.join(&entry.noise_image))?.expect_rate(rate)?;
    if speech.samples().dim() != noise.samples().dim() {
        return Err(Error::ShapeMismatch(format!("scene {} parts differ in shape", entry.id)));
    }
    if entry.context_boundary > speech.len() {
        return Err(Error::InvalidConfig(format!(
            "scene {} boundary beyond its length",
            entry.id
        )));
    }
    Ok(Scene::assemble(
        speech.into_samples(),
        noise.into_samples(),
        entry.noise_gain,
        entry.context_boundary,
        entry.config.clone(),
    ))
}
