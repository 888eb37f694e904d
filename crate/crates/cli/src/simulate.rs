//! The `simulate` subcommand: sweep configuration and scene rendering.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cleanstream::audio_io::read_wav;
use cleanstream::simulator::{
    generate_sweep, synth_noise, synth_utterance, write_scene, ArrayGeometry, Manifest, NoiseKind, SnrSpec,
    SweepOptions,
};
use serde::Deserialize;

/// Input of `simulate`. Recording paths are relative to the config file;
/// when none are given, synthetic speech and noise are generated instead.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub seed: u64,
    pub snr_levels: Vec<SnrSpec>,
    #[serde(default)]
    pub speech_files: Vec<PathBuf>,
    #[serde(default)]
    pub noise_files: Vec<PathBuf>,
    #[serde(default = "default_utterances")]
    pub num_utterances: usize,
    #[serde(default = "default_utterance_s")]
    pub utterance_s: f64,
    #[serde(default = "default_noises")]
    pub num_noises: usize,
    #[serde(default = "default_noise_s")]
    pub noise_s: f64,
    /// Microphone layout; defaults to the 4-mic array so that sweeps can
    /// use any prefix of 2 to 4 mics.
    #[serde(default = "ArrayGeometry::four_mic")]
    pub geometry: ArrayGeometry,
    #[serde(default = "default_context_s")]
    pub noise_context_s: f64,
    #[serde(default = "default_noise_sources")]
    pub num_noise_sources: usize,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: u32,
}

fn default_utterances() -> usize {
    30
}
fn default_utterance_s() -> f64 {
    2.0
}
fn default_noises() -> usize {
    6
}
fn default_noise_s() -> f64 {
    12.0
}
fn default_context_s() -> f64 {
    6.0
}
fn default_noise_sources() -> usize {
    3
}
fn default_rate() -> u32 {
    16_000
}

impl SimulateConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: SimulateConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if config.snr_levels.is_empty() {
            bail!("snr_levels must not be empty");
        }
        Ok(config)
    }

    fn load_recordings(&self, files: &[PathBuf], base: &Path) -> anyhow::Result<Vec<Vec<f64>>> {
        files
            .iter()
            .map(|f| {
                let path = base.join(f);
                let audio = read_wav(&path)?.expect_rate(self.sample_rate_hz)?;
                if audio.num_channels() != 1 {
                    bail!("{} must be mono", path.display());
                }
                Ok(audio.channel(0))
            })
            .collect()
    }

    fn sources(&self, base: &Path) -> anyhow::Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let speech = if self.speech_files.is_empty() {
            (0..self.num_utterances as u64)
                .map(|i| synth_utterance(self.seed.wrapping_add(1000 + i), self.utterance_s, self.sample_rate_hz))
                .collect()
        } else {
            self.load_recordings(&self.speech_files, base)?
        };
        let noise = if self.noise_files.is_empty() {
            (0..self.num_noises as u64)
                .map(|i| {
                    let kind = if i % 2 == 0 { NoiseKind::Colored } else { NoiseKind::Babble };
                    synth_noise(self.seed.wrapping_add(2000 + i), self.noise_s, self.sample_rate_hz, kind)
                })
                .collect()
        } else {
            self.load_recordings(&self.noise_files, base)?
        };
        Ok((speech, noise))
    }
}

/// Renders every scene of the sweep into `out` and writes `manifest.json`
/// plus one `<id>.json` scene entry per scene. Returns the manifest path.
pub fn run(config_path: &Path, out: &Path) -> anyhow::Result<PathBuf> {
    let config = SimulateConfig::load(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let (speech, noise) = config.sources(base)?;
    let options = SweepOptions {
        noise_context_s: config.noise_context_s,
        num_noise_sources: config.num_noise_sources,
        sample_rate_hz: config.sample_rate_hz,
    };
    let scenes = generate_sweep(&speech, &noise, &config.snr_levels, &config.geometry, config.seed, &options)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (plan, scene) in &scenes {
        let entry = write_scene(scene, &plan.id, out)?;
        let json = serde_json::to_string_pretty(&entry)? + "\n";
        let path = out.join(format!("{}.json", plan.id));
        std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        entries.push(entry);
    }
    let manifest = Manifest {
        seed: config.seed,
        t60_ms: 0.0,
        scenes: entries,
    };
    let path = out.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}
