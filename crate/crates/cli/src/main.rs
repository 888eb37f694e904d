//! Command-line front end: scene simulation, single-scene enhancement, and
//! SNR-sweep evaluation reports.

mod simulate;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use cleanstream::audio_io::{write_wav, AudioBuffer, SampleFormat};
use cleanstream::conformer::{init_weights, load_weights, save_weights, ConformerConfig};
use cleanstream::container::{MatrixFile, MatrixKind};
use cleanstream::eval::{
    evaluate, load_manifest_scenes, run_method, thread_cap, write_report, EnhancementMethod, MethodParams, MetricsRow,
};
use cleanstream::features::to_log;
use cleanstream::simulator::{load_scene, SceneEntry};

#[derive(Parser)]
#[command(name = "cleanstream", version, about = "Streaming multichannel speech enhancement experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render an SNR sweep of simulated scenes and its manifest.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one method on one scene and write its outputs and metrics.
    Enhance {
        /// Scene entry JSON as written by `simulate`.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Use only the first N microphones.
        #[arg(long)]
        mics: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score methods on every scene of a manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated method names.
        #[arg(long, value_delimiter = ',', default_value = "passthrough,cleaner")]
        methods: Vec<String>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score methods on every scene of a manifest for several mic counts.
    Sweep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        mics: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "cleaner")]
        methods: Vec<String>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write randomly initialised model weights (for plumbing tests; the
    /// resulting masks are not meaningful).
    InitWeights {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failures that reject the run before any scene is processed.
struct ConfigError(anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for ConfigError {
    fn from(e: E) -> Self {
        ConfigError(e.into())
    }
}

/// How a successful invocation ended.
enum Outcome {
    Done,
    /// Some scenes failed; the report records which.
    SceneFailures(usize),
}

fn parse_methods(names: &[String]) -> anyhow::Result<Vec<EnhancementMethod>> {
    let mut methods = Vec::new();
    for name in names {
        let method: EnhancementMethod = name.trim().parse()?;
        if !methods.contains(&method) {
            methods.push(method);
        }
    }
    if methods.is_empty() {
        bail!("no methods given");
    }
    Ok(methods)
}

fn method_params(methods: &[EnhancementMethod], weights: Option<&Path>) -> anyhow::Result<MethodParams> {
    let weights = match weights {
        Some(path) => Some(Arc::new(
            load_weights(path, &ConformerConfig::default()).with_context(|| format!("loading {}", path.display()))?,
        )),
        None if methods.contains(&EnhancementMethod::CleanformerModel) => {
            bail!("{} needs --weights", EnhancementMethod::CleanformerModel)
        }
        None => None,
    };
    Ok(MethodParams {
        weights,
        ..MethodParams::default()
    })
}

fn report(rows: &[MetricsRow], out: &Path) -> anyhow::Result<Outcome> {
    let files = write_report(rows, out)?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    let failures = rows.iter().filter(|r| r.error.is_some()).count();
    Ok(if failures == 0 {
        Outcome::Done
    } else {
        Outcome::SceneFailures(failures)
    })
}

fn run_evaluation(
    manifest: &Path,
    methods: &[String],
    weights: Option<&Path>,
    mics: &[Option<usize>],
    out: &Path,
) -> Result<Outcome, ConfigError> {
    thread_cap()?;
    let methods = parse_methods(methods)?;
    let params = method_params(&methods, weights)?;
    let scenes = load_manifest_scenes(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    let rows = evaluate(&scenes, &methods, mics, &params)?;
    Ok(report(&rows, out)?)
}

fn enhance(
    scene_path: &Path,
    method: &str,
    weights: Option<&Path>,
    mics: Option<usize>,
    out: &Path,
) -> Result<Outcome, ConfigError> {
    let method: EnhancementMethod = method.parse()?;
    let params = MethodParams {
        num_mics: mics,
        ..method_params(&[method], weights)?
    };
    let text = std::fs::read_to_string(scene_path).with_context(|| format!("reading {}", scene_path.display()))?;
    let entry: SceneEntry = serde_json::from_str(&text).with_context(|| format!("parsing {}", scene_path.display()))?;
    let base = scene_path.parent().unwrap_or(Path::new("."));
    let scene = load_scene(&entry, base)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let output = match run_method(&scene, &entry.id, method, &params) {
        Ok(output) => output,
        Err(e) => {
            eprintln!("scene {}: {e}", entry.id);
            let row = MetricsRow::failed(&entry.id, entry.snr, mics.unwrap_or(scene.num_mics()), method, &e);
            report(&[row], out)?;
            return Ok(Outcome::SceneFailures(1));
        }
    };
    let stem = out.join(format!("{}_{method}", entry.id));
    if let Some(waveform) = &output.waveform {
        let buffer = AudioBuffer::mono(waveform.clone(), scene.config.sample_rate_hz)?;
        write_wav(&buffer, &path_with_suffix(&stem, ".wav"), SampleFormat::Float32)?;
    }
    let log = to_log(&output.enhanced_mel, params.mel.log_floor)?;
    MatrixFile {
        kind: MatrixKind::LogMel,
        config_hash: params.mel.hash()?,
        values: log.values().mapv(|v| v as f32),
    }
    .save(&path_with_suffix(&stem, "_logmel.bin"))?;
    if let Some(mask) = &output.mask {
        mask.to_file(&params.mel)?.save(&path_with_suffix(&stem, "_mask.bin"))?;
    }
    Ok(report(&[output.metrics], out)?)
}

fn path_with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut name = stem.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn run(cli: Cli) -> Result<Outcome, ConfigError> {
    match cli.command {
        Command::Simulate { config, out } => {
            let manifest = simulate::run(&config, &out)?;
            println!("wrote {}", manifest.display());
            Ok(Outcome::Done)
        }
        Command::Enhance {
            scene,
            method,
            weights,
            mics,
            out,
        } => enhance(&scene, &method, weights.as_deref(), mics, &out),
        Command::Evaluate {
            manifest,
            methods,
            weights,
            out,
        } => run_evaluation(&manifest, &methods, weights.as_deref(), &[None], &out),
        Command::Sweep {
            manifest,
            mics,
            methods,
            weights,
            out,
        } => {
            if mics.is_empty() || mics.contains(&0) {
                return Err(anyhow::anyhow!("--mics needs positive counts").into());
            }
            let mics: Vec<Option<usize>> = mics.into_iter().map(Some).collect();
            run_evaluation(&manifest, &methods, weights.as_deref(), &mics, &out)
        }
        Command::InitWeights { seed, out } => {
            save_weights(&init_weights(&ConformerConfig::default(), seed)?, &out)?;
            println!("wrote {}", out.display());
            Ok(Outcome::Done)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::SceneFailures(n)) => {
            eprintln!("{n} scene run(s) failed; see the status column");
            ExitCode::from(1)
        }
        Err(ConfigError(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
