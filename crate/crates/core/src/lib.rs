//! Streaming multichannel speech enhancement.
//!
//! The signal path runs a per-frequency adaptive noise canceller that is
//! trained on a speech-free noise context and then frozen, computes
//! 128-band log-mel features from the raw and cleaned reference channel,
//! and estimates a time-frequency mask with a causal conformer. An oracle
//! eigenvector-steered MVDR beamformer serves as a baseline, and a
//! delay-and-gain array simulator generates SNR-controlled evaluation
//! scenes.

pub mod audio_io;
pub mod beamformer;
pub mod cleaner;
pub mod conformer;
pub mod container;
pub mod error;
pub mod eval;
pub mod features;
pub mod mask;
pub mod simulator;
pub mod stft;

pub use error::{Error, Result};
pub use stft::{analyze, synthesize, Spectrogram, StftConfig, WindowKind};
