//! Behavioral, bit-accurate model of an event-driven neural recording chain.
//!
//! The signal path is `synth` (ground-truth recordings) → `frontend` (LNA and
//! sample-and-hold) → `adc` (shared 8-bit ramp with dual-threshold gating) →
//! `compress` (fixed-point PCA datapath). `train` derives the PCA memory and
//! trigger settings, `link` models the controller registers and wire coding,
//! and `eval` holds the measurement suite. `pipeline` wires the blocks together
//! the way the recorder runs them.

pub mod adc;
pub mod compress;
pub mod config;
pub mod eval;
pub mod frontend;
pub mod io;
pub mod link;
pub mod pipeline;
pub mod synth;
pub mod train;

mod error;

pub use num_rational;

pub use adc::{AdcEvent, Polarity, RampAdc, RampConfig, TriggerAction, TriggerConfig};
pub use compress::{ChannelMemoryEntry, CompressedSpike, Compressor, QuantizedPcaMemory};
pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use frontend::FrontEndConfig;
pub use pipeline::{Mode, SpikeWindow};
pub use synth::{GroundTruth, Recording, SynthConfig, TemplateBank};
pub use train::PcaBasis;

/// Samples per stored spike window (the PCA memory depth).
pub const WINDOW_LEN: usize = 22;

/// Principal components kept per spike.
pub const COMPONENTS: usize = 4;
