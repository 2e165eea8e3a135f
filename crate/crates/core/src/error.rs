use thiserror::Error;

use crate::{adc::AdcError, compress::CompressError, eval::EvalError, link::LinkError};
use crate::{frontend::FrontEndError, synth::SynthError, train::TrainError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-level error used by the pipeline and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    FrontEnd(#[from] FrontEndError),
    #[error(transparent)]
    Adc(#[from] AdcError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
