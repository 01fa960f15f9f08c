use thiserror::Error;

use crate::archive::ArchiveError;
use crate::combat::CombatError;
use crate::data::DataError;
use crate::evaluation::EvalError;
use crate::inference::{DensityError, SamplerError};
use crate::models::ModelError;
use crate::synth::SynthError;
use crate::transfer::TransferError;

/// Union of the module errors, for callers that drive whole pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Combat(#[from] CombatError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
