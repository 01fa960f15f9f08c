//! Exit codes and the single-line error report.

use std::fmt;

use hbrnorm::archive::ArchiveError;
use hbrnorm::combat::CombatError;
use hbrnorm::data::DataError;
use hbrnorm::evaluation::EvalError;
use hbrnorm::inference::{DensityError, SamplerError};
use hbrnorm::models::ModelError;
use hbrnorm::synth::SynthError;
use hbrnorm::transfer::TransferError;
use hbrnorm::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Class {
    Io,
    Schema,
    Degenerate,
    Sampler,
    Diagnostics,
    Other,
}

impl Class {
    pub fn code(self) -> u8 {
        match self {
            Class::Io => 10,
            Class::Schema => 11,
            Class::Degenerate => 12,
            Class::Sampler => 13,
            Class::Diagnostics => 14,
            Class::Other => 15,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Class::Io => "io",
            Class::Schema => "schema",
            Class::Degenerate => "degenerate-data",
            Class::Sampler => "sampler",
            Class::Diagnostics => "diagnostics",
            Class::Other => "other",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub class: Class,
    pub message: String,
}

impl Failure {
    pub fn new(class: Class, message: impl Into<String>) -> Self {
        Failure {
            class,
            message: message.into(),
        }
    }
}

/// `error[<code>:<class>]: <message>` on one line.
impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self
            .message
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        write!(
            f,
            "error[{}:{}]: {msg}",
            self.class.code(),
            self.class.name()
        )
    }
}

fn data(e: &DataError) -> Class {
    match e {
        DataError::Io(_) => Class::Io,
        DataError::Csv(_)
        | DataError::Schema(_)
        | DataError::MissingColumn(_)
        | DataError::UnknownBatch(_)
        | DataError::BadGroup(_)
        | DataError::Shape(_) => Class::Schema,
        DataError::NoUsableRows { .. }
        | DataError::ConstantColumn(_)
        | DataError::Stratification { .. } => Class::Degenerate,
        DataError::InvalidFraction(_) => Class::Other,
    }
}

fn model(e: &ModelError) -> Class {
    match e {
        ModelError::Data(d) => data(d),
        ModelError::Spec(_) | ModelError::UnknownBatch(_) | ModelError::Mismatch(_) => {
            Class::Schema
        }
        ModelError::DegenerateBatch { .. } => Class::Degenerate,
        ModelError::Sampler { .. } => Class::Sampler,
        ModelError::Convergence { .. } => Class::Diagnostics,
    }
}

pub fn classify(e: &Error) -> Class {
    match e {
        Error::Data(d) => data(d),
        Error::Model(m) => model(m),
        Error::Density(_) | Error::Sampler(_) => Class::Sampler,
        Error::Transfer(t) => match t {
            TransferError::NotHierarchical(_) => Class::Schema,
            TransferError::LowEss { .. } => Class::Diagnostics,
            TransferError::Model(m) => model(m),
        },
        Error::Combat(c) => match c {
            CombatError::Data(d) => data(d),
            CombatError::SmallBatch { .. } | CombatError::RankDeficient { .. } => Class::Degenerate,
            CombatError::UnknownCovariate(_)
            | CombatError::UnknownBatch(_)
            | CombatError::MissingUnit(_) => Class::Schema,
        },
        Error::Eval(v) => match v {
            EvalError::Io(_) => Class::Io,
            EvalError::Csv(_) | EvalError::Shape(_) | EvalError::Permutations(_) => Class::Schema,
            EvalError::BadSd | EvalError::Folds { .. } | EvalError::GroupSize { .. } => {
                Class::Degenerate
            }
        },
        Error::Synth(s) => match s {
            SynthError::Io(_) => Class::Io,
            SynthError::Config(_) | SynthError::Parse(_) => Class::Schema,
        },
        Error::Archive(a) => match a {
            ArchiveError::Io { .. } => Class::Io,
            _ => Class::Schema,
        },
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            class: classify(&e),
            message: e.to_string(),
        }
    }
}

macro_rules! via_library_error {
    ($($t:ty),*) => {
        $(impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        })*
    };
}

via_library_error!(
    ArchiveError,
    CombatError,
    DataError,
    DensityError,
    EvalError,
    ModelError,
    SamplerError,
    SynthError,
    TransferError
);
