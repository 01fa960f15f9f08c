//! Pooling, no-pooling and hierarchical (partial pooling) Bayesian regression
//! with homoscedastic or heteroscedastic noise, plus prediction and deviation
//! scoring.

mod density;
mod fit;
mod prior;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::inference::SamplerError;
use crate::transfer::HyperpriorPack;

pub use density::{build_density, features, NoiseLink, ParamStructure, RegressionDensity};
pub(crate) use fit::{assemble, Basis, RowMoments};
pub use fit::{fit, fit_units, DeviationReport, FittedNormativeModel, Prediction, UnitSummary};
pub use prior::{Prior, UnitHyperpriors};

/// Fraction of units allowed to exceed [`FIT_RHAT_LIMIT`] before a fit fails.
pub const MAX_UNCONVERGED_FRACTION: f64 = 0.10;
pub const FIT_RHAT_LIMIT: f64 = 1.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Pooling,
    NoPooling,
    Hbr,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Pooling => "pooling",
            Strategy::NoPooling => "nopool",
            Strategy::Hbr => "hbr",
        })
    }
}

impl FromStr for Strategy {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pooling" | "pool" => Ok(Strategy::Pooling),
            "nopool" | "no_pooling" | "no-pooling" => Ok(Strategy::NoPooling),
            "hbr" => Ok(Strategy::Hbr),
            _ => Err(ModelError::Spec(format!(
                "unknown strategy `{s}` (expected pooling, nopool or hbr)"
            ))),
        }
    }
}

/// Mean function `f_μ`: polynomial in each (standardized) covariate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanForm {
    Linear,
    Polynomial(usize),
}

impl MeanForm {
    pub fn degree(&self) -> usize {
        match *self {
            MeanForm::Linear => 1,
            MeanForm::Polynomial(d) => d,
        }
    }
}

impl fmt::Display for MeanForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeanForm::Linear => f.write_str("linear"),
            MeanForm::Polynomial(d) => write!(f, "poly:{d}"),
        }
    }
}

impl FromStr for MeanForm {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "linear" => Ok(MeanForm::Linear),
            Some(("poly", d)) => d
                .parse()
                .map(MeanForm::Polynomial)
                .map_err(|_| ModelError::Spec(format!("bad polynomial degree in `{s}`"))),
            _ => Err(ModelError::Spec(format!(
                "unknown mean form `{s}` (expected linear or poly:<deg>)"
            ))),
        }
    }
}

/// Noise model: constant sd, or `softplus` of a polynomial in the covariates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseForm {
    Homoscedastic,
    Heteroscedastic(usize),
}

impl NoiseForm {
    pub const DEFAULT_HETERO_DEGREE: usize = 2;
}

impl fmt::Display for NoiseForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseForm::Homoscedastic => f.write_str("homo"),
            NoiseForm::Heteroscedastic(d) => write!(f, "hetero:{d}"),
        }
    }
}

impl FromStr for NoiseForm {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "homo" => Ok(NoiseForm::Homoscedastic),
            None if s == "hetero" => {
                Ok(NoiseForm::Heteroscedastic(NoiseForm::DEFAULT_HETERO_DEGREE))
            }
            Some(("hetero", d)) => d
                .parse()
                .map(NoiseForm::Heteroscedastic)
                .map_err(|_| ModelError::Spec(format!("bad heteroscedastic degree in `{s}`"))),
            _ => Err(ModelError::Spec(format!(
                "unknown noise form `{s}` (expected homo or hetero:<deg>)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub strategy: Strategy,
    pub mean_form: MeanForm,
    pub noise_form: NoiseForm,
    /// Pin the hierarchical scale parameters to this value instead of sampling
    /// them; the model then degenerates toward complete pooling.
    #[serde(default)]
    pub hyper_sd_clamp: Option<f64>,
    /// Informative hyperpriors replacing the defaults (hbr only).
    #[serde(default)]
    pub hyperpriors: Option<HyperpriorPack>,
}

impl ModelSpec {
    pub fn new(strategy: Strategy) -> Self {
        ModelSpec {
            strategy,
            mean_form: MeanForm::Linear,
            noise_form: NoiseForm::Homoscedastic,
            hyper_sd_clamp: None,
            hyperpriors: None,
        }
    }

    pub fn with_noise(mut self, noise: NoiseForm) -> Self {
        self.noise_form = noise;
        self
    }

    pub fn with_mean(mut self, mean: MeanForm) -> Self {
        self.mean_form = mean;
        self
    }

    /// Number of mean coefficients for `p` covariates.
    pub fn k_mu(&self, p: usize) -> usize {
        1 + p * self.mean_form.degree()
    }

    /// Number of noise coefficients for `p` covariates.
    pub fn k_sigma(&self, p: usize) -> usize {
        match self.noise_form {
            NoiseForm::Homoscedastic => 1,
            NoiseForm::Heteroscedastic(q) => 1 + p * q,
        }
    }

    /// Minimum rows per batch (no-pooling) or in total (pooling).
    pub fn min_rows(&self, p: usize) -> usize {
        self.k_mu(p) + 1
    }

    pub fn validate(&self, n_batches: usize) -> Result<(), ModelError> {
        if self.mean_form.degree() < 1 {
            return Err(ModelError::Spec(
                "polynomial mean degree must be at least 1".into(),
            ));
        }
        if let NoiseForm::Heteroscedastic(q) = self.noise_form {
            if q < 1 {
                return Err(ModelError::Spec(
                    "heteroscedastic degree must be at least 1".into(),
                ));
            }
        }
        // With a hyperprior pack the hierarchy is anchored by the reference
        // sites, so a single new site is enough.
        let min_batches = if self.hyperpriors.is_some() { 1 } else { 2 };
        if self.strategy == Strategy::Hbr && n_batches < min_batches {
            return Err(ModelError::Spec(format!(
                "hbr needs at least {min_batches} batches, data has {n_batches}; use pooling instead"
            )));
        }
        if let Some(c) = self.hyper_sd_clamp {
            if self.strategy != Strategy::Hbr || !(c > 0.0) {
                return Err(ModelError::Spec(
                    "hyper sd clamp needs hbr and a positive value".into(),
                ));
            }
        }
        if self.hyperpriors.is_some() && self.strategy != Strategy::Hbr {
            return Err(ModelError::Spec(
                "informative hyperpriors apply to hbr only".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid model specification: {0}")]
    Spec(String),
    #[error("degenerate batch `{batch}`: {reason}")]
    DegenerateBatch { batch: String, reason: String },
    #[error("sampler failed on unit `{unit}`: {source}")]
    Sampler { unit: String, source: SamplerError },
    #[error(
        "{flagged} of {total} units have R-hat above {limit}; increase warmup or inspect the data"
    )]
    Convergence {
        flagged: usize,
        total: usize,
        limit: f64,
    },
    #[error("batch `{0}` was not seen at fit time; recalibrate with a hyperprior pack or use priors-only prediction")]
    UnknownBatch(String),
    #[error("structure mismatch: {0}")]
    Mismatch(String),
}
