//! Distilling a reference hierarchical model into portable hyperpriors,
//! recalibrating on unseen sites, and priors-only prediction.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{Dataset, Standardizer};
use crate::inference::SamplerConfig;
use crate::models::{
    fit, FittedNormativeModel, MeanForm, ModelError, ModelSpec, NoiseForm, ParamStructure,
    Prediction, Prior, Strategy, UnitHyperpriors,
};

pub const PACK_FORMAT: &str = "hbrnorm-hyperprior-pack";
pub const PACK_VERSION: u32 = 1;
/// Minimum bulk ESS of every hyperparameter coordinate before distilling.
pub const MIN_DISTILL_ESS: f64 = 100.0;

const HYPER_BLOCKS: [&str; 4] = [
    "mu_theta_mu",
    "sigma_theta_mu",
    "mu_theta_sigma",
    "sigma_theta_sigma",
];

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("only hbr models with sampled hyperparameters can be distilled (got {0})")]
    NotHierarchical(String),
    #[error("unit `{unit}`: block `{block}` has bulk ESS {ess:.1}, below the required {MIN_DISTILL_ESS}")]
    LowEss {
        unit: String,
        block: String,
        ess: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Element-wise distilled distribution of one hyperparameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Distilled {
    Normal {
        loc: Vec<f64>,
        scale: Vec<f64>,
    },
    /// Log of the parameter is Normal(mu, sigma²).
    LogNormal {
        mu: Vec<f64>,
        sigma: Vec<f64>,
    },
}

impl Distilled {
    fn priors(&self) -> Vec<Prior> {
        match self {
            Distilled::Normal { loc, scale } => loc
                .iter()
                .zip(scale)
                .map(|(&loc, &scale)| Prior::Normal { loc, scale })
                .collect(),
            Distilled::LogNormal { mu, sigma } => mu
                .iter()
                .zip(sigma)
                .map(|(&mu, &sigma)| Prior::LogNormal { mu, sigma })
                .collect(),
        }
    }

    /// Location parameters (Normal loc / log-space mean).
    pub fn locations(&self) -> &[f64] {
        match self {
            Distilled::Normal { loc, .. } => loc,
            Distilled::LogNormal { mu, .. } => mu,
        }
    }

    pub fn scales(&self) -> &[f64] {
        match self {
            Distilled::Normal { scale, .. } => scale,
            Distilled::LogNormal { sigma, .. } => sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistilledBlock {
    pub name: String,
    pub distribution: Distilled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitPack {
    pub unit: String,
    pub blocks: Vec<DistilledBlock>,
}

impl UnitPack {
    pub fn block(&self, name: &str) -> Option<&Distilled> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| &b.distribution)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 over the reference model's unit names and draw bits.
    pub reference_hash: String,
    pub draw_count: usize,
    pub reference_batches: usize,
}

/// Everything a new site needs to recalibrate: model structure, reference
/// standardization constants and distilled hyperparameter distributions.
/// Contains no reference data rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperpriorPack {
    pub format: String,
    pub version: u32,
    pub mean_form: MeanForm,
    pub noise_form: NoiseForm,
    pub covariate_names: Vec<String>,
    pub standardizer: Standardizer,
    pub units: Vec<UnitPack>,
    pub provenance: Provenance,
}

/// Moment-matched `(loc, scale)` of `draws`. Draws are sorted first so the
/// result does not depend on their order; the scale is floored at
/// `1e-3·|loc| + 1e-6`.
pub fn moment_match(draws: &[f64]) -> (f64, f64) {
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let loc = sorted.iter().sum::<f64>() / n;
    let sd = if sorted.len() > 1 {
        let mean_sq = sorted.iter().map(|v| (v - loc) * (v - loc)).sum::<f64>() / (n - 1.0);
        mean_sq.sqrt()
    } else {
        0.0
    };
    (loc, sd.max(1e-3 * loc.abs() + 1e-6))
}

fn reference_hash(model: &FittedNormativeModel) -> String {
    let mut h = Sha256::new();
    for (name, d) in model.unit_names.iter().zip(&model.draws) {
        h.update(name.as_bytes());
        h.update((d.values.len() as u64).to_le_bytes());
        for v in &d.values {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Distill every unit of an hbr reference model.
pub fn distill(reference: &FittedNormativeModel) -> Result<HyperpriorPack, TransferError> {
    let spec = &reference.spec;
    if spec.strategy != Strategy::Hbr || spec.hyper_sd_clamp.is_some() {
        let what = if spec.strategy == Strategy::Hbr {
            "hbr with clamped scales".to_string()
        } else {
            spec.strategy.to_string()
        };
        return Err(TransferError::NotHierarchical(what));
    }
    let mut units = Vec::with_capacity(reference.n_units());
    for (unit, draws) in reference.unit_names.iter().zip(&reference.draws) {
        let mut blocks = Vec::new();
        for name in HYPER_BLOCKS {
            let block = draws
                .layout
                .find(name)
                .expect("hbr layout has every hyper block");
            let mut locs = Vec::with_capacity(block.len);
            let mut scales = Vec::with_capacity(block.len);
            for j in block.range() {
                let ess = draws.diagnostics.ess_bulk[j];
                if !(ess >= MIN_DISTILL_ESS) {
                    return Err(TransferError::LowEss {
                        unit: unit.clone(),
                        block: name.to_string(),
                        ess,
                    });
                }
                // Unconstrained draws: identity for μ blocks, log σ for σ blocks.
                let column: Vec<f64> = draws.iter().map(|d| d[j]).collect();
                let (loc, scale) = moment_match(&column);
                locs.push(loc);
                scales.push(scale);
            }
            let distribution = if name.starts_with("sigma") {
                Distilled::LogNormal {
                    mu: locs,
                    sigma: scales,
                }
            } else {
                Distilled::Normal {
                    loc: locs,
                    scale: scales,
                }
            };
            blocks.push(DistilledBlock {
                name: name.to_string(),
                distribution,
            });
        }
        units.push(UnitPack {
            unit: unit.clone(),
            blocks,
        });
    }
    Ok(HyperpriorPack {
        format: PACK_FORMAT.to_string(),
        version: PACK_VERSION,
        mean_form: spec.mean_form,
        noise_form: spec.noise_form,
        covariate_names: reference.covariate_names.clone(),
        standardizer: reference.standardizer.clone(),
        units,
        provenance: Provenance {
            reference_hash: reference_hash(reference),
            draw_count: reference.draws.iter().map(|d| d.total_draws()).sum(),
            reference_batches: reference.batches.len(),
        },
    })
}

impl HyperpriorPack {
    pub fn unit(&self, name: &str) -> Option<&UnitPack> {
        self.units.iter().find(|u| u.unit == name)
    }

    fn unit_index(&self, name: &str) -> Result<usize, ModelError> {
        self.units
            .iter()
            .position(|u| u.unit == name)
            .ok_or_else(|| ModelError::Mismatch(format!("hyperprior pack has no unit `{name}`")))
    }

    pub fn check_structure(
        &self,
        spec: &ModelSpec,
        covariate_names: &[String],
    ) -> Result<(), ModelError> {
        if spec.mean_form != self.mean_form {
            return Err(ModelError::Mismatch(format!(
                "mean form {} vs pack {}",
                spec.mean_form, self.mean_form
            )));
        }
        if spec.noise_form != self.noise_form {
            return Err(ModelError::Mismatch(format!(
                "noise form {} vs pack {}",
                spec.noise_form, self.noise_form
            )));
        }
        if covariate_names != self.covariate_names.as_slice() {
            return Err(ModelError::Mismatch(format!(
                "covariates {:?} vs pack {:?}",
                covariate_names, self.covariate_names
            )));
        }
        Ok(())
    }

    /// Reference standardization restricted to the response columns of `ds`.
    pub fn standardizer_for(
        &self,
        spec: &ModelSpec,
        ds: &Dataset,
    ) -> Result<Standardizer, ModelError> {
        self.check_structure(spec, ds.covariate_names())?;
        let idx = ds
            .response_names()
            .iter()
            .map(|n| self.unit_index(n))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.standardizer.select_units(&idx))
    }

    pub fn unit_priors(&self, name: &str) -> Result<UnitHyperpriors, ModelError> {
        let u = &self.units[self.unit_index(name)?];
        let get = |b: &str| {
            u.block(b)
                .map(Distilled::priors)
                .ok_or_else(|| ModelError::Mismatch(format!("pack unit `{name}` lacks `{b}`")))
        };
        Ok(UnitHyperpriors {
            mu_theta_mu: get("mu_theta_mu")?,
            sigma_theta_mu: get("sigma_theta_mu")?,
            mu_theta_sigma: get("mu_theta_sigma")?,
            sigma_theta_sigma: get("sigma_theta_sigma")?,
        })
    }
}

/// Fit an hbr model on data from new sites, with the pack's distributions as
/// hyperpriors and the pack's standardization. Only the pack is consulted.
pub fn recalibrate(
    pack: &HyperpriorPack,
    ds_new: &Dataset,
    spec: &ModelSpec,
    sampler: &SamplerConfig,
) -> Result<FittedNormativeModel, TransferError> {
    if spec.strategy != Strategy::Hbr {
        return Err(TransferError::NotHierarchical(spec.strategy.to_string()));
    }
    let mut spec = spec.clone();
    spec.hyperpriors = Some(pack.clone());
    Ok(fit(&spec, ds_new, sampler)?)
}

/// Predict for arbitrary (new) sites by setting every batch's coefficients to
/// the pack's hyper-locations; no refitting and no epistemic variance term.
pub fn predict_priors_only(
    pack: &HyperpriorPack,
    x_new: &Array2<f64>,
) -> Result<Prediction, TransferError> {
    if x_new.ncols() != pack.covariate_names.len() {
        return Err(ModelError::Mismatch(format!(
            "pack expects {} covariates, got {}",
            pack.covariate_names.len(),
            x_new.ncols()
        ))
        .into());
    }
    let spec = ModelSpec::new(Strategy::Hbr)
        .with_mean(pack.mean_form)
        .with_noise(pack.noise_form);
    let st = ParamStructure::new(&spec, x_new.ncols(), 1);
    let x_std = pack.standardizer.transform_covariates(x_new);
    let basis = crate::models::Basis::new(&spec, &x_std);
    let groups = vec![0; x_new.nrows()];
    let mut cols = Vec::with_capacity(pack.units.len());
    for (u, unit) in pack.units.iter().enumerate() {
        let theta = unit
            .block("mu_theta_mu")
            .expect("pack block")
            .locations()
            .to_vec();
        let nu = unit
            .block("mu_theta_sigma")
            .expect("pack block")
            .locations()
            .to_vec();
        let mut acc = crate::models::RowMoments::new(x_new.nrows());
        acc.add_draw(&st, &basis, &groups, &theta, &nu);
        cols.push(acc.finish(&pack.standardizer, u));
    }
    let names = pack.units.iter().map(|u| u.unit.clone()).collect();
    Ok(crate::models::assemble(names, x_new.nrows(), cols))
}
