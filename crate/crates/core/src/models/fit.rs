use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::density::{features, ParamStructure, RegressionDensity};
use super::prior::UnitHyperpriors;
use super::{ModelError, ModelSpec, NoiseForm, Strategy, FIT_RHAT_LIMIT, MAX_UNCONVERGED_FRACTION};
use crate::data::{BatchIndex, BatchLabel, Dataset, Standardizer};
use crate::inference::{sample_nuts, PosteriorDraws, SamplerConfig};
use crate::math::{derive_seed, two_sided_p};

/// Everything shared by the per-unit densities of one fit.
pub(crate) struct Prepared {
    pub standardizer: Standardizer,
    pub batches: BatchIndex,
    pub batch_of: Vec<usize>,
    pub x_std: Array2<f64>,
}

impl Prepared {
    pub fn new(spec: &ModelSpec, ds: &Dataset) -> Result<Self, ModelError> {
        let batches = ds.batch_index();
        spec.validate(batches.len())?;
        let standardizer = match &spec.hyperpriors {
            Some(pack) => pack.standardizer_for(spec, ds)?,
            None => Standardizer::fit(ds)?,
        };
        let batch_of = batches.assign(ds.batch_labels())?;
        check_rows(spec, ds, &batches, &batch_of)?;
        let x_std = standardizer.transform_covariates(ds.covariates());
        Ok(Prepared {
            standardizer,
            batches,
            batch_of,
            x_std,
        })
    }

    pub fn density(
        &self,
        spec: &ModelSpec,
        ds: &Dataset,
        unit: usize,
    ) -> Result<RegressionDensity, ModelError> {
        let y: Vec<f64> = ds
            .responses()
            .column(unit)
            .iter()
            .map(|&v| self.standardizer.standardize_response(unit, v))
            .collect();
        let p = ds.n_covariates();
        let priors = match &spec.hyperpriors {
            Some(pack) => pack.unit_priors(&ds.response_names()[unit])?,
            None => UnitHyperpriors::weakly_informative(spec.k_mu(p), spec.k_sigma(p)),
        };
        Ok(RegressionDensity::new(
            spec,
            &self.x_std,
            &y,
            &self.batch_of,
            self.batches.len(),
            priors,
        ))
    }
}

fn check_rows(
    spec: &ModelSpec,
    ds: &Dataset,
    batches: &BatchIndex,
    batch_of: &[usize],
) -> Result<(), ModelError> {
    let need = spec.min_rows(ds.n_covariates());
    match spec.strategy {
        Strategy::Pooling | Strategy::Hbr => {
            if ds.n_rows() < need {
                return Err(ModelError::DegenerateBatch {
                    batch: "<all>".into(),
                    reason: format!("{} rows, at least {need} required", ds.n_rows()),
                });
            }
        }
        Strategy::NoPooling => {
            for (b, &count) in batches.counts().iter().enumerate() {
                let label = batches.labels()[b].to_string();
                if count < need {
                    return Err(ModelError::DegenerateBatch {
                        batch: label,
                        reason: format!("{count} rows, no-pooling needs at least {need} per batch"),
                    });
                }
                for (j, name) in ds.covariate_names().iter().enumerate() {
                    let mut vals = (0..ds.n_rows())
                        .filter(|&r| batch_of[r] == b)
                        .map(|r| ds.covariates()[[r, j]]);
                    let first = vals.next();
                    if vals.all(|v| Some(v) == first) {
                        return Err(ModelError::DegenerateBatch {
                            batch: label,
                            reason: format!("covariate `{name}` is constant within the batch"),
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

/// Fit every response unit of `ds`.
pub fn fit(
    spec: &ModelSpec,
    ds: &Dataset,
    sampler: &SamplerConfig,
) -> Result<FittedNormativeModel, ModelError> {
    let all: Vec<usize> = (0..ds.n_units()).collect();
    fit_units(spec, ds, sampler, &all)
}

/// Fit the listed units independently. Unit `u` is sampled with a seed
/// derived from `(sampler.seed, u)`, so its posterior does not depend on
/// which other units are fitted alongside it.
pub fn fit_units(
    spec: &ModelSpec,
    ds: &Dataset,
    sampler: &SamplerConfig,
    units: &[usize],
) -> Result<FittedNormativeModel, ModelError> {
    let prepared = Prepared::new(spec, ds)?;
    let draws: Vec<PosteriorDraws> = units
        .par_iter()
        .map(|&u| {
            let density = prepared.density(spec, ds, u)?;
            let cfg = sampler
                .clone()
                .with_seed(derive_seed(sampler.seed, u as u64));
            sample_nuts(&density, &cfg).map_err(|source| ModelError::Sampler {
                unit: ds.response_names()[u].clone(),
                source,
            })
        })
        .collect::<Result<_, _>>()?;
    let flagged = draws
        .iter()
        .filter(|d| !(d.diagnostics.max_r_hat() <= FIT_RHAT_LIMIT))
        .count();
    if flagged as f64 > MAX_UNCONVERGED_FRACTION * units.len() as f64 {
        return Err(ModelError::Convergence {
            flagged,
            total: units.len(),
            limit: FIT_RHAT_LIMIT,
        });
    }
    Ok(FittedNormativeModel {
        spec: spec.clone(),
        batches: prepared.batches,
        batch_names: ds.batch_names().to_vec(),
        covariate_names: ds.covariate_names().to_vec(),
        unit_names: units
            .iter()
            .map(|&u| ds.response_names()[u].clone())
            .collect(),
        standardizer: prepared.standardizer.select_units(units),
        sampler: sampler.clone(),
        draws,
    })
}

/// Predictive mean and sd, rows × units, in the original response units.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub unit_names: Vec<String>,
    pub mean: Array2<f64>,
    pub sd: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviationReport {
    pub unit_names: Vec<String>,
    pub mean: Array2<f64>,
    pub sd: Array2<f64>,
    pub z: Array2<f64>,
    /// Two-sided tail probability of `z`, floored at the smallest positive double.
    pub p: Array2<f64>,
}

impl DeviationReport {
    pub fn from_prediction(pred: Prediction, y: &Array2<f64>) -> Self {
        let z = (y - &pred.mean) / &pred.sd;
        let p = z.mapv(|v| two_sided_p(v).max(f64::MIN_POSITIVE));
        DeviationReport {
            unit_names: pred.unit_names,
            mean: pred.mean,
            sd: pred.sd,
            z,
            p,
        }
    }
}

/// Convergence summary of one unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitSummary {
    pub unit: String,
    pub max_r_hat: f64,
    pub min_ess_bulk: f64,
    pub divergences: usize,
    pub transitions: usize,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FittedNormativeModel {
    pub spec: ModelSpec,
    pub batches: BatchIndex,
    pub batch_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub unit_names: Vec<String>,
    pub standardizer: Standardizer,
    pub sampler: SamplerConfig,
    /// One posterior per unit, in `unit_names` order.
    pub draws: Vec<PosteriorDraws>,
}

impl FittedNormativeModel {
    pub fn structure(&self) -> ParamStructure {
        ParamStructure::new(&self.spec, self.covariate_names.len(), self.batches.len())
    }

    pub fn n_units(&self) -> usize {
        self.unit_names.len()
    }

    pub fn unit_position(&self, name: &str) -> Option<usize> {
        self.unit_names.iter().position(|u| u == name)
    }

    pub fn summaries(&self) -> Vec<UnitSummary> {
        self.unit_names
            .iter()
            .zip(&self.draws)
            .map(|(unit, d)| UnitSummary {
                unit: unit.clone(),
                max_r_hat: d.diagnostics.max_r_hat(),
                min_ess_bulk: d.diagnostics.min_ess(),
                divergences: d.diagnostics.divergences,
                transitions: d.diagnostics.transitions,
                flagged: !d.diagnostics.is_clean(),
            })
            .collect()
    }

    /// Parameter group used for each label; pooling accepts any label.
    pub fn groups_for(&self, labels: &[BatchLabel]) -> Result<Vec<usize>, ModelError> {
        let st = self.structure();
        labels
            .iter()
            .map(|l| match self.spec.strategy {
                Strategy::Pooling => Ok(0),
                _ => self
                    .batches
                    .get(l)
                    .map(|b| st.group_of_batch(b))
                    .ok_or_else(|| ModelError::UnknownBatch(l.to_string())),
            })
            .collect()
    }

    fn check_covariates(&self, x: &Array2<f64>) -> Result<(), ModelError> {
        if x.ncols() != self.covariate_names.len() {
            return Err(ModelError::Mismatch(format!(
                "model expects {} covariates, got {}",
                self.covariate_names.len(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Posterior predictive mean and sd (sd² = E[f_σ²] + Var[f_μ]) per row and unit.
    pub fn predict(
        &self,
        x: &Array2<f64>,
        labels: &[BatchLabel],
    ) -> Result<Prediction, ModelError> {
        self.check_covariates(x)?;
        if labels.len() != x.nrows() {
            return Err(ModelError::Mismatch(
                "one batch label per row is required".into(),
            ));
        }
        let groups = self.groups_for(labels)?;
        let x_std = self.standardizer.transform_covariates(x);
        let st = self.structure();
        let basis = Basis::new(&self.spec, &x_std);
        let cols: Vec<(Vec<f64>, Vec<f64>)> = (0..self.n_units())
            .into_par_iter()
            .map(|u| {
                let mut acc = RowMoments::new(x.nrows());
                let mut theta = vec![0.0; st.n_groups * st.k_mu];
                let mut nu = vec![0.0; st.n_groups * st.k_sigma];
                for d in self.draws[u].iter() {
                    st.decode(d, &mut theta, &mut nu);
                    acc.add_draw(&st, &basis, &groups, &theta, &nu);
                }
                acc.finish(&self.standardizer, u)
            })
            .collect();
        Ok(assemble(self.unit_names.clone(), x.nrows(), cols))
    }

    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Prediction, ModelError> {
        self.predict(ds.covariates(), ds.batch_labels())
    }

    /// Model unit `u` → column of `ds` holding the same response.
    pub fn response_columns(&self, ds: &Dataset) -> Result<Vec<usize>, ModelError> {
        self.unit_names
            .iter()
            .map(|name| {
                ds.response_names()
                    .iter()
                    .position(|r| r == name)
                    .ok_or_else(|| {
                        ModelError::Mismatch(format!("response column `{name}` missing from data"))
                    })
            })
            .collect()
    }

    pub fn deviations(&self, ds: &Dataset) -> Result<DeviationReport, ModelError> {
        let cols = self.response_columns(ds)?;
        let pred = self.predict_dataset(ds)?;
        let y = ds.responses().select(ndarray::Axis(1), &cols);
        Ok(DeviationReport::from_prediction(pred, &y))
    }

    /// Per-group posterior means of the standardized mean coefficients of `unit`.
    pub fn posterior_mean_coefficients(&self, unit: usize) -> Vec<Vec<f64>> {
        let st = self.structure();
        let mut theta = vec![0.0; st.n_groups * st.k_mu];
        let mut nu = vec![0.0; st.n_groups * st.k_sigma];
        let mut sum = vec![0.0; theta.len()];
        let draws = &self.draws[unit];
        for d in draws.iter() {
            st.decode(d, &mut theta, &mut nu);
            sum.iter_mut().zip(&theta).for_each(|(s, t)| *s += t);
        }
        let n = draws.total_draws() as f64;
        sum.chunks(st.k_mu)
            .map(|c| c.iter().map(|v| v / n).collect())
            .collect()
    }

    /// Draws of `μ_θμ` (standardized) for an hbr unit.
    pub fn hyper_mean_draws(&self, unit: usize) -> Option<Vec<Vec<f64>>> {
        let st = self.structure();
        self.draws[unit]
            .iter()
            .map(|d| st.hyper_means(d).map(|(m, _)| m))
            .collect()
    }

    /// Map standardized linear coefficients `[θ₀, θ₁…θ_p]` of `unit` to the
    /// original scale `[intercept, slope₁…slope_p]`. `None` for non-linear means.
    pub fn raw_linear(&self, unit: usize, theta: &[f64]) -> Option<Vec<f64>> {
        if self.spec.mean_form.degree() != 1 {
            return None;
        }
        let s = &self.standardizer;
        let sy = s.response_sd(unit);
        let mut intercept = theta[0];
        let mut out = vec![0.0];
        for j in 0..self.covariate_names.len() {
            let slope = theta[1 + j] / s.covariate_sd[j];
            intercept -= slope * s.covariate_mean[j];
            out.push(sy * slope);
        }
        out[0] = s.response_mean[unit] + sy * intercept;
        Some(out)
    }
}

/// Feature rows for the mean and noise predictors of a batch of inputs.
pub(crate) struct Basis {
    pub k_mu: usize,
    pub k_sigma: usize,
    pub phi_mu: Vec<f64>,
    pub phi_sigma: Vec<f64>,
}

impl Basis {
    pub fn new(spec: &ModelSpec, x_std: &Array2<f64>) -> Self {
        let p = x_std.ncols();
        let (k_mu, k_sigma) = (spec.k_mu(p), spec.k_sigma(p));
        let mut phi = Vec::new();
        let mut phi_mu = Vec::with_capacity(x_std.nrows() * k_mu);
        let mut phi_sigma = Vec::with_capacity(x_std.nrows() * k_sigma);
        for row in x_std.rows() {
            let row: Vec<f64> = row.to_vec();
            features(&row, spec.mean_form.degree(), &mut phi);
            phi_mu.extend_from_slice(&phi);
            match spec.noise_form {
                NoiseForm::Homoscedastic => phi_sigma.push(1.0),
                NoiseForm::Heteroscedastic(q) => {
                    features(&row, q, &mut phi);
                    phi_sigma.extend_from_slice(&phi);
                }
            }
        }
        Basis {
            k_mu,
            k_sigma,
            phi_mu,
            phi_sigma,
        }
    }

    /// Mean and noise sd of row `i` (standardized scale) given group coefficients.
    pub fn eval(&self, st: &ParamStructure, i: usize, theta: &[f64], nu: &[f64]) -> (f64, f64) {
        let (k, ks) = (self.k_mu, self.k_sigma);
        let f: f64 = self.phi_mu[i * k..(i + 1) * k]
            .iter()
            .zip(theta)
            .map(|(a, b)| a * b)
            .sum();
        let v: f64 = self.phi_sigma[i * ks..(i + 1) * ks]
            .iter()
            .zip(nu)
            .map(|(a, b)| a * b)
            .sum();
        (f, st.link.sd(v))
    }
}

/// Running per-row moments of `f_μ` and `f_σ²` across posterior draws.
pub(crate) struct RowMoments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    noise_var: Vec<f64>,
}

impl RowMoments {
    pub fn new(rows: usize) -> Self {
        RowMoments {
            n: 0.0,
            mean: vec![0.0; rows],
            m2: vec![0.0; rows],
            noise_var: vec![0.0; rows],
        }
    }

    pub fn add_draw(
        &mut self,
        st: &ParamStructure,
        basis: &Basis,
        groups: &[usize],
        theta: &[f64],
        nu: &[f64],
    ) {
        self.n += 1.0;
        let (k, ks) = (st.k_mu, st.k_sigma);
        for (i, &g) in groups.iter().enumerate() {
            let (f, sd) = basis.eval(st, i, &theta[g * k..(g + 1) * k], &nu[g * ks..(g + 1) * ks]);
            self.add_point(i, f, sd);
        }
    }

    pub fn add_point(&mut self, i: usize, f: f64, sd: f64) {
        let d = f - self.mean[i];
        self.mean[i] += d / self.n;
        self.m2[i] += d * (f - self.mean[i]);
        self.noise_var[i] += (sd * sd - self.noise_var[i]) / self.n;
    }

    /// Raw-scale mean and sd columns for `unit`.
    pub fn finish(&self, standardizer: &Standardizer, unit: usize) -> (Vec<f64>, Vec<f64>) {
        let sy = standardizer.response_sd(unit);
        let mean = self
            .mean
            .iter()
            .map(|&m| standardizer.unstandardize_response(unit, m))
            .collect();
        let sd = self
            .noise_var
            .iter()
            .zip(&self.m2)
            .map(|(&v, &m2)| sy * (v + m2 / self.n).sqrt())
            .collect();
        (mean, sd)
    }
}

pub(crate) fn assemble(
    unit_names: Vec<String>,
    rows: usize,
    cols: Vec<(Vec<f64>, Vec<f64>)>,
) -> Prediction {
    let u = cols.len();
    let mut mean = Array2::zeros((rows, u));
    let mut sd = Array2::zeros((rows, u));
    for (j, (m, s)) in cols.into_iter().enumerate() {
        mean.column_mut(j).assign(&ndarray::Array1::from(m));
        sd.column_mut(j).assign(&ndarray::Array1::from(s));
    }
    Prediction {
        unit_names,
        mean,
        sd,
    }
}
