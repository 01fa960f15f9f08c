//! Empirical-Bayes ComBat harmonization: per-unit location/scale batch
//! adjustment that keeps a linear design `g(X) = α + Xβ`.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BatchIndex, DataError, Dataset};
use crate::math::{mean, variance};

pub const EB_TOLERANCE: f64 = 1e-4;
pub const EB_MAX_ITER: usize = 100;

#[derive(Debug, Error)]
pub enum CombatError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("design covariate `{0}` not present in the data")]
    UnknownCovariate(String),
    #[error("batch `{batch}` has {rows} rows; ComBat needs at least 2 per batch")]
    SmallBatch { batch: String, rows: usize },
    #[error("design matrix with batch indicators is rank deficient (rank {rank} of {cols})")]
    RankDeficient { rank: usize, cols: usize },
    #[error("batch `{0}` was not seen when fitting ComBat; unseen sites need hyperprior transfer (distill + recalibrate)")]
    UnknownBatch(String),
    #[error("response column `{0}` missing from the data")]
    MissingUnit(String),
}

/// Fitted adjustment of one response unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombatUnit {
    pub alpha: f64,
    /// Coefficients of the standardized design covariates.
    pub beta: Vec<f64>,
    /// Pooled residual sd.
    pub sigma: f64,
    pub gamma_hat: Vec<f64>,
    pub delta2_hat: Vec<f64>,
    pub gamma_star: Vec<f64>,
    pub delta_star: Vec<f64>,
    pub gamma_bar: f64,
    pub tau2: f64,
    /// Inverse-gamma `(shape, scale)` of the δ² prior; `None` when the
    /// batch variances do not vary and δ² is set to their mean.
    pub delta_prior: Option<(f64, f64)>,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombatModel {
    pub batches: BatchIndex,
    pub design: Vec<String>,
    pub design_mean: Vec<f64>,
    pub design_sd: Vec<f64>,
    pub unit_names: Vec<String>,
    pub units: Vec<CombatUnit>,
}

impl CombatModel {
    /// True when there was no batch contrast to remove.
    pub fn is_identity(&self) -> bool {
        self.batches.len() < 2
    }
}

fn design_columns(ds: &Dataset, design: &[String]) -> Result<Vec<usize>, CombatError> {
    design
        .iter()
        .map(|d| {
            ds.covariate_names()
                .iter()
                .position(|c| c == d)
                .ok_or_else(|| CombatError::UnknownCovariate(d.clone()))
        })
        .collect()
}

/// Standardized design covariates, row-major `n × q`.
fn design_matrix(ds: &Dataset, cols: &[usize], mean: &[f64], sd: &[f64]) -> Vec<Vec<f64>> {
    (0..ds.n_rows())
        .map(|r| {
            cols.iter()
                .enumerate()
                .map(|(j, &c)| (ds.covariates()[[r, c]] - mean[j]) / sd[j])
                .collect()
        })
        .collect()
}

/// Method-of-moments inverse-gamma `(shape, scale)` for sample mean `m` and variance `v`.
fn inverse_gamma_moments(m: f64, v: f64) -> (f64, f64) {
    ((2.0 * v + m * m) / v, (m * v + m * m * m) / v)
}

/// Fit ComBat on every response unit of `ds`, preserving the listed covariates.
pub fn combat_fit(ds: &Dataset, design: &[String]) -> Result<CombatModel, CombatError> {
    let batches = ds.batch_index();
    let cols = design_columns(ds, design)?;
    let mut design_mean = Vec::new();
    let mut design_sd = Vec::new();
    for &c in &cols {
        let col = ds.covariates().column(c).to_vec();
        let sd = variance(&col, 0).sqrt();
        if !(sd > 0.0) {
            return Err(DataError::ConstantColumn(ds.covariate_names()[c].clone()).into());
        }
        design_mean.push(mean(&col));
        design_sd.push(sd);
    }
    let unit_names = ds.response_names().to_vec();
    if batches.len() < 2 {
        let units = (0..ds.n_units())
            .map(|_| CombatUnit {
                alpha: 0.0,
                beta: vec![0.0; cols.len()],
                sigma: 1.0,
                gamma_hat: vec![0.0],
                delta2_hat: vec![1.0],
                gamma_star: vec![0.0],
                delta_star: vec![1.0],
                gamma_bar: 0.0,
                tau2: 0.0,
                delta_prior: None,
                iterations: 0,
            })
            .collect();
        return Ok(CombatModel {
            batches,
            design: design.to_vec(),
            design_mean,
            design_sd,
            unit_names,
            units,
        });
    }
    for (b, &n) in batches.counts().iter().enumerate() {
        if n < 2 {
            return Err(CombatError::SmallBatch {
                batch: batches.labels()[b].to_string(),
                rows: n,
            });
        }
    }
    let batch_of = batches.assign(ds.batch_labels())?;
    let z = design_matrix(ds, &cols, &design_mean, &design_sd);
    let (n, m, q) = (ds.n_rows(), batches.len(), cols.len());
    let x = DMatrix::from_fn(n, m + q, |r, c| {
        if c < m {
            (batch_of[r] == c) as u8 as f64
        } else {
            z[r][c - m]
        }
    });
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-10 * smax)
        .count();
    if rank < m + q {
        return Err(CombatError::RankDeficient { rank, cols: m + q });
    }
    let units = (0..ds.n_units())
        .map(|u| {
            let y = DVector::from_iterator(n, ds.responses().column(u).iter().copied());
            let coef = svd.solve(&y, 1e-12).expect("full-rank solve");
            fit_unit(&x, &y, &coef, &batch_of, batches.counts(), q)
        })
        .collect();
    Ok(CombatModel {
        batches,
        design: design.to_vec(),
        design_mean,
        design_sd,
        unit_names,
        units,
    })
}

fn fit_unit(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    coef: &DVector<f64>,
    batch_of: &[usize],
    counts: &[usize],
    q: usize,
) -> CombatUnit {
    let (n, m) = (y.len(), counts.len());
    let alpha: f64 = (0..m).map(|b| counts[b] as f64 / n as f64 * coef[b]).sum();
    let beta: Vec<f64> = (0..q).map(|j| coef[m + j]).collect();
    let resid = y - x * coef;
    let sigma = (resid.iter().map(|r| r * r).sum::<f64>() / n as f64).sqrt();
    let stand_mean = |r: usize| alpha + (0..q).map(|j| x[(r, m + j)] * beta[j]).sum::<f64>();
    let mut per_batch: Vec<Vec<f64>> = vec![Vec::new(); m];
    for r in 0..n {
        per_batch[batch_of[r]].push((y[r] - stand_mean(r)) / sigma);
    }
    let gamma_hat: Vec<f64> = per_batch.iter().map(|s| mean(s)).collect();
    let delta2_hat: Vec<f64> = per_batch.iter().map(|s| variance(s, 1)).collect();
    let gamma_bar = mean(&gamma_hat);
    let tau2 = variance(&gamma_hat, 1);
    let (d_mean, d_var) = (mean(&delta2_hat), variance(&delta2_hat, 1));
    let delta_prior = (d_var > 0.0).then(|| inverse_gamma_moments(d_mean, d_var));

    let mut gamma_star = gamma_hat.clone();
    let mut delta2 = delta2_hat.clone();
    let mut iterations = 0;
    for (b, s) in per_batch.iter().enumerate() {
        let nb = s.len() as f64;
        let (mut g_old, mut d_old) = (gamma_hat[b], delta2_hat[b]);
        for it in 1..=EB_MAX_ITER {
            let g_new = if tau2 > 0.0 {
                (nb * tau2 * gamma_hat[b] + d_old * gamma_bar) / (nb * tau2 + d_old)
            } else {
                gamma_bar
            };
            let d_new = if let Some((lambda, theta)) = delta_prior {
                let ss: f64 = s.iter().map(|v| (v - g_new) * (v - g_new)).sum();
                (theta + 0.5 * ss) / (nb / 2.0 + lambda - 1.0)
            } else {
                d_mean
            };
            let change = ((g_new - g_old).abs() / g_old.abs()).max((d_new - d_old).abs() / d_old);
            g_old = g_new;
            d_old = d_new;
            iterations = iterations.max(it);
            if !(change >= EB_TOLERANCE) {
                break;
            }
        }
        gamma_star[b] = g_old;
        delta2[b] = d_old;
    }
    CombatUnit {
        alpha,
        beta,
        sigma,
        gamma_hat,
        delta2_hat,
        gamma_star,
        delta_star: delta2.iter().map(|d| d.sqrt()).collect(),
        gamma_bar,
        tau2,
        delta_prior,
        iterations,
    }
}

/// Harmonized copy of `ds`: `ỹ = σ̂·(s − γ*)/δ* + g(X)` with `s` the
/// standardized residual of `y` about `g(X)`.
pub fn combat_apply(model: &CombatModel, ds: &Dataset) -> Result<Dataset, CombatError> {
    let unit_cols: Vec<usize> = model
        .unit_names
        .iter()
        .map(|u| {
            ds.response_names()
                .iter()
                .position(|r| r == u)
                .ok_or_else(|| CombatError::MissingUnit(u.clone()))
        })
        .collect::<Result<_, _>>()?;
    if model.is_identity() {
        return Ok(ds.clone());
    }
    let batch_of: Vec<usize> = ds
        .batch_labels()
        .iter()
        .map(|l| {
            model
                .batches
                .get(l)
                .ok_or_else(|| CombatError::UnknownBatch(l.to_string()))
        })
        .collect::<Result<_, _>>()?;
    let cols = design_columns(ds, &model.design)?;
    let z = design_matrix(ds, &cols, &model.design_mean, &model.design_sd);
    let mut out: Array2<f64> = ds.responses().clone();
    for (unit, &c) in model.units.iter().zip(&unit_cols) {
        for r in 0..ds.n_rows() {
            let g = unit.alpha + z[r].iter().zip(&unit.beta).map(|(a, b)| a * b).sum::<f64>();
            let b = batch_of[r];
            let s = (ds.responses()[[r, c]] - g) / unit.sigma;
            out[[r, c]] = unit.sigma * (s - unit.gamma_star[b]) / unit.delta_star[b] + g;
        }
    }
    Ok(ds.with_responses(out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BatchLabel, Group};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn two_batch(n: usize, seed: u64, shift: f64, scale: f64) -> Dataset {
        // Both batches share one residual vector, standardized to mean 0 and sd 1.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (m, sd) = (mean(&raw), variance(&raw, 0).sqrt());
        let eps: Vec<f64> = raw.iter().map(|e| (e - m) / sd).collect();
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut labels = Vec::new();
        for b in 0..2 {
            for (i, &e) in eps.iter().enumerate() {
                let age = 20.0 + 50.0 * (i as f64 + 0.5) / n as f64;
                let (sh, sc) = if b == 1 { (shift, scale) } else { (0.0, 1.0) };
                x.push(age);
                y.push(2.0 * age + sh + sc * e);
                labels.push(BatchLabel(vec![format!("b{b}")]));
            }
        }
        let rows = y.len();
        Dataset::new(
            vec!["age".into()],
            vec!["y".into()],
            vec!["site".into()],
            Array2::from_shape_vec((rows, 1), x).unwrap(),
            Array2::from_shape_vec((rows, 1), y).unwrap(),
            labels,
            (0..rows).map(|i| i.to_string()).collect(),
            vec![Group::Healthy; rows],
        )
        .unwrap()
    }

    #[test]
    fn single_batch_is_identity() {
        let ds = two_batch(30, 1, 1.0, 2.0);
        let one = ds.subset(&(0..30).collect::<Vec<_>>());
        let model = combat_fit(&one, &["age".into()]).unwrap();
        assert!(model.is_identity());
        assert_eq!(model.units[0].gamma_star, vec![0.0]);
        assert_eq!(model.units[0].delta_star, vec![1.0]);
        let out = combat_apply(&model, &one).unwrap();
        assert!(out
            .responses()
            .iter()
            .zip(one.responses())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn recovers_shift_and_scale() {
        let ds = two_batch(500, 2, 1.0, 2.0);
        let model = combat_fit(&ds, &["age".into()]).unwrap();
        let u = &model.units[0];
        let shift = (u.gamma_star[1] - u.gamma_star[0]) * u.sigma;
        assert!((shift - 1.0).abs() < 0.05, "shift {shift}");
        let ratio = u.delta_star[1] / u.delta_star[0];
        assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn unknown_batch_points_to_transfer() {
        let ds = two_batch(20, 3, 1.0, 1.0);
        let model = combat_fit(&ds, &["age".into()]).unwrap();
        let mut other = two_batch(20, 4, 0.0, 1.0);
        let labels: Vec<BatchLabel> = other
            .batch_labels()
            .iter()
            .map(|_| BatchLabel(vec!["new".into()]))
            .collect();
        other = Dataset::new(
            other.covariate_names().to_vec(),
            other.response_names().to_vec(),
            other.batch_names().to_vec(),
            other.covariates().clone(),
            other.responses().clone(),
            labels,
            other.subject_ids().to_vec(),
            other.groups().to_vec(),
        )
        .unwrap();
        let err = combat_apply(&model, &other).unwrap_err();
        assert!(err.to_string().contains("recalibrate"));
    }

    #[test]
    fn rank_deficiency_is_reported() {
        // A covariate that equals the batch indicator.
        let ds = two_batch(10, 5, 1.0, 1.0);
        let x = Array2::from_shape_fn((20, 1), |(r, _)| (r >= 10) as u8 as f64);
        let ds = Dataset::new(
            ds.covariate_names().to_vec(),
            ds.response_names().to_vec(),
            ds.batch_names().to_vec(),
            x,
            ds.responses().clone(),
            ds.batch_labels().to_vec(),
            ds.subject_ids().to_vec(),
            ds.groups().to_vec(),
        )
        .unwrap();
        assert!(matches!(
            combat_fit(&ds, &["age".into()]),
            Err(CombatError::RankDeficient { .. })
        ));
    }
}
