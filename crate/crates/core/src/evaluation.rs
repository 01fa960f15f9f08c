//! Regression metrics, the residual site-effect probe and anomaly-detection
//! AUC with permutation significance.

use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};
use thiserror::Error;

use crate::data::Standardizer;
use crate::math::{derive_seed, median, normal_logpdf};

pub const DEFAULT_PERMUTATIONS: usize = 1000;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_REPETITIONS: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("predictive sd must be positive and finite")]
    BadSd,
    #[error("site probe needs at least 2 batches with at least {min} rows each and {folds} folds: {reason}")]
    Folds {
        min: usize,
        folds: usize,
        reason: String,
    },
    #[error("anomaly detection needs at least 3 healthy and 3 patient rows (got {healthy} and {patients})")]
    GroupSize { healthy: usize, patients: usize },
    #[error("at least 100 permutations are required (got {0})")]
    Permutations(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa > 0.0 && sbb > 0.0 {
        Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
    } else {
        None
    }
}

/// Mean squared error divided by the training variance `s2`.
pub fn smse(y: ArrayView1<f64>, mu: ArrayView1<f64>, s2: f64) -> f64 {
    y.iter()
        .zip(mu)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y.len() as f64
        / s2
}

/// Mean of `−log N(y | μ̂, σ̂²) + log N(y | ȳ, s²)`; negative is better than
/// the trivial training-moment predictor.
pub fn msll(
    y: ArrayView1<f64>,
    mu: ArrayView1<f64>,
    sd: ArrayView1<f64>,
    y_bar: f64,
    s2: f64,
) -> f64 {
    let s = s2.sqrt();
    let total: f64 = y
        .iter()
        .zip(mu)
        .zip(sd)
        .map(|((&y, &m), &sd)| -normal_logpdf(y, m, sd) + normal_logpdf(y, y_bar, s))
        .sum();
    total / y.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitMetrics {
    pub unit: String,
    pub rho: Option<f64>,
    pub smse: f64,
    pub msll: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub units: Vec<UnitMetrics>,
    pub median_rho: Option<f64>,
    pub median_smse: f64,
    pub median_msll: f64,
}

impl MetricReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["unit", "rho", "smse", "msll"])?;
        for u in &self.units {
            let rho = u.rho.map_or(String::new(), |r| r.to_string());
            out.write_record([u.unit.clone(), rho, u.smse.to_string(), u.msll.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-unit RHO, SMSE and MSLL. `standardizer` supplies the training mean
/// and variance of each column of `y_test`.
pub fn regression_metrics(
    unit_names: &[String],
    mean: ArrayView2<f64>,
    sd: ArrayView2<f64>,
    y_test: ArrayView2<f64>,
    standardizer: &Standardizer,
) -> Result<MetricReport, EvalError> {
    if mean.dim() != y_test.dim() || sd.dim() != y_test.dim() || unit_names.len() != y_test.ncols()
    {
        return Err(EvalError::Shape(
            "predictions, sds and targets must share a shape".into(),
        ));
    }
    if standardizer.response_mean.len() != y_test.ncols() {
        return Err(EvalError::Shape(
            "standardizer covers a different number of units".into(),
        ));
    }
    if sd.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(EvalError::BadSd);
    }
    let units: Vec<UnitMetrics> = (0..y_test.ncols())
        .map(|j| {
            let (y, m, s) = (y_test.column(j), mean.column(j), sd.column(j));
            let s2 = standardizer.response_var[j];
            UnitMetrics {
                unit: unit_names[j].clone(),
                rho: pearson(m, y),
                smse: smse(y, m, s2),
                msll: msll(y, m, s, standardizer.response_mean[j], s2),
            }
        })
        .collect();
    let rhos: Vec<f64> = units.iter().filter_map(|u| u.rho).collect();
    Ok(MetricReport {
        median_rho: (!rhos.is_empty()).then(|| median(&rhos)),
        median_smse: median(&units.iter().map(|u| u.smse).collect::<Vec<_>>()),
        median_msll: median(&units.iter().map(|u| u.msll).collect::<Vec<_>>()),
        units,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub balanced_accuracy: f64,
    pub chance: f64,
    pub classes: usize,
    pub rows: usize,
    /// Binomial standard error of an accuracy at chance level.
    pub chance_se: f64,
    /// One-sided binomial p-value of the accuracy against chance.
    pub p_value: f64,
}

impl ProbeResult {
    pub fn at_chance(&self) -> bool {
        (self.balanced_accuracy - self.chance).abs() <= 2.0 * self.chance_se
    }
}

/// Linear one-vs-all hinge-loss classifier (Pegasos subgradient descent).
struct LinearOva {
    weights: Vec<Vec<f64>>,
}

impl LinearOva {
    const LAMBDA: f64 = 1e-3;
    const EPOCHS: usize = 30;

    fn train(x: &[Vec<f64>], y: &[usize], classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = x[0].len() + 1;
        let mut weights = vec![vec![0.0; d]; classes];
        let mut order: Vec<usize> = (0..x.len()).collect();
        for (c, w) in weights.iter_mut().enumerate() {
            let mut t = 0.0;
            for _ in 0..Self::EPOCHS {
                order.shuffle(rng);
                for &i in &order {
                    t += 1.0;
                    let eta = 1.0 / (Self::LAMBDA * t);
                    let label = if y[i] == c { 1.0 } else { -1.0 };
                    let margin = label
                        * (w[d - 1] + x[i].iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>());
                    for v in w[..d - 1].iter_mut() {
                        *v *= 1.0 - eta * Self::LAMBDA;
                    }
                    if margin < 1.0 {
                        for (v, xi) in w.iter_mut().zip(&x[i]) {
                            *v += eta * label * xi;
                        }
                        w[d - 1] += eta * label;
                    }
                }
            }
        }
        LinearOva { weights }
    }

    fn predict(&self, x: &[f64]) -> usize {
        let d = x.len();
        let score = |w: &Vec<f64>| w[d] + x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        (0..self.weights.len())
            .max_by(|&a, &b| score(&self.weights[a]).total_cmp(&score(&self.weights[b])))
            .unwrap_or(0)
    }
}

/// Cross-validated balanced accuracy of predicting the batch of each row from
/// its deviation vector (`z`, rows × units).
pub fn site_probe(
    z: ArrayView2<f64>,
    batches: &[usize],
    folds: usize,
    seed: u64,
) -> Result<ProbeResult, EvalError> {
    if z.nrows() != batches.len() {
        return Err(EvalError::Shape("one batch per row is required".into()));
    }
    let classes = batches.iter().max().map_or(0, |m| m + 1);
    let min_rows = folds.max(5);
    let fold_err = |reason: String| EvalError::Folds {
        min: min_rows,
        folds,
        reason,
    };
    if classes < 2 || folds < 2 {
        return Err(fold_err(format!("{classes} classes, {folds} folds")));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (r, &b) in batches.iter().enumerate() {
        members[b].push(r);
    }
    if let Some((c, m)) = members.iter().enumerate().find(|(_, m)| m.len() < min_rows) {
        return Err(fold_err(format!("class {c} has {} rows", m.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0; z.nrows()];
    for m in members.iter_mut() {
        m.shuffle(&mut rng);
        for (i, &r) in m.iter().enumerate() {
            fold_of[r] = i % folds;
        }
    }
    let rows: Vec<Vec<f64>> = z.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut correct = vec![0usize; classes];
    for f in 0..folds {
        let train: Vec<usize> = (0..rows.len()).filter(|&r| fold_of[r] != f).collect();
        let tx: Vec<Vec<f64>> = train.iter().map(|&r| rows[r].clone()).collect();
        let ty: Vec<usize> = train.iter().map(|&r| batches[r]).collect();
        let clf = LinearOva::train(&tx, &ty, classes, &mut rng);
        for r in (0..rows.len()).filter(|&r| fold_of[r] == f) {
            if clf.predict(&rows[r]) == batches[r] {
                correct[batches[r]] += 1;
            }
        }
    }
    let balanced_accuracy = (0..classes)
        .map(|c| correct[c] as f64 / members[c].len() as f64)
        .sum::<f64>()
        / classes as f64;
    let n = rows.len();
    let chance = 1.0 / classes as f64;
    let successes = (balanced_accuracy * n as f64).round() as u64;
    let binom = Binomial::new(chance, n as u64).expect("valid binomial");
    let p_value = if successes == 0 {
        1.0
    } else {
        binom.sf(successes - 1)
    };
    Ok(ProbeResult {
        balanced_accuracy,
        chance,
        classes,
        rows: n,
        chance_se: (chance * (1.0 - chance) / n as f64).sqrt(),
        p_value,
    })
}

/// Score used to separate patients from healthy rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discriminant {
    /// `|z|`: two-sided abnormality.
    #[default]
    Absolute,
    /// `z`: patients expected above healthy.
    Positive,
    /// `−z`: patients expected below healthy.
    Negative,
}

impl Discriminant {
    pub fn score(self, z: f64) -> f64 {
        match self {
            Discriminant::Absolute => z.abs(),
            Discriminant::Positive => z,
            Discriminant::Negative => -z,
        }
    }
}

/// Mid-ranks (1-based) of `xs`, ties averaged.
fn midranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn auc_from_ranks(ranks: &[f64], positive: impl Iterator<Item = usize>, n_pos: usize) -> f64 {
    let n_neg = ranks.len() - n_pos;
    let rank_sum: f64 = positive.map(|i| ranks[i]).sum();
    (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64
}

/// ROC AUC for patient scores above healthy scores (Mann–Whitney, ties count ½).
pub fn auc(healthy: &[f64], patients: &[f64]) -> f64 {
    let pooled: Vec<f64> = healthy.iter().chain(patients).copied().collect();
    let ranks = midranks(&pooled);
    auc_from_ranks(&ranks, healthy.len()..pooled.len(), patients.len())
}

/// AUC and its label-permutation p-value `(1 + #{AUC_perm ≥ AUC}) / (1 + n_perm)`.
pub fn permutation_test(
    healthy: &[f64],
    patients: &[f64],
    n_perm: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    let pooled: Vec<f64> = healthy.iter().chain(patients).copied().collect();
    let ranks = midranks(&pooled);
    let n_pos = patients.len();
    let observed = auc_from_ranks(&ranks, healthy.len()..pooled.len(), n_pos);
    let mut perm: Vec<usize> = (0..pooled.len()).collect();
    let mut exceed = 0;
    for _ in 0..n_perm {
        let (chosen, _) = perm.partial_shuffle(rng, n_pos);
        if auc_from_ranks(&ranks, chosen.iter().copied(), n_pos) >= observed - 1e-12 {
            exceed += 1;
        }
    }
    (observed, (1 + exceed) as f64 / (1 + n_perm) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitAnomaly {
    pub unit: String,
    pub diagnosis: String,
    /// AUC per repetition.
    pub auc: Vec<f64>,
    pub p_value: Vec<f64>,
    pub significant_reps: usize,
    pub stable: bool,
    /// Sign of mean patient z minus mean healthy z, pooled over repetitions.
    pub direction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub n_perm: usize,
    pub alpha: f64,
    pub repetitions: usize,
    pub discriminant: Discriminant,
    pub units: Vec<UnitAnomaly>,
}

impl AnomalyReport {
    pub fn stable_units(&self) -> Vec<&str> {
        self.units
            .iter()
            .filter(|u| u.stable)
            .map(|u| u.unit.as_str())
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "unit",
            "diagnosis",
            "median_auc",
            "max_p",
            "significant_reps",
            "stable",
            "direction",
        ])?;
        for u in &self.units {
            out.write_record([
                u.unit.clone(),
                u.diagnosis.clone(),
                median(&u.auc).to_string(),
                u.p_value.iter().copied().fold(0.0, f64::max).to_string(),
                u.significant_reps.to_string(),
                u.stable.to_string(),
                u.direction.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Deviations of one repetition: healthy and patient z-scores (rows × units).
#[derive(Clone, Debug)]
pub struct RepetitionDeviations {
    pub healthy: Array2<f64>,
    pub patients: Array2<f64>,
}

/// Per-unit AUC, permutation p-values and stability across repetitions. A
/// unit is stable iff `p < alpha` in every repetition.
pub fn anomaly_auc(
    unit_names: &[String],
    diagnosis: &str,
    reps: &[RepetitionDeviations],
    n_perm: usize,
    alpha: f64,
    discriminant: Discriminant,
    seed: u64,
) -> Result<AnomalyReport, EvalError> {
    if n_perm < 100 {
        return Err(EvalError::Permutations(n_perm));
    }
    for r in reps {
        if r.healthy.nrows() < 3 || r.patients.nrows() < 3 {
            return Err(EvalError::GroupSize {
                healthy: r.healthy.nrows(),
                patients: r.patients.nrows(),
            });
        }
        if r.healthy.ncols() != unit_names.len() || r.patients.ncols() != unit_names.len() {
            return Err(EvalError::Shape(
                "deviation columns must match the unit list".into(),
            ));
        }
    }
    let units = unit_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mut aucs = Vec::new();
            let mut ps = Vec::new();
            let mut diff = 0.0;
            for (k, r) in reps.iter().enumerate() {
                let h: Vec<f64> = r
                    .healthy
                    .column(j)
                    .iter()
                    .map(|&z| discriminant.score(z))
                    .collect();
                let p: Vec<f64> = r
                    .patients
                    .column(j)
                    .iter()
                    .map(|&z| discriminant.score(z))
                    .collect();
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(seed, (k * unit_names.len() + j) as u64));
                let (a, pv) = permutation_test(&h, &p, n_perm, &mut rng);
                aucs.push(a);
                ps.push(pv);
                diff += r.patients.column(j).mean().unwrap_or(0.0)
                    - r.healthy.column(j).mean().unwrap_or(0.0);
            }
            let significant_reps = ps.iter().filter(|&&p| p < alpha).count();
            UnitAnomaly {
                unit: name.clone(),
                diagnosis: diagnosis.to_string(),
                auc: aucs,
                p_value: ps,
                significant_reps,
                stable: !reps.is_empty() && significant_reps == reps.len(),
                direction: diff.signum(),
            }
        })
        .collect();
    Ok(AnomalyReport {
        n_perm,
        alpha,
        repetitions: reps.len(),
        discriminant,
        units,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_predictions() {
        let y = array![[1.0], [2.0], [3.5], [0.2]];
        let sd = Array2::from_elem((4, 1), 0.3);
        let st = Standardizer {
            covariate_mean: vec![],
            covariate_sd: vec![],
            response_mean: vec![1.5],
            response_var: vec![1.2],
        };
        let r = regression_metrics(&["u".into()], y.view(), sd.view(), y.view(), &st).unwrap();
        assert_eq!(r.units[0].smse, 0.0);
        assert!((r.units[0].rho.unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn trivial_predictor_has_unit_smse_and_zero_msll() {
        let y = array![[1.0], [2.0], [3.0], [4.0]];
        let (m, v) = (2.5, 1.25);
        let st = Standardizer {
            covariate_mean: vec![],
            covariate_sd: vec![],
            response_mean: vec![m],
            response_var: vec![v],
        };
        let mean = Array2::from_elem((4, 1), m);
        let sd = Array2::from_elem((4, 1), v.sqrt());
        let r = regression_metrics(&["u".into()], mean.view(), sd.view(), y.view(), &st).unwrap();
        assert!((r.units[0].smse - 1.0).abs() < 1e-12);
        assert!(r.units[0].msll.abs() < 1e-12);
        assert_eq!(r.units[0].rho, None);
    }

    #[test]
    fn auc_basics() {
        assert_eq!(auc(&[0.1, 0.2], &[0.3, 0.4]), 1.0);
        assert_eq!(auc(&[0.3, 0.4], &[0.1, 0.2]), 0.0);
        assert_eq!(auc(&[1.0, 1.0], &[1.0]), 0.5);
        // oracle: count pairs
        let h = [0.2, 1.4, 0.9, 0.9, 2.2];
        let p = [0.9, 1.8, 0.1];
        let mut pairs = 0.0;
        for a in &p {
            for b in &h {
                pairs += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        assert!((auc(&h, &p) - pairs / 15.0).abs() < 1e-15);
    }

    #[test]
    fn permutation_p_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, p) = permutation_test(&[0.0, 0.1, 0.2, 0.3], &[5.0, 6.0, 7.0], 200, &mut rng);
        assert_eq!(a, 1.0);
        assert!(p > 0.0 && p <= 1.0 && p < 0.05);
    }

    #[test]
    fn anomaly_input_validation() {
        let rep = RepetitionDeviations {
            healthy: Array2::zeros((2, 1)),
            patients: Array2::zeros((5, 1)),
        };
        let err = anomaly_auc(
            &["u".into()],
            "ad",
            &[rep],
            1000,
            0.05,
            Discriminant::Absolute,
            0,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            EvalError::GroupSize {
                healthy: 2,
                patients: 5
            }
        ));
        let rep = RepetitionDeviations {
            healthy: Array2::zeros((5, 1)),
            patients: Array2::zeros((5, 1)),
        };
        assert!(matches!(
            anomaly_auc(
                &["u".into()],
                "ad",
                &[rep],
                50,
                0.05,
                Discriminant::Absolute,
                0
            ),
            Err(EvalError::Permutations(50))
        ));
    }
}
