//! Scaled-down synthetic versions of the evaluation experiments. Each one
//! returns an outcome that knows whether its acceptance condition holds and
//! renders a one-line summary. Used by the `repro` command and the
//! acceptance tests.

use std::fmt;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::archive::{model_from_bytes, model_to_bytes};
use crate::combat::{combat_apply, combat_fit};
use crate::data::{split, BatchLabel, Dataset, Group, Standardizer};
use crate::error::Result;
use crate::evaluation::{
    anomaly_auc, regression_metrics, site_probe, AnomalyReport, Discriminant, ProbeResult,
    RepetitionDeviations, DEFAULT_ALPHA, DEFAULT_PERMUTATIONS, DEFAULT_REPETITIONS,
};
use crate::inference::{
    finite_difference_gradient, sample_nuts, LogDensity, NormalMean, SamplerConfig,
};
use crate::math::{derive_seed, mean, variance};
use crate::models::{
    build_density, fit, FittedNormativeModel, ModelSpec, NoiseForm, Prediction, Strategy,
};
use crate::synth::{generate, GenConfig, Hetero, Hyper, PatientSpec};
use crate::transfer::{distill, predict_priors_only, recalibrate};

fn budget(warmup: usize, draws: usize, seed: u64) -> SamplerConfig {
    SamplerConfig::default()
        .with_budget(warmup, draws)
        .with_seed(seed)
}

fn hbr(noise: NoiseForm) -> ModelSpec {
    ModelSpec::new(Strategy::Hbr).with_noise(noise)
}

/// Median over units of the MSLL of `pred` on `test`, against the trivial
/// predictor built from `baseline`.
pub fn median_msll(pred: &Prediction, test: &Dataset, baseline: &Standardizer) -> Result<f64> {
    let report = regression_metrics(
        &pred.unit_names,
        pred.mean.view(),
        pred.sd.view(),
        test.responses().view(),
        baseline,
    )?;
    Ok(report.median_msll)
}

fn site_indices(ds: &Dataset) -> Result<Vec<usize>> {
    Ok(ds.batch_index().assign(ds.batch_labels())?)
}

fn yes(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

// ---------------------------------------------------------------------------
// 1. conjugate normal-mean posterior

#[derive(Clone, Debug, Serialize)]
pub struct ConjugateOutcome {
    pub exact_mean: f64,
    pub exact_var: f64,
    pub sample_mean: f64,
    pub sample_var: f64,
    pub mcse_mean: f64,
    pub mcse_var: f64,
    pub r_hat: f64,
    pub seconds: f64,
}

impl ConjugateOutcome {
    pub fn passed(&self) -> bool {
        (self.sample_mean - self.exact_mean).abs() < 3.0 * self.mcse_mean
            && (self.sample_var - self.exact_var).abs() < 3.0 * self.mcse_var
            && self.r_hat < 1.01
            && self.seconds < 10.0
    }
}

impl fmt::Display for ConjugateOutcome {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(
            f,
            "mean {:.4} vs {:.4} (3 MCSE = {:.4}), var {:.5} vs {:.5} (3 MCSE = {:.5}), R-hat {:.4}, {:.2} s",
            self.sample_mean,
            self.exact_mean,
            3.0 * self.mcse_mean,
            self.sample_var,
            self.exact_var,
            3.0 * self.mcse_var,
            self.r_hat,
            self.seconds
        )
    }
}

pub fn conjugate(seed: u64) -> Result<ConjugateOutcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(1.3, 2.0).expect("valid normal");
    let data: Vec<f64> = (0..20).map(|_| noise.sample(&mut rng)).collect();
    let target = NormalMean::new(data, 2.0, 0.0, 1.5);
    let (exact_mean, exact_var) = target.posterior();
    let draws = sample_nuts::<f64, _>(&target, &budget(1000, 1000, seed).with_chains(4))?;
    let xs: Vec<f64> = draws.iter().map(|d| d[0]).collect();
    let ess = draws.diagnostics.ess_bulk[0];
    let (sample_mean, sample_var) = (mean(&xs), variance(&xs, 1));
    Ok(ConjugateOutcome {
        exact_mean,
        exact_var,
        sample_mean,
        sample_var,
        mcse_mean: (sample_var / ess).sqrt(),
        // Var(s²) ≈ 2σ⁴/ESS for a Gaussian target.
        mcse_var: sample_var * (2.0 / ess).sqrt(),
        r_hat: draws.diagnostics.r_hat[0],
        seconds: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// 2. analytic vs finite-difference gradients

#[derive(Clone, Debug, Serialize)]
pub struct GradientOutcome {
    /// `(model label, worst relative error over all points and coordinates)`.
    pub models: Vec<(String, f64)>,
    pub points: usize,
    pub seconds: f64,
}

impl GradientOutcome {
    pub fn max_error(&self) -> f64 {
        self.models.iter().map(|m| m.1).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() < 1e-5 && self.seconds < 5.0
    }
}

impl fmt::Display for GradientOutcome {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        let parts: Vec<String> = self
            .models
            .iter()
            .map(|(m, e)| format!("{m} {e:.1e}"))
            .collect();
        write!(
            f,
            "{} points each: {}; {:.2} s",
            self.points,
            parts.join(", "),
            self.seconds
        )
    }
}

/// Relative error `|a − f| / max(|a|, 1)`: relative for large gradients,
/// absolute near zero.
pub fn gradient_error(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub fn gradients(seed: u64) -> Result<GradientOutcome> {
    let start = Instant::now();
    let cfg = GenConfig {
        sites: 3,
        rows_per_site: vec![6],
        units: 1,
        ..GenConfig::default()
    };
    let (ds, _) = generate(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = 20;
    let mut models = Vec::new();
    for strategy in [Strategy::Pooling, Strategy::NoPooling, Strategy::Hbr] {
        for noise in [NoiseForm::Homoscedastic, NoiseForm::Heteroscedastic(2)] {
            let spec = ModelSpec::new(strategy).with_noise(noise);
            let density = build_density(&spec, &ds, 0)?;
            let dim = LogDensity::<f64>::dim(&density);
            let mut worst: f64 = 0.0;
            let mut grad = vec![0.0; dim];
            for _ in 0..points {
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.75..0.75)).collect();
                density.logp_and_grad(&x, &mut grad)?;
                let fd = finite_difference_gradient(&density, &x, 1e-5)?;
                worst = worst.max(gradient_error(&grad, &fd));
            }
            models.push((format!("{strategy}/{noise}"), worst));
        }
    }
    Ok(GradientOutcome {
        models,
        points,
        seconds: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// 3. hyper-mean recovery

#[derive(Clone, Debug, Serialize)]
pub struct RecoverySeed {
    pub seed: u64,
    /// `(posterior mean, posterior sd, truth)` of the raw-scale intercept and slope hyper-means.
    pub intercept: (f64, f64, f64),
    pub slope: (f64, f64, f64),
}

impl RecoverySeed {
    pub fn covered(&self) -> bool {
        [self.intercept, self.slope]
            .iter()
            .all(|&(m, s, t)| (m - t).abs() <= 3.0 * s)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RecoveryOutcome {
    pub seeds: Vec<RecoverySeed>,
    pub required: usize,
    pub seconds: f64,
}

impl RecoveryOutcome {
    pub fn covered(&self) -> usize {
        self.seeds.iter().filter(|s| s.covered()).count()
    }

    pub fn passed(&self) -> bool {
        self.covered() >= self.required && self.seconds < 300.0
    }
}

impl fmt::Display for RecoveryOutcome {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(
            f,
            "hyper-means within 3 sd in {}/{} seeds; {:.1} s",
            self.covered(),
            self.seeds.len(),
            self.seconds
        )
    }
}

pub fn recovery(seeds: &[u64]) -> Result<RecoveryOutcome> {
    let start = Instant::now();
    let cfg = GenConfig {
        sites: 10,
        rows_per_site: vec![100],
        units: 1,
        ..GenConfig::default()
    };
    let mut out = Vec::new();
    for &seed in seeds {
        let (ds, _) = generate(&cfg, seed)?;
        let model = fit(
            &hbr(NoiseForm::Homoscedastic),
            &ds,
            &budget(1000, 1000, seed),
        )?;
        let draws = model.hyper_mean_draws(0).expect("hbr model");
        let raw: Vec<Vec<f64>> = draws
            .iter()
            .map(|d| model.raw_linear(0, d).expect("linear mean"))
            .collect();
        let summary = |j: usize, truth: f64| {
            let xs: Vec<f64> = raw.iter().map(|r| r[j]).collect();
            (mean(&xs), variance(&xs, 1).sqrt(), truth)
        };
        out.push(RecoverySeed {
            seed,
            intercept: summary(0, cfg.intercept.mean),
            slope: summary(1, cfg.slope.mean),
        });
    }
    let required = (seeds.len() * 9).div_ceil(10);
    Ok(RecoveryOutcome {
        seeds: out,
        required,
        seconds: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// 4. z-score calibration

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationOutcome {
    pub n_test: usize,
    pub z_mean: f64,
    pub z_sd: f64,
    pub coverage: f64,
}

impl CalibrationOutcome {
    pub fn passed(&self) -> bool {
        self.z_mean.abs() < 0.05
            && (0.95..=1.05).contains(&self.z_sd)
            && (0.93..=0.97).contains(&self.coverage)
    }
}

impl fmt::Display for CalibrationOutcome {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(
            f,
            "n={}: z mean {:+.4}, z sd {:.4}, 95% coverage {:.2}%",
            self.n_test,
            self.z_mean,
            self.z_sd,
            100.0 * self.coverage
        )
    }
}

/// Fit hbr on 100 rows from each of 10 sites and score 200 further healthy
/// rows per site.
pub fn calibration(seed: u64) -> Result<CalibrationOutcome> {
    let cfg = GenConfig {
        sites: 10,
        rows_per_site: vec![300],
        units: 1,
        ..GenConfig::default()
    };
    let (ds, _) = generate(&cfg, seed)?;
    let (train, test) = split(&ds, 1.0 / 3.0, derive_seed(seed, 1), true)?;
    let model = fit(
        &hbr(NoiseForm::Homoscedastic),
        &train,
        &budget(1000, 1000, seed),
    )?;
    let z: Vec<f64> = model.deviations(&test)?.z.iter().copied().collect();
    Ok(CalibrationOutcome {
        n_test: z.len(),
        z_mean: mean(&z),
        z_sd: variance(&z, 1).sqrt(),
        coverage: z.iter().filter(|v| v.abs() <= 1.96).count() as f64 / z.len() as f64,
    })
}

// ---------------------------------------------------------------------------
// 5. method ordering

#[derive(Clone, Debug, Serialize)]
pub struct OrderingSeed {
    pub seed: u64,
    pub pooling: f64,
    pub no_pooling: f64,
    pub hbr: f64,
    pub combat_pooling: f64,
}

impl OrderingSeed {
    pub fn ordered(&self) -> bool {
        self.hbr <= self.no_pooling
            && self.no_pooling < self.pooling
            && self.hbr < self.combat_pooling
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OrderingOutcome {
    pub seeds: Vec<OrderingSeed>,
    pub required: usize,
    pub seconds: f64,
}

impl OrderingOutcome {
    pub fn ordered(&self) -> usize {
        self.seeds.iter().filter(|s| s.ordered()).count()
    }

    pub fn passed(&self) -> bool {
        self.ordered() >= self.required && self.seconds < 900.0
    }

    /// Per-seed median MSLL table.
    pub fn table(&self) -> String {
        let mut s = String::from("seed,pooling,nopool,hbr,combat_pooling,ordered\n");
        for r in &self.seeds {
            s += &format!(
                "{},{:.4},{:.4},{:.4},{:.4},{}\n",
                r.seed,
                r.pooling,
                r.no_pooling,
                r.hbr,
                r.combat_pooling,
                r.ordered()
            );
        }
        s
    }
}

impl fmt::Display for OrderingOutcome {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        let med = |g: fn(&OrderingSeed) -> f64| {
            crate::math::median(&self.seeds.iter().map(g).collect::<Vec<_>>())
        };
        write!(
            f,
            "HBR <= nopool < pooling and HBR < ComBat+pooling in {}/{} seeds (median MSLL: hbr {:.3}, nopool {:.3}, pooling {:.3}, combat {:.3}); {:.1} s",
            self.ordered(),
            self.seeds.len(),
            med(|s| s.hbr),
            med(|s| s.no_pooling),
            med(|s| s.pooling),
            med(|s| s.combat_pooling),
            self.seconds
        )
    }
}

/// Eight sites of unequal size covering partly different age bands, with
/// per-site intercepts, slopes and noise levels.
pub fn ordering_config() -> GenConfig {
    GenConfig {
        sites: 8,
        rows_per_site: vec![25, 30, 40, 50, 60, 75, 90, 110],
        units: 4,
        confound: 0.5,
        intercept: Hyper::new(3.0, 0.2),
        slope: Hyper::new(-0.01, 0.003),
        noise: Hyper::new(-1.8, 0.3),
        ..GenConfig::default()
    }
}

pub fn method_ordering(seeds: &[u64], warmup: usize, draws: usize) -> Result<OrderingOutcome> {
    let start = Instant::now();
    let cfg = ordering_config();
    let mut out = Vec::new();
    for &seed in seeds {
        let (ds, _) = generate(&cfg, seed)?;
        let (train, test) = split(&ds, 0.8, derive_seed(seed, 1), true)?;
        let baseline = Standardizer::fit(&train)?;
        let sampler = budget(warmup, draws, seed);
        let score = |strategy: Strategy| -> Result<f64> {
            let model = fit(&ModelSpec::new(strategy), &train, &sampler)?;
            median_msll(&model.predict_dataset(&test)?, &test, &baseline)
        };
        let cm = combat_fit(&train, &["age".to_string()])?;
        let (h_train, h_test) = (combat_apply(&cm, &train)?, combat_apply(&cm, &test)?);
        let combat_model = fit(&ModelSpec::new(Strategy::Pooling), &h_train, &sampler)?;
        let combat_pooling = median_msll(
            &combat_model.predict_dataset(&h_test)?,
            &h_test,
            &Standardizer::fit(&h_train)?,
        )?;
        out.push(OrderingSeed {
            seed,
            pooling: score(Strategy::Pooling)?,
            no_pooling: score(Strategy::NoPooling)?,
            hbr: score(Strategy::Hbr)?,
            combat_pooling,
        });
    }
    let required = (seeds.len() * 8).div_ceil(10);
    Ok(OrderingOutcome {
        seeds: out,
        required,
        seconds: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// 6. residual site effects

#[derive(Clone, Debug, Serialize)]
pub struct ProbeOutcome {
    pub pooling: ProbeResult,
    pub no_pooling: ProbeResult,
    pub hbr: ProbeResult,
    pub combat: ProbeResult,
}

impl ProbeOutcome {
    pub fn passed(&self) -> bool {
        self.pooling.p_value < 0.01
            && self.pooling.balanced_accuracy > self.pooling.chance
            && self.no_pooling.at_chance()
            && self.hbr.at_chance()
            && self.combat.at_chance()
    }

    pub fn table(&self) -> String {
        let mut s = String::from("method,balanced_accuracy,chance,chance_se,p_value,at_chance\n");
        for (name, r) in [
            ("pooling", &self.pooling),
            ("nopool", &self.no_pooling),
            ("hbr", &self.hbr),
            ("combat_pooling", &self.combat),
        ] {
            s += &format!(
                "{name},{:.4},{:.4},{:.4},{:.3e},{}\n",
                r.balanced_accuracy,
                r.chance,
                r.chance_se,
                r.p_value,
                r.at_chance()
            );
        }
        s
    }
}

impl fmt::Display for ProbeOutcome {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(
            f,
            "chance {:.3} ± {:.3} (2 SE); pooling {:.3} (p={:.1e}), nopool {:.3}, hbr {:.3}, combat {:.3}",
            self.hbr.chance,
            2.0 * self.hbr.chance_se,
            self.pooling.balanced_accuracy,
            self.pooling.p_value,
            self.no_pooling.balanced_accuracy,
            self.hbr.balanced_accuracy,
            self.combat.balanced_accuracy
        )
    }
}

/// Four large sites with strong additive and multiplicative site effects.
pub fn probe_config() -> GenConfig {
    GenConfig {
        sites: 4,
        rows_per_site: vec![600],
        units: 4,
        intercept: Hyper::new(3.0, 0.3),
        slope: Hyper::new(-0.01, 0.0005),
        noise: Hyper::new(-1.8, 0.3),
        ..GenConfig::default()
    }
}

pub fn probe(seed: u64, warmup: usize, draws: usize) -> Result<ProbeOutcome> {
    let (ds, _) = generate(&probe_config(), seed)?;
    let (train, test) = split(&ds, 0.8, derive_seed(seed, 1), true)?;
    let sampler = budget(warmup, draws, seed);
    let sites = site_indices(&test)?;
    let probe_seed = derive_seed(seed, 2);
    let run = |model: &FittedNormativeModel, test: &Dataset| -> Result<ProbeResult> {
        Ok(site_probe(
            model.deviations(test)?.z.view(),
            &sites,
            5,
            probe_seed,
        )?)
    };
    let fitted =
        |strategy: Strategy, train: &Dataset| fit(&ModelSpec::new(strategy), train, &sampler);
    let cm = combat_fit(&train, &["age".to_string()])?;
    let (h_train, h_test) = (combat_apply(&cm, &train)?, combat_apply(&cm, &test)?);
    Ok(ProbeOutcome {
        pooling: run(&fitted(Strategy::Pooling, &train)?, &test)?,
        no_pooling: run(&fitted(Strategy::NoPooling, &train)?, &test)?,
        hbr: run(&fitted(Strategy::Hbr, &train)?, &test)?,
        combat: run(&fitted(Strategy::Pooling, &h_train)?, &h_test)?,
    })
}

// ---------------------------------------------------------------------------
// 7. transfer to unseen sites

#[derive(Clone, Debug, Serialize)]
pub struct TransferOutcome {
    pub recalibrated: f64,
    pub joint: f64,
    pub priors_only: f64,
}

impl TransferOutcome {
    pub fn passed(&self) -> bool {
        (self.recalibrated - self.joint).abs() < 0.1 && self.recalibrated < self.priors_only
    }
}

impl fmt::Display for TransferOutcome {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(
            f,
            "median MSLL recalibrated {:.4}, joint {:.4} (|diff| {:.4}), priors-only {:.4}",
            self.recalibrated,
            self.joint,
            (self.recalibrated - self.joint).abs(),
            self.priors_only
        )
    }
}

/// Reference model on 8 sites; two new sites from the same hyperdistribution
/// with 50 training and 50 test rows each.
pub fn transfer(seed: u64, warmup: usize, draws: usize) -> Result<TransferOutcome> {
    let ref_cfg = GenConfig {
        sites: 8,
        rows_per_site: vec![60],
        units: 4,
        ..GenConfig::default()
    };
    let new_cfg = GenConfig {
        sites: 2,
        rows_per_site: vec![100],
        first_site: 8,
        ..ref_cfg.clone()
    };
    let (reference, _) = generate(&ref_cfg, seed)?;
    let (new, _) = generate(&new_cfg, derive_seed(seed, 1))?;
    let (new_train, new_test) = split(&new, 0.5, derive_seed(seed, 2), true)?;
    let sampler = budget(warmup, draws, seed);
    let spec = hbr(NoiseForm::Homoscedastic);
    let baseline = Standardizer::fit(&new_train)?;

    let pack = distill(&fit(&spec, &reference, &sampler)?)?;
    let recal = recalibrate(&pack, &new_train, &spec, &sampler)?;
    let joint = fit(&spec, &reference.concat(&new_train)?, &sampler)?;
    let priors = predict_priors_only(&pack, new_test.covariates())?;
    Ok(TransferOutcome {
        recalibrated: median_msll(&recal.predict_dataset(&new_test)?, &new_test, &baseline)?,
        joint: median_msll(&joint.predict_dataset(&new_test)?, &new_test, &baseline)?,
        priors_only: median_msll(&priors, &new_test, &baseline)?,
    })
}

// ---------------------------------------------------------------------------
// 8. ComBat

#[derive(Clone, Debug, Serialize)]
pub struct CombatOutcome {
    /// Post-harmonization difference of per-batch residual means.
    pub mean_gap: f64,
    /// Post-harmonization ratio of per-batch residual sds.
    pub sd_ratio: f64,
    pub slope_before: f64,
    pub slope_after: f64,
    pub true_slope: f64,
    pub eb_mse: f64,
    pub ls_mse: f64,
    pub eb_wins: usize,
    pub seeds: usize,
}

impl CombatOutcome {
    pub fn passed(&self) -> bool {
        self.mean_gap < 0.05
            && (self.sd_ratio - 1.0).abs() < 0.05
            && ((self.slope_after - self.true_slope) / self.true_slope).abs() < 0.05
            && ((self.slope_after - self.slope_before) / self.slope_before).abs() < 0.05
            && self.eb_mse < self.ls_mse
    }
}

impl fmt::Display for CombatOutcome {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(
            f,
            "residual mean gap {:.2e}, sd ratio {:.4}, slope {:.4} -> {:.4} (true {}), EB MSE {:.4} vs LS {:.4} (EB better in {}/{} seeds)",
            self.mean_gap,
            self.sd_ratio,
            self.slope_before,
            self.slope_after,
            self.true_slope,
            self.eb_mse,
            self.ls_mse,
            self.eb_wins,
            self.seeds
        )
    }
}

fn single_unit_dataset(age: Vec<f64>, y: Vec<f64>, batch: &[usize]) -> Dataset {
    let n = age.len();
    Dataset::new(
        vec!["age".into()],
        vec!["y".into()],
        vec!["site".into()],
        Array2::from_shape_vec((n, 1), age).expect("shape"),
        Array2::from_shape_vec((n, 1), y).expect("shape"),
        batch
            .iter()
            .map(|b| BatchLabel(vec![format!("site{b:02}")]))
            .collect(),
        (0..n).map(|i| format!("s{i}")).collect(),
        vec![Group::Healthy; n],
    )
    .expect("consistent dataset")
}

/// OLS of `y` on `[1, age, batch indicators 1..m]`; returns the age slope.
fn ols_slope(age: &[f64], y: &[f64], batch: &[usize], m: usize) -> f64 {
    let n = age.len();
    let x = nalgebra::DMatrix::from_fn(n, m + 1, |r, c| match c {
        0 => 1.0,
        1 => age[r],
        _ => (batch[r] == c - 1) as u8 as f64,
    });
    let y = nalgebra::DVector::from_column_slice(y);
    x.svd(true, true).solve(&y, 1e-12).expect("full rank")[1]
}

pub fn combat_checks(seeds: &[u64]) -> Result<CombatOutcome> {
    // Shift/scale construction: batch 1 residuals are shifted by +1 and scaled by 2.
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.first().copied().unwrap_or(0));
    let true_slope = 2.0;
    let n_per = 500;
    let (mut age, mut y, mut batch) = (Vec::new(), Vec::new(), Vec::new());
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    for b in 0..2 {
        for _ in 0..n_per {
            let a: f64 = rng.random_range(20.0..80.0);
            let e: f64 = unit.sample(&mut rng);
            let resid = if b == 0 { e } else { 1.0 + 2.0 * e };
            age.push(a);
            y.push(true_slope * a + resid);
            batch.push(b);
        }
    }
    let ds = single_unit_dataset(age.clone(), y.clone(), &batch);
    let harmonized = combat_apply(&combat_fit(&ds, &["age".to_string()])?, &ds)?;
    let hy: Vec<f64> = harmonized.responses().column(0).to_vec();
    let slope_before = ols_slope(&age, &y, &batch, 2);
    let slope_after = ols_slope(&age, &hy, &[0; 1000], 1);
    // Residuals about the pooled harmonized fit.
    let intercept = mean(&hy) - slope_after * mean(&age);
    let resid: Vec<Vec<f64>> = (0..2)
        .map(|b| {
            (0..age.len())
                .filter(|&r| batch[r] == b)
                .map(|r| hy[r] - intercept - slope_after * age[r])
                .collect()
        })
        .collect();
    let mean_gap = (mean(&resid[0]) - mean(&resid[1])).abs();
    let sd_ratio = (variance(&resid[1], 1) / variance(&resid[0], 1)).sqrt();

    // Shrinkage: 30 small batches with additive effects drawn from N(0, 0.5²).
    let (mut eb_sq, mut ls_sq, mut eb_wins) = (0.0, 0.0, 0);
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 8));
        let (m, n_i) = (30, 6);
        let effects: Vec<f64> = (0..m).map(|_| 0.5 * unit.sample(&mut rng)).collect();
        let (mut age, mut y, mut batch) = (Vec::new(), Vec::new(), Vec::new());
        for (b, g) in effects.iter().enumerate() {
            for _ in 0..n_i {
                let a: f64 = rng.random_range(20.0..80.0);
                age.push(a);
                y.push(0.05 * a + g + unit.sample(&mut rng));
                batch.push(b);
            }
        }
        let model = combat_fit(&single_unit_dataset(age, y, &batch), &["age".to_string()])?;
        let u = &model.units[0];
        let centre = mean(&effects);
        // Batch labels sort as site00..site29, matching the effect order.
        let (mut eb, mut ls) = (0.0, 0.0);
        for b in 0..m {
            let truth = effects[b] - centre;
            eb += (u.gamma_star[b] * u.sigma - truth).powi(2);
            ls += (u.gamma_hat[b] * u.sigma - truth).powi(2);
        }
        eb_wins += (eb < ls) as usize;
        eb_sq += eb;
        ls_sq += ls;
    }
    let count = (seeds.len() * 30) as f64;
    Ok(CombatOutcome {
        mean_gap,
        sd_ratio,
        slope_before,
        slope_after,
        true_slope,
        eb_mse: eb_sq / count,
        ls_mse: ls_sq / count,
        eb_wins,
        seeds: seeds.len(),
    })
}

// ---------------------------------------------------------------------------
// 9. anomaly detection

#[derive(Clone, Debug, Serialize)]
pub struct AnomalySeed {
    pub seed: u64,
    pub stable_units: Vec<usize>,
    pub report: AnomalyReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct AnomalyOutcome {
    pub affected: Vec<usize>,
    pub seeds: Vec<AnomalySeed>,
    pub required: usize,
    pub seconds: f64,
}

impl AnomalyOutcome {
    pub fn exact(&self) -> usize {
        self.seeds
            .iter()
            .filter(|s| s.stable_units == self.affected)
            .count()
    }

    pub fn without_false_positives(&self) -> usize {
        self.seeds
            .iter()
            .filter(|s| s.stable_units.iter().all(|u| self.affected.contains(u)))
            .count()
    }

    pub fn passed(&self) -> bool {
        self.exact() >= self.required && self.without_false_positives() >= self.required
    }

    pub fn table(&self) -> String {
        let mut s = String::from("seed,stable_units,exact\n");
        for r in &self.seeds {
            let units: Vec<String> = r.stable_units.iter().map(|u| u.to_string()).collect();
            s += &format!(
                "{},{},{}\n",
                r.seed,
                units.join(" "),
                r.stable_units == self.affected
            );
        }
        s
    }
}

impl fmt::Display for AnomalyOutcome {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(
            f,
            "planted units {:?}: exactly recovered in {}/{} seeds, no false positives in {}/{}; {:.1} s",
            self.affected,
            self.exact(),
            self.seeds.len(),
            self.without_false_positives(),
            self.seeds.len(),
            self.seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct AnomalySettings {
    pub units: usize,
    pub affected: Vec<usize>,
    pub effect: f64,
    pub repetitions: usize,
    pub n_perm: usize,
    pub alpha: f64,
    /// `(warmup, draws)` of the reference fit, which must reach the
    /// distillation ESS floor.
    pub reference_budget: (usize, usize),
    /// `(warmup, draws)` of each recalibration.
    pub budget: (usize, usize),
}

impl Default for AnomalySettings {
    fn default() -> Self {
        AnomalySettings {
            units: 30,
            affected: vec![4, 13, 22],
            effect: 1.5,
            repetitions: DEFAULT_REPETITIONS,
            n_perm: DEFAULT_PERMUTATIONS,
            alpha: DEFAULT_ALPHA,
            reference_budget: (1000, 1000),
            budget: (500, 500),
        }
    }
}

/// Per seed: distill a reference model fitted on eight healthy sites, then for
/// each repetition recalibrate on a random half of the healthy rows of two
/// new sites and score the other half together with the patients.
pub fn anomaly_seed(settings: &AnomalySettings, seed: u64) -> Result<AnomalySeed> {
    let ref_cfg = GenConfig {
        sites: 8,
        rows_per_site: vec![50],
        units: settings.units,
        ..GenConfig::default()
    };
    let new_cfg = GenConfig {
        sites: 2,
        rows_per_site: vec![100],
        first_site: 8,
        patients: Some(PatientSpec {
            per_site: 20,
            diagnosis: "patient".into(),
            affected_units: settings.affected.clone(),
            effect: settings.effect,
        }),
        ..ref_cfg.clone()
    };
    let (reference, _) = generate(&ref_cfg, seed)?;
    let (new, _) = generate(&new_cfg, derive_seed(seed, 1))?;
    let spec = hbr(NoiseForm::Homoscedastic);
    let (w, d) = settings.reference_budget;
    let pack = distill(&fit(&spec, &reference, &budget(w, d, seed))?)?;
    let sampler = budget(settings.budget.0, settings.budget.1, seed);
    let mut reps = Vec::with_capacity(settings.repetitions);
    for k in 0..settings.repetitions {
        let rep_seed = derive_seed(seed, 100 + k as u64);
        let (calib, test) = split(&new, 0.5, rep_seed, true)?;
        let model = recalibrate(&pack, &calib, &spec, &sampler.clone().with_seed(rep_seed))?;
        let z = model.deviations(&test)?.z;
        let pick = |healthy: bool| {
            let rows = test.rows_where(|g| g.is_healthy() == healthy);
            z.select(ndarray::Axis(0), &rows)
        };
        reps.push(RepetitionDeviations {
            healthy: pick(true),
            patients: pick(false),
        });
    }
    let report = anomaly_auc(
        new.response_names(),
        "patient",
        &reps,
        settings.n_perm,
        settings.alpha,
        Discriminant::Absolute,
        derive_seed(seed, 2),
    )?;
    let stable_units = report
        .units
        .iter()
        .enumerate()
        .filter(|(_, u)| u.stable)
        .map(|(j, _)| j)
        .collect();
    Ok(AnomalySeed {
        seed,
        stable_units,
        report,
    })
}

pub fn anomaly(settings: &AnomalySettings, seeds: &[u64]) -> Result<AnomalyOutcome> {
    let start = Instant::now();
    let seeds_out = seeds
        .iter()
        .map(|&s| anomaly_seed(settings, s))
        .collect::<Result<Vec<_>>>()?;
    let mut affected = settings.affected.clone();
    affected.sort_unstable();
    Ok(AnomalyOutcome {
        affected,
        seeds: seeds_out,
        required: (seeds.len() * 9).div_ceil(10),
        seconds: start.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// 10. heteroscedastic noise

#[derive(Clone, Debug, Serialize)]
pub struct HeteroOutcome {
    /// Median MSLL `(homoscedastic model, heteroscedastic model)` on data with quadratic variance.
    pub quadratic_data: (f64, f64),
    /// The same on data with constant variance.
    pub constant_data: (f64, f64),
}

impl HeteroOutcome {
    pub fn passed(&self) -> bool {
        self.quadratic_data.1 < self.quadratic_data.0
            && (self.constant_data.1 - self.constant_data.0).abs() <= 0.05
    }
}

impl fmt::Display for HeteroOutcome {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(
            f,
            "quadratic-variance data: homo {:.4} vs hetero {:.4}; constant-variance data: homo {:.4} vs hetero {:.4} (|diff| {:.4})",
            self.quadratic_data.0,
            self.quadratic_data.1,
            self.constant_data.0,
            self.constant_data.1,
            (self.constant_data.1 - self.constant_data.0).abs()
        )
    }
}

pub fn heteroscedastic(seed: u64, warmup: usize, draws: usize) -> Result<HeteroOutcome> {
    let base = GenConfig {
        sites: 5,
        rows_per_site: vec![100],
        units: 2,
        ..GenConfig::default()
    };
    let quad = GenConfig {
        hetero: Some(Hetero {
            linear: 0.0,
            quadratic: 1.5,
        }),
        ..base.clone()
    };
    let sampler = budget(warmup, draws, seed);
    let compare = |cfg: &GenConfig| -> Result<(f64, f64)> {
        let (ds, _) = generate(cfg, seed)?;
        let (train, test) = split(&ds, 0.8, derive_seed(seed, 1), true)?;
        let baseline = Standardizer::fit(&train)?;
        let score = |noise| -> Result<f64> {
            let model = fit(&hbr(noise), &train, &sampler)?;
            median_msll(&model.predict_dataset(&test)?, &test, &baseline)
        };
        Ok((
            score(NoiseForm::Homoscedastic)?,
            score(NoiseForm::Heteroscedastic(2))?,
        ))
    };
    Ok(HeteroOutcome {
        quadratic_data: compare(&quad)?,
        constant_data: compare(&base)?,
    })
}

// ---------------------------------------------------------------------------
// 11. persistence and the pack-only contract

#[derive(Clone, Debug, Serialize)]
pub struct PersistenceOutcome {
    pub archive_bytes: usize,
    pub reload_identical: bool,
    pub pack_unchanged_by_reordering: bool,
    pub recalibration_identical: bool,
    pub pack_free_of_reference_rows: bool,
}

impl PersistenceOutcome {
    pub fn passed(&self) -> bool {
        self.reload_identical
            && self.pack_unchanged_by_reordering
            && self.recalibration_identical
            && self.pack_free_of_reference_rows
    }
}

impl fmt::Display for PersistenceOutcome {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(
            f,
            "reload bit-identical: {}; pack invariant to draw order: {}; recalibration from reordered reference identical: {}; pack holds no reference rows: {} ({} byte archive)",
            yes(self.reload_identical),
            yes(self.pack_unchanged_by_reordering),
            yes(self.recalibration_identical),
            yes(self.pack_free_of_reference_rows),
            self.archive_bytes
        )
    }
}

pub fn persistence(seed: u64) -> Result<PersistenceOutcome> {
    let ref_cfg = GenConfig {
        sites: 4,
        rows_per_site: vec![40],
        units: 2,
        ..GenConfig::default()
    };
    let new_cfg = GenConfig {
        sites: 1,
        rows_per_site: vec![30],
        first_site: 4,
        ..ref_cfg.clone()
    };
    let (reference, _) = generate(&ref_cfg, seed)?;
    let (new, _) = generate(&new_cfg, derive_seed(seed, 1))?;
    let spec = hbr(NoiseForm::Homoscedastic);
    let sampler = budget(1000, 1000, seed);
    let model = fit(&spec, &reference, &sampler)?;

    let bytes = model_to_bytes(&model)?;
    let reloaded = model_from_bytes(&bytes)?;
    let (a, b) = (
        model.predict_dataset(&reference)?,
        reloaded.predict_dataset(&reference)?,
    );
    let reload_identical =
        reloaded == model && bits_equal(&a.mean, &b.mean) && bits_equal(&a.sd, &b.sd);

    // Reordering draws changes the reference posterior object but not the
    // moments the pack is built from.
    let mut shuffled = model.clone();
    for draws in &mut shuffled.draws {
        let dim = draws.dim();
        let mut rows: Vec<Vec<f64>> = draws.values.chunks(dim).map(<[f64]>::to_vec).collect();
        rows.reverse();
        *draws = crate::inference::PosteriorDraws::new(
            draws.layout.clone(),
            draws.n_chains,
            draws.n_draws,
            rows.concat(),
            draws.chain_stats.clone(),
        );
    }
    let pack = distill(&model)?;
    let pack_shuffled = distill(&shuffled)?;
    let json = serde_json::to_string(&pack_shuffled).expect("pack serializes");
    let shipped: crate::transfer::HyperpriorPack =
        serde_json::from_str(&json).expect("pack parses");
    let recal_a = recalibrate(&pack, &new, &spec, &sampler)?.predict_dataset(&new)?;
    let recal_b = recalibrate(&shipped, &new, &spec, &sampler)?.predict_dataset(&new)?;
    let pack_free_of_reference_rows = reference
        .subject_ids()
        .iter()
        .all(|s| !json.contains(s.as_str()))
        && !json.contains(&format!("{}", reference.responses()[[0, 0]]));
    Ok(PersistenceOutcome {
        archive_bytes: bytes.len(),
        reload_identical,
        pack_unchanged_by_reordering: same_distributions(&pack, &pack_shuffled)
            && shipped == pack_shuffled,
        recalibration_identical: bits_equal(&recal_a.mean, &recal_b.mean)
            && bits_equal(&recal_a.sd, &recal_b.sd),
        pack_free_of_reference_rows,
    })
}

/// Packs agree in everything recalibration reads; provenance identifies the
/// exact reference object and is allowed to differ.
fn same_distributions(
    a: &crate::transfer::HyperpriorPack,
    b: &crate::transfer::HyperpriorPack,
) -> bool {
    a.units == b.units
        && a.standardizer == b.standardizer
        && a.mean_form == b.mean_form
        && a.noise_form == b.noise_form
        && a.covariate_names == b.covariate_names
}

fn bits_equal(a: &Array2<f64>, b: &Array2<f64>) -> bool {
    a.shape() == b.shape() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
