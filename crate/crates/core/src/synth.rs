//! Seeded generator of multi-site data drawn from the hierarchical model,
//! with known ground truth.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BatchLabel, Dataset, Group};
use crate::math::softplus;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("cannot read generator config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse generator config: {0}")]
    Parse(#[from] toml::de::Error),
}

/// Normal hyperdistribution of one per-batch parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    pub mean: f64,
    #[serde(default)]
    pub sd: f64,
}

impl Hyper {
    pub fn new(mean: f64, sd: f64) -> Self {
        Hyper { mean, sd }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateDistribution {
    #[default]
    Uniform,
    /// Normal centred on the site's range midpoint with sd = range/4, clipped to the range.
    Gaussian,
}

/// Covariate-dependent noise: the softplus argument gains
/// `linear·s + quadratic·s²`, with `s` the covariate rescaled to [−1, 1]
/// over the global range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hetero {
    #[serde(default)]
    pub linear: f64,
    #[serde(default)]
    pub quadratic: f64,
}

/// Extra patient rows with an additive shift on selected units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientSpec {
    pub per_site: usize,
    #[serde(default = "default_diagnosis")]
    pub diagnosis: String,
    pub affected_units: Vec<usize>,
    /// Shift in multiples of the row's noise sd.
    pub effect: f64,
}

fn default_diagnosis() -> String {
    "patient".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub sites: usize,
    /// One entry per site, or a single entry used for every site.
    pub rows_per_site: Vec<usize>,
    pub units: usize,
    pub covariate_range: [f64; 2],
    pub covariate_distribution: CovariateDistribution,
    /// 0: every site spans the full range; 1: sites cover disjoint bands.
    pub confound: f64,
    /// Add a gender batch dimension with its own parameters per (site, gender).
    pub gender: bool,
    pub intercept: Hyper,
    pub slope: Hyper,
    /// Per-batch softplus argument of the noise sd.
    pub noise: Hyper,
    pub hetero: Option<Hetero>,
    pub patients: Option<PatientSpec>,
    /// Label offset so that generated sites can be disjoint from another dataset's.
    pub first_site: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            sites: 33,
            rows_per_site: vec![227],
            units: 4,
            covariate_range: [8.0, 97.0],
            covariate_distribution: CovariateDistribution::Uniform,
            confound: 0.0,
            gender: false,
            intercept: Hyper::new(3.0, 0.2),
            slope: Hyper::new(-0.01, 0.002),
            noise: Hyper::new(-1.8, 0.3),
            hetero: None,
            patients: None,
            first_site: 0,
        }
    }
}

impl GenConfig {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let cfg: GenConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, SynthError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn rows(&self, site: usize) -> usize {
        if self.rows_per_site.len() == 1 {
            self.rows_per_site[0]
        } else {
            self.rows_per_site[site]
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.sites == 0 || self.units == 0 {
            return bad("sites and units must be positive".into());
        }
        if self.rows_per_site.len() != 1 && self.rows_per_site.len() != self.sites {
            return bad(format!("rows_per_site needs 1 or {} entries", self.sites));
        }
        let [lo, hi] = self.covariate_range;
        if !(lo < hi) {
            return bad("covariate_range must be increasing".into());
        }
        if !(0.0..=1.0).contains(&self.confound) {
            return bad("confound must lie in [0, 1]".into());
        }
        for (name, h) in [
            ("intercept", self.intercept),
            ("slope", self.slope),
            ("noise", self.noise),
        ] {
            if !(h.sd >= 0.0) || !h.mean.is_finite() {
                return bad(format!("{name} needs a finite mean and non-negative sd"));
            }
        }
        if !(softplus(self.noise.mean - 4.0 * self.noise.sd) > 1e-6) {
            return bad("noise configuration gives non-positive noise sd".into());
        }
        if let Some(p) = &self.patients {
            if let Some(&u) = p.affected_units.iter().find(|&&u| u >= self.units) {
                return bad(format!("affected unit {u} out of range"));
            }
        }
        Ok(())
    }

    /// Covariate sub-range of `site`.
    pub fn site_range(&self, site: usize) -> (f64, f64) {
        let [lo, hi] = self.covariate_range;
        let w = (hi - lo) / self.sites as f64;
        let (band_lo, band_hi) = (lo + site as f64 * w, lo + (site + 1) as f64 * w);
        (
            lo + self.confound * (band_lo - lo),
            hi + self.confound * (band_hi - hi),
        )
    }

    fn scaled(&self, x: f64) -> f64 {
        let [lo, hi] = self.covariate_range;
        (2.0 * x - lo - hi) / (hi - lo)
    }
}

/// Latent values behind a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: GenConfig,
    pub batch_labels: Vec<BatchLabel>,
    /// batch × unit
    pub intercept: Array2<f64>,
    pub slope: Array2<f64>,
    pub noise: Array2<f64>,
    /// Batch of every row.
    pub row_batch: Vec<usize>,
    /// Standard-normal noise draws, row × unit.
    pub epsilon: Array2<f64>,
    /// Patient shift in noise-sd multiples, row × unit (zero for healthy rows).
    pub shift: Array2<f64>,
}

impl GroundTruth {
    pub fn mean(&self, batch: usize, unit: usize, x: f64) -> f64 {
        self.intercept[[batch, unit]] + self.slope[[batch, unit]] * x
    }

    pub fn noise_sd(&self, batch: usize, unit: usize, x: f64) -> f64 {
        let mut v = self.noise[[batch, unit]];
        if let Some(h) = self.config.hetero {
            let s = self.config.scaled(x);
            v += h.linear * s + h.quadratic * s * s;
        }
        softplus(v)
    }

    /// Responses recomputed from the latent values and `covariates`.
    pub fn regenerate(&self, covariates: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(self.epsilon.dim(), |(r, u)| {
            let (b, x) = (self.row_batch[r], covariates[[r, 0]]);
            let sd = self.noise_sd(b, u, x);
            self.mean(b, u, x) + sd * (self.epsilon[[r, u]] + self.shift[[r, u]])
        })
    }

    /// Exact log density of `y` given the latent parameters.
    pub fn log_density(&self, batch: usize, unit: usize, x: f64, y: f64) -> f64 {
        crate::math::normal_logpdf(y, self.mean(batch, unit, x), self.noise_sd(batch, unit, x))
    }
}

fn draw(h: Hyper, rng: &mut ChaCha8Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    h.mean + h.sd * z
}

/// Generate a dataset and its ground truth.
pub fn generate(cfg: &GenConfig, seed: u64) -> Result<(Dataset, GroundTruth), SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let genders: &[&str] = if cfg.gender { &["F", "M"] } else { &[""] };
    let mut batch_labels = Vec::new();
    for s in 0..cfg.sites {
        for g in genders {
            let site = format!("site{:02}", cfg.first_site + s);
            batch_labels.push(BatchLabel(if cfg.gender {
                vec![site, g.to_string()]
            } else {
                vec![site]
            }));
        }
    }
    let m = batch_labels.len();
    let u = cfg.units;
    let mut intercept = Array2::zeros((m, u));
    let mut slope = Array2::zeros((m, u));
    let mut noise = Array2::zeros((m, u));
    for j in 0..u {
        for b in 0..m {
            intercept[[b, j]] = draw(cfg.intercept, &mut rng);
            slope[[b, j]] = draw(cfg.slope, &mut rng);
            noise[[b, j]] = draw(cfg.noise, &mut rng);
        }
    }

    let mut xs = Vec::new();
    let mut row_batch = Vec::new();
    let mut subjects = Vec::new();
    let mut groups = Vec::new();
    for s in 0..cfg.sites {
        let (lo, hi) = cfg.site_range(s);
        let n_patients = cfg.patients.as_ref().map_or(0, |p| p.per_site);
        for i in 0..cfg.rows(s) + n_patients {
            let x = match cfg.covariate_distribution {
                CovariateDistribution::Uniform => rng.random_range(lo..hi),
                CovariateDistribution::Gaussian => {
                    let d = Normal::new((lo + hi) / 2.0, (hi - lo) / 4.0).expect("positive width");
                    d.sample(&mut rng).clamp(lo, hi)
                }
            };
            let g = if cfg.gender {
                rng.random_range(0..2)
            } else {
                0
            };
            xs.push(x);
            row_batch.push(s * genders.len() + g);
            subjects.push(format!("sub-{:02}-{:04}", cfg.first_site + s, i));
            groups.push(match &cfg.patients {
                Some(p) if i >= cfg.rows(s) => Group::Patient(p.diagnosis.clone()),
                _ => Group::Healthy,
            });
        }
    }
    let n = xs.len();
    let epsilon = Array2::from_shape_simple_fn((n, u), || StandardNormal.sample(&mut rng));
    let mut shift = Array2::zeros((n, u));
    if let Some(p) = &cfg.patients {
        for r in 0..n {
            if !groups[r].is_healthy() {
                for &j in &p.affected_units {
                    shift[[r, j]] = p.effect;
                }
            }
        }
    }
    let covariates = Array2::from_shape_vec((n, 1), xs).expect("shape");
    let truth = GroundTruth {
        config: cfg.clone(),
        batch_labels,
        intercept,
        slope,
        noise,
        row_batch,
        epsilon,
        shift,
    };
    let responses = truth.regenerate(&covariates);
    let batch_names = if cfg.gender {
        vec!["site".into(), "gender".into()]
    } else {
        vec!["site".into()]
    };
    let labels = truth
        .row_batch
        .iter()
        .map(|&b| truth.batch_labels[b].clone())
        .collect();
    let ds = Dataset::new(
        vec!["age".into()],
        (0..u).map(|j| format!("unit_{j:03}")).collect(),
        batch_names,
        covariates,
        responses,
        labels,
        subjects,
        groups,
    )
    .expect("generator output is consistent");
    Ok((ds, truth))
}
