//! Parameter layout and log density of the three regression strategies.
//!
//! All quantities live in standardized coordinates: covariates are z-scored
//! and each response unit is centered and scaled by its training moments.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::prior::{Prior, UnitHyperpriors};
use super::{ModelError, ModelSpec, NoiseForm, Strategy};
use crate::data::Dataset;
use crate::inference::density::{check_dim, check_finite};
use crate::inference::{DensityError, Layout, LogDensity, Transform};
use crate::math::{sigmoid, softplus, LN_SQRT_2PI};
use crate::scalar::Real;

const NOISE_BOUNDS: Transform = Transform::ScaledLogit {
    lower: 0.0,
    upper: 100.0,
};

/// How the noise predictor maps to a standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLink {
    /// The predictor is the unconstrained coordinate of an sd bounded in (0, 100).
    Bounded,
    /// `sd = softplus(predictor)`.
    Softplus,
}

impl NoiseLink {
    /// Returns `(sd, d sd / d v)`.
    #[inline]
    pub fn apply<T: Real>(self, v: T) -> (T, T) {
        match self {
            NoiseLink::Bounded => (NOISE_BOUNDS.constrain(v), NOISE_BOUNDS.dconstrain(v)),
            NoiseLink::Softplus => (softplus(v), sigmoid(v)),
        }
    }

    pub fn sd<T: Real>(self, v: T) -> T {
        self.apply(v).0
    }
}

/// Basis expansion `[1, x₁, x₁², …, x₁^d, x₂, …]` of one standardized row.
pub fn features(x: &[f64], degree: usize, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    for &v in x {
        let mut pow = 1.0;
        for _ in 0..degree {
            pow *= v;
            out.push(pow);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct HyperOffsets {
    mu_mu: usize,
    sd_mu: Option<usize>,
    eta_mu: Vec<usize>,
    mu_sigma: usize,
    sd_sigma: Option<usize>,
    eta_sigma: Vec<usize>,
}

/// Block layout of one unit's parameter vector and the map from it to
/// per-group coefficient vectors. Pooling has a single group; the other
/// strategies have one group per batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStructure {
    pub strategy: Strategy,
    pub n_groups: usize,
    pub k_mu: usize,
    pub k_sigma: usize,
    pub link: NoiseLink,
    pub clamp: Option<f64>,
    layout: Layout,
    theta_mu: Vec<usize>,
    theta_sigma: Vec<usize>,
    hyper: Option<HyperOffsets>,
}

impl ParamStructure {
    pub fn new(spec: &ModelSpec, n_covariates: usize, n_batches: usize) -> Self {
        let k_mu = spec.k_mu(n_covariates);
        let k_sigma = spec.k_sigma(n_covariates);
        let homo = spec.noise_form == NoiseForm::Homoscedastic;
        let link = if homo && spec.strategy != Strategy::Hbr {
            NoiseLink::Bounded
        } else {
            NoiseLink::Softplus
        };
        let noise_name = if link == NoiseLink::Bounded {
            "sigma_noise"
        } else {
            "theta_sigma"
        };
        let noise_transform = if link == NoiseLink::Bounded {
            NOISE_BOUNDS
        } else {
            Transform::Identity
        };
        let mut layout = Layout::new();
        let mut theta_mu = Vec::new();
        let mut theta_sigma = Vec::new();
        let mut hyper = None;
        let n_groups = match spec.strategy {
            Strategy::Pooling => {
                theta_mu.push(layout.push("theta_mu", k_mu, Transform::Identity).start);
                theta_sigma.push(layout.push(noise_name, k_sigma, noise_transform).start);
                1
            }
            Strategy::NoPooling => {
                for b in 0..n_batches {
                    theta_mu.push(
                        layout
                            .push(format!("theta_mu[{b}]"), k_mu, Transform::Identity)
                            .start,
                    );
                }
                for b in 0..n_batches {
                    theta_sigma.push(
                        layout
                            .push(format!("{noise_name}[{b}]"), k_sigma, noise_transform)
                            .start,
                    );
                }
                n_batches
            }
            Strategy::Hbr => {
                let sampled_sd = spec.hyper_sd_clamp.is_none();
                let mu_mu = layout.push("mu_theta_mu", k_mu, Transform::Identity).start;
                let sd_mu =
                    sampled_sd.then(|| layout.push("sigma_theta_mu", k_mu, Transform::Log).start);
                let eta_mu = (0..n_batches)
                    .map(|b| {
                        layout
                            .push(format!("eta_mu[{b}]"), k_mu, Transform::Identity)
                            .start
                    })
                    .collect();
                let mu_sigma = layout
                    .push("mu_theta_sigma", k_sigma, Transform::Identity)
                    .start;
                let sd_sigma = sampled_sd.then(|| {
                    layout
                        .push("sigma_theta_sigma", k_sigma, Transform::Log)
                        .start
                });
                let eta_sigma = (0..n_batches)
                    .map(|b| {
                        layout
                            .push(format!("eta_sigma[{b}]"), k_sigma, Transform::Identity)
                            .start
                    })
                    .collect();
                hyper = Some(HyperOffsets {
                    mu_mu,
                    sd_mu,
                    eta_mu,
                    mu_sigma,
                    sd_sigma,
                    eta_sigma,
                });
                n_batches
            }
        };
        ParamStructure {
            strategy: spec.strategy,
            n_groups,
            k_mu,
            k_sigma,
            link,
            clamp: spec.hyper_sd_clamp,
            layout,
            theta_mu,
            theta_sigma,
            hyper,
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Group used for rows of batch `b`.
    pub fn group_of_batch(&self, b: usize) -> usize {
        if self.strategy == Strategy::Pooling {
            0
        } else {
            b
        }
    }

    fn scale<T: Real>(&self, x: &[T], offset: Option<usize>, j: usize) -> T {
        match offset {
            Some(o) => x[o + j].exp(),
            None => T::lit(self.clamp.unwrap_or(1.0)),
        }
    }

    /// Per-group mean coefficients (`n_groups × k_mu`) and noise predictors
    /// (`n_groups × k_sigma`, before the link) of an unconstrained vector.
    pub fn decode<T: Real>(&self, x: &[T], theta: &mut [T], nu: &mut [T]) {
        let (k, ks) = (self.k_mu, self.k_sigma);
        match &self.hyper {
            None => {
                for g in 0..self.n_groups {
                    theta[g * k..(g + 1) * k]
                        .copy_from_slice(&x[self.theta_mu[g]..self.theta_mu[g] + k]);
                    nu[g * ks..(g + 1) * ks]
                        .copy_from_slice(&x[self.theta_sigma[g]..self.theta_sigma[g] + ks]);
                }
            }
            Some(h) => {
                for j in 0..k {
                    let s = self.scale(x, h.sd_mu, j);
                    for g in 0..self.n_groups {
                        theta[g * k + j] = x[h.mu_mu + j] + s * x[h.eta_mu[g] + j];
                    }
                }
                for j in 0..ks {
                    let s = self.scale(x, h.sd_sigma, j);
                    for g in 0..self.n_groups {
                        nu[g * ks + j] = x[h.mu_sigma + j] + s * x[h.eta_sigma[g] + j];
                    }
                }
            }
        }
    }

    /// Hyper-location blocks `(μ_θμ, μ_θσ)` of an unconstrained vector (hbr only).
    pub fn hyper_means<T: Real>(&self, x: &[T]) -> Option<(Vec<T>, Vec<T>)> {
        let h = self.hyper.as_ref()?;
        Some((
            x[h.mu_mu..h.mu_mu + self.k_mu].to_vec(),
            x[h.mu_sigma..h.mu_sigma + self.k_sigma].to_vec(),
        ))
    }

    fn backprop<T: Real>(&self, x: &[T], gtheta: &[T], gnu: &[T], grad: &mut [T]) {
        let (k, ks) = (self.k_mu, self.k_sigma);
        match &self.hyper {
            None => {
                for g in 0..self.n_groups {
                    for j in 0..k {
                        grad[self.theta_mu[g] + j] += gtheta[g * k + j];
                    }
                    for j in 0..ks {
                        grad[self.theta_sigma[g] + j] += gnu[g * ks + j];
                    }
                }
            }
            Some(h) => {
                let chain = |gs: &[T],
                             kk: usize,
                             mu: usize,
                             sd: Option<usize>,
                             eta: &[usize],
                             grad: &mut [T]| {
                    for j in 0..kk {
                        let s = self.scale(x, sd, j);
                        let mut d_sd = T::zero();
                        for g in 0..self.n_groups {
                            let gt = gs[g * kk + j];
                            grad[mu + j] += gt;
                            grad[eta[g] + j] += s * gt;
                            d_sd += gt * x[eta[g] + j];
                        }
                        if let Some(o) = sd {
                            grad[o + j] += d_sd * s;
                        }
                    }
                };
                chain(gtheta, k, h.mu_mu, h.sd_mu, &h.eta_mu, grad);
                chain(gnu, ks, h.mu_sigma, h.sd_sigma, &h.eta_sigma, grad);
            }
        }
    }

    fn log_prior<T: Real>(&self, x: &[T], priors: &UnitHyperpriors, grad: &mut [T]) -> T {
        let mut lp = T::zero();
        let mut add = |p: &Prior, t: Transform, i: usize, grad: &mut [T]| {
            let u = x[i];
            let c = t.constrain(u);
            grad[i] += p.dlogpdf(c) * t.dconstrain(u) + t.dlog_jacobian(u);
            lp += p.logpdf(c) + t.log_jacobian(u);
        };
        match &self.hyper {
            None => {
                for g in 0..self.n_groups {
                    for j in 0..self.k_mu {
                        add(
                            &Prior::DEFAULT_LOCATION,
                            Transform::Identity,
                            self.theta_mu[g] + j,
                            grad,
                        );
                    }
                    for j in 0..self.k_sigma {
                        let i = self.theta_sigma[g] + j;
                        match self.link {
                            NoiseLink::Bounded => add(&Prior::NOISE_SD, NOISE_BOUNDS, i, grad),
                            NoiseLink::Softplus => {
                                add(&Prior::DEFAULT_LOCATION, Transform::Identity, i, grad)
                            }
                        }
                    }
                }
            }
            Some(h) => {
                let std_normal = Prior::Normal {
                    loc: 0.0,
                    scale: 1.0,
                };
                for j in 0..self.k_mu {
                    add(
                        &priors.mu_theta_mu[j],
                        Transform::Identity,
                        h.mu_mu + j,
                        grad,
                    );
                    if let Some(o) = h.sd_mu {
                        add(&priors.sigma_theta_mu[j], Transform::Log, o + j, grad);
                    }
                    for g in 0..self.n_groups {
                        add(&std_normal, Transform::Identity, h.eta_mu[g] + j, grad);
                    }
                }
                for j in 0..self.k_sigma {
                    add(
                        &priors.mu_theta_sigma[j],
                        Transform::Identity,
                        h.mu_sigma + j,
                        grad,
                    );
                    if let Some(o) = h.sd_sigma {
                        add(&priors.sigma_theta_sigma[j], Transform::Log, o + j, grad);
                    }
                    for g in 0..self.n_groups {
                        add(&std_normal, Transform::Identity, h.eta_sigma[g] + j, grad);
                    }
                }
            }
        }
        lp
    }
}

#[derive(Clone, Debug)]
enum Likelihood {
    /// Per-group sufficient statistics `n`, `Σy²`, `Σφy`, `Σφφᵀ`.
    Homoscedastic {
        n: Vec<f64>,
        syy: Vec<f64>,
        sfy: Vec<f64>,
        sff: Vec<f64>,
    },
    /// Row-wise terms: group, mean features, noise features, response.
    Heteroscedastic {
        group: Vec<usize>,
        phi_mu: Vec<f64>,
        phi_sigma: Vec<f64>,
        y: Vec<f64>,
    },
}

/// Joint log density of one measurement unit.
#[derive(Clone, Debug)]
pub struct RegressionDensity {
    structure: ParamStructure,
    likelihood: Likelihood,
    priors: UnitHyperpriors,
}

impl RegressionDensity {
    /// `x_std`: standardized covariates; `y_std`: standardized responses;
    /// `batch`: dense batch index per row.
    pub fn new(
        spec: &ModelSpec,
        x_std: &Array2<f64>,
        y_std: &[f64],
        batch: &[usize],
        n_batches: usize,
        priors: UnitHyperpriors,
    ) -> Self {
        let p = x_std.ncols();
        let structure = ParamStructure::new(spec, p, n_batches);
        let (k, ks, groups) = (structure.k_mu, structure.k_sigma, structure.n_groups);
        let degree = spec.mean_form.degree();
        let mut phi = Vec::with_capacity(k);
        let likelihood = match spec.noise_form {
            NoiseForm::Homoscedastic => {
                let (mut n, mut syy) = (vec![0.0; groups], vec![0.0; groups]);
                let (mut sfy, mut sff) = (vec![0.0; groups * k], vec![0.0; groups * k * k]);
                for (r, row) in x_std.rows().into_iter().enumerate() {
                    let g = structure.group_of_batch(batch[r]);
                    let y = y_std[r];
                    features(row.as_slice().expect("standard layout"), degree, &mut phi);
                    n[g] += 1.0;
                    syy[g] += y * y;
                    for a in 0..k {
                        sfy[g * k + a] += phi[a] * y;
                        for b in 0..k {
                            sff[(g * k + a) * k + b] += phi[a] * phi[b];
                        }
                    }
                }
                Likelihood::Homoscedastic { n, syy, sfy, sff }
            }
            NoiseForm::Heteroscedastic(q) => {
                let mut phi_mu = Vec::with_capacity(x_std.nrows() * k);
                let mut phi_sigma = Vec::with_capacity(x_std.nrows() * ks);
                let mut group = Vec::with_capacity(x_std.nrows());
                for (r, row) in x_std.rows().into_iter().enumerate() {
                    let row = row.as_slice().expect("standard layout");
                    features(row, degree, &mut phi);
                    phi_mu.extend_from_slice(&phi);
                    features(row, q, &mut phi);
                    phi_sigma.extend_from_slice(&phi);
                    group.push(structure.group_of_batch(batch[r]));
                }
                Likelihood::Heteroscedastic {
                    group,
                    phi_mu,
                    phi_sigma,
                    y: y_std.to_vec(),
                }
            }
        };
        RegressionDensity {
            structure,
            likelihood,
            priors,
        }
    }

    pub fn structure(&self) -> &ParamStructure {
        &self.structure
    }

    fn log_likelihood<T: Real>(&self, theta: &[T], nu: &[T], gtheta: &mut [T], gnu: &mut [T]) -> T {
        let (k, ks, link) = (
            self.structure.k_mu,
            self.structure.k_sigma,
            self.structure.link,
        );
        let half = T::lit(0.5);
        let mut lp = T::zero();
        match &self.likelihood {
            Likelihood::Homoscedastic { n, syy, sfy, sff } => {
                for g in 0..self.structure.n_groups {
                    if n[g] == 0.0 {
                        continue;
                    }
                    let (sd, dsd) = link.apply(nu[g]);
                    let th = &theta[g * k..(g + 1) * k];
                    let mut rss = T::lit(syy[g]);
                    for a in 0..k {
                        let mut s_theta = T::zero();
                        for b in 0..k {
                            s_theta += T::lit(sff[(g * k + a) * k + b]) * th[b];
                        }
                        let fy = T::lit(sfy[g * k + a]);
                        rss += th[a] * (s_theta - fy - fy);
                        gtheta[g * k + a] = (fy - s_theta) / (sd * sd);
                    }
                    let ng = T::lit(n[g]);
                    lp -= ng * (T::lit(LN_SQRT_2PI) + sd.ln()) + half * rss / (sd * sd);
                    gnu[g] = (-ng / sd + rss / (sd * sd * sd)) * dsd;
                }
            }
            Likelihood::Heteroscedastic {
                group,
                phi_mu,
                phi_sigma,
                y,
            } => {
                for (i, &g) in group.iter().enumerate() {
                    let fm = &phi_mu[i * k..(i + 1) * k];
                    let fs = &phi_sigma[i * ks..(i + 1) * ks];
                    let th = &theta[g * k..(g + 1) * k];
                    let nv = &nu[g * ks..(g + 1) * ks];
                    let mut f = T::zero();
                    for a in 0..k {
                        f += T::lit(fm[a]) * th[a];
                    }
                    let mut v = T::zero();
                    for a in 0..ks {
                        v += T::lit(fs[a]) * nv[a];
                    }
                    let (sd, dsd) = link.apply(v);
                    let r = T::lit(y[i]) - f;
                    let inv_var = T::one() / (sd * sd);
                    lp -= T::lit(LN_SQRT_2PI) + sd.ln() + half * r * r * inv_var;
                    let df = r * inv_var;
                    let dv = (r * r * inv_var - T::one()) / sd * dsd;
                    for a in 0..k {
                        gtheta[g * k + a] += df * T::lit(fm[a]);
                    }
                    for a in 0..ks {
                        gnu[g * ks + a] += dv * T::lit(fs[a]);
                    }
                }
            }
        }
        lp
    }
}

impl<T: Real> LogDensity<T> for RegressionDensity {
    fn layout(&self) -> &Layout {
        &self.structure.layout
    }

    fn logp_and_grad(&self, x: &[T], grad: &mut [T]) -> Result<T, DensityError> {
        check_dim(&self.structure.layout, x, grad)?;
        let s = &self.structure;
        let mut theta = vec![T::zero(); s.n_groups * s.k_mu];
        let mut nu = vec![T::zero(); s.n_groups * s.k_sigma];
        s.decode(x, &mut theta, &mut nu);
        let mut gtheta = vec![T::zero(); theta.len()];
        let mut gnu = vec![T::zero(); nu.len()];
        let ll = self.log_likelihood(&theta, &nu, &mut gtheta, &mut gnu);
        grad.iter_mut().for_each(|g| *g = T::zero());
        s.backprop(x, &gtheta, &gnu, grad);
        let lp = ll + s.log_prior(x, &self.priors, grad);
        if !ll.is_finite() {
            let block = s
                .layout
                .blocks()
                .iter()
                .rev()
                .find(|b| b.name.contains("sigma"))
                .map(|b| b.name.clone());
            return Err(DensityError::NonFinite {
                block: block.unwrap_or_default(),
            });
        }
        check_finite(&s.layout, lp, grad)
    }
}

/// Density of unit `unit` of `ds` under `spec`, standardized with the training
/// moments of `ds` (or those carried by the spec's hyperprior pack).
pub fn build_density(
    spec: &ModelSpec,
    ds: &Dataset,
    unit: usize,
) -> Result<RegressionDensity, ModelError> {
    if unit >= ds.n_units() {
        return Err(ModelError::Spec(format!(
            "unit {unit} out of range ({} units)",
            ds.n_units()
        )));
    }
    let prepared = super::fit::Prepared::new(spec, ds)?;
    prepared.density(spec, ds, unit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::finite_difference_gradient;
    use crate::models::MeanForm;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(strategy: Strategy, noise: NoiseForm) -> ModelSpec {
        ModelSpec::new(strategy).with_noise(noise)
    }

    #[test]
    fn layout_dimensions() {
        let homo = NoiseForm::Homoscedastic;
        assert_eq!(
            ParamStructure::new(&spec(Strategy::Pooling, homo), 1, 1)
                .layout()
                .dim(),
            3
        );
        // η per batch (4·2), μ (2), σ (2), per-batch noise η (4), its μ and σ (1+1)
        let hbr = ParamStructure::new(&spec(Strategy::Hbr, homo), 1, 4);
        assert_eq!(hbr.layout().dim(), 4 * 2 + 2 + 2 + 4 + 1 + 1);
        assert!(hbr.layout().is_partition());
        let np = ParamStructure::new(
            &spec(Strategy::NoPooling, NoiseForm::Heteroscedastic(2)),
            1,
            3,
        );
        assert_eq!(np.layout().dim(), 3 * 2 + 3 * 3);
        let clamped = ParamStructure::new(
            &ModelSpec {
                hyper_sd_clamp: Some(1e-6),
                ..spec(Strategy::Hbr, homo)
            },
            1,
            4,
        );
        assert_eq!(clamped.layout().dim(), 18 - 3);
    }

    #[test]
    fn features_expand_each_covariate() {
        let mut out = Vec::new();
        features(&[2.0, -1.0], 3, &mut out);
        assert_eq!(out, vec![1.0, 2.0, 4.0, 8.0, -1.0, 1.0, -1.0]);
    }

    fn toy(strategy: Strategy, noise: NoiseForm, mean: MeanForm) -> RegressionDensity {
        let x = array![[-1.0], [0.2], [1.1], [0.4], [-0.6], [1.5]];
        let y = [0.3, -0.2, 1.0, 0.1, -0.9, 1.7];
        let batch = [0, 1, 2, 0, 1, 2];
        let s = spec(strategy, noise).with_mean(mean);
        let p = ParamStructure::new(&s, 1, 3);
        RegressionDensity::new(
            &s,
            &x,
            &y,
            &batch,
            3,
            UnitHyperpriors::weakly_informative(p.k_mu, p.k_sigma),
        )
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for strategy in [Strategy::Pooling, Strategy::NoPooling, Strategy::Hbr] {
            for noise in [NoiseForm::Homoscedastic, NoiseForm::Heteroscedastic(2)] {
                for mean in [MeanForm::Linear, MeanForm::Polynomial(2)] {
                    let d = toy(strategy, noise, mean);
                    let dim = LogDensity::<f64>::dim(&d);
                    for _ in 0..20 {
                        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.75..0.75)).collect();
                        let mut g = vec![0.0; dim];
                        d.logp_and_grad(&x, &mut g).unwrap();
                        let fd = finite_difference_gradient(&d, &x, 1e-5).unwrap();
                        for (a, f) in g.iter().zip(&fd) {
                            assert!(
                                (a - f).abs() / a.abs().max(1.0) < 1e-5,
                                "{strategy:?} {noise:?}: {a} vs {f}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn homoscedastic_statistics_match_row_sum() {
        // Sufficient-statistic likelihood equals the naive per-row sum.
        let d = toy(
            Strategy::NoPooling,
            NoiseForm::Homoscedastic,
            MeanForm::Linear,
        );
        let x: Vec<f64> = vec![0.1, 0.5, -0.3, 1.2, 0.8, -0.4, 0.2, -1.0, 0.7];
        let mut g = vec![0.0; 9];
        let lp = d.logp_and_grad(&x, &mut g).unwrap();
        let xs = [-1.0, 0.2, 1.1, 0.4, -0.6, 1.5];
        let ys = [0.3, -0.2, 1.0, 0.1, -0.9, 1.7];
        let mut naive = 0.0;
        for r in 0..6 {
            let b = r % 3;
            let sd = NOISE_BOUNDS.constrain(x[6 + b]);
            naive += crate::math::normal_logpdf(ys[r], x[2 * b] + x[2 * b + 1] * xs[r], sd);
        }
        for b in 0..3 {
            naive += -(100f64).ln() + NOISE_BOUNDS.log_jacobian(x[6 + b]);
            for j in 0..2 {
                naive += Prior::DEFAULT_LOCATION.logpdf(x[2 * b + j]);
            }
        }
        assert!((lp - naive).abs() < 1e-10, "{lp} vs {naive}");
    }
}
