//! Log-density interface consumed by the sampler, plus a few reference
//! targets with known posteriors.

use thiserror::Error;

use super::layout::{Layout, Transform};
use crate::math::LN_SQRT_2PI;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("non-finite log density in block `{block}`")]
    NonFinite { block: String },
    #[error("expected a parameter vector of length {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Unnormalized log posterior over an unconstrained parameter vector,
/// including the log-Jacobians of every block bijection.
pub trait LogDensity<T: Real>: Sync {
    fn layout(&self) -> &Layout;

    fn dim(&self) -> usize {
        self.layout().dim()
    }

    /// Returns `log p(x)` and overwrites `grad` with its gradient.
    fn logp_and_grad(&self, x: &[T], grad: &mut [T]) -> Result<T, DensityError>;
}

/// Shared argument and result checks for density implementations.
pub(crate) fn check_dim<T: Real>(layout: &Layout, x: &[T], grad: &[T]) -> Result<(), DensityError> {
    if x.len() != layout.dim() || grad.len() != layout.dim() {
        return Err(DensityError::Dimension {
            expected: layout.dim(),
            got: x.len(),
        });
    }
    Ok(())
}

pub(crate) fn check_finite<T: Real>(
    layout: &Layout,
    logp: T,
    grad: &[T],
) -> Result<T, DensityError> {
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        let block = layout
            .block_of(i)
            .map(|b| b.name.clone())
            .unwrap_or_default();
        return Err(DensityError::NonFinite { block });
    }
    if !logp.is_finite() {
        let block = layout
            .blocks()
            .first()
            .map(|b| b.name.clone())
            .unwrap_or_default();
        return Err(DensityError::NonFinite { block });
    }
    Ok(logp)
}

/// Central finite-difference gradient of `density` at `x` with step `h`.
pub fn finite_difference_gradient<T: Real, D: LogDensity<T> + ?Sized>(
    density: &D,
    x: &[T],
    h: T,
) -> Result<Vec<T>, DensityError> {
    let mut scratch = vec![T::zero(); x.len()];
    let mut xp = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = density.logp_and_grad(&xp, &mut scratch)?;
        xp[i] = x[i] - h;
        let down = density.logp_and_grad(&xp, &mut scratch)?;
        xp[i] = x[i];
        out.push((up - down) / (h + h));
    }
    Ok(out)
}

/// Independent standard normal in `dim` dimensions.
#[derive(Clone, Debug)]
pub struct StandardNormal {
    layout: Layout,
}

impl StandardNormal {
    pub fn new(dim: usize) -> Self {
        let mut layout = Layout::new();
        layout.push("x", dim, Transform::Identity);
        StandardNormal { layout }
    }
}

impl<T: Real> LogDensity<T> for StandardNormal {
    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn logp_and_grad(&self, x: &[T], grad: &mut [T]) -> Result<T, DensityError> {
        check_dim(&self.layout, x, grad)?;
        let mut lp = -T::lit(LN_SQRT_2PI * x.len() as f64);
        for (g, &v) in grad.iter_mut().zip(x) {
            lp -= T::lit(0.5) * v * v;
            *g = -v;
        }
        check_finite(&self.layout, lp, grad)
    }
}

/// Multivariate normal given its mean and precision matrix (row-major).
#[derive(Clone, Debug)]
pub struct Gaussian {
    layout: Layout,
    mean: Vec<f64>,
    precision: Vec<f64>,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, precision: Vec<f64>) -> Self {
        let d = mean.len();
        assert_eq!(precision.len(), d * d, "precision must be d×d");
        let mut layout = Layout::new();
        layout.push("x", d, Transform::Identity);
        Gaussian {
            layout,
            mean,
            precision,
        }
    }

    /// Zero-mean bivariate normal with unit variances and correlation `rho`.
    pub fn correlated_2d(rho: f64) -> Self {
        let det = 1.0 - rho * rho;
        Gaussian::new(
            vec![0.0, 0.0],
            vec![1.0 / det, -rho / det, -rho / det, 1.0 / det],
        )
    }
}

impl<T: Real> LogDensity<T> for Gaussian {
    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn logp_and_grad(&self, x: &[T], grad: &mut [T]) -> Result<T, DensityError> {
        check_dim(&self.layout, x, grad)?;
        let d = self.mean.len();
        let r: Vec<T> = x
            .iter()
            .zip(&self.mean)
            .map(|(&v, &m)| v - T::lit(m))
            .collect();
        let mut quad = T::zero();
        for i in 0..d {
            let mut pr = T::zero();
            for j in 0..d {
                pr += T::lit(self.precision[i * d + j]) * r[j];
            }
            grad[i] = -pr;
            quad += r[i] * pr;
        }
        check_finite(&self.layout, -T::lit(0.5) * quad, grad)
    }
}

/// Normal likelihood with known noise sd and a normal prior on the mean:
/// the posterior of the mean is available in closed form.
#[derive(Clone, Debug)]
pub struct NormalMean {
    layout: Layout,
    pub data: Vec<f64>,
    pub noise_sd: f64,
    pub prior_mean: f64,
    pub prior_sd: f64,
}

impl NormalMean {
    pub fn new(data: Vec<f64>, noise_sd: f64, prior_mean: f64, prior_sd: f64) -> Self {
        let mut layout = Layout::new();
        layout.push("mean", 1, Transform::Identity);
        NormalMean {
            layout,
            data,
            noise_sd,
            prior_mean,
            prior_sd,
        }
    }

    /// Posterior mean and variance.
    pub fn posterior(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let prec = 1.0 / (self.prior_sd * self.prior_sd) + n / (self.noise_sd * self.noise_sd);
        let sum: f64 = self.data.iter().sum();
        let mean = (self.prior_mean / (self.prior_sd * self.prior_sd)
            + sum / (self.noise_sd * self.noise_sd))
            / prec;
        (mean, 1.0 / prec)
    }
}

impl<T: Real> LogDensity<T> for NormalMean {
    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn logp_and_grad(&self, x: &[T], grad: &mut [T]) -> Result<T, DensityError> {
        check_dim(&self.layout, x, grad)?;
        let mu = x[0];
        let (s2, t2) = (
            T::lit(self.noise_sd * self.noise_sd),
            T::lit(self.prior_sd * self.prior_sd),
        );
        let dm = mu - T::lit(self.prior_mean);
        let mut lp = -T::lit(0.5) * dm * dm / t2;
        let mut g = -dm / t2;
        for &y in &self.data {
            let r = T::lit(y) - mu;
            lp -= T::lit(0.5) * r * r / s2;
            g += r / s2;
        }
        grad[0] = g;
        check_finite(&self.layout, lp, grad)
    }
}
