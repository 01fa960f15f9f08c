//! Scalar prior families and the per-unit hyperprior set used by the
//! hierarchical model.

use serde::{Deserialize, Serialize};

use crate::math::LN_SQRT_2PI;
use crate::scalar::Real;

/// Prior on a constrained scalar.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Prior {
    Normal {
        loc: f64,
        scale: f64,
    },
    HalfCauchy {
        scale: f64,
    },
    /// `log x ~ N(mu, sigma²)`
    LogNormal {
        mu: f64,
        sigma: f64,
    },
    Uniform {
        lower: f64,
        upper: f64,
    },
}

impl Prior {
    pub const DEFAULT_LOCATION: Prior = Prior::Normal {
        loc: 0.0,
        scale: 10.0,
    };
    pub const DEFAULT_SCALE: Prior = Prior::HalfCauchy { scale: 5.0 };
    pub const NOISE_SD: Prior = Prior::Uniform {
        lower: 0.0,
        upper: 100.0,
    };

    /// Normalized log density; `−∞` outside the support.
    pub fn logpdf<T: Real>(&self, x: T) -> T {
        match *self {
            Prior::Normal { loc, scale } => {
                let r = (x - T::lit(loc)) / T::lit(scale);
                -T::lit(LN_SQRT_2PI + scale.ln()) - T::lit(0.5) * r * r
            }
            Prior::HalfCauchy { scale } => {
                if x < T::zero() {
                    return T::neg_infinity();
                }
                let r = x / T::lit(scale);
                T::lit((2.0 / (std::f64::consts::PI * scale)).ln()) - (r * r).ln_1p()
            }
            Prior::LogNormal { mu, sigma } => {
                if x <= T::zero() {
                    return T::neg_infinity();
                }
                let l = x.ln();
                let r = (l - T::lit(mu)) / T::lit(sigma);
                -l - T::lit(LN_SQRT_2PI + sigma.ln()) - T::lit(0.5) * r * r
            }
            Prior::Uniform { lower, upper } => {
                if x > T::lit(lower) && x < T::lit(upper) {
                    -T::lit((upper - lower).ln())
                } else {
                    T::neg_infinity()
                }
            }
        }
    }

    /// Derivative of [`Prior::logpdf`] inside the support.
    pub fn dlogpdf<T: Real>(&self, x: T) -> T {
        match *self {
            Prior::Normal { loc, scale } => -(x - T::lit(loc)) / T::lit(scale * scale),
            Prior::HalfCauchy { scale } => -T::lit(2.0) * x / (T::lit(scale * scale) + x * x),
            Prior::LogNormal { mu, sigma } => {
                -(T::one() + (x.ln() - T::lit(mu)) / T::lit(sigma * sigma)) / x
            }
            Prior::Uniform { .. } => T::zero(),
        }
    }
}

/// Hyperpriors of one measurement unit, one entry per block element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitHyperpriors {
    pub mu_theta_mu: Vec<Prior>,
    pub sigma_theta_mu: Vec<Prior>,
    pub mu_theta_sigma: Vec<Prior>,
    pub sigma_theta_sigma: Vec<Prior>,
}

impl UnitHyperpriors {
    /// Normal(0, 10²) on locations, half-Cauchy(5) on scales.
    pub fn weakly_informative(k_mu: usize, k_sigma: usize) -> Self {
        UnitHyperpriors {
            mu_theta_mu: vec![Prior::DEFAULT_LOCATION; k_mu],
            sigma_theta_mu: vec![Prior::DEFAULT_SCALE; k_mu],
            mu_theta_sigma: vec![Prior::DEFAULT_LOCATION; k_sigma],
            sigma_theta_sigma: vec![Prior::DEFAULT_SCALE; k_sigma],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{Cauchy, Continuous, LogNormal, Normal};

    #[test]
    fn densities_match_statrs() {
        let n = Normal::new(1.5, 2.0).unwrap();
        let p = Prior::Normal {
            loc: 1.5,
            scale: 2.0,
        };
        let c = Cauchy::new(0.0, 5.0).unwrap();
        let hc = Prior::HalfCauchy { scale: 5.0 };
        let ln = LogNormal::new(-0.3, 0.7).unwrap();
        let pl = Prior::LogNormal {
            mu: -0.3,
            sigma: 0.7,
        };
        for &x in &[0.01, 0.4, 2.0, 7.5] {
            assert!((p.logpdf(x) - n.ln_pdf(x)).abs() < 1e-12);
            assert!((hc.logpdf(x) - (2.0 * c.pdf(x)).ln()).abs() < 1e-12);
            assert!((pl.logpdf(x) - ln.ln_pdf(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_noise_prior_support() {
        let u = Prior::NOISE_SD;
        assert_eq!(u.logpdf(50.0), -(100f64).ln());
        assert_eq!(u.logpdf(-0.1), f64::NEG_INFINITY);
        assert_eq!(u.logpdf(100.5), f64::NEG_INFINITY);
        assert_eq!(
            Prior::HalfCauchy { scale: 5.0 }.logpdf(-1.0),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let priors = [
            Prior::Normal {
                loc: 0.3,
                scale: 1.7,
            },
            Prior::HalfCauchy { scale: 5.0 },
            Prior::LogNormal {
                mu: 0.2,
                sigma: 0.5,
            },
        ];
        let h = 1e-6;
        for p in priors {
            for &x in &[0.2f64, 1.0, 3.3] {
                let fd = (p.logpdf(x + h) - p.logpdf(x - h)) / (2.0 * h);
                assert!((fd - p.dlogpdf(x)).abs() < 1e-6, "{p:?} at {x}");
            }
        }
    }
}
