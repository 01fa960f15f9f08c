//! Convergence diagnostics: split R-hat and bulk effective sample size.
//!
//! ESS uses the multi-chain autocorrelation estimator with Geyer's initial
//! positive and monotone sequence truncation, applied to rank-normalized
//! split chains ("bulk" ESS).

use serde::{Deserialize, Serialize};

use crate::math::std_normal_quantile;

/// R-hat above this value flags a parameter as unconverged.
pub const RHAT_THRESHOLD: f64 = 1.01;
/// Divergent-transition fraction above this value is flagged.
pub const DIVERGENCE_THRESHOLD: f64 = 0.01;

/// Split each chain into two halves (dropping the middle draw for odd lengths).
pub fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Potential scale reduction over already-prepared chains of equal length.
///
/// When every draw is identical (zero within- and between-chain variance)
/// the chains trivially agree and 1.0 is returned; zero within-chain variance
/// with disagreeing chains gives +∞.
pub fn r_hat(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.first().map_or(0, Vec::len);
    if m < 2 || n < 2 {
        return f64::NAN;
    }
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / nf).collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = nf / (m as f64 - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m as f64;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    (var_plus / w).sqrt()
}

/// Split R-hat.
pub fn split_r_hat(chains: &[Vec<f64>]) -> f64 {
    r_hat(&split_chains(chains))
}

/// Biased autocovariance of `x` at lags `0..max_lag`.
fn autocovariance(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    (0..max_lag.min(n))
        .map(|t| {
            c[..n - t]
                .iter()
                .zip(&c[t..])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / n as f64
        })
        .collect()
}

/// Multi-chain ESS of already-prepared chains.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.first().map_or(0, Vec::len);
    let total = (m * n) as f64;
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / nf).collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let between = if m > 1 {
        means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0)
    } else {
        0.0
    };

    // Autocovariances are extended lazily: well-mixed chains truncate early.
    let mut max_lag = 64.min(n);
    let mut acov: Vec<Vec<f64>> = chains.iter().map(|c| autocovariance(c, max_lag)).collect();
    let mean_var = acov.iter().map(|a| a[0] * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    let var_plus = mean_var * (nf - 1.0) / nf + between;
    if !(var_plus > 0.0) {
        return total;
    }
    let mut rho_at = |t: usize, acov: &mut Vec<Vec<f64>>| -> f64 {
        if t >= max_lag {
            max_lag = (2 * max_lag).min(n);
            *acov = chains.iter().map(|c| autocovariance(c, max_lag)).collect();
        }
        let mean_acov = acov.iter().map(|a| a[t]).sum::<f64>() / m as f64;
        1.0 - (mean_var - mean_acov) / var_plus
    };

    let mut rho = vec![0.0; n + 1];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho_at(1, &mut acov);
    rho[1] = odd;
    let mut s = 1usize;
    // The last pair is left out of the positive sequence; it enters below
    // as a bias term that helps with antithetic chains.
    while s + 4 < n && even + odd > 0.0 {
        even = rho_at(s + 1, &mut acov);
        odd = rho_at(s + 2, &mut acov);
        if even + odd >= 0.0 {
            rho[s + 1] = even;
            rho[s + 2] = odd;
        }
        s += 2;
    }
    let max_s = s;
    if even > 0.0 {
        rho[max_s + 1] = even;
    }
    // Geyer's initial monotone sequence over pair sums
    let mut k = 1;
    while k + 3 <= max_s {
        let prev = rho[k - 1] + rho[k];
        if rho[k + 1] + rho[k + 2] > prev {
            rho[k + 1] = prev / 2.0;
            rho[k + 2] = prev / 2.0;
        }
        k += 2;
    }
    let tau =
        (-1.0 + 2.0 * rho[..max_s].iter().sum::<f64>() + rho[max_s + 1]).max(1.0 / total.log10());
    total / tau
}

/// Rank-normalize the pooled draws: average ranks for ties, then the
/// Blom-type transform `Φ⁻¹((r − 3/8)/(S + 1/4))`.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(Vec::len).sum();
    let mut idx: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, v)| v.iter().enumerate().map(move |(i, &x)| (x, c, i)))
        .collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && idx[j + 1].0 == idx[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let z = std_normal_quantile((avg_rank - 0.375) / (total as f64 + 0.25));
        for &(_, c, k) in &idx[i..=j] {
            out[c][k] = z;
        }
        i = j + 1;
    }
    out
}

/// Bulk ESS: ESS of the rank-normalized split chains.
pub fn ess_bulk(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    let first = split.first().map(|c| c[0]);
    if split.iter().all(|c| c.iter().all(|&x| Some(x) == first)) {
        return split.iter().map(Vec::len).sum::<usize>() as f64;
    }
    ess(&rank_normalize(&split))
}

/// Per-parameter convergence summary of a multi-chain run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub parameter_names: Vec<String>,
    pub r_hat: Vec<f64>,
    pub ess_bulk: Vec<f64>,
    pub divergences: usize,
    pub transitions: usize,
    pub mean_accept: f64,
}

impl DiagnosticsReport {
    /// `param_chains[j][c]` holds the draws of parameter `j` in chain `c`.
    pub fn from_chains(
        parameter_names: Vec<String>,
        param_chains: &[Vec<Vec<f64>>],
        divergences: usize,
        transitions: usize,
        mean_accept: f64,
    ) -> Self {
        let r_hat = param_chains.iter().map(|c| split_r_hat(c)).collect();
        let ess_bulk = param_chains.iter().map(|c| ess_bulk(c)).collect();
        DiagnosticsReport {
            parameter_names,
            r_hat,
            ess_bulk,
            divergences,
            transitions,
            mean_accept,
        }
    }

    pub fn max_r_hat(&self) -> f64 {
        self.r_hat
            .iter()
            .copied()
            .filter(|r| !r.is_nan())
            .fold(f64::NAN, f64::max)
    }

    pub fn min_ess(&self) -> f64 {
        self.ess_bulk
            .iter()
            .copied()
            .filter(|r| !r.is_nan())
            .fold(f64::NAN, f64::min)
    }

    pub fn divergence_fraction(&self) -> f64 {
        if self.transitions == 0 {
            0.0
        } else {
            self.divergences as f64 / self.transitions as f64
        }
    }

    pub fn r_hat_flagged(&self) -> bool {
        self.r_hat.iter().any(|&r| r > RHAT_THRESHOLD || r.is_nan())
    }

    pub fn divergence_flagged(&self) -> bool {
        self.divergence_fraction() > DIVERGENCE_THRESHOLD
    }

    pub fn is_clean(&self) -> bool {
        !self.r_hat_flagged() && !self.divergence_flagged()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn iid(chains: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..chains)
            .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    /// Integrated autocorrelation time from the plain autocorrelation sum,
    /// truncated at the first negative lag; independent of the Geyer code.
    fn naive_ess(chains: &[Vec<f64>]) -> f64 {
        let all: Vec<f64> = chains.iter().flatten().copied().collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / all.len() as f64;
        let mut tau = 1.0;
        for lag in 1..100 {
            let mut num = 0.0;
            let mut cnt = 0.0;
            for c in chains {
                for i in 0..c.len() - lag {
                    num += (c[i] - mean) * (c[i + lag] - mean);
                    cnt += 1.0;
                }
            }
            let r = num / cnt / var;
            if r < 0.0 {
                break;
            }
            tau += 2.0 * r;
        }
        all.len() as f64 / tau
    }

    #[test]
    fn identical_constant_chains_give_exactly_one() {
        let chains = vec![vec![0.5; 100]; 4];
        assert_eq!(split_r_hat(&chains), 1.0);
    }

    #[test]
    fn identical_sequences_show_no_between_chain_excess() {
        let base: Vec<f64> = (0..200).map(|i| ((i * 37) % 11) as f64).collect();
        let chains = vec![base.clone(), base.clone(), base];
        let r = split_r_hat(&chains);
        assert!(r <= 1.0 + 1e-12, "{r}");
    }

    #[test]
    fn offset_chain_is_flagged() {
        let mut chains = iid(4, 1000, 3);
        for v in &mut chains[0] {
            *v += 10.0;
        }
        assert!(split_r_hat(&chains) > 1.1);
    }

    #[test]
    fn iid_ess_is_close_to_draw_count() {
        let chains = iid(4, 1000, 11);
        let bulk = ess_bulk(&chains);
        let oracle = naive_ess(&chains);
        assert!((2000.0..=4800.0).contains(&bulk), "bulk ess {bulk}");
        assert!((2000.0..=4800.0).contains(&oracle), "oracle ess {oracle}");
        assert!((bulk - oracle).abs() / oracle < 0.25, "{bulk} vs {oracle}");
    }

    #[test]
    fn autocorrelated_chain_has_lower_ess() {
        // AR(1) with phi = 0.9: ESS/N ≈ (1 − phi)/(1 + phi) ≈ 0.053
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..2000)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        x = 0.9 * x + e;
                        x
                    })
                    .collect()
            })
            .collect();
        let e = ess_bulk(&chains);
        let expect = 8000.0 * 0.1 / 1.9;
        assert!(e > 0.6 * expect && e < 1.5 * expect, "{e} vs {expect}");
    }

    #[test]
    fn report_flags() {
        let chains = iid(2, 500, 1);
        let r = DiagnosticsReport::from_chains(vec!["x".into()], &[chains], 20, 1000, 0.8);
        assert!(!r.r_hat_flagged());
        assert!(r.divergence_flagged());
        assert!(!r.is_clean());
    }
}
