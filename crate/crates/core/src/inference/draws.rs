use serde::{Deserialize, Serialize};

use super::diagnostics::DiagnosticsReport;
use super::layout::Layout;
use crate::scalar::Real;

/// Per-chain sampler statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub step_size: f64,
    pub inv_mass: Vec<f64>,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub mean_accept: f64,
    pub mean_tree_depth: f64,
    pub max_depth_hits: usize,
    pub leapfrog_steps: usize,
}

/// Post-warmup draws in unconstrained space, stored chain-major
/// (`values[(chain · n_draws + draw) · dim + coord]`).
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorDraws<T: Real = f64> {
    pub layout: Layout,
    pub n_chains: usize,
    pub n_draws: usize,
    pub values: Vec<T>,
    pub chain_stats: Vec<ChainStats>,
    pub diagnostics: DiagnosticsReport,
}

impl<T: Real> PosteriorDraws<T> {
    /// Assemble draws and compute diagnostics.
    pub fn new(
        layout: Layout,
        n_chains: usize,
        n_draws: usize,
        values: Vec<T>,
        chain_stats: Vec<ChainStats>,
    ) -> Self {
        assert_eq!(values.len(), n_chains * n_draws * layout.dim());
        let mut out = PosteriorDraws {
            layout,
            n_chains,
            n_draws,
            values,
            chain_stats,
            diagnostics: DiagnosticsReport::from_chains(Vec::new(), &[], 0, 0, 0.0),
        };
        out.diagnostics = out.compute_diagnostics();
        out
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn total_draws(&self) -> usize {
        self.n_chains * self.n_draws
    }

    /// Unconstrained draw `i` of `chain`.
    pub fn draw(&self, chain: usize, i: usize) -> &[T] {
        let d = self.dim();
        let start = (chain * self.n_draws + i) * d;
        &self.values[start..start + d]
    }

    /// All draws in chain order, unconstrained.
    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.values.chunks_exact(self.dim().max(1))
    }

    /// All draws in chain order, mapped to constrained space.
    pub fn iter_constrained(&self) -> impl Iterator<Item = Vec<T>> + '_ {
        self.iter().map(|d| self.layout.constrain(d))
    }

    /// `out[c]` = draws of unconstrained coordinate `j` in chain `c`, as f64.
    pub fn coordinate_chains(&self, j: usize) -> Vec<Vec<f64>> {
        (0..self.n_chains)
            .map(|c| {
                (0..self.n_draws)
                    .map(|i| self.draw(c, i)[j].as_f64())
                    .collect()
            })
            .collect()
    }

    /// Constrained draws of element `elem` of block `name`, pooled over chains.
    pub fn constrained_column(&self, name: &str, elem: usize) -> Option<Vec<T>> {
        let block = self.layout.find(name)?;
        if elem >= block.len {
            return None;
        }
        let j = block.start + elem;
        Some(
            self.iter()
                .map(|d| block.transform.constrain(d[j]))
                .collect(),
        )
    }

    pub fn compute_diagnostics(&self) -> DiagnosticsReport {
        let names = (0..self.dim())
            .map(|j| self.layout.coordinate_name(j))
            .collect();
        let per_param: Vec<Vec<Vec<f64>>> =
            (0..self.dim()).map(|j| self.coordinate_chains(j)).collect();
        let divergences = self.chain_stats.iter().map(|s| s.divergences).sum();
        let mean_accept = if self.chain_stats.is_empty() {
            f64::NAN
        } else {
            self.chain_stats.iter().map(|s| s.mean_accept).sum::<f64>()
                / self.chain_stats.len() as f64
        };
        DiagnosticsReport::from_chains(
            names,
            &per_param,
            divergences,
            self.total_draws(),
            mean_accept,
        )
    }
}
