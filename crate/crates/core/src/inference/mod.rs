//! Log densities with analytic gradients, the NUTS sampler and its
//! convergence diagnostics.

pub mod density;
pub mod diagnostics;
pub mod draws;
pub mod layout;
pub mod nuts;

pub use density::{
    finite_difference_gradient, DensityError, Gaussian, LogDensity, NormalMean, StandardNormal,
};
pub use diagnostics::DiagnosticsReport;
pub use draws::{ChainStats, PosteriorDraws};
pub use layout::{Block, Layout, Transform};
pub use nuts::{sample_nuts, SamplerConfig, SamplerError};
