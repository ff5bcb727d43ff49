//! Softmax-gated mixture-of-experts regression: least-squares fitting,
//! Voronoi losses, identifiability checks, slow-rate witness sequences and
//! convergence-rate experiments.

pub mod adversarial;
pub mod cli;
pub mod data;
pub mod error;
pub mod estimate;
pub mod harness;
pub mod identify;
pub mod losses;
pub mod model;
pub mod quadrature;
pub mod report;
pub mod seed;

pub use data::{generate_dataset, Dataset};
pub use error::{MoeError, Result};
pub use estimate::{fit_sgd, gauge_fix, init_for_budget, init_near_truth, objective, FitConfig, FitResult, GaugeRule};
pub use losses::{
    l2_distance, loss_d1, loss_d2, loss_d3, voronoi_assign, InputDistribution, LossBreakdown, VoronoiAssignment,
    VoronoiLoss,
};
pub use model::{Activation, Atom, AtomGrad, ExpertSpec, MixingMeasure};
