//! Parameter identification for `dz/dt = cos(theta1 z + theta2)` with adjoint
//! gradients and Lie-symmetry conservation regularizers.

pub mod adjoint;
pub mod conservation;
pub mod datagen;
pub mod error;
pub mod lie;
pub mod model;
pub mod ode;
pub mod training;

pub use adjoint::{adjoint_gradient, fd_gradient, mse_loss, predict, AdjointState, Gradient};
pub use conservation::{residuals, ResidualMode, ResidualVector};
pub use datagen::{generate_dataset, Dataset, DatasetMeta, ExperimentRecord, GenerationConfig, Observation};
pub use error::{Error, Result};
pub use lie::{GroupConstants, Polynomial};
pub use model::{exact_solution, ModelParams};
pub use ode::{integrate, Method, SolverConfig, TimeSpan, Trajectory};
pub use training::{
    compare_runs, loss_total, train, ComparisonReport, LossBreakdown, LossWeights, Optimizer, StopReason, TrainConfig,
    TrainingReport,
};
