//! Gaussian-process modelling and Bayesian optimization over tree-structured
//! conditional parameter spaces.

pub mod acquisition;
pub mod gp;
pub mod kernel;
pub mod linalg;
pub mod optim;
mod scalar;
pub mod tree;

pub use acquisition::{propose, propose_with_schedule, ucb, Growth, Proposal, ProposeOptions, UcbSchedule};
pub use gp::{fit_hyperparameters, Dataset, FitOptions, FitResult, GpError, GpModel, Posterior, SelectionView};
pub use kernel::{AddTreeKernel, BaseKernelParams, KernelError, KernelKind, KernelRecord, ParamLayout, Tying, ZeroDimPolicy};
pub use linalg::{Cholesky, JitterPolicy, LinalgError, Matrix};
pub use scalar::Scalar;
pub use tree::{LinearizedPoint, PathIndex, PointError, SlotRange, SpecError, TreeSpace, TreeSpec, VertexId, VertexSpec};

pub type TreeSpecF64 = TreeSpec<f64>;
pub type TreeSpecF32 = TreeSpec<f32>;
pub type TreeSpaceF64 = TreeSpace<f64>;
pub type TreeSpaceF32 = TreeSpace<f32>;
pub type AddTreeKernelF64 = AddTreeKernel<f64>;
pub type AddTreeKernelF32 = AddTreeKernel<f32>;
pub type GpModelF64 = GpModel<f64>;
pub type GpModelF32 = GpModel<f32>;
pub type DatasetF64 = Dataset<f64>;
pub type DatasetF32 = Dataset<f32>;
