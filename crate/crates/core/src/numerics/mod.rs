//! Numerical foundations: dense linear algebra, parameter visitation,
//! optimizers, seeded randomness, and finite-difference gradient checks.

pub mod gradcheck;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod rng;

pub use gradcheck::grad_check;
pub use linalg::{bilinear, dot, logsumexp, sigmoid, softmax, softmax_slice, Matrix, Vector};
pub use optim::{adagrad_update, Optimizer, OptimizerKind};
pub use params::{clip_global_norm, Params};
