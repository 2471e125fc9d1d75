//! Character-level decoder language model with thresholded cross-entropy,
//! separated embedding updates, gradient decomposition, and embedding analysis.

pub mod analysis;
pub mod calibration;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod float;
pub mod gradcheck;
pub mod gradlog;
pub mod kernels;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod optim;
pub mod report;
pub mod train;

pub use corpus::{Language, PreparedData, TokenStream, Vocab};
pub use error::{Error, Result};
pub use eval::MetricsReport;
pub use float::Scalar;
pub use loss::{LossSpec, LossVariant, Subtrahend};
pub use gradlog::GradLog;
pub use model::{ModelConfig, ModelParams};
pub use optim::OptimConfig;
pub use train::RunConfig;
