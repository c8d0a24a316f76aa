//! Analytical performance and resource models, numeric kernels and a
//! cycle-level dataflow simulator for a Winograd-based CNN accelerator.

pub mod arch;
pub mod dlat;
pub mod dse;
pub mod error;
pub mod perf;
pub mod reference;
pub mod shared_exp;
pub mod sim;
pub mod tensor;
pub mod topology;
pub mod weights;
pub mod winograd;

pub use error::{Error, Result};
pub use tensor::{ErrorAccumulator, ErrorStats, Tensor};
