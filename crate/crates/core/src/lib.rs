//! Fixed-point DroNet inference with an L1/L2 tiling compiler, a two-stack L2
//! planner, a calibrated cycle and power model, the host offload protocol and
//! the closed-loop collision-avoidance logic.

pub mod cost;
pub mod ctrl;
pub mod error;
pub mod exec;
pub mod fxp;
pub mod kernels;
pub mod l2plan;
pub mod metrics;
pub mod net;
pub mod offload;
pub mod tiler;

pub use error::{Error, Result};
