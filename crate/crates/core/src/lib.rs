//! Continual-learning lab: a three-block classifier, bias correction of the
//! output layer, gradient masking, class-balanced replay, scenario
//! generation, strategies and the experiment harness.

pub mod bias;
pub mod error;
pub mod harness;
pub mod masking;
pub mod matrix;
pub mod metrics;
pub mod net;
pub mod replay;
pub mod scenario;
pub mod strategies;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use net::{ClassId, SplitModel};
