//! Progressive cross transformer: a dual-branch network whose cross-attention
//! modules estimate and subtract the group-induced component of the identity
//! features, together with the exact linear subspace decomposition it is
//! modelled on and the fairness-evaluation protocol.

pub mod ablation;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod ct;
pub mod error;
pub mod export;
pub mod fairness;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod probe;
pub mod report;
pub mod subspace;
pub mod synth;
pub mod tensor;

pub use error::{PctError, Result};
pub use tensor::Tensor;
