//! Self-distillation speech pretraining with per-layer online codebooks,
//! plus the speech-unit evaluation stack (ABX, MAP@R, PNMI, unit LM
//! scoring) and a synthetic pseudo-phone corpus generator to drive it all
//! end to end on a desk-scale budget.

pub mod distill;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod masking;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod units;

pub use error::CoreError;
pub use tensor::{Scalar, Tensor};
