//! Differentiable networks, the optimizer and the learning-rate schedule.

mod adam;
mod gradcheck;
mod nets;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, lr_schedule, AdamState};
pub use gradcheck::{grad_check, grad_check_piecewise, rel_err, GradCheckReport};
pub use nets::{Network, NetworkSpec, INIT_STD, LEAK};
pub use params::ParamVector;
pub use tape::{ConvGeom, Gradients, LinearGeom, PadMode, Slot, Tape, Var};
pub use tensor::Tensor;
