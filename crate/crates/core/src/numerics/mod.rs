//! Dense tensors, reverse-mode differentiation, Adam and the plateau
//! learning-rate schedule.

mod adam;
mod plateau;
mod tape;
mod tensor;

pub use adam::Adam;
pub use plateau::PlateauSchedule;
pub use tape::{Gradients, Tape, Var, STD_EPS};
pub use tensor::{Tensor, TensorId};
