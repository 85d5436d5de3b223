//! Dense arrays, the differentiable kernel set and MAC accounting.

mod array;
mod counter;
mod gemm;
pub mod gradcheck;
mod ops;
mod params;
mod tape;

pub use array::{DenseArray, FORMAT_VERSION, MAGIC};
pub use counter::{KernelCount, OpCounter, BYTES_PER_ELEMENT};
pub use gradcheck::{
    check_param_entries, check_param_entries_with, finite_difference_check, finite_difference_check_with, stencil, EntryCheck, Stencil,
};
pub use ops::{focal_value, sigmoid, sinusoid_into, smooth_l1_value, EMBED_BASE, LOG_EPS};
pub(crate) use ops::maxpool3x3_values;
pub use params::ParamStore;
pub use tape::{Gradients, Kernel, Tape, Var};
