//! Reverse-mode gradients over the tensor kernels, checked against central
//! finite differences in 64-bit precision.

mod gradcheck;
mod tape;

pub use gradcheck::{
    fd_gradcheck, sample_inputs, GradInput, GradcheckReport, DEFAULT_TOL, FD_STEP, FD_STEP_COARSE,
    KINK_MARGIN, NOISE_FACTOR,
};
pub use tape::{vector_dims, Gradients, Tape, TapeNode, Var};
