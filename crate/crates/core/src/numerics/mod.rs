//! Numerical kernels shared by every other module.

pub mod adam;
pub mod cg;
pub mod fft;
pub mod svd;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use cg::{cg_solve, CgOptions, CgOutcome};
pub use fft::{fft2, Direction, Fft1d, Fft2Plan};
pub use svd::{svd_full, svd_truncated, Svd};
pub use tensor::{dot, norm, norm_sqr, rel_error, rel_error_real, CMatrix, ComplexTensor, C64};
