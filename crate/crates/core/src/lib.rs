//! Imaginary-time evolution of infinite tensor network states with
//! environment recycling.
//!
//! The crate covers infinite matrix product states ([`imps`], [`evo1d`]) and
//! infinite projected entangled pair states ([`ipeps`], [`ctm`], [`evo2d`])
//! for the transverse-field Ising model ([`models`]). Between full updates
//! the truncation computed for one step is reused as a fixed renormalized
//! gate, which skips the costly environment and truncation work.

pub mod ctm;
pub mod error;
pub mod evo1d;
pub mod evo2d;
pub mod harness;
pub mod imps;
pub mod ipeps;
pub mod models;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Tensor, C64};
