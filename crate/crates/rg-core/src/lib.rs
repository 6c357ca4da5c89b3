//! Radian-glue cross-modal BEV fusion and cooperative detection, desk-scale
//! and framework-free.
//!
//! The crate layers up from a minimal dense-tensor substrate with
//! reverse-mode differentiation ([`tensor`], [`tape`], [`optim`]), through
//! planar geometry and polar grid sectors ([`geometry`]), the column-wise
//! cross-modal attention kernel ([`rgattn`]) and the multi-scale
//! foreground-aware fusion backbone ([`pyramid`]), to the three cooperative
//! perception pipelines with detection head, losses and AP evaluation
//! ([`arch`]).

pub mod arch;
pub mod container;
pub mod dims;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod heatmap;
pub mod kernels;
pub mod opcount;
pub mod optim;
pub mod param;
pub mod pyramid;
pub mod rgattn;
pub mod tape;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tensor::{Real, Tensor};
