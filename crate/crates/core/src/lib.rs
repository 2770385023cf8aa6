//! Modality-token guided DETR-style detection.
//!
//! The crate bundles a small reverse-mode autodiff engine, a toy query-based
//! detector whose decoder self-attention can mix in a projected modality token,
//! a contrastive pretraining stage that aligns the mean query state with that
//! token, set-prediction losses with Hungarian matching, COCO-style evaluation,
//! and an exact verifier for the InfoNCE mutual-information lower bound.

pub mod autodiff;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mi_lab;
pub mod optim;
pub mod queryrepa;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
