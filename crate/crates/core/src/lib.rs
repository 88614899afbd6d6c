//! Self-supervised image + point-cloud pre-training in bird's-eye view.
//!
//! Two tiny transformer backbones encode multi-camera images and LiDAR
//! sweeps into BEV grids. Training combines a cell-wise contrastive loss
//! between the two grids with masked-patch reconstruction on the images,
//! and conditions every backbone normalization on a per-dataset soft prompt
//! so several differently-rigged datasets can be mixed.
//!
//! Everything runs on the small reverse-mode engine in [`tensor`].

// Negated float comparisons are how NaN gets rejected in validators.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod gradsuite;
pub mod heatmap;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod prompt;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::{Graph, Tensor, Var};
