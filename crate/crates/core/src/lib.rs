//! Partial model training for heterogeneous federated learning.
//!
//! Devices train only a suffix of the model's layers, chosen from a menu of
//! widths, and the server averages each layer over the devices that updated
//! it. Baselines (full-model averaging and random sub-model dropout), a FLOP
//! and wall-clock cost model, a convex testbed and an experiment runner are
//! included.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod aggregation;
pub mod convex;
pub mod cost;
pub mod data;
pub mod error;
pub mod masking;
pub mod nn;
pub mod sim;
pub mod strategies;
pub mod tensor;

pub use error::{Error, Result};
pub use masking::{BpMask, WidthMenu};
pub use nn::{LayerParams, ModelSpec};
pub use tensor::Tensor;
