//! Desk-scale plant-pathology classification: a small reverse-mode autodiff
//! engine, MBConv-style models with compound scaling, the stochastic training
//! augmentation pipeline, supervised and Noisy Student training, column-wise
//! ROC AUC evaluation, and probability-averaging ensembles.

// Validation is written as `!(x > 0.0)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod scaling;
pub mod selftrain;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
