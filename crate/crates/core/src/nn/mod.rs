//! Layers and EfficientNet-style blocks, and the model builder.
//!
//! There is no batch normalization: with batches of four the statistics are
//! too noisy, so blocks rely on He initialization and SE gating instead.

mod layers;
mod model;
mod spec;

pub use layers::{
    dropout, inverted_residual, se_block, stochastic_depth, BlockWeights, ConvWeights, SeWeights,
};
pub use model::{build_model, init_rng, ForwardPass, Model, ParamInfo};
pub use spec::{BlockConfig, ModelSpec, StageConfig, DEFAULT_SE_RATIO, DEFAULT_SURVIVAL_PROB};

use serde::{Deserialize, Serialize};

/// Stochastic elements (dropout, stochastic depth, augmentation) only fire
/// in `Train`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}
