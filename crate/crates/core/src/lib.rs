//! Joint latent class trees: survival-guided partitioning of longitudinal
//! subjects into latent classes, with per-class mixed models.

pub mod cox;
pub mod curve;
pub mod data;
pub mod split;
pub mod lmm;
pub mod tree;
pub mod sim;
pub mod metrics;
pub mod pipeline;
