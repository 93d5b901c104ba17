//! Contrastive self-supervised pre-training for class-imbalanced tabular
//! classification.
//!
//! Phase 1 trains an encoder with an InfoNCE objective over feature-swapped
//! and feature-masked views of unlabeled rows, then stacks raw features with
//! their embeddings. Phase 2 trains ordinary classifiers on the stacked
//! space and compares them against the same classifiers on raw features.

pub mod augmentation;
pub mod data;
pub mod diff;
pub mod downstream;
pub mod encoders;
pub mod evaluation;
pub mod experiment;
pub mod pretrain;
pub mod seed;
pub mod stacking;
