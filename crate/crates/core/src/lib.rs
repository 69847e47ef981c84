//! Joint traffic light and sign detection training mechanics on synthetic
//! scenes: a hierarchical classification loss, background-threshold
//! mini-batch selection for datasets with missing labels, a small trainable
//! detection head and a PR-curve/mAP evaluator.

pub mod cli;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod losses;
pub mod minibatch;
pub mod rng;
pub mod taxonomy;
