//! Unsupervised task design and meta-training for few-shot classifiers.
//!
//! The pipeline: cluster unlabelled data with a small dense encoder
//! (alternating k-means and pseudo-label training, silhouette-selected),
//! enumerate every binary task over the resulting pseudo-classes, meta-train
//! a classifier episodically over those tasks, then fine-tune and score it on
//! a held-out low-shot binary task against reconstruction and clustering
//! pre-training baselines.

pub mod clustering;
pub mod data;
pub mod error;
pub mod eval;
pub mod matrix;
pub mod meta;
pub mod nn;
pub mod tasks;

pub use error::{Error, Result};
pub use matrix::RealMatrix;
