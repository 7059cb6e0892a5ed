//! Unsupervised task construction and few-shot meta-learning.
//!
//! Builds few-shot classification tasks from unlabeled data by partitioning an
//! embedding space (scaled k-means, random hyperplanes, random assignment),
//! meta-trains MAML and prototypical networks on those tasks, and evaluates
//! them against embedding baselines on labeled held-out tasks.

pub mod baselines;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod metalearn;
pub mod nn;
pub mod optim;
pub mod partition;
pub mod seed;
pub mod taskgen;

pub use error::{Error, Result};
