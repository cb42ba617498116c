//! Knowledge-graph context-enhanced diversified recommendation.
//!
//! Item embeddings are refined by relational propagation over a knowledge
//! graph, users are represented by a diversity-weighted pooling of their
//! items, and a light graph convolution over the interaction graph feeds a
//! BPR objective regularised by conditional alignment and uniformity terms.
//! Evaluation reports Recall/NDCG alongside entity and relation coverage.

pub mod cau;
pub mod compute;
pub mod data;
pub mod del;
pub mod error;
pub mod eval;
pub mod kv;
pub mod par;
pub mod propagation;
pub mod trainer;

pub use error::{ComputeError, DataError, Error, Result};
