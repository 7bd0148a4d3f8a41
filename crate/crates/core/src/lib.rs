//! Core numerics and bookkeeping for clustering large forensic image
//! collections.
//!
//! The pipeline runs in stages, each one a module here:
//!
//! * [`ingest`]: image manifest and per-image feature matrices.
//! * [`weather`]: accumulated degree-day (ADD) vectors from hourly weather
//!   and their concatenation onto reduced image features.
//! * [`pca`]: principal component reduction.
//! * [`tsne`]: exact t-SNE projection to 2D for eyeballing cluster counts.
//! * [`kmeans`]: k-means++ seeded Lloyd clustering with restarts.
//! * [`eval`]: human review sessions, cluster merges and precision metrics.
//!
//! Heavy inner loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iteration otherwise. Both paths
//! produce bit-identical results.

pub mod error;
pub mod eval;
pub mod ingest;
pub mod kmeans;
pub mod matrix;
pub mod par;
pub mod pca;
mod svd;
pub mod tsne;
pub mod weather;

pub use error::{Error, Result};
pub use matrix::Matrix;
