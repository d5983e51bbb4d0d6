//! Classifiers supervised by several word embeddings at once, with an
//! output-norm score for out-of-distribution detection.

pub mod adversarial;
pub mod autodiff;
pub mod dataset;
pub mod decoder;
pub mod embedding;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod semantic;
