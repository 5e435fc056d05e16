//! Coreset selection for segmentation patches and the tooling around it:
//! patch extraction, embedding files, dataset-quantization sampling, replay
//! mixes, segmentation metrics, diversity diagnostics and an experiment
//! harness that drives an external trainer.

pub mod diversity;
pub mod dq;
pub mod embeddings;
pub mod error;
pub mod harness;
pub mod listing;
pub mod metrics;
pub mod mock_trainer;
pub mod patching;
pub mod raster;
pub mod replay;

pub use dq::{form_bins, random_baseline, sample_coreset, BinPartition, CoresetSelection};
pub use embeddings::{read_embeddings, write_embeddings, EmbeddingMatrix, PatchId};
pub use error::{Error, Result};
pub use metrics::{ImageMetrics, MetricsReport};
