//! Silent-face voice conversion on synthetic audio-visual corpora.
//!
//! The crate trains a video-to-spectrogram model whose speaker identity comes
//! from pooled face embeddings, aligns those embeddings with audio identity
//! embeddings through a bidirectional contrastive loss, and removes identity
//! from the content path by minimizing a sampled contrastive log-ratio upper
//! bound on mutual information. Trained models convert identity by swapping
//! face inputs and interpolate between identities in embedding space.

pub mod autograd;
pub mod cli;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod miest;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Matrix;
