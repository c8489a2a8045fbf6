//! One-shot binding of visual concepts to prompt tokens on a small
//! pixel-space diffusion transformer, and composition of bound tokens from
//! multiple sources into a single generated video.
//!
//! The crate is fully self-contained: it ships its own reverse-mode
//! autodiff, a procedurally generated moving-shapes world whose parametric
//! ground truth doubles as the evaluation oracle, the transformer and its
//! rectified-flow training loop, the hierarchical residual binders, and a
//! binary checkpoint container. See the `examples/` directory for one
//! runnable entry point per capability, and the `bico` binary for the
//! operational CLI.

pub mod binder;
pub mod checkpoint;
// pub mod cli;
// pub mod compose;
pub mod config;
pub mod corpus;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod oracle;
pub mod param;
pub mod prompt;
pub mod render;
pub mod scene;
pub mod tensor;
// pub mod training;
pub mod vocab;

pub use error::{BicoError, Result};
pub use tensor::{Scalar, Tensor};

/// Deterministic, stream-labeled rng derivation: one master seed fans out
/// into independent substreams without coupling draw order across uses.
pub fn rng_stream(seed: u64, label: &str) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    rand_chacha::ChaCha8Rng::from_seed(key)
}
