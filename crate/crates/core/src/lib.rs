//! Retrieval-robustness diagnostics for retrieval-augmented image captioning.
//!
//! The crate is model-agnostic: it consumes caption datastores, embedding
//! matrices, attention dumps and attribution matrices, and runs the analyses
//! over them. A seeded simulator produces synthetic worlds so every analysis
//! can be exercised end to end without a neural captioner.
//!
//! Modules map onto the analysis pipeline:
//!
//! - [`text`]: word tokenization and stop words
//! - [`datastore`]: caption store, `EMB1` embeddings, exact cosine retrieval
//! - [`strategy`]: retrieval-context construction (top-k, sample-k, 2G1B, ...)
//! - [`prompt`]: prompt assembly with five-segment span tracking
//! - [`majority`]: majority tokens and majority-vote statistics
//! - [`attention`]: max-attention segment distributions over `ATT1` dumps
//! - [`attribution`]: integrated gradients and pairwise MT/OT buckets
//! - [`metrics`]: BLEU-4 and CIDEr-D
//! - [`simulator`]: synthetic world and majority-copy caption generator
//! - [`cli`]: the `ragscope` command line

pub mod attention;
pub mod attribution;
pub mod cli;
pub mod datastore;
pub mod error;
pub mod majority;
pub mod metrics;
pub mod prompt;
pub mod provenance;
pub mod rng;
pub mod simulator;
pub mod strategy;
pub mod text;

pub use error::{Error, Result};
