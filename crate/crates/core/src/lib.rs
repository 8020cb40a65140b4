//! Next point-of-interest recommendation driven by learned graph structure.
//!
//! The pipeline ingests raw check-in logs, learns a two-level graph over
//! points of interest (a pairwise neighborhood graph plus a hierarchical
//! assignment to learned prototypes) from spatial and temporal feature
//! views, propagates embeddings over the learned relations with attention,
//! fuses the views contrastively, and feeds the enriched embeddings to a
//! recurrent next-visit recommender. Training alternates prototype
//! reassignment with gradient steps on a joint objective.
//!
//! Everything runs in 64-bit floats on a single thread, and all randomness
//! derives from an explicit seed, so identical inputs produce bitwise
//! identical models, checkpoints, and reports.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gnn;
pub mod gradcheck;
pub mod ingest;
pub mod model;
pub mod optim;
pub mod persist;
pub mod structure;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};

/// Entry point used by the `poirec` binary. Returns a process exit code.
pub fn run_cli() -> i32 {
    cli::run()
}
