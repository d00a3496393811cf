//! Protocol-conditional evaluation harness for LLM debugging of broken code
//! workspaces.
//!
//! A task starts from a broken workspace (prompt, failing solution, recorded
//! error log, native test harness). A fixer proposes candidate repairs inside a
//! bounded debug loop; every candidate is built and tested by a backend,
//! classified into one of eight failure categories, gated on measured speedup,
//! and checked for stagnation. Stored trajectories feed the metric family
//! (`pass@k`, `debug_rate@k`, per-bucket fix rates, stagnation breakdowns) and
//! the robustness analytics (axis swing, Kendall tau, flip resolution).

pub mod backend;
pub mod classifier;
pub mod corpus;
pub mod debug_loop;
pub mod desk_corpus;
pub mod error;
pub mod feedback;
pub mod fixer;
pub mod metrics;
pub mod report;
pub mod robustness;
pub mod timing;

pub use error::{Error, Result};

use sha2::{Digest, Sha256};

/// SHA-256 of a solution text, hex encoded. Used for stagnation detection,
/// the solution store and mock-script lookup alike.
pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub(crate) fn write_file(path: &std::path::Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_to_string(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
