//! The experiment driver behind the thin CLI: dataset generation, training,
//! the evaluation protocols, and the brute-force oracle gate. Every output
//! is written atomically and embeds the producing config's hash.

mod eval;
mod gen_data;
mod oracle;
mod svg;
mod train;

pub use eval::{cmd_eval, EvalArtifacts, PROTOCOLS};
pub use gen_data::{cmd_gen_data, DatasetManifest, SplitInfo};
pub use oracle::{cmd_oracle_check, OracleOutcome};
pub use svg::{line_chart, scatter_chart, Series};
pub use train::{cmd_train, TrainOutcome};

use std::path::Path;

use crate::Result;

/// Write via a sibling temp file and rename, so partial files never appear
/// under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Hash of raw bytes, truncated for readability.
pub fn content_hash(bytes: &[u8]) -> String {
    use sha2::Digest;
    let digest = sha2::Sha256::digest(bytes);
    format!("{digest:x}")[..16].to_string()
}
