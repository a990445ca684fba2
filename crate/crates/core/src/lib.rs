//! Delivery route planning for capacity-limited UAVs around circular no-fly
//! zones.
//!
//! An attention pointer policy trained with actor-critic policy gradients
//! proposes depot-delimited multi-vehicle tours, decoded greedily, by
//! sampling or by beam search. Classical baselines and an exact solver for
//! small instances provide reference lengths.

pub mod baseline;
pub mod cli;
pub mod decode;
pub mod diffcore;
pub mod eval;
pub mod geometry;
pub mod instance;
pub mod policy;
pub mod train;

use std::io::Write;
use std::path::Path;

/// Mixes a base seed with a list of stream identifiers (splitmix64 finalizer).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut builder = tempfile::Builder::new();
    // Regular file mode (subject to umask) instead of the private default.
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(std::fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
