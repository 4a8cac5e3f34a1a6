//! The desk-scale codec: transforms with a mean-scale hyperprior, the
//! rate-distortion objective, anchor training, derivation refinement,
//! bitstreams and the on-disk registry.

mod bitstream;
mod io;
mod model;
mod registry;
mod train;

use std::io::Write;
use std::path::Path;

pub use bitstream::*;
pub use io::*;
pub use model::*;
pub use registry::*;
pub use train::*;

use crate::error::Result;

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
