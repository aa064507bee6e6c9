//! Deterministic text output shared by every file format.

use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Scientific notation with 17 significant digits; parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `contents` next to `path` and renames it into place, so readers
/// never observe a partially written file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Pretty JSON with sorted keys and a trailing newline.
pub fn json_bytes(value: &serde_json::Value) -> Result<Vec<u8>> {
    // serde_json's default map is a BTreeMap, so keys come out sorted.
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}
