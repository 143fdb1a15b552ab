//! File emission helpers shared by the simulation lab and the CLI.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::Result;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Joins 0-based indices as 1-based labels separated by `;`.
pub fn format_indices<'a>(indices: impl IntoIterator<Item = &'a usize>) -> String {
    let mut s = String::new();
    for (k, j) in indices.into_iter().enumerate() {
        if k > 0 {
            s.push(';');
        }
        let _ = write!(s, "{}", j + 1);
    }
    s
}

/// Inverse of [`format_indices`]; returns 0-based indices.
pub fn parse_indices(s: &str) -> Option<Vec<usize>> {
    if s.trim().is_empty() {
        return Some(Vec::new());
    }
    s.split(';')
        .map(|t| t.trim().parse::<usize>().ok().filter(|&v| v > 0).map(|v| v - 1))
        .collect()
}
