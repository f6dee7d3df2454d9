//! CSV/JSON artifacts, written atomically.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::trace::ConvergenceTrace;

pub const GAUSS_CSV_HEADER: &str = "iter,kl_coupling_to_sb,kl_step,wall_ms";
pub const GRID_CSV_HEADER: &str = "iter,tv_to_oracle,kl_coupling_to_oracle,kl_step";

/// Shortest round-trip decimal.
pub fn fmt_f64(x: f64) -> String {
    ryu::Buffer::new().format(x).to_owned()
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// One row per iteration; `iter` counts iterations executed (1-based) and
/// KL-to-oracle is clamped from below at `threshold`.
pub fn gauss_trace_csv(trace: &ConvergenceTrace, threshold: f64) -> String {
    let mut out = String::from(GAUSS_CSV_HEADER);
    out.push('\n');
    for r in trace.records() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.iter + 1,
            fmt_f64(r.kl_to_oracle.max(threshold)),
            fmt_f64(r.kl_step),
            fmt_f64(r.wall_ms)
        ));
    }
    out
}
