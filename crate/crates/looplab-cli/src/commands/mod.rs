pub mod audit;
pub mod eval;
pub mod fit;
pub mod flops;
pub mod isoflop;
pub mod scan;
pub mod train;

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};

/// Writes to a file or stdout when no path is given.
pub fn write_output(path: Option<&Path>, contents: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, contents).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(contents.as_bytes())?;
            Ok(())
        }
    }
}

/// Parses a comma-separated list of numbers.
pub fn parse_list<T: std::str::FromStr>(raw: &str) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    raw.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| anyhow::anyhow!("bad list entry {s:?}: {e}")))
        .collect()
}
