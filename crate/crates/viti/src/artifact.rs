//! Artifact plumbing: atomic writes and report helpers.
//!
//! Every artifact is written to a temp file in the destination directory and
//! renamed into place, so partial files are never observable.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Result, VitiError};

/// Format version embedded in every JSON report.
pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Write `path` atomically through a buffered writer.
pub fn atomic_write<F>(path: &Path, write_fn: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut tempfile::NamedTempFile>) -> Result<()>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or_else(|| Path::new(".")))?;
    {
        let mut w = BufWriter::new(&mut tmp);
        write_fn(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path)
        .map_err(|e| VitiError::Io(e.error))?;
    Ok(())
}

/// Serialize a value as pretty JSON and write it atomically.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)?;
    atomic_write(path, |w| {
        w.write_all(body.as_bytes())?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

/// Write CSV lines atomically.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    atomic_write(path, |w| {
        writeln!(w, "{header}")?;
        for row in rows {
            writeln!(w, "{row}")?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_creates_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("x.txt");
        atomic_write(&p, |w| {
            w.write_all(b"hello")?;
            Ok(())
        })
        .unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "hello");
    }

    #[test]
    fn atomic_write_failure_leaves_no_partial() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.txt");
        let r = atomic_write(&p, |w| {
            w.write_all(b"partial")?;
            Err(VitiError::Input("boom".into()))
        });
        assert!(r.is_err());
        assert!(!p.exists());
    }
}
