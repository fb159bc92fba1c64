//! Artifact writing. Every file goes to a sibling temporary first and is then
//! renamed into place, so readers never observe a partial file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Outcome of one checked invariant.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub pass: bool,
    pub measured: f64,
    pub threshold: f64,
}

impl Verdict {
    /// Passes when `measured ≤ threshold`.
    pub fn at_most(measured: f64, threshold: f64) -> Self {
        Self {
            pass: measured <= threshold,
            measured,
            threshold,
        }
    }

    /// Passes when `measured ≥ threshold`.
    pub fn at_least(measured: f64, threshold: f64) -> Self {
        Self {
            pass: measured >= threshold,
            measured,
            threshold,
        }
    }
}

pub type Verdicts = BTreeMap<String, Verdict>;

/// Paths of the artifacts a run writes into its output directory.
#[derive(Clone, Debug)]
pub struct ArtifactPaths {
    pub dir: PathBuf,
}

impl ArtifactPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn trace(&self) -> PathBuf {
        self.dir.join("trace.csv")
    }

    pub fn timing(&self) -> PathBuf {
        self.dir.join("timing.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }

    pub fn verdict(&self) -> PathBuf {
        self.dir.join("verdict.json")
    }

    pub fn meta(&self) -> PathBuf {
        self.dir.join("meta.json")
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("a.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        let names: Vec<_> = fs::read_dir(path.parent().unwrap()).unwrap().collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn verdict_directions() {
        assert!(Verdict::at_most(1e-9, 1e-8).pass);
        assert!(!Verdict::at_most(f64::NAN, 1e-8).pass);
        assert!(Verdict::at_least(0.3, 0.2).pass);
        assert!(!Verdict::at_least(0.1, 0.2).pass);
    }
}
