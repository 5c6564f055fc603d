use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[serde(alias = "validation")]
    Val,
    Test,
}

/// One tile of a JSONL manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub slide_id: String,
    pub tile_id: String,
    pub x: i64,
    pub y: i64,
    pub mpp: f64,
    pub he_path: PathBuf,
    pub mif_path: PathBuf,
    pub split: Split,
    /// Nucleus instance mask aligned with the tile.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nuclei_path: Option<PathBuf>,
    /// Nucleus mask segmented from the mIF section, for consecutive-section QC.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mif_nuclei_path: Option<PathBuf>,
}

impl ManifestRecord {
    /// Resolve relative paths against `base`.
    pub fn resolved(&self, base: &Path) -> Self {
        let fix = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        Self {
            he_path: fix(&self.he_path),
            mif_path: fix(&self.mif_path),
            nuclei_path: self.nuclei_path.as_deref().map(fix),
            mif_nuclei_path: self.mif_nuclei_path.as_deref().map(fix),
            ..self.clone()
        }
    }
}

/// Read a JSONL manifest; relative paths are resolved against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        if !(rec.mpp > 0.0) {
            return Err(Error::format(path, format!("line {}: mpp must be positive", i + 1)));
        }
        out.push(rec.resolved(base));
    }
    let mut ids: Vec<&str> = out.iter().map(|r| r.tile_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::format(path, format!("duplicate tile id `{}`", w[0])));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n").expect("vec write");
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
