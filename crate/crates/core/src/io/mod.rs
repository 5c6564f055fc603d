//! On-disk formats: tile manifests, panel configuration and image files.

mod manifest;
mod panel;
mod tiles;

pub use manifest::{read_manifest, write_manifest, ManifestRecord, Split};
pub use panel::{MarkerConfig, PanelConfig};
pub use tiles::{
    encode_png, read_channels, read_mask, read_rgb, write_channels, write_mask, write_rgb_png, PixelFormat,
};
pub use image::ExtendedColorType as ColorType;

use sha2::{Digest, Sha256};

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Write `bytes` to `path` via a temporary sibling and rename.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> crate::Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(std::path::Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp.{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| crate::Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| crate::Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| crate::Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| crate::Error::io(path, e))
}
