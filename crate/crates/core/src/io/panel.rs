use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gating::{Hierarchy, HierarchyRule};
use crate::imgproc::{AfParams, LogBase};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerConfig {
    pub name: String,
    #[serde(default)]
    pub af: AfParams,
    /// Fitted foreground 99.9th percentile, once known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q999: Option<f64>,
}

/// Marker panel: channel layout of the mIF files, the predicted markers with
/// their autofluorescence parameters, and the gating hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelConfig {
    /// Page order of the multi-page mIF TIFFs.
    pub channels: Vec<String>,
    pub markers: Vec<MarkerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub af_channel: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empty_channel: Option<String>,
    /// Channel used for the fluorescence tissue mask in alignment QC.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nuclear_channel: Option<String>,
    #[serde(default)]
    pub hierarchy: Vec<HierarchyRule>,
    #[serde(default)]
    pub log_base: LogBase,
}

impl PanelConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let panel: PanelConfig = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        panel.validate().map_err(|e| Error::format(path, e))?;
        Ok(panel)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("panel serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.to_json().as_bytes())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        super::sha256_hex(serde_json::to_string(self).expect("panel serializes").as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.markers.is_empty() {
            return Err(Error::Invalid("panel has no markers".into()));
        }
        for m in &self.markers {
            self.channel_index(&m.name)?;
            m.af.validate()?;
            if let Some(q) = m.q999 {
                if !(q > 0.0) {
                    return Err(Error::Invalid(format!("q999 of `{}` must be positive", m.name)));
                }
            }
        }
        for extra in [&self.af_channel, &self.empty_channel, &self.nuclear_channel].into_iter().flatten() {
            self.channel_index(extra)?;
        }
        let mut names: Vec<&str> = self.channels.iter().map(String::as_str).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invalid("duplicate channel names".into()));
        }
        Hierarchy::new(&self.hierarchy, &self.marker_names())?;
        Ok(())
    }

    pub fn marker_names(&self) -> Vec<String> {
        self.markers.iter().map(|m| m.name.clone()).collect()
    }

    pub fn channel_index(&self, name: &str) -> Result<usize> {
        self.channels
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Invalid(format!("unknown channel `{name}`")))
    }

    pub fn marker(&self, name: &str) -> Option<&MarkerConfig> {
        self.markers.iter().find(|m| m.name == name)
    }

    pub fn marker_mut(&mut self, name: &str) -> Option<&mut MarkerConfig> {
        self.markers.iter_mut().find(|m| m.name == name)
    }
}
