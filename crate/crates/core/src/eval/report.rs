use std::io::Write;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::baselines::BaselineScores;
use super::bootstrap::BootstrapConfig;
use super::counts::CountCorrelation;
use super::probe::ProbeConfig;
use crate::Result;

/// PSNR in dB; identical images give `+inf`, written as the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PsnrDb(pub f64);

impl Serialize for PsnrDb {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() && self.0 > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for PsnrDb {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(PsnrDb(v)),
            Repr::Text(t) if t == "inf" => Ok(PsnrDb(f64::INFINITY)),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad psnr value {t:?}"))),
        }
    }
}

impl std::fmt::Display for PsnrDb {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub auprc: Option<f64>,
    pub f1: Option<f64>,
    pub auprc_ci: Option<[f64; 2]>,
    pub f1_ci: Option<[f64; 2]>,
    pub n_train: usize,
    pub n_test: usize,
    pub bootstrap_skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerReport {
    pub marker: String,
    pub psnr: Option<PsnrDb>,
    pub ssim: Option<f64>,
    pub pearson: Option<f64>,
    pub cell: CellMetrics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroAverages {
    pub psnr: Option<PsnrDb>,
    pub ssim: Option<f64>,
    pub pearson: Option<f64>,
    pub auprc: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    pub seed: u64,
    pub protocol: String,
    pub probe: ProbeConfig,
    pub bootstrap: BootstrapConfig,
    /// The probe is fit once; bootstrap resamples only the scored cells.
    pub bootstrap_refits_probe: bool,
    pub markers: Vec<MarkerReport>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroAverages,
    pub baselines: Vec<BaselineScores>,
    pub count_correlation: Vec<(String, CountCorrelation)>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MacroAverages {
    pub fn from_markers(markers: &[MarkerReport]) -> Self {
        Self {
            psnr: mean_defined(markers.iter().map(|m| m.psnr.map(|p| p.0))).map(PsnrDb),
            ssim: mean_defined(markers.iter().map(|m| m.ssim)),
            pearson: mean_defined(markers.iter().map(|m| m.pearson)),
            auprc: mean_defined(markers.iter().map(|m| m.cell.auprc)),
            f1: mean_defined(markers.iter().map(|m| m.cell.f1)),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per marker plus a `macro` row.
    pub fn write_csv<W: Write>(&self, mut out: W, preamble: &[String]) -> Result<()> {
        for line in preamble {
            writeln!(out, "# {line}").map_err(|e| crate::Error::io("<report csv>", e))?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "marker", "psnr", "ssim", "pearson", "auprc", "auprc_ci_low", "auprc_ci_high", "f1", "f1_ci_low", "f1_ci_high",
        ])?;
        for m in &self.markers {
            let c = &m.cell;
            w.write_record([
                m.marker.clone(),
                m.psnr.map(|p| p.to_string()).unwrap_or_default(),
                opt(m.ssim),
                opt(m.pearson),
                opt(c.auprc),
                opt(c.auprc_ci.map(|c| c[0])),
                opt(c.auprc_ci.map(|c| c[1])),
                opt(c.f1),
                opt(c.f1_ci.map(|c| c[0])),
                opt(c.f1_ci.map(|c| c[1])),
            ])?;
        }
        let a = &self.macro_avg;
        w.write_record([
            "macro".to_string(),
            a.psnr.map(|p| p.to_string()).unwrap_or_default(),
            opt(a.ssim),
            opt(a.pearson),
            opt(a.auprc),
            String::new(),
            String::new(),
            opt(a.f1),
            String::new(),
            String::new(),
        ])?;
        w.flush().map_err(|e| crate::Error::io("<report csv>", e))?;
        Ok(())
    }
}
