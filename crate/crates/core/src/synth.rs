//! Synthetic paired H&E / mIF tiles with planted cell types.
//!
//! Every nucleus is an ellipse whose size, shape and H&E color are set by its
//! cell type, and the marker channels are deterministic functions of that
//! type:
//!
//! | type        | PanCK | CD45 | CD3 |
//! |-------------|-------|------|-----|
//! | epithelial  | +     |      |     |
//! | T cell      |       | +    | +   |
//! | macrophage  |       | +    |     |
//! | stromal     |       |      |     |
//!
//! Each tile has a white background region (so Otsu finds tissue), an
//! autofluorescence field that leaks into the marker channels with known
//! `lambda`, and a low-noise empty channel.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::gating::HierarchyRule;
use crate::imgproc::{
    af_subtract, normalize_channel, AfParams, ChannelImage, ChannelStatsAccumulator, InstanceMask, LogBase,
    NormalizeDirection, RgbImage,
};
use crate::io::{self, ManifestRecord, MarkerConfig, PanelConfig, PixelFormat, Split};
use crate::model::{Tensor, TrainSample};
use crate::{rng, Error, Result};

pub const CHANNELS: [&str; 6] = ["DAPI", "AF", "PanCK", "CD45", "CD3", "Empty"];
pub const MARKERS: [&str; 3] = ["PanCK", "CD45", "CD3"];
/// Leak of the AF channel into each marker channel.
pub const AF_LEAK: [f64; 3] = [0.3, 0.5, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    Epithelial,
    TCell,
    Macrophage,
    Stromal,
}

impl CellType {
    pub const ALL: [CellType; 4] = [CellType::Epithelial, CellType::TCell, CellType::Macrophage, CellType::Stromal];

    /// Planted positivity for [`MARKERS`].
    pub fn markers(self) -> [bool; 3] {
        match self {
            CellType::Epithelial => [true, false, false],
            CellType::TCell => [false, true, true],
            CellType::Macrophage => [false, true, false],
            CellType::Stromal => [false, false, false],
        }
    }

    fn prevalence(self) -> f64 {
        match self {
            CellType::Epithelial => 0.35,
            CellType::TCell => 0.2,
            CellType::Macrophage => 0.15,
            CellType::Stromal => 0.3,
        }
    }

    /// Semi-axis ranges `(major, minor)` in pixels.
    fn axes(self) -> ((f64, f64), (f64, f64)) {
        match self {
            CellType::Epithelial => ((4.0, 5.5), (3.6, 4.6)),
            CellType::TCell => ((2.2, 3.0), (2.0, 2.8)),
            CellType::Macrophage => ((3.5, 4.5), (2.5, 3.4)),
            CellType::Stromal => ((4.5, 6.0), (1.5, 2.1)),
        }
    }

    fn color(self) -> [f64; 3] {
        match self {
            CellType::Epithelial => [105.0, 70.0, 165.0],
            CellType::TCell => [45.0, 25.0, 95.0],
            CellType::Macrophage => [140.0, 60.0, 110.0],
            CellType::Stromal => [80.0, 45.0, 135.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellType::Epithelial => "epithelial",
            CellType::TCell => "t_cell",
            CellType::Macrophage => "macrophage",
            CellType::Stromal => "stromal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub tiles: usize,
    /// Tile side in pixels.
    pub size: usize,
    pub mpp: f64,
    pub nuclei_per_tile: usize,
    /// Fraction of tiles in the train / val splits; the rest is test.
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub signal: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tiles: 20,
            size: 64,
            mpp: 1.0,
            nuclei_per_tile: 12,
            train_fraction: 0.6,
            val_fraction: 0.1,
            signal: 3000.0,
            noise_std: 30.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiles == 0 || self.size < 16 || !self.size.is_multiple_of(16) {
            return Err(Error::Invalid("synth needs >= 1 tile and a size that is a multiple of 16".into()));
        }
        if !(self.mpp > 0.0) {
            return Err(Error::Invalid("synth mpp must be positive".into()));
        }
        let f = self.train_fraction + self.val_fraction;
        if !(0.0..=1.0).contains(&self.train_fraction) || !(0.0..=1.0).contains(&self.val_fraction) || f > 1.0 {
            return Err(Error::Invalid("split fractions must lie in [0, 1] and sum to <= 1".into()));
        }
        Ok(())
    }

    pub fn split_of(&self, index: usize) -> Split {
        let n_train = (self.train_fraction * self.tiles as f64).round() as usize;
        let n_val = (self.val_fraction * self.tiles as f64).round() as usize;
        if index < n_train {
            Split::Train
        } else if index < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCell {
    pub id: u32,
    pub cell_type: CellType,
    pub center: (f64, f64),
    pub axes: (f64, f64),
    pub angle: f64,
}

#[derive(Debug, Clone)]
pub struct SynthTile {
    pub tile_id: String,
    pub he: RgbImage,
    /// Raw mIF stack in [`CHANNELS`] order.
    pub channels: Vec<ChannelImage>,
    pub nuclei: InstanceMask,
    pub cells: Vec<PlantedCell>,
}

impl SynthTile {
    pub fn labels(&self) -> Vec<[bool; 3]> {
        self.cells.iter().map(|c| c.cell_type.markers()).collect()
    }
}

fn sample_type(u: f64) -> CellType {
    let mut acc = 0.0;
    for t in CellType::ALL {
        acc += t.prevalence();
        if u < acc {
            return t;
        }
    }
    CellType::Stromal
}

fn inside(cell: &PlantedCell, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - cell.center.0, y - cell.center.1);
    let (s, c) = cell.angle.sin_cos();
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    (u / cell.axes.0).powi(2) + (v / cell.axes.1).powi(2) <= 1.0
}

/// 3x3 mean filter with edge replication.
fn box_blur(values: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    let ny = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    s += values[ny * w + nx];
                }
            }
            out[y * w + x] = s / 9.0;
        }
    }
    out
}

/// Generate tile `index` of the dataset; independent of every other tile.
pub fn generate_tile(cfg: &SynthConfig, index: usize) -> Result<SynthTile> {
    let mut r = rng::indexed(cfg.seed, "synth/tile", index as u64);
    let n = cfg.size;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    // background: the pixels beyond a random line, 20-35% of the tile
    let theta = r.random_range(0.0..std::f64::consts::TAU);
    let (ny, nx) = theta.sin_cos();
    let mut proj: Vec<f64> = (0..n * n)
        .map(|i| ((i % n) as f64 + 0.5) * nx + ((i / n) as f64 + 0.5) * ny)
        .collect();
    let mut sorted = proj.clone();
    sorted.sort_by(f64::total_cmp);
    let bg_fraction = r.random_range(0.2..0.35);
    let cut = sorted[((1.0 - bg_fraction) * (n * n) as f64) as usize];
    let tissue: Vec<bool> = proj.iter().map(|&p| p < cut).collect();
    proj.clear();

    // nuclei by rejection sampling: inside tissue, never touching
    let mut cells: Vec<PlantedCell> = Vec::new();
    let mut attempts = 0;
    while cells.len() < cfg.nuclei_per_tile && attempts < 2000 {
        attempts += 1;
        let cell_type = sample_type(r.random::<f64>());
        let ((a0, a1), (b0, b1)) = cell_type.axes();
        let major: f64 = r.random_range(a0..a1);
        let minor: f64 = r.random_range(b0..b1).min(major);
        let angle = r.random_range(0.0..std::f64::consts::PI);
        let margin = major + 1.0;
        let center = (r.random_range(margin..n as f64 - margin), r.random_range(margin..n as f64 - margin));
        let (cx, cy) = (center.0 as usize, center.1 as usize);
        if !tissue[cy * n + cx] {
            continue;
        }
        let clear = cells.iter().all(|c| {
            let d = ((c.center.0 - center.0).powi(2) + (c.center.1 - center.1).powi(2)).sqrt();
            d > c.axes.0 + major + 4.0
        });
        if clear {
            cells.push(PlantedCell { id: cells.len() as u32 + 1, cell_type, center, axes: (major, minor), angle });
        }
    }

    let mut labels = vec![0u32; n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if let Some(c) = cells.iter().find(|c| inside(c, px, py)) {
                labels[y * n + x] = c.id;
            }
        }
    }
    // a nucleus that rasterized to nothing is dropped and ids are compacted
    let present: std::collections::BTreeSet<u32> = labels.iter().copied().filter(|&l| l > 0).collect();
    cells.retain(|c| present.contains(&c.id));
    let mut remap = vec![0u32; cfg.nuclei_per_tile + 2];
    for (i, c) in cells.iter_mut().enumerate() {
        remap[c.id as usize] = i as u32 + 1;
        c.id = i as u32 + 1;
    }
    for l in &mut labels {
        *l = remap[*l as usize];
    }
    let nuclei = InstanceMask::new(n, n, cfg.mpp, labels.clone())?;

    // H&E
    let background = [241.0, 239.0, 244.0];
    let stroma = [215.0, 120.0, 175.0];
    let mut he = vec![0u8; n * n * 3];
    for i in 0..n * n {
        let base = match labels[i] {
            0 if tissue[i] => stroma,
            0 => background,
            l => cells[l as usize - 1].cell_type.color(),
        };
        let jitter = if tissue[i] { 6.0 } else { 2.0 };
        for c in 0..3 {
            let v = base[c] + jitter * noise.sample(&mut r);
            he[i * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    let he = RgbImage::new(n, n, he)?;

    // mIF: AF field is smooth over tissue, dim on background
    let (fx, fy, phase) = (r.random_range(0.5..2.0), r.random_range(0.5..2.0), r.random_range(0.0..6.3));
    let af: Vec<f64> = (0..n * n)
        .map(|i| {
            let (x, y) = ((i % n) as f64 / n as f64, (i / n) as f64 / n as f64);
            if tissue[i] {
                900.0 + 300.0 * (std::f64::consts::TAU * (fx * x + fy * y) + phase).sin()
            } else {
                20.0
            }
        })
        .collect();
    let strength: Vec<f64> = cells.iter().map(|_| r.random_range(0.85..1.15)).collect();
    let mut stack = Vec::with_capacity(CHANNELS.len());
    let page = |values: Vec<f64>, r: &mut rng::Rng| -> Result<ChannelImage> {
        let px = values.into_iter().map(|v| (v + cfg.noise_std * noise.sample(r)).max(0.0).round()).collect();
        ChannelImage::new(n, n, cfg.mpp, px)
    };
    let dapi: Vec<f64> = labels.iter().map(|&l| if l > 0 { 2000.0 } else { 50.0 }).collect();
    stack.push(page(box_blur(&dapi, n, n), &mut r)?);
    stack.push(page(af.clone(), &mut r)?);
    for (m, leak) in AF_LEAK.iter().enumerate() {
        let signal: Vec<f64> = labels
            .iter()
            .map(|&l| {
                if l == 0 {
                    return 0.0;
                }
                let k = l as usize - 1;
                if cells[k].cell_type.markers()[m] { cfg.signal * strength[k] } else { 0.0 }
            })
            .collect();
        let blurred = box_blur(&signal, n, n);
        stack.push(page(blurred.iter().zip(&af).map(|(s, a)| s + leak * a).collect(), &mut r)?);
    }
    stack.push(page(vec![50.0; n * n], &mut r)?);

    Ok(SynthTile { tile_id: format!("synth_{index:04}"), he, channels: stack, nuclei, cells })
}

/// Panel matching [`generate_tile`]: AF parameters set to the true leak,
/// CD3 gated within CD45.
pub fn panel() -> PanelConfig {
    PanelConfig {
        channels: CHANNELS.iter().map(|s| s.to_string()).collect(),
        markers: MARKERS
            .iter()
            .zip(AF_LEAK)
            .map(|(name, lambda)| MarkerConfig { name: name.to_string(), af: AfParams { lambda, b: 0.0 }, q999: None })
            .collect(),
        af_channel: Some("AF".into()),
        empty_channel: Some("Empty".into()),
        nuclear_channel: Some("DAPI".into()),
        hierarchy: vec![HierarchyRule { child: "CD3".into(), parent: "CD45".into() }],
        log_base: LogBase::Two,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedLabel {
    pub tile_id: String,
    pub cell_id: u32,
    pub cell_type: CellType,
    pub labels: [bool; 3],
}

/// Paths of a dataset written by [`write_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub manifest: PathBuf,
    pub panel: PathBuf,
    pub labels: PathBuf,
    pub tiles: usize,
    pub nuclei: usize,
}

/// Write tiles, nuclei masks, `manifest.jsonl`, `panel.json` and
/// `planted_labels.csv` under `dir`.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    for sub in ["he", "mif", "nuclei"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let tiles: Vec<SynthTile> = (0..cfg.tiles).map(|i| generate_tile(cfg, i)).collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(tiles.len());
    let mut planted = Vec::new();
    for (i, t) in tiles.iter().enumerate() {
        let he = PathBuf::from(format!("he/{}.png", t.tile_id));
        let mif = PathBuf::from(format!("mif/{}.tiff", t.tile_id));
        let nuc = PathBuf::from(format!("nuclei/{}.tiff", t.tile_id));
        io::write_rgb_png(&dir.join(&he), &t.he)?;
        io::write_channels(&dir.join(&mif), &t.channels, PixelFormat::U16)?;
        io::write_mask(&dir.join(&nuc), &t.nuclei)?;
        records.push(ManifestRecord {
            slide_id: "synth".into(),
            tile_id: t.tile_id.clone(),
            x: (i * cfg.size) as i64,
            y: 0,
            mpp: cfg.mpp,
            he_path: he,
            mif_path: mif,
            split: cfg.split_of(i),
            nuclei_path: Some(nuc.clone()),
            mif_nuclei_path: Some(nuc),
        });
        planted.extend(t.cells.iter().map(|c| PlantedLabel {
            tile_id: t.tile_id.clone(),
            cell_id: c.id,
            cell_type: c.cell_type,
            labels: c.cell_type.markers(),
        }));
    }
    let manifest = dir.join("manifest.jsonl");
    io::write_manifest(&manifest, &records)?;
    let panel_path = dir.join("panel.json");
    panel().save(&panel_path)?;
    let labels = dir.join("planted_labels.csv");
    write_planted_labels(&labels, &planted)?;
    Ok(SynthDataset { manifest, panel: panel_path, labels, tiles: tiles.len(), nuclei: planted.len() })
}

pub fn write_planted_labels(path: &Path, labels: &[PlantedLabel]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    let mut header = vec!["tile_id".to_string(), "cell_id".into(), "cell_type".into()];
    header.extend(MARKERS.iter().map(|m| format!("label_{m}")));
    w.write_record(&header)?;
    for l in labels {
        let mut rec = vec![l.tile_id.clone(), l.cell_id.to_string(), l.cell_type.name().to_string()];
        rec.extend(l.labels.iter().map(|&b| u8::from(b).to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Planted labels keyed by `(tile_id, cell_id)`, one bool per marker column.
pub fn read_planted_labels(path: &Path) -> Result<(Vec<String>, std::collections::BTreeMap<(String, u32), Vec<bool>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::MissingFile(path.into()),
        _ => Error::format(path, e),
    })?;
    let header = r.headers()?.clone();
    let markers: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("label_").map(|m| (i, m.to_string())))
        .collect();
    let mut out = std::collections::BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let cell_id: u32 = rec[1].parse().map_err(|e| Error::format(path, e))?;
        let labels = markers.iter().map(|(i, _)| &rec[*i] == "1").collect();
        out.insert((rec[0].to_string(), cell_id), labels);
    }
    Ok((markers.into_iter().map(|(_, m)| m).collect(), out))
}

/// Training pairs straight from generated tiles: AF-corrected marker
/// channels normalized with percentiles fitted over the given tiles.
pub fn training_pairs(tiles: &[SynthTile]) -> Result<Vec<TrainSample>> {
    let panel = panel();
    let af = panel.channel_index("AF")?;
    let mut corrected = Vec::with_capacity(tiles.len());
    let mut acc = ChannelStatsAccumulator::new(panel.marker_names());
    for t in tiles {
        let mut chans = Vec::new();
        for (m, marker) in panel.markers.iter().enumerate() {
            let c = af_subtract(&t.channels[panel.channel_index(&marker.name)?], &t.channels[af], marker.af)?;
            acc.push(m, &c);
            chans.push(c);
        }
        corrected.push(chans);
    }
    let stats = acc.finish()?;
    tiles
        .iter()
        .zip(corrected)
        .map(|(t, chans)| {
            let (h, w) = (t.he.height(), t.he.width());
            let mut data = Vec::with_capacity(chans.len() * h * w);
            for (c, q) in chans.iter().zip(&stats.q999) {
                data.extend(normalize_channel(c, *q, NormalizeDirection::Forward, LogBase::Two)?.into_pixels());
            }
            Ok(TrainSample {
                he: crate::model::rgb_to_planes(&t.he),
                target: Tensor::new(vec![chans.len(), h, w], data)?,
            })
        })
        .collect()
}
