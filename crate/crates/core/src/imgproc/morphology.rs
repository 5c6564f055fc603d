use std::collections::BTreeMap;

use super::InstanceMask;

/// Grow every instance by `ceil(radius_um / mpp)` pixels of Euclidean
/// distance. Each background pixel within range joins its nearest instance
/// (distance to the instance's pixel set), ties going to the smaller id.
/// Existing labels are never overwritten.
pub fn dilate_nuclei(nuclei: &InstanceMask, radius_um: f64) -> InstanceMask {
    let radius = if radius_um > 0.0 { (radius_um / nuclei.mpp()).ceil() as i64 } else { 0 };
    if radius == 0 {
        return nuclei.clone();
    }
    let r2 = radius * radius;
    // offsets grouped into rings of equal squared distance, nearest first
    let mut rings: BTreeMap<i64, Vec<(i64, i64)>> = BTreeMap::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let d2 = dx * dx + dy * dy;
            if d2 > 0 && d2 <= r2 {
                rings.entry(d2).or_default().push((dx, dy));
            }
        }
    }

    let (w, h) = (nuclei.width() as i64, nuclei.height() as i64);
    let src = nuclei.labels();
    let mut out = nuclei.clone();
    for y in 0..h {
        for x in 0..w {
            if src[(y * w + x) as usize] != 0 {
                continue;
            }
            for offsets in rings.values() {
                let nearest = offsets
                    .iter()
                    .filter_map(|&(dx, dy)| {
                        let (nx, ny) = (x + dx, y + dy);
                        (nx >= 0 && ny >= 0 && nx < w && ny < h).then(|| src[(ny * w + nx) as usize])
                    })
                    .filter(|&l| l != 0)
                    .min();
                if let Some(label) = nearest {
                    out.set(x as usize, y as usize, label);
                    break;
                }
            }
        }
    }
    out
}

/// Centroid (mean pixel x, mean pixel y) per instance id.
pub fn centroids(mask: &InstanceMask) -> BTreeMap<u32, (f64, f64)> {
    let mut acc: BTreeMap<u32, (f64, f64, usize)> = BTreeMap::new();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let l = mask.get(x, y);
            if l > 0 {
                let e = acc.entry(l).or_insert((0.0, 0.0, 0));
                e.0 += x as f64;
                e.1 += y as f64;
                e.2 += 1;
            }
        }
    }
    acc.into_iter().map(|(l, (sx, sy, n))| (l, (sx / n as f64, sy / n as f64))).collect()
}

/// Square grid of nucleus-centroid counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub size: usize,
    pub counts: Vec<f64>,
}

impl DensityGrid {
    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.counts[row * self.size + col]
    }
}

/// Count nucleus centroids per spatial bin of a `grid x grid` partition of
/// the tile. A centroid at pixel coordinate `c` lies at `c + 0.5` in
/// continuous image space.
pub fn nuclei_density_map(mask: &InstanceMask, grid: usize) -> DensityGrid {
    let mut counts = vec![0.0; grid * grid];
    for (cx, cy) in centroids(mask).into_values() {
        let col = (((cx + 0.5) * grid as f64 / mask.width() as f64) as usize).min(grid - 1);
        let row = (((cy + 0.5) * grid as f64 / mask.height() as f64) as usize).min(grid - 1);
        counts[row * grid + col] += 1.0;
    }
    DensityGrid { size: grid, counts }
}
