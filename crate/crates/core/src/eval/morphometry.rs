use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::imgproc::{grayscale, InstanceMask, RgbImage};
use crate::{Error, Result};

pub const MORPHOMETRY_FEATURE_NAMES: [&str; 7] =
    ["area", "perimeter", "eccentricity", "orientation", "hema_mean", "hema_std", "solidity"];

/// Shape and stain statistics of one nucleus. The hematoxylin proxy is the
/// grayscale complement `255 - luma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphometryFeatures {
    pub area: f64,
    pub perimeter: f64,
    pub eccentricity: f64,
    pub orientation: f64,
    pub hema_mean: f64,
    pub hema_std: f64,
    pub solidity: f64,
}

impl MorphometryFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.area, self.perimeter, self.eccentricity, self.orientation, self.hema_mean, self.hema_std, self.solidity]
    }
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Area of the convex hull of integer points (monotone chain).
fn hull_area(mut pts: Vec<(i64, i64)>) -> f64 {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return 0.0;
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(i64, i64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    let twice: i64 = (0..hull.len()).map(|i| {
        let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
        a.0 * b.1 - b.0 * a.1
    }).sum();
    twice.abs() as f64 / 2.0
}

/// Per-instance features keyed by instance id. Perimeter counts pixel edges
/// shared with other labels or the tile border; solidity compares the pixel
/// area with the hull of the pixel squares' corners.
pub fn morphometry_features(he: &RgbImage, nuclei: &InstanceMask) -> Result<BTreeMap<u32, MorphometryFeatures>> {
    if he.width() != nuclei.width() || he.height() != nuclei.height() {
        return Err(Error::Shape("H&E tile and nucleus mask differ in size".into()));
    }
    #[derive(Default)]
    struct Acc {
        n: f64,
        sx: f64,
        sy: f64,
        sxx: f64,
        syy: f64,
        sxy: f64,
        h: f64,
        hh: f64,
        edges: usize,
        corners: Vec<(i64, i64)>,
    }
    let (w, h) = (nuclei.width(), nuclei.height());
    let mut acc: BTreeMap<u32, Acc> = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            let id = nuclei.get(x, y);
            if id == 0 {
                continue;
            }
            let a = acc.entry(id).or_default();
            let (fx, fy) = (x as f64, y as f64);
            a.n += 1.0;
            a.sx += fx;
            a.sy += fy;
            a.sxx += fx * fx;
            a.syy += fy * fy;
            a.sxy += fx * fy;
            let hv = 255.0 - grayscale(he.pixel(x, y)) as f64;
            a.h += hv;
            a.hh += hv * hv;
            let neighbours = [
                (x > 0).then(|| nuclei.get(x - 1, y)),
                (x + 1 < w).then(|| nuclei.get(x + 1, y)),
                (y > 0).then(|| nuclei.get(x, y - 1)),
                (y + 1 < h).then(|| nuclei.get(x, y + 1)),
            ];
            a.edges += neighbours.iter().filter(|n| **n != Some(id)).count();
            let (ix, iy) = (x as i64, y as i64);
            a.corners.extend([(ix, iy), (ix + 1, iy), (ix, iy + 1), (ix + 1, iy + 1)]);
        }
    }
    Ok(acc
        .into_iter()
        .map(|(id, a)| {
            let (mx, my) = (a.sx / a.n, a.sy / a.n);
            let mu20 = a.sxx / a.n - mx * mx;
            let mu02 = a.syy / a.n - my * my;
            let mu11 = a.sxy / a.n - mx * my;
            let root = ((mu20 - mu02).powi(2) + 4.0 * mu11 * mu11).sqrt();
            let l1 = (mu20 + mu02 + root) / 2.0;
            let l2 = ((mu20 + mu02 - root) / 2.0).max(0.0);
            let eccentricity = if l1 > 0.0 { (1.0 - l2 / l1).max(0.0).sqrt() } else { 0.0 };
            let orientation = 0.5 * (2.0 * mu11).atan2(mu20 - mu02);
            let hema_mean = a.h / a.n;
            let hema_std = (a.hh / a.n - hema_mean * hema_mean).max(0.0).sqrt();
            let hull = hull_area(a.corners);
            let features = MorphometryFeatures {
                area: a.n,
                perimeter: a.edges as f64,
                eccentricity,
                orientation,
                hema_mean,
                hema_std,
                solidity: if hull > 0.0 { (a.n / hull).min(1.0) } else { 1.0 },
            };
            (id, features)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(w: usize, h: usize, cells: &[(usize, usize, u32)]) -> InstanceMask {
        let mut m = InstanceMask::empty(w, h, 1.0).unwrap();
        for &(x, y, id) in cells {
            m.set(x, y, id);
        }
        m
    }

    #[test]
    fn square_nucleus() {
        let cells: Vec<_> = (2..5).flat_map(|y| (2..5).map(move |x| (x, y, 1))).collect();
        let mask = mask_from(8, 8, &cells);
        let he = RgbImage::filled(8, 8, [55, 55, 55]).unwrap();
        let f = &morphometry_features(&he, &mask).unwrap()[&1];
        assert_eq!(f.area, 9.0);
        assert_eq!(f.perimeter, 12.0);
        assert!(f.eccentricity.abs() < 1e-12);
        assert!((f.solidity - 1.0).abs() < 1e-12);
        assert_eq!((f.hema_mean, f.hema_std), (200.0, 0.0));
    }

    #[test]
    fn elongated_and_concave() {
        let bar: Vec<_> = (0..6).map(|x| (x, 1, 1)).collect();
        let mut l_shape: Vec<_> = (0..4).map(|x| (x, 5, 2)).collect();
        l_shape.extend((2..5).map(|y| (0, y, 2)));
        let mut all = bar.clone();
        all.extend(l_shape);
        let mask = mask_from(8, 8, &all);
        let he = RgbImage::filled(8, 8, [200, 100, 150]).unwrap();
        let f = morphometry_features(&he, &mask).unwrap();
        assert!((f[&1].eccentricity - 1.0).abs() < 1e-12);
        assert!(f[&1].orientation.abs() < 1e-12);
        assert!(f[&2].solidity < 1.0);
        assert_eq!(f[&2].area, 7.0);
    }

    #[test]
    fn hull_of_unit_square_points() {
        assert_eq!(hull_area(vec![(0, 0), (1, 0), (0, 1), (1, 1), (0, 0)]), 1.0);
        assert_eq!(hull_area(vec![(0, 0), (1, 1), (2, 2)]), 0.0);
    }
}
