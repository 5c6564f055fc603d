use std::collections::BTreeMap;

use super::CellRow;
use crate::imgproc::{ChannelImage, InstanceMask};
use crate::{Error, Result};

/// Mean intensity of every channel over every instance of `cells`, one row
/// per instance in ascending id order. Centroids come from the same mask.
pub fn extract_cell_expression(channels: &[ChannelImage], cells: &InstanceMask, tile_id: &str) -> Result<Vec<CellRow>> {
    for (c, ch) in channels.iter().enumerate() {
        if ch.width() != cells.width() || ch.height() != cells.height() {
            return Err(Error::Shape(format!(
                "channel {c} is {}x{} but the cell mask is {}x{}",
                ch.width(),
                ch.height(),
                cells.width(),
                cells.height()
            )));
        }
    }
    struct Acc {
        n: usize,
        sx: f64,
        sy: f64,
        sums: Vec<f64>,
    }
    let mut cellwise: BTreeMap<u32, Acc> = BTreeMap::new();
    let w = cells.width();
    for (i, &label) in cells.labels().iter().enumerate() {
        if label == 0 {
            continue;
        }
        let acc = cellwise.entry(label).or_insert_with(|| Acc {
            n: 0,
            sx: 0.0,
            sy: 0.0,
            sums: vec![0.0; channels.len()],
        });
        acc.n += 1;
        acc.sx += (i % w) as f64;
        acc.sy += (i / w) as f64;
        for (s, ch) in acc.sums.iter_mut().zip(channels) {
            *s += ch.pixels()[i];
        }
    }
    Ok(cellwise
        .into_iter()
        .map(|(id, acc)| {
            let n = acc.n as f64;
            CellRow {
                tile_id: tile_id.to_string(),
                cell_id: id,
                centroid: (acc.sx / n, acc.sy / n),
                mean_expr: acc.sums.iter().map(|s| s / n).collect(),
                posterior: None,
                label: None,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn constant_channel() {
        let img = ChannelImage::filled(4, 4, 1.0, 5.0).unwrap();
        let mut m = InstanceMask::empty(4, 4, 1.0).unwrap();
        m.set(0, 0, 1);
        m.set(3, 3, 2);
        m.set(2, 3, 2);
        let rows = extract_cell_expression(&[img], &m, "t").unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.mean_expr == vec![5.0]));
        assert_eq!(rows[1].centroid, (2.5, 3.0));
    }

    #[test]
    fn two_pixel_mean() {
        let img = ChannelImage::new(2, 1, 1.0, vec![10.0, 20.0]).unwrap();
        let m = InstanceMask::new(2, 1, 1.0, vec![3, 3]).unwrap();
        let rows = extract_cell_expression(&[img], &m, "t").unwrap();
        assert_eq!(rows[0].cell_id, 3);
        assert_eq!(rows[0].mean_expr, vec![15.0]);
    }

    #[test]
    fn shape_mismatch() {
        let img = ChannelImage::filled(3, 3, 1.0, 1.0).unwrap();
        let m = InstanceMask::empty(4, 4, 1.0).unwrap();
        assert!(extract_cell_expression(&[img], &m, "t").is_err());
    }

    #[test]
    fn random_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (w, h) = (13, 9);
        let chans: Vec<ChannelImage> = (0..3)
            .map(|_| ChannelImage::new(w, h, 1.0, (0..w * h).map(|_| rng.random_range(0.0..100.0)).collect()).unwrap())
            .collect();
        let labels: Vec<u32> = (0..w * h).map(|_| rng.random_range(0..6)).collect();
        let m = InstanceMask::new(w, h, 1.0, labels.clone()).unwrap();
        let rows = extract_cell_expression(&chans, &m, "t").unwrap();
        for row in rows {
            for (c, ch) in chans.iter().enumerate() {
                let vals: Vec<f64> = (0..w * h).filter(|&i| labels[i] == row.cell_id).map(|i| ch.pixels()[i]).collect();
                let brute = vals.iter().sum::<f64>() / vals.len() as f64;
                assert!((row.mean_expr[c] - brute).abs() < 1e-9);
            }
        }
    }
}
