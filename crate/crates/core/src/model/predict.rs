use super::loss::unscale_output;
use super::tensor::Tensor;
use super::translator::{normalize_input, Translator};
use crate::eval::PearsonAccumulator;
use crate::imgproc::{normalize_channel, ChannelImage, ChannelStats, LogBase, NormalizeDirection};
use crate::Result;

/// Eval-mode predictions `[M, H, W]` in normalized intensity space `[0, 255]`
/// for `[3, H, W]` H&E planes in `[0, 1]`.
pub fn predict_tiles(model: &Translator, planes: &[&Tensor], batch: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(planes.len());
    for chunk in planes.chunks(batch.max(1)) {
        let y = model.infer(normalize_input(chunk)?)?;
        let (n, m, h, w) = y.dims4();
        let per = m * h * w;
        for s in 0..n {
            let data = y.data()[s * per..(s + 1) * per].iter().map(|&t| unscale_output(t)).collect();
            out.push(Tensor::new(vec![m, h, w], data)?);
        }
    }
    Ok(out)
}

/// One tile prediction as channel images; with `stats`, the log normalization
/// is inverted back to corrected intensities.
pub fn predict_tile(
    model: &Translator,
    he: &Tensor,
    mpp: f64,
    stats: Option<(&ChannelStats, LogBase)>,
) -> Result<Vec<ChannelImage>> {
    let pred = predict_tiles(model, &[he], 1)?.remove(0);
    let (m, h, w) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    (0..m)
        .map(|j| {
            let img = ChannelImage::new(w, h, mpp, pred.data()[j * h * w..(j + 1) * h * w].to_vec())?;
            match stats {
                Some((s, base)) => normalize_channel(&img, s.q999[j], NormalizeDirection::Inverse, base),
                None => Ok(img),
            }
        })
        .collect()
}

/// Per-channel Pearson over every pixel of every tile.
pub fn global_pearson(preds: &[Tensor], targets: &[&Tensor]) -> Vec<Option<f64>> {
    let m = preds.first().map_or(0, |p| p.shape()[0]);
    let mut accs = vec![PearsonAccumulator::new(); m];
    for (p, t) in preds.iter().zip(targets) {
        let hw = p.len() / m;
        for (j, a) in accs.iter_mut().enumerate() {
            a.extend(&p.data()[j * hw..(j + 1) * hw], &t.data()[j * hw..(j + 1) * hw]);
        }
    }
    accs.iter().map(|a| a.finish().ok()).collect()
}
