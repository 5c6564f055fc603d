use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_p: f64,
    pub dropout_p: f64,
    /// Largest box side as a fraction of the tile side.
    pub dropout_max_frac: f64,
    pub color_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub blur_p: f64,
    pub noise_p: f64,
    pub noise_std: f64,
    pub hed_p: f64,
    pub hed_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_p: 0.5,
            dropout_p: 0.3,
            dropout_max_frac: 0.25,
            color_p: 0.5,
            brightness: 0.1,
            contrast: 0.1,
            blur_p: 0.1,
            noise_p: 0.1,
            noise_std: 0.02,
            hed_p: 0.5,
            hed_sigma: 0.03,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }
}

fn dims(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected [C, H, W], got {s:?}");
    (s[0], s[1], s[2])
}

pub fn hflip(t: &Tensor) -> Tensor {
    let (c, h, w) = dims(t);
    let mut out = t.clone();
    for p in 0..c * h {
        let row = &mut out.data_mut()[p * w..(p + 1) * w];
        row.reverse();
    }
    debug_assert_eq!(out.len(), c * h * w);
    out
}

pub fn vflip(t: &Tensor) -> Tensor {
    let (c, h, w) = dims(t);
    let mut out = t.clone();
    for ch in 0..c {
        for y in 0..h {
            let src = &t.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            out.data_mut()[(ch * h + h - 1 - y) * w..(ch * h + h - y) * w].copy_from_slice(src);
        }
    }
    out
}

/// Zeroes `[y0, y0+bh) x [x0, x0+bw)` in every channel.
pub fn zero_box(t: &mut Tensor, x0: usize, y0: usize, bw: usize, bh: usize) {
    let (c, h, w) = dims(t);
    for ch in 0..c {
        for y in y0..(y0 + bh).min(h) {
            for x in x0..(x0 + bw).min(w) {
                t.data_mut()[(ch * h + y) * w + x] = 0.0;
            }
        }
    }
}

const RGB_FROM_HED: [[f64; 3]; 3] = [[0.65, 0.70, 0.29], [0.07, 0.99, 0.11], [0.27, 0.57, 0.78]];

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

/// Scales and shifts stain concentrations in optical-density space.
pub fn hed_jitter(he: &mut Tensor, alpha: [f64; 3], beta: [f64; 3]) {
    let (_, h, w) = dims(he);
    let hw = h * w;
    let inv = invert3(&RGB_FROM_HED);
    let d = he.data_mut();
    for i in 0..hw {
        let od: [f64; 3] = std::array::from_fn(|c| -(d[c * hw + i].max(1e-6)).ln());
        let conc: [f64; 3] = std::array::from_fn(|s| (0..3).map(|c| od[c] * inv[c][s]).sum::<f64>() * alpha[s] + beta[s]);
        for c in 0..3 {
            let o: f64 = (0..3).map(|s| conc[s] * RGB_FROM_HED[s][c]).sum();
            d[c * hw + i] = (-o).exp().clamp(0.0, 1.0);
        }
    }
}

fn gaussian_blur(t: &mut Tensor, sigma: f64) {
    let (c, h, w) = dims(t);
    let r = (2.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / ks).collect();
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    for ch in 0..c {
        let plane = t.data()[ch * h * w..(ch + 1) * h * w].to_vec();
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = (-r..=r).map(|i| k[(i + r) as usize] * plane[y * w + clampi(x as i64 + i, w)]).sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                t.data_mut()[(ch * h + y) * w + x] =
                    (-r..=r).map(|i| k[(i + r) as usize] * tmp[clampi(y as i64 + i, h) * w + x]).sum();
            }
        }
    }
}

/// Paired augmentation. Flips and coarse dropout hit both tiles with the same
/// parameters; colour, blur, noise and stain jitter touch the H&E tile only.
/// Dropout runs last so the box stays exactly zero.
/// `he` is `[3, H, W]` in `[0, 1]`, `mif` is `[M, H, W]`.
pub fn augment_pair(he: &Tensor, mif: &Tensor, config: &AugmentConfig, rng: &mut Rng) -> (Tensor, Tensor) {
    let (mut a, mut b) = (he.clone(), mif.clone());
    if !config.enabled {
        return (a, b);
    }
    let (_, h, w) = dims(he);
    assert_eq!(&mif.shape()[1..], &[h, w], "H&E and mIF tiles differ in size");
    if rng.random_bool(config.flip_p) {
        a = hflip(&a);
        b = hflip(&b);
    }
    if rng.random_bool(config.flip_p) {
        a = vflip(&a);
        b = vflip(&b);
    }
    if rng.random_bool(config.color_p) {
        let c = 1.0 + rng.random_range(-config.contrast..=config.contrast);
        let br = rng.random_range(-config.brightness..=config.brightness);
        for v in a.data_mut() {
            *v = (*v * c + br).clamp(0.0, 1.0);
        }
    }
    if rng.random_bool(config.hed_p) {
        let s = config.hed_sigma;
        let alpha = std::array::from_fn(|_| 1.0 + rng.random_range(-s..=s));
        let beta = std::array::from_fn(|_| rng.random_range(-s..=s));
        hed_jitter(&mut a, alpha, beta);
    }
    if rng.random_bool(config.blur_p) {
        gaussian_blur(&mut a, rng.random_range(0.5..=1.0));
    }
    if rng.random_bool(config.noise_p) {
        for v in a.data_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v = (*v + config.noise_std * n).clamp(0.0, 1.0);
        }
    }
    if rng.random_bool(config.dropout_p) {
        let max_w = ((w as f64 * config.dropout_max_frac) as usize).max(1);
        let max_h = ((h as f64 * config.dropout_max_frac) as usize).max(1);
        let (bw, bh) = (rng.random_range(1..=max_w), rng.random_range(1..=max_h));
        let (x0, y0) = (rng.random_range(0..=w - bw), rng.random_range(0..=h - bh));
        zero_box(&mut a, x0, y0, bw, bh);
        zero_box(&mut b, x0, y0, bw, bh);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(vec![c, h, w], (0..c * h * w).map(|i| (i as f64 * 0.013).fract()).collect()).unwrap()
    }

    #[test]
    fn flips_are_involutions() {
        let t = ramp(3, 5, 7);
        assert_eq!(hflip(&hflip(&t)), t);
        assert_eq!(vflip(&vflip(&t)), t);
        assert_ne!(hflip(&t), t);
        assert_eq!(hflip(&t).data()[0], t.data()[6]);
        assert_eq!(vflip(&t).data()[0], t.data()[4 * 7]);
    }

    #[test]
    fn identity_stain_jitter() {
        let mut t = ramp(3, 4, 4);
        for v in t.data_mut() {
            *v = 0.2 + 0.7 * *v;
        }
        let orig = t.clone();
        hed_jitter(&mut t, [1.0; 3], [0.0; 3]);
        assert!(t.max_abs_diff(&orig) < 1e-12);
    }

    #[test]
    fn spatial_ops_paired_and_seeded() {
        let he = ramp(3, 16, 16);
        let mut mif = Tensor::filled(&[2, 16, 16], 1.0);
        mif.data_mut()[5] = 2.0;
        let cfg = AugmentConfig { dropout_p: 1.0, ..Default::default() };
        for seed in 0..20 {
            let (a, b) = augment_pair(&he, &mif, &cfg, &mut rng::indexed(seed, "aug", 0));
            let (a2, b2) = augment_pair(&he, &mif, &cfg, &mut rng::indexed(seed, "aug", 0));
            assert_eq!((a.data(), b.data()), (a2.data(), b2.data()));
            // mIF zeros mark the box; the H&E tile must be black at the same pixels
            for i in 0..256 {
                if b.data()[i] == 0.0 {
                    assert_eq!(b.data()[256 + i], 0.0);
                    for c in 0..3 {
                        assert_eq!(a.data()[c * 256 + i], 0.0);
                    }
                }
            }
            assert!(b.data().iter().any(|&v| v == 0.0));
            // the marked pixel moves with the flips
            let pos = b.data()[..256].iter().position(|&v| v == 2.0);
            if let Some(p) = pos {
                assert!([5, 10, 240 + 5, 240 + 10].contains(&p));
            }
        }
    }

    #[test]
    fn disabled_is_identity() {
        let he = ramp(3, 8, 8);
        let mif = ramp(1, 8, 8);
        let (a, b) = augment_pair(&he, &mif, &AugmentConfig::disabled(), &mut rng::substream(0, "x"));
        assert_eq!((a, b), (he, mif));
    }
}
