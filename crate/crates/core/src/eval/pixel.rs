use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `10 log10(max^2 / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(pred: &[f64], target: &[f64], max_value: f64) -> f64 {
    assert_eq!(pred.len(), target.len(), "psnr inputs differ in length");
    let mse = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode Gaussian filter.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean single-scale SSIM over all valid 11x11 Gaussian windows (sigma 1.5),
/// with `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`.
pub fn ssim(pred: &[f64], target: &[f64], width: usize, height: usize, data_range: f64) -> Result<f64> {
    if pred.len() != width * height || target.len() != width * height {
        return Err(Error::Shape("ssim inputs do not match the given size".into()));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {width}x{height}")));
    }
    let k = gaussian_kernel();
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { pred.iter().zip(target).map(|(&a, &b)| f(a, b)).collect() };
    let (mx, ..) = filter_valid(pred, width, height, &k);
    let (my, ..) = filter_valid(target, width, height, &k);
    let (mxx, ..) = filter_valid(&prod(&|a, _| a * a), width, height, &k);
    let (myy, ..) = filter_valid(&prod(&|_, b| b * b), width, height, &k);
    let (mxy, ..) = filter_valid(&prod(&|a, b| a * b), width, height, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Streaming Pearson correlation: single-pass co-moment accumulation over
/// every sample pushed, mergeable across tiles.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PearsonAccumulator {
    n: f64,
    mean_x: f64,
    mean_y: f64,
    m2_x: f64,
    m2_y: f64,
    c_xy: f64,
}

impl PearsonAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64, y: f64) {
        self.n += 1.0;
        let dx = x - self.mean_x;
        self.mean_x += dx / self.n;
        let dy = y - self.mean_y;
        self.mean_y += dy / self.n;
        self.m2_x += dx * (x - self.mean_x);
        self.m2_y += dy * (y - self.mean_y);
        self.c_xy += dx * (y - self.mean_y);
    }

    pub fn extend(&mut self, xs: &[f64], ys: &[f64]) {
        assert_eq!(xs.len(), ys.len(), "pearson streams differ in length");
        for (&x, &y) in xs.iter().zip(ys) {
            self.push(x, y);
        }
    }

    pub fn merge(&mut self, other: &PearsonAccumulator) {
        if other.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let dx = other.mean_x - self.mean_x;
        let dy = other.mean_y - self.mean_y;
        let f = self.n * other.n / n;
        self.m2_x += other.m2_x + dx * dx * f;
        self.m2_y += other.m2_y + dy * dy * f;
        self.c_xy += other.c_xy + dx * dy * f;
        self.mean_x += dx * other.n / n;
        self.mean_y += dy * other.n / n;
        self.n = n;
    }

    pub fn count(&self) -> usize {
        self.n as usize
    }

    /// Correlation, or the reason it is undefined.
    pub fn finish(&self) -> std::result::Result<f64, &'static str> {
        if self.n < 2.0 {
            return Err("fewer than two samples");
        }
        if self.m2_x <= 0.0 || self.m2_y <= 0.0 {
            return Err("zero variance");
        }
        Ok((self.c_xy / (self.m2_x.sqrt() * self.m2_y.sqrt())).clamp(-1.0, 1.0))
    }
}

/// Per-channel pixel metrics over an evaluation set. PSNR and SSIM are
/// averaged over tiles; Pearson is accumulated over every pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub pearson: Option<f64>,
}
