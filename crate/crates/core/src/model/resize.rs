//! Separable interpolation matrices with half-pixel (`align_corners = false`)
//! coordinate mapping.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    /// Keys cubic convolution with `a = -0.75`, edge samples clamped.
    Bicubic,
}

const CUBIC_A: f64 = -0.75;

fn cubic_near(x: f64) -> f64 {
    ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
}

fn cubic_far(x: f64) -> f64 {
    ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
}

/// Row-major `[out x input]` matrix `R` with `resized = R * signal`.
pub fn interp_matrix(input: usize, out: usize, mode: Interp) -> Vec<f64> {
    let mut m = vec![0.0; out * input];
    let scale = input as f64 / out as f64;
    for o in 0..out {
        let src = (o as f64 + 0.5) * scale - 0.5;
        match mode {
            Interp::Bilinear => {
                let src = src.max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let t = src - i0 as f64;
                m[o * input + i0] += 1.0 - t;
                m[o * input + i1] += t;
            }
            Interp::Bicubic => {
                let f = src.floor();
                let t = src - f;
                let w = [cubic_far(t + 1.0), cubic_near(t), cubic_near(1.0 - t), cubic_far(2.0 - t)];
                for (j, wj) in w.iter().enumerate() {
                    let idx = (f as i64 - 1 + j as i64).clamp(0, input as i64 - 1) as usize;
                    m[o * input + idx] += wj;
                }
            }
        }
    }
    m
}

/// Resizes one `h x w` plane to `oh x ow`.
pub fn resize_plane(plane: &[f64], h: usize, w: usize, oh: usize, ow: usize, mode: Interp) -> Vec<f64> {
    let ry = interp_matrix(h, oh, mode);
    let rx = interp_matrix(w, ow, mode);
    apply_separable(plane, h, w, &ry, oh, &rx, ow)
}

/// `ry * plane * rx^T`.
pub(crate) fn apply_separable(plane: &[f64], h: usize, w: usize, ry: &[f64], oh: usize, rx: &[f64], ow: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; h * ow];
    super::tensor::matmul_a_bt_acc(plane, rx, &mut tmp, h, w, ow);
    let mut out = vec![0.0; oh * ow];
    super::tensor::matmul_acc(ry, &tmp, &mut out, oh, h, ow);
    out
}

/// Adjoint of [`apply_separable`]: `ry^T * g * rx`.
pub(crate) fn apply_separable_adjoint(
    g: &[f64],
    oh: usize,
    ow: usize,
    ry: &[f64],
    h: usize,
    rx: &[f64],
    w: usize,
) -> Vec<f64> {
    let mut tmp = vec![0.0; oh * w];
    super::tensor::matmul_acc(g, rx, &mut tmp, oh, ow, w);
    let mut out = vec![0.0; h * w];
    super::tensor::matmul_at_b_acc(ry, &tmp, &mut out, oh, h, w);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_one() {
        for mode in [Interp::Bilinear, Interp::Bicubic] {
            for (i, o) in [(4, 2), (2, 4), (5, 8), (8, 8), (3, 7)] {
                let m = interp_matrix(i, o, mode);
                for r in 0..o {
                    let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                    assert!((s - 1.0).abs() < 1e-12, "{mode:?} {i}->{o}");
                }
            }
        }
    }

    #[test]
    fn same_size_is_identity() {
        for mode in [Interp::Bilinear, Interp::Bicubic] {
            let m = interp_matrix(5, 5, mode);
            for r in 0..5 {
                for c in 0..5 {
                    assert!((m[r * 5 + c] - (r == c) as u8 as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bilinear_upsample_reference_values() {
        // [0, 1] upsampled x2 with half-pixel centres: 0, 0.25, 0.75, 1
        let m = interp_matrix(2, 4, Interp::Bilinear);
        let out: Vec<f64> = (0..4).map(|r| m[r * 2 + 1]).collect();
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn bicubic_reference_values() {
        // 4 -> 2 downsample samples at 0.5 and 2.5 between neighbours
        let m = interp_matrix(4, 2, Interp::Bicubic);
        let signal = [0.0, 1.0, 2.0, 3.0];
        let out: Vec<f64> = (0..2).map(|r| (0..4).map(|c| m[r * 4 + c] * signal[c]).sum()).collect();
        // edge clamping pulls the first sample towards the border value
        assert!((out[0] - 0.40625).abs() < 1e-12);
        assert!((out[1] - 2.59375).abs() < 1e-12);
        // linear ramps are reproduced away from the clamped border
        let interior = interp_matrix(8, 4, Interp::Bicubic);
        let ramp: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let v1: f64 = (0..8).map(|c| interior[8 + c] * ramp[c]).sum();
        assert!((v1 - 2.5).abs() < 1e-12);
    }

    #[test]
    fn adjoint_identity() {
        let (h, w, oh, ow) = (3, 5, 6, 4);
        let ry = interp_matrix(h, oh, Interp::Bicubic);
        let rx = interp_matrix(w, ow, Interp::Bilinear);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64).sin()).collect();
        let g: Vec<f64> = (0..oh * ow).map(|i| (i as f64 * 0.3).cos()).collect();
        let y = apply_separable(&x, h, w, &ry, oh, &rx, ow);
        let gx = apply_separable_adjoint(&g, oh, ow, &ry, h, &rx, w);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
