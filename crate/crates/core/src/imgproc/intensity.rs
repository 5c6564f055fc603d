use serde::{Deserialize, Serialize};

use super::{AfParams, ChannelImage};
use crate::stats::quantile_sorted;
use crate::{Error, Result};

/// Foreground percentile used for channel normalization.
pub const FOREGROUND_QUANTILE: f64 = 0.999;

/// `max(0, channel - lambda * af + b)`, elementwise.
pub fn af_subtract(channel: &ChannelImage, af: &ChannelImage, params: AfParams) -> Result<ChannelImage> {
    if !channel.same_shape(af) {
        return Err(Error::Shape(format!(
            "channel is {}x{} but AF is {}x{}",
            channel.width(),
            channel.height(),
            af.width(),
            af.height()
        )));
    }
    params.validate()?;
    let pixels = channel
        .pixels()
        .iter()
        .zip(af.pixels())
        .map(|(&c, &a)| (c - params.lambda * a + params.b).max(0.0))
        .collect();
    Ok(ChannelImage::from_parts_unchecked(channel.width(), channel.height(), channel.mpp(), pixels))
}

/// Per-channel 99.9th foreground percentile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub channels: Vec<String>,
    pub q999: Vec<f64>,
}

impl ChannelStats {
    pub fn get(&self, channel: &str) -> Option<f64> {
        self.channels.iter().position(|c| c == channel).map(|i| self.q999[i])
    }
}

/// Exact multiset of foreground values per channel. Merging is order
/// independent because the quantile is taken over the sorted union.
#[derive(Debug, Clone, Default)]
pub struct ChannelStatsAccumulator {
    channels: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl ChannelStatsAccumulator {
    pub fn new(channels: Vec<String>) -> Self {
        let values = vec![Vec::new(); channels.len()];
        Self { channels, values }
    }

    pub fn push(&mut self, channel: usize, image: &ChannelImage) {
        self.extend(channel, image.pixels().iter().copied());
    }

    pub fn extend(&mut self, channel: usize, values: impl IntoIterator<Item = f64>) {
        self.values[channel].extend(values.into_iter().filter(|&v| v > 0.0));
    }

    pub fn merge(&mut self, other: ChannelStatsAccumulator) {
        assert_eq!(self.channels, other.channels, "merging stats of different panels");
        for (mine, theirs) in self.values.iter_mut().zip(other.values) {
            mine.extend(theirs);
        }
    }

    pub fn finish(mut self) -> Result<ChannelStats> {
        let mut q999 = Vec::with_capacity(self.channels.len());
        for (name, values) in self.channels.iter().zip(self.values.iter_mut()) {
            values.sort_by(f64::total_cmp);
            match quantile_sorted(values, FOREGROUND_QUANTILE) {
                Some(q) if q > 0.0 => q999.push(q),
                _ => return Err(Error::NoForeground { channel: name.clone() }),
            }
        }
        Ok(ChannelStats { channels: self.channels, q999 })
    }
}

/// Fit foreground percentiles from `(channel name, values)` streams.
pub fn fit_channel_stats<I, V>(streams: I) -> Result<ChannelStats>
where
    I: IntoIterator<Item = (String, V)>,
    V: IntoIterator<Item = f64>,
{
    let (names, values): (Vec<String>, Vec<V>) = streams.into_iter().unzip();
    let mut acc = ChannelStatsAccumulator::new(names);
    for (i, v) in values.into_iter().enumerate() {
        acc.extend(i, v);
    }
    acc.finish()
}

/// Logarithm used by the normalization; base 2 maps `[0, q999]` onto
/// exactly `[0, 255]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Two,
    Natural,
}

impl LogBase {
    fn ln_base(self) -> f64 {
        match self {
            LogBase::Two => std::f64::consts::LN_2,
            LogBase::Natural => 1.0,
        }
    }

    /// `255 * log(min(v, q) / q + 1)`.
    pub fn forward(self, value: f64, q999: f64) -> f64 {
        if value >= q999 {
            return match self {
                LogBase::Two => 255.0,
                LogBase::Natural => 255.0 * std::f64::consts::LN_2,
            };
        }
        255.0 * (value / q999).ln_1p() / self.ln_base()
    }

    /// `q * (base^(v / 255) - 1)`.
    pub fn inverse(self, value: f64, q999: f64) -> f64 {
        q999 * (value / 255.0 * self.ln_base()).exp_m1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizeDirection {
    Forward,
    Inverse,
}

/// Clip at `q999` and log-compress to the normalized range, or invert that map.
pub fn normalize_channel(
    image: &ChannelImage,
    q999: f64,
    direction: NormalizeDirection,
    base: LogBase,
) -> Result<ChannelImage> {
    if !(q999 > 0.0) || !q999.is_finite() {
        return Err(Error::Invalid(format!("q999 must be positive, got {q999}")));
    }
    let f = |v: f64| match direction {
        NormalizeDirection::Forward => base.forward(v, q999),
        NormalizeDirection::Inverse => base.inverse(v, q999),
    };
    let pixels = image.pixels().iter().map(|&v| f(v)).collect();
    Ok(ChannelImage::from_parts_unchecked(image.width(), image.height(), image.mpp(), pixels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn px(v: f64) -> ChannelImage {
        ChannelImage::filled(1, 1, 0.5, v).unwrap()
    }

    fn af1(c: f64, a: f64, lambda: f64, b: f64) -> f64 {
        af_subtract(&px(c), &px(a), AfParams { lambda, b }).unwrap().pixels()[0]
    }

    #[test]
    fn af_examples() {
        assert_eq!(af1(100.0, 40.0, 0.5, 0.0), 80.0);
        assert_eq!(af1(10.0, 100.0, 1.0, 0.0), 0.0);
        let img = ChannelImage::new(2, 2, 0.5, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let af = ChannelImage::new(2, 2, 0.5, vec![9.0, 9.0, 9.0, 9.0]).unwrap();
        assert_eq!(af_subtract(&img, &af, AfParams::default()).unwrap(), img);
    }

    #[test]
    fn af_shape_mismatch() {
        let a = ChannelImage::filled(2, 2, 0.5, 1.0).unwrap();
        let b = ChannelImage::filled(3, 2, 0.5, 1.0).unwrap();
        assert!(matches!(af_subtract(&a, &b, AfParams::default()), Err(Error::Shape(_))));
        assert!(af_subtract(&a, &a, AfParams { lambda: -1.0, b: 0.0 }).is_err());
    }

    #[test]
    fn channel_stats_examples() {
        let s = fit_channel_stats([("a".to_string(), (1..=1000).map(f64::from).collect::<Vec<_>>())]).unwrap();
        // sorted-order-statistic oracle: 0.999 * 999 = 998.001
        let mut sorted: Vec<f64> = (1..=1000).map(f64::from).collect();
        sorted.sort_by(f64::total_cmp);
        let oracle = sorted[998] + 0.001 * (sorted[999] - sorted[998]);
        assert!((s.q999[0] - oracle).abs() < 1e-9);
        assert!((s.q999[0] - 999.0).abs() < 0.01);

        let s = fit_channel_stats([("c".to_string(), vec![7.0; 50])]).unwrap();
        assert_eq!(s.q999, vec![7.0]);
        let s = fit_channel_stats([("z".to_string(), vec![0.0, 0.0, 5.0])]).unwrap();
        assert_eq!(s.q999, vec![5.0]);
    }

    #[test]
    fn channel_stats_no_foreground_names_channel() {
        let err = fit_channel_stats([("CD3".to_string(), vec![0.0, 0.0])]).unwrap_err();
        assert!(err.to_string().contains("CD3"), "{err}");
    }

    #[test]
    fn accumulator_merge_is_order_independent() {
        let mut a = ChannelStatsAccumulator::new(vec!["x".into()]);
        a.extend(0, [5.0, 1.0, 3.0]);
        let mut b = ChannelStatsAccumulator::new(vec!["x".into()]);
        b.extend(0, [2.0, 4.0]);
        let mut ab = a.clone();
        ab.merge(b.clone());
        let mut ba = b;
        ba.merge(a);
        assert_eq!(ab.finish().unwrap(), ba.finish().unwrap());
    }

    #[test]
    fn normalize_examples() {
        let q = 40.0;
        let f = |v| normalize_channel(&px(v), q, NormalizeDirection::Forward, LogBase::Two).unwrap().pixels()[0];
        assert_eq!(f(q), 255.0);
        assert_eq!(f(0.0), 0.0);
        assert_eq!(f(3.0 * q), 255.0);
        assert!(normalize_channel(&px(1.0), 0.0, NormalizeDirection::Forward, LogBase::Two).is_err());
        // natural log variant tops out at 255 ln 2
        let n = normalize_channel(&px(q), q, NormalizeDirection::Forward, LogBase::Natural).unwrap();
        assert!((n.pixels()[0] - 255.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn af_output_bounds(c in 0.0f64..1e4, a in 0.0f64..1e4, lambda in 0.0f64..5.0, b in -100.0f64..100.0) {
            let out = af1(c, a, lambda, b);
            prop_assert!(out >= 0.0);
            prop_assert!(out <= (c + b).max(0.0) + 1e-9);
        }

        #[test]
        fn normalize_round_trip(frac in 0.0f64..=1.0, q in 1e-3f64..1e5) {
            for base in [LogBase::Two, LogBase::Natural] {
                let v = frac * q;
                let back = base.inverse(base.forward(v, q), q);
                prop_assert!((back - v).abs() <= 1e-9 * v, "{v} -> {back}");
            }
        }

        #[test]
        fn normalize_monotone(a in 0.0f64..1e4, d in 0.0f64..1e4, q in 1.0f64..1e4) {
            prop_assert!(LogBase::Two.forward(a, q) <= LogBase::Two.forward(a + d, q));
        }
    }
}
