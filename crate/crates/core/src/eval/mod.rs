//! Pixel-level reconstruction metrics and the cell-level evaluation protocol.

mod baselines;
mod bootstrap;
mod classification;
mod counts;
mod morphometry;
mod pixel;
mod probe;
mod report;

pub use baselines::{baseline_suite, random_baseline_f1, random_baseline_f1_for_labels, BaselineEntry, BaselineScores};
pub use bootstrap::{bootstrap_ci, cells_of_tiles, BootstrapConfig, BootstrapInterval};
pub use classification::{auprc, f1_binary, ConfusionCounts};
pub use counts::{cellcount_correlation, CountCorrelation};
pub use morphometry::{morphometry_features, MorphometryFeatures, MORPHOMETRY_FEATURE_NAMES};
pub use pixel::{psnr, ssim, PearsonAccumulator, PixelMetrics};
pub use probe::{split_external, train_probe, ProbeConfig, ProbeModel, ProbeScores};
pub use report::{CellMetrics, MacroAverages, MarkerReport, MetricReport, PsnrDb};
