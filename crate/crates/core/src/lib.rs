//! Virtual staining toolkit: predicts multiplex immunofluorescence (mIF)
//! marker channels from H&E tiles and evaluates the predictions at pixel and
//! single-cell level.
//!
//! The crate is split along the pipeline:
//!
//! * [`imgproc`]: tissue detection, tile QC, autofluorescence subtraction,
//!   channel normalization and nucleus mask geometry.
//! * [`gating`]: per-cell expression features and GMM pseudo-labels.
//! * [`model`]: a small ViT-encoder U-Net translator with its own autograd,
//!   LoRA adapters, weighted MSE and the training loop.
//! * [`eval`]: PSNR/SSIM/Pearson, linear probes, AUPRC/F1, bootstrap CIs and
//!   baselines.
//! * [`io`]: manifests, panel configuration and tile files.
//! * [`synth`]: synthetic paired datasets with planted ground truth.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod gating;
pub mod imgproc;
pub mod io;
pub mod model;
pub mod rng;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use gating::{CellRow, CellTable, GmmFit, HierarchyRule};
pub use imgproc::{AfParams, ChannelImage, ChannelStats, InstanceMask, RgbImage, TileQcReport};
pub use io::{ManifestRecord, PanelConfig, Split};
