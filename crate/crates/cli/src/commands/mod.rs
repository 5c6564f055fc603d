//! One module per pipeline stage.

pub mod evaluate;
pub mod preprocess;
pub mod synth;
pub mod train;
