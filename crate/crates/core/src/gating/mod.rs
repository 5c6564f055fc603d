//! Single-cell expression features and marker pseudo-labels.

mod expression;
mod gmm;
mod hierarchy;
mod table;

pub use expression::extract_cell_expression;
pub use gmm::{fit_gmm_1d, fit_gmm_1d_with, gate_marker, GmmFit, GmmOptions};
pub use hierarchy::{apply_hierarchy, Hierarchy, HierarchyRule};
pub use table::{CellRow, CellTable};
