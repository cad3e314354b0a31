//! Detection accuracy, dataset statistics and model cost.

pub mod ap;
pub mod fixtures;
pub mod plot;
pub mod profile;
pub mod stats;

pub use ap::{average_precision, filter_subset, ApResult, PrCurve};
pub use plot::{histogram_svg, pr_curves_svg};
pub use profile::{profile, ComplexityReport, LayerEntry, SectionTotal, SECTIONS};
pub use stats::{aspect_ratio_histogram, default_ratio_edges, Histogram};
