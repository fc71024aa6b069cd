//! Style drift, texture statistics and style export.

mod drift;
mod glcm;
mod style;

pub use drift::{run_drift_experiment, style_drift_features, write_drift_csv, DriftConfig, DriftRow, DRIFT_EPS};
pub use glcm::{glcm_features, grayscale_images, quantize, texture_report, GlcmConfig, TextureRow, TEXTURE_HEADER};
pub use style::{
    class_style_stats, export_style_stats, image_moments, intra_class_diversity, map_moments, style_gap_all_layers,
    StyleExport, StyleRow,
};
