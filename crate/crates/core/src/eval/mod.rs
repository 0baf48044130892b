//! Volumetric segmentation metrics, a classical nuclei detector and
//! feature-distribution distances.

pub mod detector;
pub mod features;
pub mod masks;
pub mod report;

pub use detector::{ColorDeconvolution, DetectorConfig, HematoxylinDetector};
pub use features::{fid, fid_from_moments, kid, FeatureSet};
pub use masks::{
    boundary_voxels, connected_components, dice3d, hd95, instance_sizes, mean_instance_volume,
    stack_masks_2d_to_3d, Hd95Mode, KdTree, LabelSlice,
};
pub use report::{evaluate_pair, EvalOptions, MetricsReport, STACKING_METHOD};
