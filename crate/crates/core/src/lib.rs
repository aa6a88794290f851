//! Uncertainty-guided knowledge distillation for radar-camera depth
//! estimation: feature, structure and inter-depth distillation losses, an
//! uncertainty-rectified depth loss, depth metrics, a finite-difference
//! gradient harness and a small deterministic training demo.
//!
//! Tensors are dense `f64`, row-major, channel-last (`H×W×C`).

pub mod config;
pub mod depth_loss;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod tensor;
pub mod toy;
pub mod uncertainty;

pub use depth_loss::{total_loss, urdl, DepthMap, LossWeights};
pub use distill::{
    feature_l1_pyramid, inter_depth_distill_loss, pairwise_similarity, structure_distill_loss,
    FeaturePyramid, InterDepthSet, PyramidRole, SimilarityMatrix,
};
pub use error::{Error, Result};
pub use gradcheck::{check, finite_diff, GradReport};
pub use loss::LossResult;
pub use metrics::{aggregate, evaluate, EvalReport};
pub use tensor::Tensor;
pub use uncertainty::{rectify, uncertainty_map, RectifiedWeights, UncertaintyMap};
