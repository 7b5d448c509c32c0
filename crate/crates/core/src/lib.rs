//! Joint 6-DoF camera motion estimation and non-uniform deblurring from a
//! single blurry image and its depth map.

pub mod blur;
pub mod energy;
pub mod error;
pub mod geometry;
pub mod identify;
pub mod io;
pub mod latent;
pub mod metrics;
pub mod pipeline;
pub mod pose;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    validate_pair, DepthMap, EnergyParams, FlowField, Image, Intrinsics, Pose6, ValidityMask,
};
