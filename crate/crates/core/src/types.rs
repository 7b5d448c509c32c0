//! Shared value types: images, depth maps, poses, intrinsics, flow fields
//! and the energy parameters.
//!
//! All types are immutable once constructed and validate their invariants
//! in their constructors.

use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};

/// Rotation magnitude beyond which the first-order rotation model is rejected.
pub const MAX_SMALL_ROTATION: f64 = 0.5;

/// A row-major `height x width x channels` grid of intensities.
///
/// Values are finite. Images read from or written to disk are clamped to
/// `[0, 1]`; intermediate images (residuals, adjoint outputs) may leave
/// that range.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidParameter(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter("image must be non-empty".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch {
                expected: format!("{} samples", height * width * channels),
                actual: format!("{} samples", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite intensity at sample {i}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image clamping every value into `[0, 1]`; non-finite values become 0.
    pub fn from_clamped(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        Self::new(height, width, channels, data)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Interleaves per-channel planes into an image.
    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f64>]) -> Result<Self> {
        let channels = planes.len();
        let n = height * width;
        if planes.iter().any(|p| p.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: format!("{n} pixels per plane"),
                actual: format!("{:?}", planes.iter().map(Vec::len).collect::<Vec<_>>()),
            });
        }
        let mut data = vec![0.0; n * channels];
        for (c, plane) in planes.iter().enumerate() {
            for (i, &v) in plane.iter().enumerate() {
                data[i * channels + c] = v;
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Copies one channel out as a row-major plane.
    pub fn plane(&self, channel: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(channel)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn planes(&self) -> Vec<Vec<f64>> {
        (0..self.channels).map(|c| self.plane(c)).collect()
    }

    /// Channel mean as a single-channel plane.
    pub fn gray_plane(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.clone();
        }
        let inv = 1.0 / self.channels as f64;
        self.data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() * inv)
            .collect()
    }

    pub fn to_gray(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.gray_plane(),
        }
    }

    /// Copy with every value clamped into `[0, 1]`.
    pub fn clamped(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(dims_mismatch(self.dims(), other.dims()));
        }
        if self.channels != other.channels {
            return Err(Error::DimensionMismatch {
                expected: format!("{} channels", self.channels),
                actual: format!("{} channels", other.channels),
            });
        }
        Ok(())
    }
}

/// Metric depth per pixel with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Every pixel marked valid must hold a finite depth `> 0`.
    pub fn with_mask(height: usize, width: usize, data: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter("depth map must be non-empty".into()));
        }
        if data.len() != n || valid.len() != n {
            return Err(Error::DimensionMismatch {
                expected: format!("{n} depth samples and mask entries"),
                actual: format!("{} samples, {} mask entries", data.len(), valid.len()),
            });
        }
        for (i, (&z, &ok)) in data.iter().zip(&valid).enumerate() {
            if ok && !(z.is_finite() && z > 0.0) {
                return Err(Error::NonPositiveDepth {
                    row: i / width,
                    col: i % width,
                    value: z,
                });
            }
        }
        Ok(Self {
            height,
            width,
            data,
            valid,
        })
    }

    /// Treats every sample as valid; fails on any non-positive value.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let valid = vec![true; data.len()];
        Self::with_mask(height, width, data, valid)
    }

    /// Marks non-positive and non-finite samples as holes instead of failing.
    pub fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let valid = data.iter().map(|z| z.is_finite() && *z > 0.0).collect();
        let data = data
            .into_iter()
            .map(|z| if z.is_finite() && z > 0.0 { z } else { 0.0 })
            .collect();
        Self::with_mask(height, width, data, valid)
    }

    pub fn constant(height: usize, width: usize, depth: f64) -> Result<Self> {
        Self::new(height, width, vec![depth; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn at(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.width + col;
        self.valid[i].then_some(self.data[i])
    }

    /// (min, max) over valid pixels, `None` when no pixel is valid.
    pub fn range(&self) -> Option<(f64, f64)> {
        self.data
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .fold(None, |acc, (&z, _)| match acc {
                None => Some((z, z)),
                Some((lo, hi)) => Some((lo.min(z), hi.max(z))),
            })
    }

    /// Median of the valid depths.
    pub fn median(&self) -> Option<f64> {
        let mut v: Vec<f64> = self
            .data
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .map(|(&z, _)| z)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(v[v.len() / 2])
    }
}

/// Checks that a depth map can drive the geometry of an image.
pub fn validate_pair(image: &Image, depth: &DepthMap) -> Result<()> {
    if image.dims() != depth.dims() {
        return Err(dims_mismatch(image.dims(), depth.dims()));
    }
    for (i, (&z, &ok)) in depth.data.iter().zip(&depth.valid).enumerate() {
        if ok && !(z.is_finite() && z > 0.0) {
            return Err(Error::NonPositiveDepth {
                row: i / depth.width,
                col: i % depth.width,
                value: z,
            });
        }
    }
    Ok(())
}

/// Total camera motion over the exposure: rotation `theta` (radians) and
/// translation `v` (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6 {
    theta: Vector3<f64>,
    v: Vector3<f64>,
}

impl Pose6 {
    pub fn new(theta: [f64; 3], v: [f64; 3]) -> Result<Self> {
        Self::from_vector(&Vector6::new(theta[0], theta[1], theta[2], v[0], v[1], v[2]))
    }

    /// Components ordered `(θx, θy, θz, vx, vy, vz)`.
    pub fn from_vector(p: &Vector6<f64>) -> Result<Self> {
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite pose {p:?}")));
        }
        let theta = Vector3::new(p[0], p[1], p[2]);
        check_small_rotation(&theta)?;
        Ok(Self {
            theta,
            v: Vector3::new(p[3], p[4], p[5]),
        })
    }

    pub fn zero() -> Self {
        Self {
            theta: Vector3::zeros(),
            v: Vector3::zeros(),
        }
    }

    pub fn theta(&self) -> Vector3<f64> {
        self.theta
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.v
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.theta.x,
            self.theta.y,
            self.theta.z,
            self.v.x,
            self.v.y,
            self.v.z,
        )
    }

    pub fn to_array(&self) -> [f64; 6] {
        let v = self.to_vector();
        [v[0], v[1], v[2], v[3], v[4], v[5]]
    }

    pub fn is_zero(&self) -> bool {
        self.theta == Vector3::zeros() && self.v == Vector3::zeros()
    }

    /// Componentwise scaling. Scaling by `|s| <= 1` keeps the pose valid.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::from_vector(&(self.to_vector() * s))
    }

    pub fn norm_squared(&self) -> f64 {
        self.to_vector().norm_squared()
    }
}

pub(crate) fn check_small_rotation(theta: &Vector3<f64>) -> Result<()> {
    let norm = theta.norm();
    if !(norm <= MAX_SMALL_ROTATION) {
        return Err(Error::AngleTooLarge {
            norm,
            limit: MAX_SMALL_ROTATION,
        });
    }
    Ok(())
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        if !(fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidParameter("non-finite principal point".into()));
        }
        Ok(k)
    }

    /// Principal point must lie inside a `height x width` image.
    pub fn check_image(&self, height: usize, width: usize) -> Result<()> {
        if !(0.0..width as f64).contains(&self.cx) || !(0.0..height as f64).contains(&self.cy) {
            return Err(Error::InvalidParameter(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, height, width
            )));
        }
        Ok(())
    }

    /// Focal length equal to the image width, principal point at the centre.
    pub fn centered(height: usize, width: usize) -> Self {
        Self {
            fx: width as f64,
            fy: width as f64,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }
}

/// Per-pixel weight attached to rendered images.
///
/// A weight of 1 means every exposure sample landed inside the image; the
/// weight falls linearly to 0 over the one-pixel band just outside the
/// border, and is 0 for samples further out or for pixels without depth.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityMask {
    weights: Vec<f64>,
}

impl ValidityMask {
    pub fn from_weights(weights: Vec<f64>) -> Self {
        Self { weights }
    }

    pub fn full(n: usize) -> Self {
        Self {
            weights: vec![1.0; n],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.weights[i] > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    pub fn all_valid(&self) -> bool {
        self.weights.iter().all(|&w| w > 0.0)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Per-pixel displacement `(du, dv)` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<[f64; 2]>,
    valid: Vec<bool>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<[f64; 2]>, valid: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if data.len() != n || valid.len() != n {
            return Err(Error::DimensionMismatch {
                expected: format!("{n} flow vectors"),
                actual: format!("{} vectors, {} mask entries", data.len(), valid.len()),
            });
        }
        if data
            .iter()
            .zip(&valid)
            .any(|(f, &ok)| ok && !(f[0].is_finite() && f[1].is_finite()))
        {
            return Err(Error::InvalidParameter("non-finite flow at a valid pixel".into()));
        }
        Ok(Self {
            height,
            width,
            data,
            valid,
        })
    }

    pub fn uniform(height: usize, width: usize, flow: [f64; 2]) -> Result<Self> {
        let n = height * width;
        Self::new(height, width, vec![flow; n], vec![true; n])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[[f64; 2]] {
        &self.data
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn at(&self, row: usize, col: usize) -> Option<[f64; 2]> {
        let i = row * self.width + col;
        self.valid[i].then_some(self.data[i])
    }

    /// Mean displacement over valid pixels.
    pub fn mean(&self) -> [f64; 2] {
        let mut acc = [0.0, 0.0];
        let mut n = 0usize;
        for (f, _) in self.data.iter().zip(&self.valid).filter(|(_, &ok)| ok) {
            acc[0] += f[0];
            acc[1] += f[1];
            n += 1;
        }
        if n == 0 {
            return acc;
        }
        [acc[0] / n as f64, acc[1] / n as f64]
    }
}

/// Weights of the energy, primal-dual step sizes, and solver budgets.
///
/// Field names in configuration files follow the `camelCase` spelling
/// (`mu1`, `sigmaB`, `N`, `pyramidLevels`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default, deny_unknown_fields)]
pub struct EnergyParams {
    /// Motion reward weight; must be negative.
    pub mu1: f64,
    /// Image-edge term of the flow smoothness weight.
    pub mu2: f64,
    /// Depth-edge term of the flow smoothness weight.
    pub mu3: f64,
    /// Total-variation weight of the latent image.
    pub mu4: f64,
    #[serde(rename = "sigmaB")]
    pub sigma_b: f64,
    #[serde(rename = "sigmaD")]
    pub sigma_d: f64,
    /// Image width at which `mu1`, `mu2` and `mu3` apply unscaled; at other
    /// widths `mu2` and `mu3` are multiplied by `(width / reference)²`, and
    /// `mu1` and `mu4` by `width / reference`.
    pub reference_width: f64,
    /// Half sample count: the exposure is discretized into `2N + 1` warps.
    #[serde(rename = "N")]
    pub half_samples: usize,
    /// Primal proximal step.
    pub eta: f64,
    /// Dual ascent step.
    pub gamma: f64,
    pub pyramid_levels: usize,
    pub pyramid_scale: f64,
    /// Feasible box for the pose solver, `‖θ‖∞` in radians.
    pub max_rotation: f64,
    /// Feasible box for the pose solver, `‖v‖∞` in meters.
    pub max_translation: f64,
    pub lm_max_iterations: usize,
    pub latent_iterations: usize,
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
    /// Pose/latent alternations per pyramid level.
    pub alternations: usize,
    /// Number of multi-start pose candidates at the coarsest level.
    pub start_count: usize,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            mu1: -20.0,
            mu2: 0.2,
            mu3: 0.2,
            mu4: 0.05,
            sigma_b: 0.01,
            sigma_d: 0.02,
            reference_width: 640.0,
            half_samples: 10,
            eta: 10.0,
            gamma: 0.005,
            pyramid_levels: 11,
            pyramid_scale: 0.9,
            max_rotation: 0.3,
            max_translation: 0.5,
            lm_max_iterations: 50,
            latent_iterations: 50,
            cg_tolerance: 1e-6,
            cg_max_iterations: 200,
            alternations: 3,
            start_count: 9,
        }
    }
}

impl EnergyParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !(self.mu1.is_finite() && self.mu1 < 0.0) {
            return bad("mu1 must be negative");
        }
        if !(positive(self.mu2) && positive(self.mu3) && positive(self.mu4)) {
            return bad("mu2, mu3, mu4 must be positive");
        }
        if !(positive(self.sigma_b) && positive(self.sigma_d)) {
            return bad("sigmaB and sigmaD must be positive");
        }
        if !positive(self.reference_width) {
            return bad("referenceWidth must be positive");
        }
        if self.half_samples < 1 {
            return bad("N must be at least 1");
        }
        if !(positive(self.eta) && positive(self.gamma)) {
            return bad("eta and gamma must be positive");
        }
        if self.pyramid_levels < 1 {
            return bad("pyramidLevels must be at least 1");
        }
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return bad("pyramidScale must lie in (0, 1)");
        }
        if !(positive(self.max_rotation) && self.max_rotation <= MAX_SMALL_ROTATION) {
            return bad("maxRotation must lie in (0, 0.5]");
        }
        if !positive(self.max_translation) {
            return bad("maxTranslation must be positive");
        }
        if !positive(self.cg_tolerance) {
            return bad("cgTolerance must be positive");
        }
        if self.lm_max_iterations == 0 || self.cg_max_iterations == 0 {
            return bad("iteration budgets must be positive");
        }
        if self.start_count == 0 {
            return bad("startCount must be at least 1");
        }
        Ok(())
    }

    /// Number of exposure samples, `2N + 1`.
    pub fn sample_count(&self) -> usize {
        2 * self.half_samples + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_formed_pair_validates() {
        let img = Image::constant(64, 64, 1, 0.5).unwrap();
        let depth = DepthMap::constant(64, 64, 1.0).unwrap();
        assert!(validate_pair(&img, &depth).is_ok());
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        let img = Image::constant(64, 64, 1, 0.5).unwrap();
        let depth = DepthMap::constant(32, 32, 1.0).unwrap();
        assert!(matches!(
            validate_pair(&img, &depth),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn negative_valid_depth_is_rejected() {
        let mut data = vec![1.0; 16];
        data[5] = -1.0;
        let err = DepthMap::with_mask(4, 4, data, vec![true; 16]).unwrap_err();
        assert!(matches!(err, Error::NonPositiveDepth { row: 1, col: 1, .. }));
    }

    #[test]
    fn raw_depth_marks_holes() {
        let d = DepthMap::from_raw(1, 3, vec![1.0, 0.0, f64::NAN]).unwrap();
        assert_eq!(d.valid(), &[true, false, false]);
        assert_eq!(d.range(), Some((1.0, 1.0)));
    }

    #[test]
    fn large_rotation_cannot_be_constructed() {
        assert!(matches!(
            Pose6::new([0.4, 0.4, 0.0], [0.0; 3]),
            Err(Error::AngleTooLarge { .. })
        ));
        assert!(Pose6::new([0.3, 0.3, 0.0], [5.0, 0.0, 0.0]).is_ok());
        assert!(Pose6::new([f64::NAN, 0.0, 0.0], [0.0; 3]).is_err());
    }

    #[test]
    fn image_constructor_rejects_bad_input() {
        assert!(Image::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(1, 1, 1, vec![f64::INFINITY]).is_err());
        let img = Image::from_clamped(1, 2, 1, vec![-0.5, 1.5]).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn planes_round_trip() {
        let img = Image::new(1, 2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(img.plane(1), vec![0.2, 0.5]);
        let back = Image::from_planes(1, 2, &img.planes()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn default_params_validate() {
        let p = EnergyParams::default();
        p.validate().unwrap();
        assert_eq!(p.sample_count(), 21);
        let mut bad = p.clone();
        bad.mu1 = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = p;
        bad.pyramid_scale = 1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn params_parse_with_camel_case_names() {
        let p: EnergyParams = toml::from_str("mu1 = -10.0\nsigmaB = 0.05\nN = 3\npyramidLevels = 4\n").unwrap();
        assert_eq!(p.mu1, -10.0);
        assert_eq!(p.sigma_b, 0.05);
        assert_eq!(p.half_samples, 3);
        assert_eq!(p.pyramid_levels, 4);
        assert_eq!(p.mu4, 0.05);
    }
}
