//! Small-rotation camera model, depth-based backward warping and the
//! induced optical flow.
//!
//! A pose `p = (θ, v)` is the motion of the camera: with `R = I + [θ]×`,
//! a point `X` expressed in the reference camera frame appears at
//! `X' = Rᵀ (X - v)` in the moved camera. Warping is target driven: every
//! output pixel is back-projected with its own depth, moved, re-projected,
//! and the source image is sampled bilinearly at the result.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::types::{
    check_small_rotation, validate_pair, DepthMap, FlowField, Image, Intrinsics, Pose6,
    ValidityMask,
};

/// First-order rotation `I + [θ]×`. Not orthonormalized.
pub fn small_rotation(theta: &Vector3<f64>) -> Result<Matrix3<f64>> {
    check_small_rotation(theta)?;
    Ok(Matrix3::new(
        1.0, -theta.z, theta.y, //
        theta.z, 1.0, -theta.x, //
        -theta.y, theta.x, 1.0,
    ))
}

/// Pose at normalized exposure time `t ∈ [-1, 1]`: `(t / 2) · p`, so the
/// trajectory runs from `-p/2` to `+p/2` around the mid-exposure frame.
pub fn pose_at_time(p: &Pose6, t: f64) -> Result<Pose6> {
    if !(-1.0..=1.0).contains(&t) {
        return Err(Error::InvalidParameter(format!(
            "exposure time {t} outside [-1, 1]"
        )));
    }
    p.scaled(0.5 * t)
}

/// Rigid transform taking reference-frame points into a moved camera.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CameraMotion {
    rt: Matrix3<f64>,
    v: Vector3<f64>,
    identity: bool,
}

impl CameraMotion {
    pub(crate) fn new(pose: &Pose6) -> Result<Self> {
        let r = small_rotation(&pose.theta())?;
        Ok(Self {
            rt: r.transpose(),
            v: pose.translation(),
            identity: pose.is_zero(),
        })
    }

    fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rt * (x - self.v)
    }
}

/// Back-projected 3D points of every pixel of a depth map.
#[derive(Debug, Clone)]
pub struct Projector {
    height: usize,
    width: usize,
    k: Intrinsics,
    points: Vec<Option<Vector3<f64>>>,
}

impl Projector {
    pub fn new(depth: &DepthMap, k: &Intrinsics) -> Self {
        let (height, width) = depth.dims();
        let mut points = Vec::with_capacity(height * width);
        for row in 0..height {
            for col in 0..width {
                points.push(depth.at(row, col).map(|z| {
                    Vector3::new(
                        (col as f64 - k.cx) / k.fx * z,
                        (row as f64 - k.cy) / k.fy * z,
                        z,
                    )
                }));
            }
        }
        Self {
            height,
            width,
            k: *k,
            points,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.k
    }

    /// Image position `(u, v)` in the moved camera of the point seen at
    /// pixel `index`; `None` for missing depth or points behind the camera.
    pub(crate) fn project(&self, index: usize, motion: &CameraMotion) -> Option<(f64, f64)> {
        let point = self.points[index].as_ref()?;
        if motion.identity {
            return Some(((index % self.width) as f64, (index / self.width) as f64));
        }
        let x = motion.apply(point);
        if !(x.z > 0.0) {
            return None;
        }
        Some((
            self.k.fx * x.x / x.z + self.k.cx,
            self.k.fy * x.y / x.z + self.k.cy,
        ))
    }

    /// Bilinear tap for pixel `index` under `motion`.
    pub(crate) fn tap(&self, index: usize, motion: &CameraMotion) -> Option<Tap> {
        let (u, v) = self.project(index, motion)?;
        bilinear_tap(u, v, self.width, self.height)
    }

    pub fn induced_flow(&self, pose: &Pose6) -> Result<FlowField> {
        let motion = CameraMotion::new(pose)?;
        let n = self.pixel_count();
        let mut data = vec![[0.0; 2]; n];
        let mut valid = vec![false; n];
        for i in 0..n {
            if let Some((u, v)) = self.project(i, &motion) {
                let col = (i % self.width) as f64;
                let row = (i / self.width) as f64;
                data[i] = [u - col, v - row];
                valid[i] = true;
            }
        }
        FlowField::new(self.height, self.width, data, valid)
    }
}

/// Four-neighbour bilinear footprint with an edge taper.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Tap {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    /// 1 inside the image, falling linearly to 0 one pixel outside it.
    pub taper: f64,
}

impl Tap {
    #[inline]
    pub fn sample(&self, plane: &[f64]) -> f64 {
        self.weight[0] * plane[self.index[0]]
            + self.weight[1] * plane[self.index[1]]
            + self.weight[2] * plane[self.index[2]]
            + self.weight[3] * plane[self.index[3]]
    }

    #[inline]
    pub fn sample_interleaved(&self, data: &[f64], channels: usize, channel: usize) -> f64 {
        self.weight[0] * data[self.index[0] * channels + channel]
            + self.weight[1] * data[self.index[1] * channels + channel]
            + self.weight[2] * data[self.index[2] * channels + channel]
            + self.weight[3] * data[self.index[3] * channels + channel]
    }
}

/// Samples closer than one pixel outside the border are clamped onto it and
/// down-weighted by their distance; anything further out has no tap.
pub(crate) fn bilinear_tap(u: f64, v: f64, width: usize, height: usize) -> Option<Tap> {
    let w = width as f64;
    let h = height as f64;
    let taper = (u + 1.0).min(w - u).min(v + 1.0).min(h - v).min(1.0);
    if !(taper > 0.0) {
        return None;
    }
    let u = u.clamp(0.0, w - 1.0);
    let v = v.clamp(0.0, h - 1.0);
    let (x0, ax) = cell(u, width);
    let (y0, ay) = cell(v, height);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    Some(Tap {
        index: [
            y0 * width + x0,
            y0 * width + x1,
            y1 * width + x0,
            y1 * width + x1,
        ],
        weight: [
            (1.0 - ax) * (1.0 - ay),
            ax * (1.0 - ay),
            (1.0 - ax) * ay,
            ax * ay,
        ],
        taper,
    })
}

/// Integer cell and fractional offset of a clamped coordinate.
fn cell(x: f64, len: usize) -> (usize, f64) {
    if len < 2 {
        return (0, 0.0);
    }
    let x0 = (x.floor() as usize).min(len - 2);
    (x0, x - x0 as f64)
}

/// Warps `image` by pose `p` using the depth of each target pixel.
///
/// Returns the warped image and its validity weights; pixels without a
/// sample are zero with weight zero.
pub fn warp(
    p: &Pose6,
    depth: &DepthMap,
    image: &Image,
    k: &Intrinsics,
) -> Result<(Image, ValidityMask)> {
    validate_pair(image, depth)?;
    let motion = CameraMotion::new(p)?;
    let projector = Projector::new(depth, k);
    let channels = image.channels();
    let n = image.pixel_count();
    let mut out = vec![0.0; n * channels];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        if let Some(tap) = projector.tap(i, &motion) {
            for c in 0..channels {
                out[i * channels + c] = tap.sample_interleaved(image.data(), channels, c);
            }
            weights[i] = tap.taper;
        }
    }
    Ok((
        Image::new(image.height(), image.width(), channels, out)?,
        ValidityMask::from_weights(weights),
    ))
}

/// Flow `F(p)(x) = project(Rᵀ(backproject(x, D(x)) - v)) - x`.
pub fn induced_flow(p: &Pose6, depth: &DepthMap, k: &Intrinsics) -> Result<FlowField> {
    Projector::new(depth, k).induced_flow(p)
}

/// Bilinear sample of a plane with the same clamping and taper as warping.
pub fn sample_bilinear(plane: &[f64], width: usize, height: usize, u: f64, v: f64) -> Option<(f64, f64)> {
    bilinear_tap(u, v, width, height).map(|t| (t.sample(plane), t.taper))
}
