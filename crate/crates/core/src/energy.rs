//! The joint objective: the blur data term, the motion reward, the
//! edge-aware flow smoothness and the total variation of the latent image.
//!
//! Every discrete gradient is a forward difference with a replicated
//! boundary, so the last column (row) has a zero horizontal (vertical)
//! derivative.

use crate::blur::BlurOperator;
use crate::error::{dims_mismatch, Result};
use crate::geometry::Projector;
use crate::types::{validate_pair, DepthMap, EnergyParams, FlowField, Image, Intrinsics, Pose6};

/// Forward differences `(∂x, ∂y)` of a row-major plane.
pub fn forward_gradient(plane: &[f64], height: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; plane.len()];
    let mut gy = vec![0.0; plane.len()];
    for row in 0..height {
        for col in 0..width {
            let i = row * width + col;
            if col + 1 < width {
                gx[i] = plane[i + 1] - plane[i];
            }
            if row + 1 < height {
                gy[i] = plane[i + width] - plane[i];
            }
        }
    }
    (gx, gy)
}

/// Transpose of [`forward_gradient`] (the negative discrete divergence).
pub fn forward_gradient_adjoint(gx: &[f64], gy: &[f64], height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; gx.len()];
    for row in 0..height {
        for col in 0..width {
            let i = row * width + col;
            if col + 1 < width {
                out[i] -= gx[i];
                out[i + 1] += gx[i];
            }
            if row + 1 < height {
                out[i] -= gy[i];
                out[i + width] += gy[i];
            }
        }
    }
    out
}

/// Weight of each forward-difference pair: the smaller of its two pixels.
pub(crate) fn pair_weights(weights: &[f64], height: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut wx = weights.to_vec();
    let mut wy = weights.to_vec();
    for row in 0..height {
        for col in 0..width {
            let i = row * width + col;
            if col + 1 < width {
                wx[i] = weights[i].min(weights[i + 1]);
            }
            if row + 1 < height {
                wy[i] = weights[i].min(weights[i + width]);
            }
        }
    }
    (wx, wy)
}

/// Validity weights of one blurred plane and of its two gradient components.
#[derive(Debug, Clone)]
pub(crate) struct DataWeights {
    pub pixel: Vec<f64>,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl DataWeights {
    pub fn new(weights: &[f64], height: usize, width: usize) -> Self {
        let (dx, dy) = pair_weights(weights, height, width);
        Self {
            pixel: weights.to_vec(),
            dx,
            dy,
        }
    }
}

/// `‖A L - B‖² + ‖∇A L - ∇B‖²` for one plane, weighted by validity.
pub(crate) fn data_plane(
    blurred: &[f64],
    observed: &[f64],
    weights: &DataWeights,
    height: usize,
    width: usize,
) -> f64 {
    let diff: Vec<f64> = blurred.iter().zip(observed).map(|(a, b)| a - b).collect();
    let (dx, dy) = forward_gradient(&diff, height, width);
    let mut total = 0.0;
    for i in 0..diff.len() {
        total += weights.pixel[i] * diff[i] * diff[i]
            + weights.dx[i] * dx[i] * dx[i]
            + weights.dy[i] * dy[i] * dy[i];
    }
    total
}

/// `n / Σ w` for `n` pixels with validity weights `w`, or `None` when no
/// pixel is valid. Multiplying a weighted sum by it rescales the valid part
/// of the image to the full pixel count, so motions that push pixels out of
/// view gain nothing by shrinking the sum.
pub fn coverage_factor(weights: &[f64]) -> Option<f64> {
    let total: f64 = weights.iter().sum();
    (total > 0.0).then(|| weights.len() as f64 / total)
}

/// Data term `‖A_p(L) - B‖_F² + ‖∇A_p(L) - ∇B‖_F²` over valid pixels,
/// scaled by [`coverage_factor`]; infinite when no pixel is valid.
pub fn data_term(latent: &Image, blurry: &Image, op: &BlurOperator) -> Result<f64> {
    latent.same_shape(blurry)?;
    let (blurred, mask) = op.apply(latent)?;
    let (h, w) = latent.dims();
    let Some(scale) = coverage_factor(mask.weights()) else {
        return Ok(f64::INFINITY);
    };
    let weights = DataWeights::new(mask.weights(), h, w);
    Ok(scale
        * (0..latent.channels())
            .map(|c| data_plane(&blurred.plane(c), &blurry.plane(c), &weights, h, w))
            .sum::<f64>())
}

/// Per-pixel smoothness weight `E(B, D)` of the induced flow.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeightField {
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

impl EdgeWeightField {
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.width + col]
    }
}

/// `s·(μ2·exp(-‖∇B‖²/σB²) + μ3·exp(-‖∇D̂‖²/σD²))`, with `B` reduced to its
/// channel mean and `D̂` the depth rescaled to `[0, 1]` by its valid range.
/// Depth differences touching a hole count as flat. The resolution factor
/// `s = (width / reference_width)²` keeps the balance against the
/// data term, whose per-pixel size grows with the flow in pixels.
pub fn edge_weights(blurry: &Image, depth: &DepthMap, params: &EnergyParams) -> Result<EdgeWeightField> {
    validate_pair(blurry, depth)?;
    let (h, w) = blurry.dims();
    let (bx, by) = forward_gradient(&blurry.gray_plane(), h, w);
    let (dx, dy) = normalized_depth_gradient(depth);
    let scale = resolution_factor(w, params);
    let weights = (0..h * w)
        .map(|i| scale * edge_weight(bx[i] * bx[i] + by[i] * by[i], dx[i] * dx[i] + dy[i] * dy[i], params))
        .collect();
    Ok(EdgeWeightField {
        height: h,
        width: w,
        weights,
    })
}

/// `(width / reference_width)²`.
pub fn resolution_factor(width: usize, params: &EnergyParams) -> f64 {
    (width as f64 / params.reference_width).powi(2)
}

/// Weight of the total variation at the given image width,
/// `mu4 · width / reference_width`.
pub fn tv_weight(width: usize, params: &EnergyParams) -> f64 {
    params.mu4 * width as f64 / params.reference_width
}

/// Weight of the motion reward `‖p‖²` at the given image width,
/// `mu1 · width / reference_width`.
pub fn motion_weight(width: usize, params: &EnergyParams) -> f64 {
    params.mu1 * width as f64 / params.reference_width
}

/// Unscaled weight for squared image and depth gradient magnitudes.
pub fn edge_weight(image_grad_sq: f64, depth_grad_sq: f64, params: &EnergyParams) -> f64 {
    params.mu2 * (-image_grad_sq / (params.sigma_b * params.sigma_b)).exp()
        + params.mu3 * (-depth_grad_sq / (params.sigma_d * params.sigma_d)).exp()
}

fn normalized_depth_gradient(depth: &DepthMap) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = depth.dims();
    let n = h * w;
    let Some((lo, hi)) = depth.range() else {
        return (vec![0.0; n], vec![0.0; n]);
    };
    let span = hi - lo;
    let norm: Vec<f64> = depth
        .data()
        .iter()
        .map(|&z| if span > 0.0 { (z - lo) / span } else { 0.0 })
        .collect();
    let valid = depth.valid();
    let mut gx = vec![0.0; n];
    let mut gy = vec![0.0; n];
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            if !valid[i] {
                continue;
            }
            if col + 1 < w && valid[i + 1] {
                gx[i] = norm[i + 1] - norm[i];
            }
            if row + 1 < h && valid[i + w] {
                gy[i] = norm[i + w] - norm[i];
            }
        }
    }
    (gx, gy)
}

/// `S(p) = Σ E(x)·‖∇F(x)‖²` over pixel pairs where both flows are valid.
pub fn flow_smoothness(flow: &FlowField, weights: &EdgeWeightField) -> Result<f64> {
    if flow.dims() != weights.dims() {
        return Err(dims_mismatch(weights.dims(), flow.dims()));
    }
    let mut total = 0.0;
    for_each_flow_difference(flow, |i, d| total += weights.weights[i] * (d[0] * d[0] + d[1] * d[1]));
    Ok(total)
}

/// Visits every forward difference of the flow whose two ends are valid.
pub(crate) fn for_each_flow_difference(flow: &FlowField, mut visit: impl FnMut(usize, [f64; 2])) {
    let (h, w) = flow.dims();
    let (data, valid) = (flow.data(), flow.valid());
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            if !valid[i] {
                continue;
            }
            if col + 1 < w && valid[i + 1] {
                visit(i, [data[i + 1][0] - data[i][0], data[i + 1][1] - data[i][1]]);
            }
            if row + 1 < h && valid[i + w] {
                visit(i, [data[i + w][0] - data[i][0], data[i + w][1] - data[i][1]]);
            }
        }
    }
}

/// Anisotropic total variation `Σ |∂x L| + |∂y L|`; for colour images each
/// derivative direction takes the Euclidean norm across channels.
pub fn total_variation(latent: &Image) -> f64 {
    let (h, w) = latent.dims();
    let grads: Vec<(Vec<f64>, Vec<f64>)> = latent
        .planes()
        .iter()
        .map(|p| forward_gradient(p, h, w))
        .collect();
    tv_from_gradients(&grads)
}

pub(crate) fn tv_from_gradients(grads: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let n = grads[0].0.len();
    if grads.len() == 1 {
        return grads[0].0.iter().chain(&grads[0].1).map(|g| g.abs()).sum();
    }
    (0..n)
        .map(|i| {
            let sx: f64 = grads.iter().map(|g| g.0[i] * g.0[i]).sum();
            let sy: f64 = grads.iter().map(|g| g.1[i] * g.1[i]).sum();
            sx.sqrt() + sy.sqrt()
        })
        .sum()
}

/// `s·μ1‖p‖² + S(p) + μ4·TV(L)` with `s` the [`resolution_factor`].
pub fn reg_term(
    p: &Pose6,
    latent: &Image,
    flow: &FlowField,
    weights: &EdgeWeightField,
    params: &EnergyParams,
) -> Result<f64> {
    if latent.dims() != flow.dims() {
        return Err(dims_mismatch(latent.dims(), flow.dims()));
    }
    Ok(motion_weight(latent.width(), params) * p.norm_squared()
        + flow_smoothness(flow, weights)?
        + tv_weight(latent.width(), params) * total_variation(latent))
}

/// The individual terms of the joint energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTerms {
    pub data: f64,
    pub motion: f64,
    pub smoothness: f64,
    pub tv: f64,
}

impl EnergyTerms {
    pub fn total(&self) -> f64 {
        self.data + self.motion + self.smoothness + self.tv
    }
}

/// Evaluates every energy term for `(L, p)`.
pub fn energy_terms(
    latent: &Image,
    blurry: &Image,
    p: &Pose6,
    depth: &DepthMap,
    k: &Intrinsics,
    params: &EnergyParams,
) -> Result<EnergyTerms> {
    validate_pair(blurry, depth)?;
    latent.same_shape(blurry)?;
    let weights = edge_weights(blurry, depth, params)?;
    let projector = Projector::new(depth, k);
    energy_terms_with(latent, blurry, p, &projector, &weights, params)
}

pub(crate) fn energy_terms_with(
    latent: &Image,
    blurry: &Image,
    p: &Pose6,
    projector: &Projector,
    weights: &EdgeWeightField,
    params: &EnergyParams,
) -> Result<EnergyTerms> {
    let op = BlurOperator::with_projector(p, projector, params.half_samples)?;
    let flow = projector.induced_flow(p)?;
    Ok(EnergyTerms {
        data: data_term(latent, blurry, &op)?,
        motion: motion_weight(latent.width(), params) * p.norm_squared(),
        smoothness: flow_smoothness(&flow, weights)?,
        tv: tv_weight(latent.width(), params) * total_variation(latent),
    })
}

/// Joint energy: data term plus regularization, with `A_p` and `F(p)`
/// built from `(p, D, K)`.
pub fn total_energy(
    latent: &Image,
    blurry: &Image,
    p: &Pose6,
    depth: &DepthMap,
    k: &Intrinsics,
    params: &EnergyParams,
) -> Result<f64> {
    Ok(energy_terms(latent, blurry, p, depth, k, params)?.total())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::induced_flow;
    use proptest::prelude::*;

    fn pattern(h: usize, w: usize, seed: f64) -> Image {
        let data = (0..h * w)
            .map(|i| 0.5 + 0.4 * ((i % w) as f64 * 0.9 + seed).sin() * ((i / w) as f64 * 0.6 - seed).cos())
            .collect();
        Image::new(h, w, 1, data).unwrap()
    }

    #[test]
    fn gradient_adjoint_identity() {
        let (h, w) = (7, 5);
        let x = pattern(h, w, 0.3).into_data();
        let gx: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let gy: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.71).cos()).collect();
        let (ax, ay) = forward_gradient(&x, h, w);
        let lhs: f64 = ax.iter().zip(&gx).chain(ay.iter().zip(&gy)).map(|(a, b)| a * b).sum();
        let adj = forward_gradient_adjoint(&gx, &gy, h, w);
        let rhs: f64 = x.iter().zip(&adj).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn perfect_explanation_has_zero_data_term() {
        let b = pattern(12, 12, 0.0);
        let depth = DepthMap::constant(12, 12, 2.0).unwrap();
        let op = BlurOperator::build(&Pose6::zero(), &depth, &Intrinsics::centered(12, 12), 10).unwrap();
        assert_eq!(data_term(&b, &b, &op).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_costs_only_intensity() {
        let b = pattern(10, 11, 1.0);
        let eps = 0.03;
        let l = Image::new(10, 11, 1, b.data().iter().map(|v| v + eps).collect()).unwrap();
        let depth = DepthMap::constant(10, 11, 2.0).unwrap();
        let op = BlurOperator::build(&Pose6::zero(), &depth, &Intrinsics::centered(10, 11), 10).unwrap();
        let expected = eps * eps * 110.0;
        assert!((data_term(&l, &b, &op).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn flat_scene_edge_weights_are_uniform() {
        let b = Image::constant(8, 8, 3, 0.5).unwrap();
        let depth = DepthMap::constant(8, 8, 3.0).unwrap();
        let params = EnergyParams {
            reference_width: 8.0,
            ..EnergyParams::default()
        };
        let field = edge_weights(&b, &depth, &params).unwrap();
        assert!(field.weights().iter().all(|&w| (w - 0.4).abs() < 1e-15));
    }

    #[test]
    fn smoothness_weights_scale_with_resolution() {
        let b = Image::constant(8, 16, 1, 0.5).unwrap();
        let depth = DepthMap::constant(8, 16, 3.0).unwrap();
        let params = EnergyParams::default();
        let field = edge_weights(&b, &depth, &params).unwrap();
        let expected = 0.4 * (16.0 / 640.0f64).powi(2);
        assert!(field.weights().iter().all(|&w| (w - expected).abs() < 1e-15));
    }

    #[test]
    fn strong_edges_suppress_weights() {
        let params = EnergyParams {
            reference_width: 4.0,
            ..EnergyParams::default()
        };
        // Image edge only.
        assert!((edge_weight(1.0, 0.0, &params) - params.mu3).abs() < 1e-12);
        // Both edges.
        let both = edge_weight(0.04f64.powi(2), 0.1f64.powi(2), &params);
        assert!(both > 0.0 && both < 1e-6);
        assert_eq!(edge_weight(1.0, 1.0, &params), 0.0);
        let mut data = vec![0.0; 16];
        for r in 0..4 {
            data[r * 4 + 2] = 1.0;
            data[r * 4 + 3] = 1.0;
        }
        let b = Image::new(4, 4, 1, data).unwrap();
        let field = edge_weights(&b, &DepthMap::constant(4, 4, 1.0).unwrap(), &params).unwrap();
        assert!((field.at(0, 1) - params.mu3).abs() < 1e-12);
        assert!((field.at(0, 0) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn zero_motion_flat_image_has_zero_regularizer() {
        let l = Image::constant(9, 9, 1, 0.2).unwrap();
        let depth = DepthMap::constant(9, 9, 2.0).unwrap();
        let k = Intrinsics::centered(9, 9);
        let params = EnergyParams::default();
        let flow = induced_flow(&Pose6::zero(), &depth, &k).unwrap();
        let weights = edge_weights(&l, &depth, &params).unwrap();
        assert_eq!(reg_term(&Pose6::zero(), &l, &flow, &weights, &params).unwrap(), 0.0);
    }

    #[test]
    fn uniform_translation_flow_only_pays_motion_reward() {
        let l = Image::constant(9, 9, 1, 0.2).unwrap();
        let depth = DepthMap::constant(9, 9, 2.0).unwrap();
        let k = Intrinsics::centered(9, 9);
        let params = EnergyParams { reference_width: 9.0, ..EnergyParams::default() };
        let p = Pose6::new([0.0; 3], [0.06, 0.08, 0.0]).unwrap();
        let flow = induced_flow(&p, &depth, &k).unwrap();
        let weights = edge_weights(&l, &depth, &params).unwrap();
        let reg = reg_term(&p, &l, &flow, &weights, &params).unwrap();
        assert!((reg - (-0.2)).abs() < 1e-12, "{reg}");
    }

    #[test]
    fn flat_zero_motion_energy_is_zero() {
        let b = Image::constant(10, 10, 1, 0.7).unwrap();
        let depth = DepthMap::constant(10, 10, 2.0).unwrap();
        let e = total_energy(&b, &b, &Pose6::zero(), &depth, &Intrinsics::centered(10, 10), &EnergyParams::default()).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn colour_tv_couples_channels() {
        let img = Image::new(1, 2, 3, vec![0.0, 0.0, 0.0, 0.3, 0.4, 0.0]).unwrap();
        assert!((total_variation(&img) - 0.5).abs() < 1e-15);
        let gray = Image::new(2, 2, 1, vec![0.0, 0.5, 0.25, 0.0]).unwrap();
        assert!((total_variation(&gray) - (0.5 + 0.25 + 0.25 + 0.5)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn edge_weight_is_monotone(a in 0.0f64..0.1, b in 0.0f64..0.1, da in 0.0f64..0.1, db in 0.0f64..0.1) {
            let params = EnergyParams::default();
            let w = edge_weight(a * a, b * b, &params);
            prop_assert!(edge_weight((a + da).powi(2), b * b, &params) <= w);
            prop_assert!(edge_weight(a * a, (b + db).powi(2), &params) <= w);
            prop_assert!(w > 0.0 && w <= params.mu2 + params.mu3);
        }

        #[test]
        fn data_term_is_non_negative(seed in 0.0f64..6.0, t in -0.05f64..0.05) {
            let b = pattern(10, 10, seed);
            let l = pattern(10, 10, seed + 1.0);
            let depth = DepthMap::constant(10, 10, 2.0).unwrap();
            let p = Pose6::new([t, -t, 0.5 * t], [0.0; 3]).unwrap();
            let op = BlurOperator::build(&p, &depth, &Intrinsics::centered(10, 10), 3).unwrap();
            prop_assert!(data_term(&l, &b, &op).unwrap() >= 0.0);
        }
    }
}
