//! Synthetic benchmark instances: sampled camera shake, a procedural
//! textured scene on a slanted plane, and the rendered blurry observation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::blur::BlurOperator;
use crate::error::{Error, Result};
use crate::geometry::induced_flow;
use crate::types::{
    validate_pair, DepthMap, EnergyParams, FlowField, Image, Intrinsics, Pose6, MAX_SMALL_ROTATION,
};

const MOTION_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;
const SCENE_STREAM: u64 = 2;

/// Default standard deviation of the additive observation noise.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.01;

/// A blurry observation together with everything used to produce it.
#[derive(Debug, Clone)]
pub struct SynthInstance {
    pub clean: Image,
    pub depth: DepthMap,
    pub intrinsics: Intrinsics,
    pub true_pose: Pose6,
    pub blurry: Image,
    pub true_flow: FlowField,
    pub half_samples: usize,
    pub seed: u64,
    pub noise_sigma: f64,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Draws `θ_i ~ N(0, σa²)` and `v_i ~ N(0, σt²)`, redrawing until
/// `|θ_i| ≤ 0.3`, `‖θ‖ ≤ 0.5` and `|v_i| ≤ 10 σt`.
pub fn sample_motion(sigma_a: f64, sigma_t: f64, seed: u64) -> Result<Pose6> {
    let valid = |s: f64| s.is_finite() && s > 0.0;
    if !valid(sigma_a) || !valid(sigma_t) {
        return Err(Error::InvalidParameter(format!(
            "motion standard deviations must be positive, got {sigma_a} and {sigma_t}"
        )));
    }
    let max_rotation = EnergyParams::default().max_rotation;
    let rot = Normal::new(0.0, sigma_a).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let trans = Normal::new(0.0, sigma_t).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut r = rng(seed, MOTION_STREAM);
    loop {
        let theta: [f64; 3] = std::array::from_fn(|_| rot.sample(&mut r));
        let v: [f64; 3] = std::array::from_fn(|_| trans.sample(&mut r));
        let norm = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
        if theta.iter().all(|t| t.abs() <= max_rotation)
            && norm <= MAX_SMALL_ROTATION
            && v.iter().all(|x| x.abs() <= 10.0 * sigma_t)
        {
            return Pose6::new(theta, v);
        }
    }
}

/// Blurs `clean` along `p`, adds seeded Gaussian noise and clamps to `[0, 1]`.
pub fn synthesize(
    clean: &Image,
    depth: &DepthMap,
    k: &Intrinsics,
    p: &Pose6,
    half_samples: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SynthInstance> {
    validate_pair(clean, depth)?;
    k.check_image(clean.height(), clean.width())?;
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise sigma must be non-negative, got {noise_sigma}"
        )));
    }
    let op = BlurOperator::build(p, depth, k, half_samples)?;
    let (blurred, _) = op.apply(clean)?;
    let mut data = blurred.into_data();
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut r = rng(seed, NOISE_STREAM);
        for v in &mut data {
            *v += noise.sample(&mut r);
        }
    }
    let blurry = Image::from_clamped(clean.height(), clean.width(), clean.channels(), data)?;
    Ok(SynthInstance {
        clean: clean.clone(),
        depth: depth.clone(),
        intrinsics: *k,
        true_pose: *p,
        blurry,
        true_flow: induced_flow(p, depth, k)?,
        half_samples,
        seed,
        noise_sigma,
    })
}

/// Colour test scene: a checkerboard modulated by smooth gradients, overlaid
/// with hard-edged coloured discs of many sizes, deterministic in `seed`.
pub fn procedural_scene(height: usize, width: usize, seed: u64) -> Result<Image> {
    let mut r = rng(seed, SCENE_STREAM);
    let cell = (width.min(height) / 8).max(2);
    let side = width.min(height) as f64;
    let discs: Vec<([f64; 2], f64, [f64; 3])> = (0..48)
        .map(|_| {
            let centre = [r.random_range(0.0..height as f64), r.random_range(0.0..width as f64)];
            let radius = side * (0.02f64.ln() + r.random::<f64>() * (0.15f64.ln() - 0.02f64.ln())).exp();
            let colour = [r.random_range(0.1..0.9), r.random_range(0.1..0.9), r.random_range(0.1..0.9)];
            (centre, radius, colour)
        })
        .collect();
    let mut data = Vec::with_capacity(height * width * 3);
    for row in 0..height {
        for col in 0..width {
            let (y, x) = (row as f64 / height as f64, col as f64 / width as f64);
            let check = if (row / cell + col / cell).is_multiple_of(2) { 0.1 } else { -0.1 };
            let base = [0.5 + 0.15 * (x - 0.5), 0.5 + 0.15 * (y - 0.5), 0.5 - 0.1 * (x + y - 1.0)];
            let top = discs.iter().rev().find(|(centre, radius, _)| {
                (row as f64 - centre[0]).powi(2) + (col as f64 - centre[1]).powi(2) <= radius * radius
            });
            for c in 0..3 {
                data.push(match top {
                    Some((_, _, colour)) => colour[c],
                    None => base[c] + check,
                });
            }
        }
    }
    Image::from_clamped(height, width, 3, data)
}

/// Plane tilted in both image directions, from `near` at the top-left
/// corner to `far` at the bottom-right.
pub fn slanted_plane_depth(height: usize, width: usize, near: f64, far: f64) -> Result<DepthMap> {
    let span = far - near;
    let data = (0..height * width)
        .map(|i| {
            let (y, x) = ((i / width) as f64, (i % width) as f64);
            let t = 0.6 * x / (width.max(2) - 1) as f64 + 0.4 * y / (height.max(2) - 1) as f64;
            near + span * t
        })
        .collect();
    DepthMap::new(height, width, data)
}

/// Procedural instance: seeded scene, slanted depth from 2 m to 3 m, centred
/// intrinsics and a motion drawn with `sample_motion`.
pub fn procedural_instance(
    size: usize,
    sigma_a: f64,
    sigma_t: f64,
    half_samples: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SynthInstance> {
    let clean = procedural_scene(size, size, seed)?;
    let depth = slanted_plane_depth(size, size, 2.0, 3.0)?;
    let k = Intrinsics::centered(size, size);
    let p = sample_motion(sigma_a, sigma_t, seed)?;
    synthesize(&clean, &depth, &k, &p, half_samples, noise_sigma, seed)
}
