//! Coarse-to-fine alternation: image pyramid, multi-start initialization,
//! alternating pose and latent-image steps, and sharp-sequence rendering.

use std::time::{Duration, Instant};

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use nalgebra::Vector6;
use rayon::prelude::*;

use crate::blur::BlurOperator;
use crate::energy::{edge_weights, energy_terms_with, EnergyTerms};
use crate::error::{Error, Result};
use crate::geometry::{induced_flow, pose_at_time, warp, Projector};
use crate::latent::{solve_latent_unclamped, LatentSolveReport};
use crate::pose::{solve_problem, PoseProblem, PoseSolveReport};
use crate::identify::{identify_blur, PatchSpectra};
use crate::types::{
    validate_pair, DepthMap, EnergyParams, FlowField, Image, Intrinsics, Pose6, MAX_SMALL_ROTATION,
};

const SIMPLEX_STEP: f64 = 1.0;
const SPECTRAL_ITERATIONS: u64 = 400;
const SIMPLEX_TOLERANCE: f64 = 0.1;
/// Likelihood gain per frequency, in nats, below which the selected start is
/// discarded in favour of zero motion.
const BLUR_EVIDENCE: f64 = 0.1;

/// Smallest side length of any pyramid level.
pub const MIN_LEVEL_SIZE: usize = 16;

/// Longest side of the pyramid level used for blur identification.
pub const ANALYSIS_SIZE: usize = 128;

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub image: Image,
    pub depth: DepthMap,
    pub intrinsics: Intrinsics,
}

/// Levels ordered from the original resolution (index 0) to the coarsest.
#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<PyramidLevel>,
    scale: f64,
}

impl Pyramid {
    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn finest(&self) -> &PyramidLevel {
        &self.levels[0]
    }

    pub fn coarsest(&self) -> &PyramidLevel {
        self.levels.last().expect("pyramid has at least one level")
    }
}

/// Builds up to `levels` levels, each `floor(scale · previous)` in both
/// dimensions, stopping before a level would fall below 16 pixels.
pub fn build_pyramid(
    image: &Image,
    depth: &DepthMap,
    k: &Intrinsics,
    levels: usize,
    scale: f64,
) -> Result<Pyramid> {
    validate_pair(image, depth)?;
    if levels == 0 || !(scale > 0.0 && scale < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "pyramid needs levels >= 1 and scale in (0, 1), got {levels} and {scale}"
        )));
    }
    let (h, w) = image.dims();
    if h.min(w) < MIN_LEVEL_SIZE {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min: MIN_LEVEL_SIZE,
        });
    }
    let mut out = vec![PyramidLevel {
        image: image.clone(),
        depth: depth.clone(),
        intrinsics: *k,
    }];
    while out.len() < levels {
        let prev = out.last().expect("non-empty");
        let (ph, pw) = prev.image.dims();
        let (nh, nw) = ((ph as f64 * scale).floor() as usize, (pw as f64 * scale).floor() as usize);
        if nh.min(nw) < MIN_LEVEL_SIZE {
            break;
        }
        let sigma = 0.5 * (1.0 / (scale * scale) - 1.0).sqrt();
        let planes: Vec<Vec<f64>> = prev
            .image
            .planes()
            .iter()
            .map(|p| resize_bilinear(&gaussian_blur(p, ph, pw, sigma), ph, pw, nh, nw))
            .collect();
        let (sx, sy) = (nw as f64 / pw as f64, nh as f64 / ph as f64);
        let pk = prev.intrinsics;
        let intrinsics = Intrinsics::new(
            pk.fx * sx,
            pk.fy * sy,
            (pk.cx + 0.5) * sx - 0.5,
            (pk.cy + 0.5) * sy - 0.5,
        )?;
        let level = PyramidLevel {
            image: Image::new(nh, nw, prev.image.channels(), interleave(&planes))?,
            depth: downsample_depth(&prev.depth, nh, nw)?,
            intrinsics,
        };
        out.push(level);
    }
    Ok(Pyramid { levels: out, scale })
}

fn interleave(planes: &[Vec<f64>]) -> Vec<f64> {
    let n = planes[0].len();
    (0..n * planes.len()).map(|i| planes[i % planes.len()][i / planes.len()]).collect()
}

/// Separable Gaussian filter with replicated borders.
fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|v| v / total).collect();
    let clamp = |x: i64, n: usize| x.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * plane[r * w + clamp(c as i64 + j as i64 - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clamp(r as i64 + j as i64 - radius, h) * w + c])
                .sum();
        }
    }
    out
}

/// Bilinear resampling with pixel-centre alignment and replicated borders.
fn resize_bilinear(plane: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let (rx, ry) = (w as f64 / nw as f64, h as f64 / nh as f64);
    let mut out = Vec::with_capacity(nh * nw);
    for r in 0..nh {
        let y = ((r as f64 + 0.5) * ry - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(h - 1);
        for c in 0..nw {
            let x = ((c as f64 + 0.5) * rx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(w - 1);
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Median of the valid depths in each target pixel's source footprint.
fn downsample_depth(depth: &DepthMap, nh: usize, nw: usize) -> Result<DepthMap> {
    let (h, w) = depth.dims();
    let (rx, ry) = (w as f64 / nw as f64, h as f64 / nh as f64);
    let mut data = Vec::with_capacity(nh * nw);
    let mut valid = Vec::with_capacity(nh * nw);
    let mut values = Vec::new();
    for r in 0..nh {
        let (r0, r1) = ((r as f64 * ry).floor() as usize, (((r + 1) as f64 * ry).ceil() as usize).min(h));
        for c in 0..nw {
            let (c0, c1) = ((c as f64 * rx).floor() as usize, (((c + 1) as f64 * rx).ceil() as usize).min(w));
            values.clear();
            for sr in r0..r1 {
                for sc in c0..c1 {
                    if let Some(z) = depth.at(sr, sc) {
                        values.push(z);
                    }
                }
            }
            if values.is_empty() {
                data.push(0.0);
                valid.push(false);
            } else {
                values.sort_by(f64::total_cmp);
                let m = values.len();
                let median = if m % 2 == 1 {
                    values[m / 2]
                } else {
                    0.5 * (values[m / 2 - 1] + values[m / 2])
                };
                data.push(median);
                valid.push(true);
            }
        }
    }
    DepthMap::with_mask(nh, nw, data, valid)
}

/// Rotation about the x and y axes whose mean induced flow is `flow`,
/// clipped to the feasible box.
pub fn pose_for_mean_flow(depth: &DepthMap, k: &Intrinsics, flow: [f64; 2], max_rotation: f64) -> Result<Pose6> {
    let eps = 1e-3;
    let fx = induced_flow(&Pose6::new([eps, 0.0, 0.0], [0.0; 3])?, depth, k)?.mean();
    let fy = induced_flow(&Pose6::new([0.0, eps, 0.0], [0.0; 3])?, depth, k)?.mean();
    let (a, b, c, d) = (fx[0] / eps, fy[0] / eps, fx[1] / eps, fy[1] / eps);
    let det = a * d - b * c;
    if det.abs() < 1e-12 {
        return Ok(Pose6::zero());
    }
    let tx = (d * flow[0] - b * flow[1]) / det;
    let ty = (a * flow[1] - c * flow[0]) / det;
    Pose6::new(
        [tx.clamp(-max_rotation, max_rotation), ty.clamp(-max_rotation, max_rotation), 0.0],
        [0.0; 3],
    )
}

/// Negative log-likelihood of the patch spectra as a function of the pose,
/// in coordinates scaled so that a unit step moves the flow by about one
/// pixel.
struct SpectralFit<'a> {
    spectra: &'a PatchSpectra,
    projector: &'a Projector,
    pixels_per_unit: [f64; 6],
    params: &'a EnergyParams,
}

impl SpectralFit<'_> {
    fn pose(&self, x: &[f64]) -> Result<Pose6> {
        let (rot, trans) = (self.params.max_rotation, self.params.max_translation);
        let mut p = Vector6::from_fn(|i, _| {
            let bound = if i < 3 { rot } else { trans };
            (x[i] / self.pixels_per_unit[i]).clamp(-bound, bound)
        });
        let norm = p.fixed_rows::<3>(0).norm();
        if norm > MAX_SMALL_ROTATION {
            p.fixed_rows_mut::<3>(0).scale_mut(MAX_SMALL_ROTATION / norm);
        }
        Pose6::from_vector(&p)
    }

    fn coordinates(&self, p: &Pose6) -> Vec<f64> {
        let v = p.to_vector();
        (0..6).map(|i| v[i] * self.pixels_per_unit[i]).collect()
    }
}

impl CostFunction for SpectralFit<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let flow = self.projector.induced_flow(&self.pose(x)?)?;
        Ok(self.spectra.cost(&flow))
    }
}

/// Pose minimizing the patch-spectrum likelihood, by Nelder-Mead from `p0`.
/// Returns the pose and its cost.
pub fn fit_pose_to_spectra(
    spectra: &PatchSpectra,
    projector: &Projector,
    p0: &Pose6,
    params: &EnergyParams,
) -> Result<(Pose6, f64)> {
    let eps = 1e-4;
    let mut pixels_per_unit = [1.0; 6];
    for (i, unit) in pixels_per_unit.iter_mut().enumerate() {
        let mut v = Vector6::zeros();
        v[i] = eps;
        let flow = projector.induced_flow(&Pose6::from_vector(&v)?)?;
        let (mut sum, mut n) = (0.0, 0usize);
        for (f, ok) in flow.data().iter().zip(flow.valid()) {
            if *ok {
                sum += f[0] * f[0] + f[1] * f[1];
                n += 1;
            }
        }
        let rms = (sum / n.max(1) as f64).sqrt() / eps;
        if rms > 0.0 {
            *unit = rms;
        }
    }
    let fit = SpectralFit {
        spectra,
        projector,
        pixels_per_unit,
        params,
    };
    let x0 = fit.coordinates(p0);
    let mut simplex = vec![x0.clone()];
    for i in 0..6 {
        let mut x = x0.clone();
        x[i] += SIMPLEX_STEP;
        simplex.push(x);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(SIMPLEX_TOLERANCE)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let outcome = Executor::new(fit, solver)
        .configure(|state| state.max_iters(SPECTRAL_ITERATIONS))
        .run()
        .map_err(|e| Error::InvalidParameter(format!("spectral pose fit failed: {e}")))?;
    let state = outcome.state();
    let best = state.get_best_param().cloned().unwrap_or(x0);
    let fit = &outcome.problem.problem.as_ref().expect("problem is returned");
    Ok((fit.pose(&best)?, state.get_best_cost()))
}

/// Index of the finest pyramid level whose longer side is at most
/// [`ANALYSIS_SIZE`], or the coarsest level if none is. Blur
/// identification and the alternation both start there.
pub fn analysis_level(pyramid: &Pyramid) -> usize {
    pyramid
        .levels()
        .iter()
        .position(|l| l.image.height().max(l.image.width()) <= ANALYSIS_SIZE)
        .unwrap_or(pyramid.len() - 1)
}

/// Multi-start candidates: the zero pose, then `start_count - 1` poses whose
/// mean induced flow has the length of the identified blur streak, at
/// directions spread evenly over a half turn starting from the streak
/// direction (`p` and `-p` produce the same blur).
pub fn initialize_pose(image: &Image, depth: &DepthMap, k: &Intrinsics, params: &EnergyParams) -> Result<Vec<Pose6>> {
    validate_pair(image, depth)?;
    k.check_image(image.height(), image.width())?;
    let streak = identify_blur(image, params.half_samples);
    let count = params.start_count.max(1);
    let mut out = vec![Pose6::zero()];
    for j in 0..count - 1 {
        let phi = streak.angle + std::f64::consts::PI * j as f64 / (count - 1) as f64;
        let flow = [streak.length * phi.cos(), streak.length * phi.sin()];
        out.push(pose_for_mean_flow(depth, k, flow, params.max_rotation)?);
    }
    Ok(out)
}

/// Diagnostics of one pyramid level.
#[derive(Debug, Clone)]
pub struct LevelReport {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    /// Total energy at the start of the level and after every accepted
    /// pose or latent step.
    pub energy_trace: Vec<f64>,
    pub pose_reports: Vec<PoseSolveReport>,
    pub latent_reports: Vec<LatentSolveReport>,
    /// Pose steps discarded because they raised the colour energy.
    pub rejected_pose_steps: usize,
    /// Pose at the end of the level.
    pub pose: Pose6,
    pub converged: bool,
}

/// One multi-start candidate and its fit to the patch spectra.
#[derive(Debug, Clone)]
pub struct StartReport {
    pub initial: Pose6,
    pub refined: Pose6,
    /// Negative log-likelihood of the refined pose; lowest is selected.
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct DeblurResult {
    pub latent: Image,
    pub pose: Pose6,
    /// Analysis level first, finest last.
    pub levels: Vec<LevelReport>,
    pub starts: Vec<StartReport>,
    pub selected_start: usize,
    /// Whether the selected start explained the spectra significantly better
    /// than zero motion; otherwise the alternation started from zero.
    pub blur_detected: bool,
    pub flow: FlowField,
    pub converged: bool,
    pub wall_time: Duration,
}

/// State of the alternation on one level.
struct LevelState<'a> {
    blurry: &'a Image,
    depth: &'a DepthMap,
    projector: Projector,
    weights: crate::energy::EdgeWeightField,
    params: EnergyParams,
}

impl<'a> LevelState<'a> {
    fn new(level: &'a PyramidLevel, params: &EnergyParams) -> Result<Self> {
        let params = params.clone();
        Ok(Self {
            blurry: &level.image,
            depth: &level.depth,
            projector: Projector::new(&level.depth, &level.intrinsics),
            weights: edge_weights(&level.image, &level.depth, &params)?,
            params,
        })
    }

    fn terms(&self, latent: &Image, p: &Pose6) -> Result<EnergyTerms> {
        energy_terms_with(latent, self.blurry, p, &self.projector, &self.weights, &self.params)
    }

    fn energy(&self, latent: &Image, p: &Pose6) -> Result<f64> {
        Ok(self.terms(latent, p)?.total())
    }

    fn pose_step(&self, latent: &Image, p: &Pose6) -> Result<(Pose6, PoseSolveReport)> {
        let problem = PoseProblem::with_projector(
            latent,
            self.blurry,
            self.depth,
            self.projector.clone(),
            &self.weights,
            &self.params,
        );
        solve_problem(&problem, p)
    }

    fn latent_step(&self, latent: &Image, p: &Pose6, iterations: usize) -> Result<(Image, LatentSolveReport)> {
        let op = BlurOperator::with_projector(p, &self.projector, self.params.half_samples)?;
        solve_latent_unclamped(self.blurry, &op, latent, &self.params, iterations)
    }
}

/// Runs `alternations` rounds of latent then pose steps from `(latent, p)`,
/// keeping only steps that do not raise the total energy.
fn alternate(
    state: &LevelState,
    latent: Image,
    p: Pose6,
    alternations: usize,
    report: &mut LevelReport,
) -> Result<(Image, Pose6)> {
    let mut latent = latent;
    let mut p = p;
    let mut energy = state.energy(&latent, &p)?;
    report.energy_trace.push(energy);
    for _ in 0..alternations {
        let (next, latent_report) = state.latent_step(&latent, &p, state.params.latent_iterations)?;
        report.latent_reports.push(latent_report);
        let e = state.energy(&next, &p)?;
        if e <= energy {
            latent = next;
            energy = e;
            report.energy_trace.push(energy);
        }
        let (candidate, pose_report) = state.pose_step(&latent, &p)?;
        report.converged &= pose_report.converged;
        report.pose_reports.push(pose_report);
        let e = state.energy(&latent, &candidate)?;
        if e <= energy {
            p = candidate;
            energy = e;
            report.energy_trace.push(energy);
        } else {
            report.rejected_pose_steps += 1;
        }
    }
    report.pose = p;
    Ok((latent, p))
}

fn upscale(image: &Image, height: usize, width: usize) -> Result<Image> {
    let (h, w) = image.dims();
    let planes: Vec<Vec<f64>> = image
        .planes()
        .iter()
        .map(|p| resize_bilinear(p, h, w, height, width))
        .collect();
    Image::from_planes(height, width, &planes)
}

/// Coarse-to-fine joint estimation of the latent image and camera motion,
/// from the analysis level down to the original resolution.
pub fn deblur(blurry: &Image, depth: &DepthMap, k: &Intrinsics, params: &EnergyParams) -> Result<DeblurResult> {
    let started = Instant::now();
    params.validate()?;
    validate_pair(blurry, depth)?;
    k.check_image(blurry.height(), blurry.width())?;
    let pyramid = build_pyramid(blurry, depth, k, params.pyramid_levels, params.pyramid_scale)?;
    let level = &pyramid.levels()[analysis_level(&pyramid)];
    let candidates = initialize_pose(&level.image, &level.depth, &level.intrinsics, params)?;
    deblur_pyramid(&pyramid, depth, k, &candidates, params, started)
}

/// [`deblur`] from caller-supplied initial poses instead of the multi-start
/// fan.
pub fn deblur_from(
    blurry: &Image,
    depth: &DepthMap,
    k: &Intrinsics,
    candidates: &[Pose6],
    params: &EnergyParams,
) -> Result<DeblurResult> {
    let started = Instant::now();
    params.validate()?;
    validate_pair(blurry, depth)?;
    k.check_image(blurry.height(), blurry.width())?;
    if candidates.is_empty() {
        return Err(Error::InvalidParameter("need at least one initial pose".into()));
    }
    let pyramid = build_pyramid(blurry, depth, k, params.pyramid_levels, params.pyramid_scale)?;
    deblur_pyramid(&pyramid, depth, k, candidates, params, started)
}

fn deblur_pyramid(
    pyramid: &Pyramid,
    depth: &DepthMap,
    k: &Intrinsics,
    candidates: &[Pose6],
    params: &EnergyParams,
    started: Instant,
) -> Result<DeblurResult> {
    let first = analysis_level(pyramid);
    let analysis = &pyramid.levels()[first];
    let spectra = PatchSpectra::new(&analysis.image, params.half_samples);
    let projector = Projector::new(&analysis.depth, &analysis.intrinsics);
    let fits = candidates
        .par_iter()
        .map(|c| fit_pose_to_spectra(&spectra, &projector, c, params))
        .collect::<Result<Vec<_>>>()?;
    let starts: Vec<StartReport> = candidates
        .iter()
        .zip(fits)
        .map(|(c, (refined, score))| StartReport {
            initial: *c,
            refined,
            score,
        })
        .collect();
    let selected_start = (0..starts.len())
        .min_by(|&a, &b| starts[a].score.total_cmp(&starts[b].score))
        .expect("at least one candidate");

    let zero_cost = spectra.cost(&projector.induced_flow(&Pose6::zero())?);
    let evidence = (zero_cost - starts[selected_start].score) / spectra.frequency_count().max(1) as f64;
    let blur_detected = evidence > BLUR_EVIDENCE;
    let initial = if blur_detected {
        starts[selected_start].refined
    } else {
        Pose6::zero()
    };

    let state = LevelState::new(&pyramid.levels()[first], params)?;
    let mut report = new_report(first, state.blurry);
    let (mut latent, mut p) = alternate(
        &state,
        state.blurry.clone(),
        initial,
        params.alternations,
        &mut report,
    )?;
    let mut levels = vec![report];

    for index in (0..first).rev() {
        let level = &pyramid.levels()[index];
        let state = LevelState::new(level, params)?;
        latent = upscale(&latent, level.image.height(), level.image.width())?;
        let mut report = new_report(index, &level.image);
        let (l, q) = alternate(&state, latent, p, params.alternations, &mut report)?;
        latent = l;
        p = q;
        levels.push(report);
    }

    let converged = levels.iter().all(|l| l.converged);
    Ok(DeblurResult {
        latent: latent.clamped(),
        pose: p,
        flow: induced_flow(&p, depth, k)?,
        levels,
        starts,
        selected_start,
        blur_detected,
        converged,
        wall_time: started.elapsed(),
    })
}

fn new_report(level: usize, image: &Image) -> LevelReport {
    LevelReport {
        level,
        height: image.height(),
        width: image.width(),
        energy_trace: Vec::new(),
        pose_reports: Vec::new(),
        latent_reports: Vec::new(),
        rejected_pose_steps: 0,
        pose: Pose6::zero(),
        converged: true,
    }
}

/// `frames` sharp views `warp(pose_at_time(p, t), D, L)` for times evenly
/// spanning `[-1, 1]`.
pub fn render_sequence(result: &DeblurResult, depth: &DepthMap, k: &Intrinsics, frames: usize) -> Result<Vec<Image>> {
    render_frames(&result.latent, &result.pose, depth, k, frames)
}

/// [`render_sequence`] for an explicit latent image and pose.
pub fn render_frames(latent: &Image, p: &Pose6, depth: &DepthMap, k: &Intrinsics, frames: usize) -> Result<Vec<Image>> {
    if frames < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 frames, got {frames}")));
    }
    (0..frames)
        .map(|i| {
            let t = -1.0 + 2.0 * i as f64 / (frames - 1) as f64;
            Ok(warp(&pose_at_time(p, t.clamp(-1.0, 1.0))?, depth, latent, k)?.0)
        })
        .collect()
}
