//! Camera-motion step: minimize the energy over the 6-vector `p` with the
//! latent image held fixed.
//!
//! The squared terms (intensity residual, gradient residual, weighted flow
//! differences) form a residual vector handled by Levenberg–Marquardt with a
//! central-difference Jacobian. The motion reward `μ1‖p‖²` is concave, so it
//! enters the gradient and the predicted decrease exactly instead of being
//! squared into the residuals.

use nalgebra::{Matrix6, Vector6};

use crate::blur::blur_plane_streaming;
use crate::energy::{coverage_factor, edge_weights, motion_weight, forward_gradient, pair_weights, EdgeWeightField};
use crate::error::{Error, Result};
use crate::geometry::Projector;
use crate::types::{check_small_rotation, validate_pair, DepthMap, EnergyParams, Image, Intrinsics, Pose6};

const ROTATION_STEP: f64 = 1e-6;
const TRANSLATION_STEP: f64 = 1e-5;
const DAMPING_CEILING: f64 = 1e8;
const RELATIVE_DECREASE_TOL: f64 = 1e-6;
const STEP_TOL: f64 = 1e-8;

/// Why the pose solver stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    RelativeDecrease,
    SmallStep,
    MaxIterations,
    DampingCeiling,
    NoDescent,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::RelativeDecrease => "relative decrease",
            Termination::SmallStep => "step tolerance",
            Termination::MaxIterations => "iteration limit",
            Termination::DampingCeiling => "damping ceiling",
            Termination::NoDescent => "no descent",
        })
    }
}

#[derive(Debug, Clone)]
pub struct PoseSolveReport {
    pub initial: Pose6,
    pub final_pose: Pose6,
    pub iterations: usize,
    /// Objective at the start and after every accepted step.
    pub energy_trace: Vec<f64>,
    pub converged: bool,
    pub termination: Termination,
}

/// The pose objective for a fixed latent image, evaluated on channel means.
pub struct PoseProblem {
    height: usize,
    width: usize,
    latent: Vec<f64>,
    blurry: Vec<f64>,
    blurry_dx: Vec<f64>,
    blurry_dy: Vec<f64>,
    projector: Projector,
    smooth_weights: Vec<f64>,
    depth_scale: f64,
    mu1: f64,
    params: EnergyParams,
}

impl PoseProblem {
    pub fn new(
        latent: &Image,
        blurry: &Image,
        depth: &DepthMap,
        k: &Intrinsics,
        params: &EnergyParams,
    ) -> Result<Self> {
        validate_pair(blurry, depth)?;
        latent.same_shape(blurry)?;
        let weights = edge_weights(blurry, depth, params)?;
        Ok(Self::with_weights(latent, blurry, depth, k, &weights, params))
    }

    pub(crate) fn with_weights(
        latent: &Image,
        blurry: &Image,
        depth: &DepthMap,
        k: &Intrinsics,
        weights: &EdgeWeightField,
        params: &EnergyParams,
    ) -> Self {
        Self::with_projector(latent, blurry, depth, Projector::new(depth, k), weights, params)
    }

    pub(crate) fn with_projector(
        latent: &Image,
        blurry: &Image,
        depth: &DepthMap,
        projector: Projector,
        weights: &EdgeWeightField,
        params: &EnergyParams,
    ) -> Self {
        let (height, width) = blurry.dims();
        let blurry_gray = blurry.gray_plane();
        let (blurry_dx, blurry_dy) = forward_gradient(&blurry_gray, height, width);
        Self {
            height,
            width,
            latent: latent.gray_plane(),
            blurry: blurry_gray,
            blurry_dx,
            blurry_dy,
            projector,
            smooth_weights: weights.weights().iter().map(|w| w.sqrt()).collect(),
            depth_scale: depth.median().unwrap_or(1.0),
            mu1: motion_weight(width, params),
            params: params.clone(),
        }
    }

    pub fn params(&self) -> &EnergyParams {
        &self.params
    }

    /// Squared terms of the objective as one residual vector:
    /// intensity, ∂x, ∂y of `A_p L - B`, then the four weighted flow
    /// derivatives. Its length does not depend on `p`. Fails when no pixel
    /// stays in view.
    pub fn residuals(&self, p: &Pose6) -> Result<Vec<f64>> {
        self.try_residuals(p)?
            .ok_or_else(|| Error::InvalidParameter(format!("no pixel stays in view under {:?}", p.to_array())))
    }

    fn try_residuals(&self, p: &Pose6) -> Result<Option<Vec<f64>>> {
        let (h, w) = (self.height, self.width);
        let n = h * w;
        let (blurred, mut weights) =
            blur_plane_streaming(&self.projector, p, self.params.half_samples, &self.latent)?;
        let Some(scale) = coverage_factor(&weights) else {
            return Ok(None);
        };
        weights.iter_mut().for_each(|v| *v *= scale);
        let (wx, wy) = pair_weights(&weights, h, w);
        let diff: Vec<f64> = blurred.iter().zip(&self.blurry).map(|(a, b)| a - b).collect();
        let (dx, dy) = forward_gradient(&blurred, h, w);
        let mut r = vec![0.0; 7 * n];
        for i in 0..n {
            r[i] = weights[i].sqrt() * diff[i];
            r[n + i] = wx[i].sqrt() * (dx[i] - self.blurry_dx[i]);
            r[2 * n + i] = wy[i].sqrt() * (dy[i] - self.blurry_dy[i]);
        }
        let flow = self.projector.induced_flow(p)?;
        let (data, valid) = (flow.data(), flow.valid());
        for row in 0..h {
            for col in 0..w {
                let i = row * w + col;
                if !valid[i] {
                    continue;
                }
                let s = self.smooth_weights[i];
                if col + 1 < w && valid[i + 1] {
                    r[3 * n + i] = s * (data[i + 1][0] - data[i][0]);
                    r[4 * n + i] = s * (data[i + 1][1] - data[i][1]);
                }
                if row + 1 < h && valid[i + w] {
                    r[5 * n + i] = s * (data[i + w][0] - data[i][0]);
                    r[6 * n + i] = s * (data[i + w][1] - data[i][1]);
                }
            }
        }
        Ok(Some(r))
    }

    /// `‖r(p)‖² + μ1‖p‖²`, infinite when no pixel stays in view.
    pub fn objective(&self, p: &Pose6) -> Result<f64> {
        Ok(match self.try_residuals(p)? {
            Some(r) => sum_squares(&r) + self.mu1 * p.norm_squared(),
            None => f64::INFINITY,
        })
    }

    fn steps(&self) -> Vector6<f64> {
        let t = TRANSLATION_STEP * self.depth_scale;
        Vector6::new(ROTATION_STEP, ROTATION_STEP, ROTATION_STEP, t, t, t)
    }

    /// Residuals at `p` and their central-difference Jacobian columns. Where
    /// one side leaves the small-rotation range a one-sided difference is used.
    pub fn jacobian(&self, p: &Pose6) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let r0 = self.residuals(p)?;
        let base = p.to_vector();
        let steps = self.steps();
        let mut columns = Vec::with_capacity(6);
        for j in 0..6 {
            let mut plus = base;
            plus[j] += steps[j];
            let mut minus = base;
            minus[j] -= steps[j];
            let col = match (Pose6::from_vector(&plus), Pose6::from_vector(&minus)) {
                (Ok(a), Ok(b)) => difference(&self.residuals(&a)?, &self.residuals(&b)?, 2.0 * steps[j]),
                (Ok(a), Err(_)) => difference(&self.residuals(&a)?, &r0, steps[j]),
                (Err(_), Ok(b)) => difference(&r0, &self.residuals(&b)?, steps[j]),
                (Err(e), Err(_)) => return Err(e),
            };
            columns.push(col);
        }
        Ok((r0, columns))
    }

    /// Gradient `2 Jᵀ r + 2 μ1 p` of the objective used by the solver.
    pub fn gradient(&self, p: &Pose6) -> Result<Vector6<f64>> {
        let (r, columns) = self.jacobian(p)?;
        Ok(normal_equations(&r, &columns).1 + 2.0 * self.mu1 * p.to_vector())
    }

    fn in_box(&self, p: &Vector6<f64>) -> bool {
        let (rot, trans) = (self.params.max_rotation, self.params.max_translation);
        (0..3).all(|i| p[i].abs() <= rot) && (3..6).all(|i| p[i].abs() <= trans)
    }

    fn clip_to_box(&self, p: &Vector6<f64>) -> Vector6<f64> {
        let (rot, trans) = (self.params.max_rotation, self.params.max_translation);
        let mut q = *p;
        for i in 0..6 {
            let bound = if i < 3 { rot } else { trans };
            q[i] = q[i].clamp(-bound, bound);
        }
        q
    }
}

fn sum_squares(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn difference(a: &[f64], b: &[f64], h: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (x - y) / h).collect()
}

/// Gauss–Newton Hessian `2 JᵀJ` and gradient `2 Jᵀ r` of `‖r‖²`.
fn normal_equations(r: &[f64], columns: &[Vec<f64>]) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for i in 0..6 {
        g[i] = 2.0 * dot(&columns[i], r);
        for j in i..6 {
            let v = 2.0 * dot(&columns[i], &columns[j]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    (h, g)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes the pose objective from `p0` with the latent image fixed.
pub fn solve_pose(
    latent: &Image,
    blurry: &Image,
    depth: &DepthMap,
    k: &Intrinsics,
    p0: &Pose6,
    params: &EnergyParams,
) -> Result<(Pose6, PoseSolveReport)> {
    params.validate()?;
    let problem = PoseProblem::new(latent, blurry, depth, k, params)?;
    solve_problem(&problem, p0)
}

/// Levenberg–Marquardt on a prepared problem. Iterates are kept inside the
/// feasible box by clipping each trial point onto it.
pub fn solve_problem(problem: &PoseProblem, p0: &Pose6) -> Result<(Pose6, PoseSolveReport)> {
    let params = problem.params();
    if !problem.in_box(&p0.to_vector()) {
        return Err(Error::InvalidParameter(format!(
            "initial pose {:?} outside the feasible box",
            p0.to_array()
        )));
    }
    let mu1 = problem.mu1;
    let mut p = *p0;
    let mut f = problem.objective(&p)?;
    let mut trace = vec![f];
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut accepted_any = false;
    let mut termination = Termination::MaxIterations;

    'outer: while iterations < params.lm_max_iterations {
        iterations += 1;
        let (r, columns) = problem.jacobian(&p)?;
        let (hess, g_data) = normal_equations(&r, &columns);
        let pv = p.to_vector();
        let g = g_data + 2.0 * mu1 * pv;
        let max_diag = (0..6).map(|i| hess[(i, i)]).fold(0.0f64, f64::max);
        let floor = (max_diag * 1e-9).max(1e-12);
        loop {
            let mut damped = hess;
            for i in 0..6 {
                damped[(i, i)] += lambda * hess[(i, i)].max(floor);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                if lambda > DAMPING_CEILING {
                    termination = Termination::DampingCeiling;
                    break 'outer;
                }
                continue;
            };
            let step = chol.solve(&(-g));
            let trial_v = problem.clip_to_box(&(pv + step));
            let delta = trial_v - pv;
            if delta.norm() < STEP_TOL {
                termination = Termination::SmallStep;
                break 'outer;
            }
            let predicted = -(g.dot(&delta) + 0.5 * (delta.transpose() * hess * delta)[(0, 0)] + mu1 * delta.norm_squared());
            let trial = check_small_rotation(&trial_v.fixed_rows::<3>(0).into_owned())
                .and_then(|_| Pose6::from_vector(&trial_v));
            let outcome = match trial {
                Ok(t) => Some((t, problem.objective(&t)?)),
                Err(_) => None,
            };
            match outcome {
                Some((t, f_new)) if f_new < f && predicted > 0.0 => {
                    let rho = (f - f_new) / predicted;
                    lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                    let relative = (f - f_new) / f.abs().max(1e-12);
                    p = t;
                    f = f_new;
                    trace.push(f);
                    accepted_any = true;
                    if relative < RELATIVE_DECREASE_TOL {
                        termination = Termination::RelativeDecrease;
                        break 'outer;
                    }
                    break;
                }
                _ => {
                    lambda *= 10.0;
                    if lambda > DAMPING_CEILING {
                        termination = Termination::DampingCeiling;
                        break 'outer;
                    }
                }
            }
        }
    }

    let converged = matches!(termination, Termination::RelativeDecrease | Termination::SmallStep);
    if !accepted_any && !converged {
        termination = Termination::NoDescent;
    }
    Ok((
        p,
        PoseSolveReport {
            initial: *p0,
            final_pose: p,
            iterations,
            energy_trace: trace,
            converged,
            termination,
        },
    ))
}
