//! Image step: recover the latent image for a fixed blur operator with a
//! primal-dual total-variation scheme.
//!
//! Each outer iteration takes a dual ascent step on the TV dual field and
//! then solves the proximal least-squares subproblem
//!
//! ```text
//! min_L  c·(‖A L - B‖²_W + ‖∇A L - ∇B‖²_W) + ‖L - (Lʳ - η μ4 ∇ᵀq)‖² / 2η
//! ```
//!
//! by conjugate gradients on its normal equations, one colour plane at a
//! time. `c` is the coverage factor of the operator's validity mask.

use crate::blur::BlurOperator;
use crate::energy::{tv_weight, 
    coverage_factor, data_plane, forward_gradient, forward_gradient_adjoint, tv_from_gradients, DataWeights,
};
use crate::error::{dims_mismatch, Error, Result};
use crate::types::{EnergyParams, Image};

/// Outcome of one conjugate-gradient solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOutcome {
    pub iterations: usize,
    /// `‖b - M x‖ / ‖b‖` at exit.
    pub relative_residual: f64,
}

/// Solves `M x = b` for symmetric positive definite `M`, starting from the
/// contents of `x`.
pub fn conjugate_gradient(
    mut apply: impl FnMut(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    tolerance: f64,
    max_iterations: usize,
) -> Result<CgOutcome> {
    let n = b.len();
    let b_norm = norm(b);
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgOutcome {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut mp = vec![0.0; n];
    apply(x, &mut mp);
    let mut r: Vec<f64> = b.iter().zip(&mp).map(|(b, m)| b - m).collect();
    let mut d = r.clone();
    let mut rr = dot(&r, &r);
    let mut iterations = 0;
    while rr.sqrt() > tolerance * b_norm && iterations < max_iterations {
        apply(&d, &mut mp);
        let curvature = dot(&d, &mp);
        if !(curvature.is_finite() && curvature > 0.0) {
            return Err(Error::CgBreakdown(format!(
                "curvature {curvature} at iteration {iterations}"
            )));
        }
        let alpha = rr / curvature;
        for i in 0..n {
            x[i] += alpha * d[i];
            r[i] -= alpha * mp[i];
        }
        let rr_next = dot(&r, &r);
        if !rr_next.is_finite() {
            return Err(Error::CgBreakdown(format!("residual norm {rr_next} at iteration {iterations}")));
        }
        let beta = rr_next / rr;
        for i in 0..n {
            d[i] = r[i] + beta * d[i];
        }
        rr = rr_next;
        iterations += 1;
    }
    Ok(CgOutcome {
        iterations,
        relative_residual: rr.sqrt() / b_norm,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// The TV dual variable: one value per pixel, channel and derivative
/// direction. For colour images each direction's channel vector is
/// projected onto the unit Euclidean ball.
#[derive(Debug, Clone, PartialEq)]
pub struct DualField {
    height: usize,
    width: usize,
    channels: usize,
    /// `qx[c][i]`, `qy[c][i]`.
    qx: Vec<Vec<f64>>,
    qy: Vec<Vec<f64>>,
}

impl DualField {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            qx: vec![vec![0.0; height * width]; channels],
            qy: vec![vec![0.0; height * width]; channels],
        }
    }

    /// Builds a field from per-channel planes without projecting them.
    pub fn from_planes(height: usize, width: usize, qx: Vec<Vec<f64>>, qy: Vec<Vec<f64>>) -> Result<Self> {
        let channels = qx.len();
        if channels == 0 || qy.len() != channels {
            return Err(Error::InvalidParameter("dual field needs matching channel planes".into()));
        }
        for plane in qx.iter().chain(&qy) {
            if plane.len() != height * width {
                return Err(dims_mismatch((height, width), (plane.len() / width.max(1), width)));
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            qx,
            qy,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn qx(&self) -> &[Vec<f64>] {
        &self.qx
    }

    pub fn qy(&self) -> &[Vec<f64>] {
        &self.qy
    }

    /// Largest absolute component.
    pub fn max_abs(&self) -> f64 {
        self.qx
            .iter()
            .chain(&self.qy)
            .flat_map(|p| p.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `q ← (q + γ∇L) / max(1, |q + γ∇L|)`.
    pub fn ascend(&mut self, latent: &Image, gamma: f64) -> Result<()> {
        if latent.dims() != self.dims() || latent.channels() != self.channels {
            return Err(dims_mismatch(self.dims(), latent.dims()));
        }
        let (h, w) = self.dims();
        for (c, plane) in latent.planes().iter().enumerate() {
            let (gx, gy) = forward_gradient(plane, h, w);
            for i in 0..h * w {
                self.qx[c][i] += gamma * gx[i];
                self.qy[c][i] += gamma * gy[i];
            }
        }
        self.project();
        Ok(())
    }

    fn project(&mut self) {
        for i in 0..self.height * self.width {
            for q in [&mut self.qx, &mut self.qy] {
                let magnitude = q.iter().map(|p| p[i] * p[i]).sum::<f64>().sqrt();
                if magnitude > 1.0 {
                    q.iter_mut().for_each(|p| p[i] /= magnitude);
                }
            }
        }
    }

    /// `∇ᵀq` for one channel.
    fn divergence_adjoint(&self, channel: usize) -> Vec<f64> {
        forward_gradient_adjoint(&self.qx[channel], &self.qy[channel], self.height, self.width)
    }
}

#[derive(Debug, Clone)]
pub struct LatentSolveReport {
    pub outer_iterations: usize,
    /// CG iterations of every plane solve, per outer iteration.
    pub cg_iterations: Vec<Vec<usize>>,
    /// Lowest latent energy `c·data + μ4·TV` seen so far, at the start and
    /// after every outer iteration.
    pub energy_trace: Vec<f64>,
    pub converged: bool,
}

/// Normal equations of the proximal subproblem for one plane.
pub struct LatentSystem<'a> {
    op: &'a BlurOperator,
    weights: DataWeights,
    scale: f64,
    eta: f64,
}

impl<'a> LatentSystem<'a> {
    pub fn new(op: &'a BlurOperator, eta: f64) -> Self {
        let (h, w) = op.dims();
        let mask = op.mask().weights();
        Self {
            op,
            weights: DataWeights::new(mask, h, w),
            scale: coverage_factor(mask).unwrap_or(0.0),
            eta,
        }
    }

    /// `Aᵀ(W y + ∇ᵀ W_g ∇y)`.
    fn weighted_adjoint(&self, y: &[f64]) -> Vec<f64> {
        let (h, w) = self.op.dims();
        let (mut gx, mut gy) = forward_gradient(y, h, w);
        for i in 0..y.len() {
            gx[i] *= self.weights.dx[i];
            gy[i] *= self.weights.dy[i];
        }
        let mut t = forward_gradient_adjoint(&gx, &gy, h, w);
        for i in 0..y.len() {
            t[i] += self.weights.pixel[i] * y[i];
        }
        let mut out = vec![0.0; y.len()];
        self.op.apply_adjoint_plane(&t, &mut out);
        out
    }

    /// `M x = 2c·Aᵀ(W + ∇ᵀW_g∇) A x + x / η`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let mut y = vec![0.0; x.len()];
        self.op.apply_plane(x, &mut y);
        let t = self.weighted_adjoint(&y);
        for i in 0..x.len() {
            out[i] = 2.0 * self.scale * t[i] + x[i] / self.eta;
        }
    }

    /// `2c·Aᵀ(W + ∇ᵀW_g∇) B + target / η`.
    pub fn rhs(&self, blurry: &[f64], target: &[f64]) -> Vec<f64> {
        let t = self.weighted_adjoint(blurry);
        t.iter()
            .zip(target)
            .map(|(a, z)| 2.0 * self.scale * a + z / self.eta)
            .collect()
    }

    /// `c·(‖A x - B‖²_W + ‖∇A x - ∇B‖²_W)`.
    pub fn data(&self, x: &[f64], blurry: &[f64]) -> f64 {
        let (h, w) = self.op.dims();
        let mut y = vec![0.0; x.len()];
        self.op.apply_plane(x, &mut y);
        self.scale * data_plane(&y, blurry, &self.weights, h, w)
    }
}

/// `c·data + μ4·TV` of a set of planes.
fn latent_energy(system: &LatentSystem, planes: &[Vec<f64>], blurry: &[Vec<f64>], mu4: f64) -> f64 {
    let (h, w) = system.op.dims();
    let data: f64 = planes.iter().zip(blurry).map(|(x, b)| system.data(x, b)).sum();
    let grads: Vec<_> = planes.iter().map(|p| forward_gradient(p, h, w)).collect();
    data + mu4 * tv_from_gradients(&grads)
}

/// Recovers the latent image from `blurry` for the fixed operator `op`,
/// starting from `initial`. The primal-dual iteration runs on undisturbed,
/// while the lowest-energy iterate seen so far is what gets returned
/// (clamped to `[0, 1]`) and what the energy trace records.
pub fn solve_latent(
    blurry: &Image,
    op: &BlurOperator,
    initial: &Image,
    params: &EnergyParams,
) -> Result<(Image, LatentSolveReport)> {
    solve_latent_with(blurry, op, initial, params, params.latent_iterations)
}

/// [`solve_latent`] with an explicit outer iteration budget.
pub fn solve_latent_with(
    blurry: &Image,
    op: &BlurOperator,
    initial: &Image,
    params: &EnergyParams,
    iterations: usize,
) -> Result<(Image, LatentSolveReport)> {
    let (latent, report) = solve_latent_unclamped(blurry, op, initial, params, iterations)?;
    Ok((latent.clamped(), report))
}

/// Intensity range to which the step sizes `eta` and `gamma` refer.
pub const STEP_INTENSITY_RANGE: f64 = 255.0;

/// Dual ascent step for images in `[0, 1]`: `gamma` converted from 8-bit
/// intensities, capped at 0.9 of the primal-dual stability bound
/// `step · eta · mu4 · ‖∇‖² ≤ 1` with `‖∇‖² ≤ 8`.
pub fn dual_step(width: usize, params: &EnergyParams) -> f64 {
    let mu4 = tv_weight(width, params);
    let step = params.gamma * STEP_INTENSITY_RANGE;
    if mu4 > 0.0 {
        step.min(0.9 / (8.0 * params.eta * mu4))
    } else {
        step
    }
}

/// [`solve_latent_with`] without the final clamp, for callers that keep
/// iterating on the result.
pub(crate) fn solve_latent_unclamped(
    blurry: &Image,
    op: &BlurOperator,
    initial: &Image,
    params: &EnergyParams,
    iterations: usize,
) -> Result<(Image, LatentSolveReport)> {
    blurry.same_shape(initial)?;
    if blurry.dims() != op.dims() {
        return Err(dims_mismatch(op.dims(), blurry.dims()));
    }
    let positive = |x: f64| x.is_finite() && x > 0.0;
    if !(positive(params.eta) && positive(params.gamma) && params.mu4.is_finite() && params.mu4 >= 0.0) {
        return Err(Error::InvalidParameter("eta, gamma must be positive and mu4 non-negative".into()));
    }
    let (h, w) = blurry.dims();
    let mu4 = tv_weight(w, params);
    let step = dual_step(w, params);
    let system = LatentSystem::new(op, params.eta);
    let observed = blurry.planes();
    let mut planes = initial.planes();
    let mut dual = DualField::zeros(h, w, blurry.channels());
    let mut energy = latent_energy(&system, &planes, &observed, mu4);
    let mut report = LatentSolveReport {
        outer_iterations: 0,
        cg_iterations: Vec::new(),
        energy_trace: vec![energy],
        converged: false,
    };
    let mut best = planes.clone();
    for _ in 0..iterations {
        report.outer_iterations += 1;
        let current = Image::from_planes(h, w, &planes)?;
        dual.ascend(&current, step)?;
        let mut counts = Vec::with_capacity(planes.len());
        let mut change = 0.0;
        let mut size = 0.0;
        for (c, x) in planes.iter_mut().enumerate() {
            let div = dual.divergence_adjoint(c);
            let target: Vec<f64> = x
                .iter()
                .zip(&div)
                .map(|(l, d)| l - params.eta * mu4 * d)
                .collect();
            // Solve for the correction from the current iterate, stopping at
            // the tolerance relative to the full right-hand side but always
            // at least halving the correction residual.
            let mut b = system.rhs(&observed[c], &target);
            let full = norm(&b);
            let mut mx = vec![0.0; x.len()];
            system.apply(x, &mut mx);
            b.iter_mut().zip(&mx).for_each(|(b, m)| *b -= m);
            let tolerance = (params.cg_tolerance * full / norm(&b).max(f64::MIN_POSITIVE)).min(0.5);
            let mut delta = vec![0.0; x.len()];
            let outcome = conjugate_gradient(
                |v, out| system.apply(v, out),
                &b,
                &mut delta,
                tolerance,
                params.cg_max_iterations,
            )?;
            counts.push(outcome.iterations);
            for (xi, di) in x.iter_mut().zip(&delta) {
                *xi += di;
                change += di * di;
                size += *xi * *xi;
            }
        }
        report.cg_iterations.push(counts);
        let next_energy = latent_energy(&system, &planes, &observed, mu4);
        if !next_energy.is_finite() {
            return Err(Error::CgBreakdown(format!("latent energy became {next_energy}")));
        }
        if next_energy <= energy {
            energy = next_energy;
            best.clone_from(&planes);
        }
        report.energy_trace.push(energy);
        if change.sqrt() <= 1e-10 * size.sqrt().max(1e-12) {
            report.converged = true;
            break;
        }
    }
    if report.outer_iterations == iterations {
        report.converged = true;
    }
    Ok((Image::from_planes(h, w, &best)?, report))
}
