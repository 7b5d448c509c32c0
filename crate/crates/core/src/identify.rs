//! Blind identification of a spatially uniform linear blur from the power
//! spectrum of the observation, by maximizing its Gaussian marginal
//! likelihood under a gradient prior on the sharp image.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::types::{FlowField, Image};

/// Dominant blur streak of an image: its length in pixels and its direction
/// in radians in `[0, π)`, measured from the image x axis towards y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurStreak {
    pub length: f64,
    pub angle: f64,
}

impl BlurStreak {
    /// Mean flow `(du, dv)` of the streak, up to sign.
    pub fn flow(&self) -> [f64; 2] {
        [self.length * self.angle.cos(), self.length * self.angle.sin()]
    }
}

const NOISE_FLOOR: f64 = 1e-3;
const SCALE_SEARCH: (f64, f64) = (-20.0, 10.0);
const NEWTON_STEPS: usize = 30;

/// Windowed power spectrum of an image with the per-frequency quantities
/// needed to score candidate blurs.
#[derive(Debug, Clone)]
pub struct SpectrumModel {
    power: Vec<f64>,
    freq_x: Vec<f64>,
    freq_y: Vec<f64>,
    prior: Vec<f64>,
    noise: f64,
    half_samples: usize,
    max_length: f64,
}

impl SpectrumModel {
    /// Spectrum of the mean-free, Hann-windowed grey image. The kernel of a
    /// candidate blur is the average of `2N + 1` evenly spaced shifts.
    pub fn new(image: &Image, half_samples: usize) -> Self {
        let (h, w) = image.dims();
        let gray = image.gray_plane();
        let mean = gray.iter().sum::<f64>() / gray.len() as f64;
        let hann = |i: usize, n: usize| {
            if n < 2 {
                1.0
            } else {
                0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()
            }
        };
        let mut buffer: Vec<Complex<f64>> = Vec::with_capacity(h * w);
        let mut window_power = 0.0;
        for r in 0..h {
            for c in 0..w {
                let win = hann(r, h) * hann(c, w);
                window_power += win * win;
                buffer.push(Complex::new((gray[r * w + c] - mean) * win, 0.0));
            }
        }
        window_power /= (h * w) as f64;
        fft2(&mut buffer, h, w);

        let freq = |i: usize, n: usize| {
            let i = i as f64;
            let n = n as f64;
            if i < n / 2.0 {
                i / n
            } else {
                i / n - 1.0
            }
        };
        let mut model = Self {
            power: Vec::new(),
            freq_x: Vec::new(),
            freq_y: Vec::new(),
            prior: Vec::new(),
            noise: estimate_noise(&gray, h, w).max(NOISE_FLOOR).powi(2) * window_power,
            half_samples: half_samples.max(1),
            max_length: 0.25 * h.min(w) as f64,
        };
        for r in 0..h {
            for c in 0..w {
                let (fy, fx) = (freq(r, h), freq(c, w));
                let grad = (2.0 * (PI * fx).sin()).powi(2) + (2.0 * (PI * fy).sin()).powi(2);
                if grad <= 1e-12 {
                    continue;
                }
                model.power.push(buffer[r * w + c].norm_sqr() / (h * w) as f64);
                model.freq_x.push(fx);
                model.freq_y.push(fy);
                model.prior.push(1.0 / grad);
            }
        }
        model
    }

    /// Number of frequencies entering [`SpectrumModel::cost`].
    pub fn frequency_count(&self) -> usize {
        self.power.len()
    }

    /// Longest streak considered by [`SpectrumModel::identify`].
    pub fn max_length(&self) -> f64 {
        self.max_length
    }

    /// Negative log marginal likelihood, up to a constant, of a uniform blur
    /// with mean flow `flow`, minimized over the prior scale.
    pub fn cost(&self, flow: [f64; 2]) -> f64 {
        let n = self.half_samples as f64;
        let gains: Vec<f64> = self
            .freq_x
            .iter()
            .zip(&self.freq_y)
            .zip(&self.prior)
            .map(|((fx, fy), prior)| dirichlet(fx * flow[0] + fy * flow[1], n).powi(2) * prior)
            .collect();
        let value = |log_scale: f64| {
            let scale = log_scale.exp();
            gains
                .iter()
                .zip(&self.power)
                .map(|(g, p)| {
                    let m = scale * g + self.noise;
                    p / m + m.ln()
                })
                .sum::<f64>()
        };
        // Newton on the log scale from the moment estimate.
        let excess: f64 = self.power.iter().map(|p| (p - self.noise).max(0.0)).sum();
        let total_gain: f64 = gains.iter().sum();
        if excess <= 0.0 || total_gain <= 0.0 {
            return self.power.iter().map(|p| p / self.noise + self.noise.ln()).sum();
        }
        let mut u = (excess / total_gain).ln().clamp(SCALE_SEARCH.0, SCALE_SEARCH.1);
        for _ in 0..NEWTON_STEPS {
            let scale = u.exp();
            let (mut d1, mut d2) = (0.0, 0.0);
            for (g, p) in gains.iter().zip(&self.power) {
                let t = scale * g;
                let m = t + self.noise;
                let r = p / m;
                d1 += t * (1.0 - r) / m;
                d2 += t * (1.0 - r) / m + t * t * (2.0 * r - 1.0) / (m * m);
            }
            let step = if d2 > 0.0 { -d1 / d2 } else { -d1.signum() };
            let step = step.clamp(-2.0, 2.0);
            u = (u + step).clamp(SCALE_SEARCH.0, SCALE_SEARCH.1);
            if step.abs() < 1e-8 {
                break;
            }
        }
        value(u)
    }

    /// Streak of minimal [`SpectrumModel::cost`] over a polar grid of
    /// lengths and directions, refined once around the best grid point.
    pub fn identify(&self) -> BlurStreak {
        let cost = |length: f64, angle: f64| {
            self.cost(BlurStreak { length, angle }.flow())
        };
        let mut best = (cost(0.0, 0.0), BlurStreak { length: 0.0, angle: 0.0 });
        let angles = 16;
        let steps = self.max_length.floor() as usize;
        for a in 0..angles {
            let angle = PI * a as f64 / angles as f64;
            for l in 1..=steps {
                let c = cost(l as f64, angle);
                if c < best.0 {
                    best = (c, BlurStreak { length: l as f64, angle });
                }
            }
        }
        let centre = best.1;
        if centre.length > 0.0 {
            for da in -4..=4 {
                for dl in -4..=4 {
                    let length = centre.length + 0.25 * dl as f64;
                    let angle = centre.angle + PI * da as f64 / (4.0 * angles as f64);
                    if length <= 0.0 || length > self.max_length {
                        continue;
                    }
                    let c = cost(length, angle);
                    if c < best.0 {
                        best = (c, BlurStreak { length, angle });
                    }
                }
            }
        }
        let streak = best.1;
        BlurStreak {
            length: streak.length,
            angle: streak.angle.rem_euclid(PI),
        }
    }
}

/// Spectra of patches two thirds of the shorter side long, one in each
/// corner, for scoring spatially varying blur by its per-patch mean flow.
#[derive(Debug, Clone)]
pub struct PatchSpectra {
    patches: Vec<Patch>,
    height: usize,
    width: usize,
}

#[derive(Debug, Clone)]
struct Patch {
    model: SpectrumModel,
    top: usize,
    left: usize,
    size: usize,
}

impl PatchSpectra {
    pub fn new(image: &Image, half_samples: usize) -> Self {
        let (h, w) = image.dims();
        let channels = image.channels();
        let size = (2 * h.min(w) / 3).max(1);
        let mut patches = Vec::with_capacity(4);
        for top in [0, h - size] {
            for left in [0, w - size] {
                let data: Vec<f64> = (top..top + size)
                    .flat_map(|r| {
                        let start = (r * w + left) * channels;
                        image.data()[start..start + size * channels].to_vec()
                    })
                    .collect();
                let patch = Image::new(size, size, channels, data).expect("patch of a valid image");
                patches.push(Patch {
                    model: SpectrumModel::new(&patch, half_samples),
                    top,
                    left,
                    size,
                });
            }
        }
        Self { patches, height: h, width: w }
    }

    /// Number of frequencies over all patches.
    pub fn frequency_count(&self) -> usize {
        self.patches.iter().map(|p| p.model.frequency_count()).sum()
    }

    /// Sum of the patch costs of the mean flow over each patch's valid
    /// pixels. Patches without valid flow are skipped.
    pub fn cost(&self, flow: &FlowField) -> f64 {
        debug_assert_eq!((flow.height(), flow.width()), (self.height, self.width));
        self.patches
            .iter()
            .filter_map(|p| {
                let mut acc = [0.0; 2];
                let mut n = 0usize;
                for r in p.top..p.top + p.size {
                    for c in p.left..p.left + p.size {
                        let i = r * self.width + c;
                        if flow.valid()[i] {
                            acc[0] += flow.data()[i][0];
                            acc[1] += flow.data()[i][1];
                            n += 1;
                        }
                    }
                }
                (n > 0).then(|| p.model.cost([acc[0] / n as f64, acc[1] / n as f64]))
            })
            .sum()
    }
}

/// Identifies the uniform linear blur of `image`; see [`SpectrumModel`].
pub fn identify_blur(image: &Image, half_samples: usize) -> BlurStreak {
    SpectrumModel::new(image, half_samples).identify()
}

/// Transfer function at frequency projection `s` (cycles per streak) of the
/// average of `2N + 1` shifts evenly spanning one streak.
fn dirichlet(s: f64, n: f64) -> f64 {
    let x = PI * s / n;
    let half = 0.5 * x;
    let den = half.sin();
    if den.abs() < 1e-9 {
        return ((n + 0.5) * x).cos() / half.cos();
    }
    ((n + 0.5) * x).sin() / ((2.0 * n + 1.0) * den)
}

/// Robust noise level from the median absolute diagonal difference.
fn estimate_noise(plane: &[f64], h: usize, w: usize) -> f64 {
    if h < 2 || w < 2 {
        return 0.0;
    }
    let mut d: Vec<f64> = (0..h - 1)
        .flat_map(|r| (0..w - 1).map(move |c| (r, c)))
        .map(|(r, c)| {
            let i = r * w + c;
            (0.5 * (plane[i] - plane[i + 1] - plane[i + w] + plane[i + w + 1])).abs()
        })
        .collect();
    d.sort_by(f64::total_cmp);
    d[d.len() / 2] / 0.6745
}

fn fft2(buffer: &mut [Complex<f64>], h: usize, w: usize) {
    let mut planner = FftPlanner::new();
    let rows = planner.plan_fft_forward(w);
    for row in buffer.chunks_exact_mut(w) {
        rows.process(row);
    }
    let cols = planner.plan_fft_forward(h);
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            column[r] = buffer[r * w + c];
        }
        cols.process(&mut column);
        for r in 0..h {
            buffer[r * w + c] = column[r];
        }
    }
}
