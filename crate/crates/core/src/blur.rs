//! The warp-and-average blur operator `A_p` and its adjoint.
//!
//! The exposure is discretized into `2N + 1` poses `(n / 2N) · p`,
//! `n = -N..=N`, and the blurry image is the mean of the corresponding
//! backward warps of the latent image. The operator caches one merged sparse
//! row per target pixel, so it is an explicit matrix acting on vectorized
//! images; `apply_adjoint` multiplies by its transpose.

use crate::error::{dims_mismatch, Error, Result};
use crate::geometry::{pose_at_time, CameraMotion, Projector, Tap};
use crate::types::{validate_pair, DepthMap, Image, Intrinsics, Pose6, ValidityMask};

/// Poses of the `2N + 1` exposure samples, ordered from `-p/2` to `+p/2`.
pub fn exposure_samples(p: &Pose6, half_samples: usize) -> Result<Vec<Pose6>> {
    if half_samples == 0 {
        return Err(Error::InvalidParameter("N must be at least 1".into()));
    }
    let n = half_samples as i64;
    (-n..=n)
        .map(|i| pose_at_time(p, i as f64 / n as f64))
        .collect()
}

/// Compressed sparse rows.
#[derive(Debug, Clone)]
struct Csr {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl Csr {
    fn multiply(&self, x: &[f64], out: &mut [f64]) {
        for (row, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.row_ptr[row], self.row_ptr[row + 1]);
            let mut acc = 0.0;
            for k in a..b {
                acc += self.vals[k] * x[self.cols[k] as usize];
            }
            *o = acc;
        }
    }

    fn transpose(&self, n_cols: usize) -> Csr {
        let mut counts = vec![0usize; n_cols + 1];
        for &c in &self.cols {
            counts[c as usize + 1] += 1;
        }
        for i in 0..n_cols {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut cols = vec![0u32; self.cols.len()];
        let mut vals = vec![0.0; self.vals.len()];
        for row in 0..self.row_ptr.len() - 1 {
            for k in self.row_ptr[row]..self.row_ptr[row + 1] {
                let c = self.cols[k] as usize;
                cols[next[c]] = row as u32;
                vals[next[c]] = self.vals[k];
                next[c] += 1;
            }
        }
        Csr { row_ptr, cols, vals }
    }
}

/// Linear blur operator for a fixed pose, depth map and camera.
#[derive(Debug, Clone)]
pub struct BlurOperator {
    height: usize,
    width: usize,
    pose: Pose6,
    half_samples: usize,
    samples: Vec<Pose6>,
    rows: Csr,
    cols: Csr,
    mask: ValidityMask,
}

impl BlurOperator {
    pub fn build(p: &Pose6, depth: &DepthMap, k: &Intrinsics, half_samples: usize) -> Result<Self> {
        Self::with_projector(p, &Projector::new(depth, k), half_samples)
    }

    pub fn with_projector(p: &Pose6, projector: &Projector, half_samples: usize) -> Result<Self> {
        let samples = exposure_samples(p, half_samples)?;
        let motions = samples
            .iter()
            .map(CameraMotion::new)
            .collect::<Result<Vec<_>>>()?;
        let n = projector.pixel_count();
        let lambda = 1.0 / samples.len() as f64;
        let identity = p.is_zero();

        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut weights = vec![0.0; n];
        let mut taps: Vec<Tap> = Vec::with_capacity(motions.len());
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(4 * motions.len());
        row_ptr.push(0);
        for i in 0..n {
            taps.clear();
            taps.extend(motions.iter().map_while(|m| projector.tap(i, m)));
            if taps.len() == motions.len() {
                weights[i] = taps.iter().fold(1.0f64, |w, t| w.min(t.taper));
                if identity {
                    // Exact copy; averaging 2N+1 equal values need not round-trip.
                    cols.push(i as u32);
                    vals.push(1.0);
                } else {
                    entries.clear();
                    for t in &taps {
                        for (&idx, &w) in t.index.iter().zip(&t.weight) {
                            if w != 0.0 {
                                entries.push((idx as u32, lambda * w));
                            }
                        }
                    }
                    entries.sort_unstable_by_key(|e| e.0);
                    let mut last = u32::MAX;
                    for &(c, w) in &entries {
                        if c == last {
                            *vals.last_mut().expect("merged entry") += w;
                        } else {
                            cols.push(c);
                            vals.push(w);
                            last = c;
                        }
                    }
                }
            }
            row_ptr.push(cols.len());
        }
        let rows = Csr {
            row_ptr,
            cols,
            vals,
        };
        let cols = rows.transpose(n);
        Ok(Self {
            height: projector.height(),
            width: projector.width(),
            pose: *p,
            half_samples,
            samples,
            rows,
            cols,
            mask: ValidityMask::from_weights(weights),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pose(&self) -> &Pose6 {
        &self.pose
    }

    pub fn half_samples(&self) -> usize {
        self.half_samples
    }

    /// The cached exposure sample poses.
    pub fn sample_poses(&self) -> &[Pose6] {
        &self.samples
    }

    /// Validity weights of the blurred output (0 where any sample is missing).
    pub fn mask(&self) -> &ValidityMask {
        &self.mask
    }

    /// Sum of the cached weights of one target pixel's row.
    pub fn row_weight_sum(&self, index: usize) -> f64 {
        let (a, b) = (self.rows.row_ptr[index], self.rows.row_ptr[index + 1]);
        self.rows.vals[a..b].iter().sum()
    }

    /// Stored non-zeros.
    pub fn nnz(&self) -> usize {
        self.rows.vals.len()
    }

    /// `out = A x` for one row-major plane.
    pub fn apply_plane(&self, x: &[f64], out: &mut [f64]) {
        self.rows.multiply(x, out);
    }

    /// `out = Aᵀ y` for one row-major plane.
    pub fn apply_adjoint_plane(&self, y: &[f64], out: &mut [f64]) {
        self.cols.multiply(y, out);
    }

    fn check(&self, image: &Image) -> Result<()> {
        if image.dims() != (self.height, self.width) {
            return Err(dims_mismatch((self.height, self.width), image.dims()));
        }
        Ok(())
    }

    /// Blurs `latent`; pixels with zero validity weight are set to zero.
    pub fn apply(&self, latent: &Image) -> Result<(Image, ValidityMask)> {
        self.check(latent)?;
        let planes = self.map_planes(latent, Self::apply_plane);
        Ok((
            Image::from_planes(self.height, self.width, &planes)?,
            self.mask.clone(),
        ))
    }

    pub fn apply_adjoint(&self, residual: &Image) -> Result<Image> {
        self.check(residual)?;
        let planes = self.map_planes(residual, Self::apply_adjoint_plane);
        Image::from_planes(self.height, self.width, &planes)
    }

    fn map_planes(&self, image: &Image, f: fn(&Self, &[f64], &mut [f64])) -> Vec<Vec<f64>> {
        image
            .planes()
            .iter()
            .map(|plane| {
                let mut out = vec![0.0; plane.len()];
                f(self, plane, &mut out);
                out
            })
            .collect()
    }
}

/// Builds the operator after checking that `depth` matches `image`.
pub fn build_for(
    image: &Image,
    p: &Pose6,
    depth: &DepthMap,
    k: &Intrinsics,
    half_samples: usize,
) -> Result<BlurOperator> {
    validate_pair(image, depth)?;
    BlurOperator::build(p, depth, k, half_samples)
}

/// Streaming evaluation of `A_p x` without caching rows, for callers that
/// blur each pose only once (the pose solver).
pub(crate) fn blur_plane_streaming(
    projector: &Projector,
    p: &Pose6,
    half_samples: usize,
    plane: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let motions = exposure_samples(p, half_samples)?
        .iter()
        .map(CameraMotion::new)
        .collect::<Result<Vec<_>>>()?;
    let n = projector.pixel_count();
    let lambda = 1.0 / motions.len() as f64;
    let mut out = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        let mut w = 1.0f64;
        let mut complete = true;
        for m in &motions {
            match projector.tap(i, m) {
                Some(t) => {
                    acc += t.sample(plane);
                    w = w.min(t.taper);
                }
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if complete {
            out[i] = if p.is_zero() { plane[i] } else { lambda * acc };
            weights[i] = w;
        }
    }
    Ok((out, weights))
}
