//! Kernel functions, non-private kernel density estimation and bandwidth
//! selection, plus the regular evaluation lattice shared with the noise
//! mechanisms.
//!
//! The kernel is the unnormalised Gaussian `K(u) = exp(-||u||^2 / 2)`, so
//! `C_K = K(0) = 1` and `K` doubles as a valid correlation kernel for the
//! Gaussian-process noise. The missing `(2 pi)^{-d/2}` factor cancels in the
//! regression ratio and is absorbed into the noise scale through `C_K`.

use crate::core::LabeledRecord;
use crate::error::{Error, Result};
use rand_chacha::ChaCha12Rng;

/// Sup bound of the kernel.
pub const C_K: f64 = 1.0;

/// Candidate bandwidth grid used when cross-validation is asked to pick `h`.
pub const DEFAULT_BANDWIDTHS: [f64; 6] = [0.05, 0.1, 0.15, 0.2, 0.3, 0.4];

/// Shipped kernel kinds. Only the Gaussian form is implemented; the enum is
/// the seam for beta-valid alternatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelSpec {
    #[default]
    Gaussian,
}

impl KernelSpec {
    pub fn sup_bound(self) -> f64 {
        C_K
    }
}

/// `K(u) = exp(-||u||^2 / 2)`, in `(0, 1]` for finite input.
pub fn kernel_eval(u: &[f64]) -> f64 {
    let sq: f64 = u.iter().map(|v| v * v).sum();
    (-sq / 2.0).exp()
}

/// One-dimensional factor of the product kernel, used by the GP basis.
pub fn kernel_eval_1d(u: f64) -> f64 {
    (-u * u / 2.0).exp()
}

/// `(1/n_divisor) * sum_i h^{-d} K((X_i - query)/h)`.
///
/// `n_divisor` is passed separately because the joint-density estimator sums
/// over the positive-label subset while dividing by the full group count.
pub fn kde_eval(points: &[Vec<f64>], query: &[f64], h: f64, n_divisor: usize) -> Result<f64> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::ZeroBandwidth(h));
    }
    assert!(n_divisor > 0, "n_divisor must be positive");
    let d = query.len() as i32;
    let hd = h.powi(d);
    let mut sum = 0.0;
    let mut u = vec![0.0; query.len()];
    for p in points {
        for ((ui, pi), qi) in u.iter_mut().zip(p.iter()).zip(query.iter()) {
            *ui = (pi - qi) / h;
        }
        sum += kernel_eval(&u);
    }
    Ok(sum / (hd * n_divisor as f64))
}

/// Evaluate the density estimator at every lattice point.
pub fn kde_on_lattice(
    points: &[Vec<f64>],
    lattice: &Lattice,
    h: f64,
    n_divisor: usize,
) -> Result<Vec<f64>> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::ZeroBandwidth(h));
    }
    assert!(n_divisor > 0, "n_divisor must be positive");
    let d = lattice.dim() as i32;
    let norm = 1.0 / (h.powi(d) * n_divisor as f64);
    let mut values = vec![0.0; lattice.len()];
    let mut q = vec![0.0; lattice.dim()];
    let mut u = vec![0.0; lattice.dim()];
    for (idx, v) in values.iter_mut().enumerate() {
        lattice.point_into(idx, &mut q);
        let mut sum = 0.0;
        for p in points {
            for ((ui, pi), qi) in u.iter_mut().zip(p.iter()).zip(q.iter()) {
                *ui = (pi - qi) / h;
            }
            sum += kernel_eval(&u);
        }
        *v = sum * norm;
    }
    Ok(values)
}

/// Regular lattice over `[0,1]^d`, `res` points per axis, endpoints included.
/// Points are enumerated row-major with the first axis slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    d: usize,
    res: usize,
    axis: Vec<f64>,
}

impl Lattice {
    pub fn new(d: usize, res: usize) -> Self {
        assert!(d >= 1 && res >= 2);
        let axis = (0..res).map(|i| i as f64 / (res - 1) as f64).collect();
        Self { d, res, axis }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn resolution(&self) -> usize {
        self.res
    }

    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    /// Total number of lattice points, `res^d`.
    pub fn len(&self) -> usize {
        self.res.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Decode flat index `idx` into coordinates.
    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.point_into(idx, &mut out);
        out
    }

    pub fn point_into(&self, mut idx: usize, out: &mut [f64]) {
        for k in (0..self.d).rev() {
            out[k] = self.axis[idx % self.res];
            idx /= self.res;
        }
    }

    /// Flat index of the point with per-axis indices `multi`.
    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().fold(0, |acc, &i| acc * self.res + i)
    }

    /// Multilinear interpolation of `values` (one per lattice point) at `x`.
    /// Coordinates are clamped to `[0,1]` first.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        debug_assert_eq!(x.len(), self.d);
        let step = 1.0 / (self.res - 1) as f64;
        let mut lo = vec![0usize; self.d];
        let mut frac = vec![0.0; self.d];
        for k in 0..self.d {
            let v = x[k].clamp(0.0, 1.0) / step;
            let i = (v.floor() as usize).min(self.res - 2);
            lo[k] = i;
            frac[k] = (v - i as f64).clamp(0.0, 1.0);
        }
        let corners = 1usize << self.d;
        let mut acc = 0.0;
        let mut multi = vec![0usize; self.d];
        for c in 0..corners {
            let mut w = 1.0;
            for k in 0..self.d {
                if c >> k & 1 == 1 {
                    multi[k] = lo[k] + 1;
                    w *= frac[k];
                } else {
                    multi[k] = lo[k];
                    w *= 1.0 - frac[k];
                }
            }
            if w > 0.0 {
                acc += w * values[self.flat_index(&multi)];
            }
        }
        acc
    }
}

/// Grid-sampled function over the lattice.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub lattice: Lattice,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn new(lattice: Lattice, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), lattice.len());
        Self { lattice, values }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.lattice.interpolate(&self.values, x)
    }
}

/// Pick the bandwidth whose group-wise plug-in rule `1{eta_hat_a(x) >= 1/2}`
/// has the lowest average held-out misclassification over `folds` folds.
/// Ties break toward the larger bandwidth.
pub fn cross_validate_bandwidth(
    train: &[LabeledRecord],
    folds: usize,
    candidates: &[f64],
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    assert!(folds >= 2, "need at least two folds");
    assert!(!candidates.is_empty(), "candidate list must be non-empty");
    for &h in candidates {
        if h <= 0.0 || h >= 1.0 {
            return Err(Error::ZeroBandwidth(h));
        }
    }
    if candidates.len() == 1 {
        return Ok(candidates[0]);
    }

    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let fold_of: Vec<usize> = {
        let mut f = vec![0; train.len()];
        for (pos, &i) in order.iter().enumerate() {
            f[i] = pos % folds;
        }
        f
    };

    // Pre-split per fold: points by group and by (group, positive).
    let mut best: Option<(f64, f64)> = None; // (error, h)
    for &h in candidates {
        let mut errors = 0usize;
        let mut total = 0usize;
        for fold in 0..folds {
            let mut group_pts: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
            let mut pos_pts: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
            for (i, r) in train.iter().enumerate() {
                if fold_of[i] != fold {
                    group_pts[r.a as usize].push(r.x.clone());
                    if r.y == 1 {
                        pos_pts[r.a as usize].push(r.x.clone());
                    }
                }
            }
            if group_pts[0].is_empty() || group_pts[1].is_empty() {
                return Err(Error::InsufficientData);
            }
            for (i, r) in train.iter().enumerate() {
                if fold_of[i] != fold {
                    continue;
                }
                let a = r.a as usize;
                let n_a = group_pts[a].len();
                let num = kde_eval(&pos_pts[a], &r.x, h, n_a)?;
                let den = kde_eval(&group_pts[a], &r.x, h, n_a)?;
                let eta = if den > 0.0 { num / den } else { 0.0 };
                let pred = u8::from(eta >= 0.5);
                if pred != r.y {
                    errors += 1;
                }
                total += 1;
            }
        }
        let err = errors as f64 / total.max(1) as f64;
        let better = match best {
            None => true,
            // strict improvement, or equal error with larger h
            Some((be, bh)) => err < be || (err == be && h > bh),
        };
        if better {
            best = Some((err, h));
        }
    }
    Ok(best.expect("non-empty candidates").1)
}
