//! Noise mechanisms: the scalar Gaussian mechanism, a truncated
//! Gaussian-process sampler for functional releases, and the per-level tree
//! count noise, each with its calibration.
//!
//! Natural logarithms throughout.

use crate::error::{Error, Result};
use crate::kde::{kernel_eval_1d, Lattice, C_K};
use nalgebra::DMatrix;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::core::PrivacyBudget;

/// `sigma_s = 4 sqrt(2 ln(5/delta)) / (n_s epsilon)` for the scalar class
/// probability release.
pub fn calib_scalar(n_s: usize, budget: &PrivacyBudget) -> f64 {
    assert!(n_s >= 1);
    4.0 * (2.0 * (5.0 / budget.delta).ln()).sqrt() / (n_s as f64 * budget.epsilon)
}

/// `8 sqrt(2 C_K ln(8/delta)) / (n_sa epsilon h^d)` multiplying the unit GP
/// sample added to a density estimate.
pub fn calib_gp(n_sa: usize, budget: &PrivacyBudget, h: f64, d: usize) -> f64 {
    assert!(n_sa >= 1);
    8.0 * (2.0 * C_K * (8.0 / budget.delta).ln()).sqrt()
        / (n_sa as f64 * budget.epsilon * h.powi(d as i32))
}

/// Per-node noise variance of the dyadic tree,
/// `(4 ln(1/delta)/epsilon + 2) / (epsilon / M)`.
pub fn tree_noise_variance(budget: &PrivacyBudget, depth: usize) -> f64 {
    assert!(depth >= 1);
    depth as f64 * (4.0 * (1.0 / budget.delta).ln() / budget.epsilon + 2.0) / budget.epsilon
}

/// Standard deviation form of [`tree_noise_variance`].
pub fn calib_tree(budget: &PrivacyBudget, depth: usize) -> f64 {
    tree_noise_variance(budget, depth).sqrt()
}

/// `sigma = 2 sqrt(2 ln(1.25/delta)) / ((n0 ^ n1) epsilon)` for the vertical
/// shift of the single-server disparity curve.
pub fn calib_cdp_shift(n_calib_min: usize, budget: &PrivacyBudget) -> f64 {
    assert!(n_calib_min >= 1);
    2.0 * (2.0 * (1.25 / budget.delta).ln()).sqrt() / (n_calib_min as f64 * budget.epsilon)
}

/// Gaussian mechanism for a scalar: `value + N(0, sigma^2)`.
pub fn scalar_gauss(value: f64, sigma: f64, rng: &mut ChaCha12Rng) -> Result<f64> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::NonPositiveSigma(sigma));
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    Ok(value + normal.sample(rng))
}

/// Eigenbasis of the lattice covariance `C[i][j] = K((p_i - p_j)/h)`.
///
/// The Gaussian kernel factorises over axes on a regular lattice, so the
/// full decomposition is the product of one per-axis decomposition; that
/// keeps a 30^2 lattice exact and cheap. Components are ordered by
/// descending eigenvalue (products of the per-axis eigenvalues), negatives
/// clipped at zero.
#[derive(Debug)]
pub struct GpBasis {
    lattice: Lattice,
    h: f64,
    /// Per-axis eigenvector matrix (columns), shared by all axes.
    axis_vecs: DMatrix<f64>,
    /// Raw per-axis eigenvalues, descending.
    axis_vals: Vec<f64>,
    /// All `res^d` component eigenvalues (clipped products), descending.
    eigvals: Vec<f64>,
    /// Sum of unclipped products, for the clipping diagnostics.
    raw_total_variance: f64,
    /// Per-axis eigenvector index tuple of each component.
    component_axes: Vec<Vec<usize>>,
}

impl GpBasis {
    pub fn new(lattice: &Lattice, h: f64) -> Result<Self> {
        if h <= 0.0 || !h.is_finite() {
            return Err(Error::ZeroBandwidth(h));
        }
        let res = lattice.resolution();
        let axis = lattice.axis();
        let mut m = DMatrix::from_fn(res, res, |i, j| kernel_eval_1d((axis[i] - axis[j]) / h));
        let eigen = match nalgebra::SymmetricEigen::try_new(m.clone(), f64::EPSILON, 0) {
            Some(e) => e,
            None => {
                for i in 0..res {
                    m[(i, i)] += 1e-8;
                }
                nalgebra::SymmetricEigen::try_new(m, f64::EPSILON, 0).ok_or(Error::EigenFailure)?
            }
        };
        let mut order: Vec<usize> = (0..res).collect();
        order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));
        let axis_vals: Vec<f64> = order.iter().map(|&i| eigen.eigenvalues[i]).collect();
        let mut axis_vecs = DMatrix::zeros(res, res);
        for (new, &old) in order.iter().enumerate() {
            axis_vecs.set_column(new, &eigen.eigenvectors.column(old));
        }

        let d = lattice.dim();
        let n = lattice.len();
        let mut component_axes = Vec::with_capacity(n);
        let mut raw = Vec::with_capacity(n);
        let mut idx = vec![0usize; d];
        for flat in 0..n {
            let mut rem = flat;
            for k in (0..d).rev() {
                idx[k] = rem % res;
                rem /= res;
            }
            let prod: f64 = idx.iter().map(|&i| axis_vals[i]).product();
            component_axes.push(idx.clone());
            raw.push(prod);
        }
        let raw_total_variance: f64 = raw.iter().sum();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]));
        let eigvals: Vec<f64> = order.iter().map(|&i| raw[i].max(0.0)).collect();
        let component_axes: Vec<Vec<usize>> =
            order.iter().map(|&i| component_axes[i].clone()).collect();

        Ok(Self {
            lattice: lattice.clone(),
            h,
            axis_vecs,
            axis_vals,
            eigvals,
            raw_total_variance,
            component_axes,
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    /// Raw per-axis eigenvalues, descending.
    pub fn axis_eigvals(&self) -> &[f64] {
        &self.axis_vals
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    /// Full rank of the decomposition (`res^d`).
    pub fn rank(&self) -> usize {
        self.eigvals.len()
    }

    /// Clipped eigenvalue of component `j` (descending order).
    pub fn eigval(&self, j: usize) -> f64 {
        self.eigvals[j]
    }

    /// Value of eigenvector `j` at lattice point `flat`.
    pub fn eigvec_entry(&self, j: usize, flat: usize) -> f64 {
        let res = self.lattice.resolution();
        let d = self.lattice.dim();
        let axes = &self.component_axes[j];
        let mut rem = flat;
        let mut prod = 1.0;
        for k in (0..d).rev() {
            let i = rem % res;
            rem /= res;
            prod *= self.axis_vecs[(i, axes[k])];
        }
        prod
    }

    /// Relative variance lost to clipping negative eigenvalues.
    pub fn clipping_relative_error(&self) -> f64 {
        let clipped: f64 = self.eigvals.iter().sum();
        ((clipped - self.raw_total_variance) / self.raw_total_variance).abs()
    }

    /// Dense reconstruction of the covariance from the top `k` components,
    /// for fidelity tests.
    pub fn covariance(&self, k: usize) -> DMatrix<f64> {
        let n = self.lattice.len();
        let k = k.min(self.rank());
        let mut c = DMatrix::zeros(n, n);
        for j in 0..k {
            let lam = self.eigvals[j];
            if lam <= 0.0 {
                continue;
            }
            let v: Vec<f64> = (0..n).map(|p| self.eigvec_entry(j, p)).collect();
            for p in 0..n {
                let lv = lam * v[p];
                for q in 0..n {
                    c[(p, q)] += lv * v[q];
                }
            }
        }
        c
    }
}

/// Cache key: (dimension, resolution, bandwidth bits).
type BasisKey = (usize, usize, u64);
type BasisCache = Mutex<HashMap<BasisKey, Arc<GpBasis>>>;

fn basis_cache() -> &'static BasisCache {
    static CACHE: OnceLock<BasisCache> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Shared, memoised basis for `(lattice, h)`. The decomposition depends only
/// on the lattice geometry and bandwidth, so all sites and mechanisms reuse
/// one copy.
pub fn shared_basis(lattice: &Lattice, h: f64) -> Result<Arc<GpBasis>> {
    let key = (lattice.dim(), lattice.resolution(), h.to_bits());
    {
        let cache = basis_cache().lock().expect("basis cache poisoned");
        if let Some(b) = cache.get(&key) {
            return Ok(Arc::clone(b));
        }
    }
    let basis = Arc::new(GpBasis::new(lattice, h)?);
    basis_cache()
        .lock()
        .expect("basis cache poisoned")
        .insert(key, Arc::clone(&basis));
    Ok(basis)
}

/// One drawn Gaussian-process sample: a fixed function on the lattice.
/// Evaluating the same point twice returns the same value; off-lattice
/// queries are multilinear interpolations.
#[derive(Debug, Clone)]
pub struct GpSample {
    basis: Arc<GpBasis>,
    coeffs: Vec<f64>,
    scale: f64,
    /// Unit-scale values at every lattice point.
    values: Vec<f64>,
}

impl GpSample {
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn basis(&self) -> &GpBasis {
        &self.basis
    }

    /// Value at lattice point `flat`, including the scale.
    pub fn value_at(&self, flat: usize) -> f64 {
        self.scale * self.values[flat]
    }

    /// All lattice values, scaled.
    pub fn scaled_values(&self) -> Vec<f64> {
        self.values.iter().map(|v| self.scale * v).collect()
    }

    /// Off-lattice evaluation by multilinear interpolation.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.scale * self.basis.lattice().interpolate(&self.values, x)
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }
}

/// Draw a mean-zero GP with covariance `K((l - t)/h)` on the lattice,
/// truncated to the top `k_eigen` eigencomponents.
pub fn sample_gp(
    lattice: &Lattice,
    h: f64,
    k_eigen: usize,
    rng: &mut ChaCha12Rng,
) -> Result<GpSample> {
    let basis = shared_basis(lattice, h)?;
    sample_gp_with_basis(&basis, k_eigen, rng)
}

/// As [`sample_gp`] but reusing a prebuilt basis.
pub fn sample_gp_with_basis(
    basis: &Arc<GpBasis>,
    k_eigen: usize,
    rng: &mut ChaCha12Rng,
) -> Result<GpSample> {
    let k = k_eigen.min(basis.rank());
    assert!(k >= 1, "k_eigen must be at least 1");
    let coeffs: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
    let n = basis.lattice().len();
    let mut values = vec![0.0; n];
    for (j, &c) in coeffs.iter().enumerate() {
        let lam = basis.eigval(j);
        if lam <= 0.0 {
            continue;
        }
        let w = c * lam.sqrt();
        for (flat, v) in values.iter_mut().enumerate() {
            *v += w * basis.eigvec_entry(j, flat);
        }
    }
    Ok(GpSample {
        basis: Arc::clone(basis),
        coeffs,
        scale: 1.0,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::RngStream;
    use approx::assert_relative_eq;

    fn budget(eps: f64, delta: f64) -> PrivacyBudget {
        PrivacyBudget::new(eps, delta).unwrap()
    }

    #[test]
    fn calib_scalar_formula() {
        let s = calib_scalar(1000, &budget(1.0, 1e-4));
        assert_relative_eq!(
            s,
            4.0 * (2.0 * 50_000f64.ln()).sqrt() / 1000.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(s, 0.0186075, epsilon = 1e-6);
        // 1/n and 1/eps scaling
        assert_relative_eq!(
            calib_scalar(2000, &budget(1.0, 1e-4)),
            s / 2.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            calib_scalar(1000, &budget(2.0, 1e-4)),
            s / 2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn calib_gp_formula() {
        let s = calib_gp(500, &budget(1.0, 1e-4), 0.2, 2);
        // 8 sqrt(2 ln(8e4)) / (500 * 0.04)
        assert_relative_eq!(
            s,
            8.0 * (2.0 * 80_000f64.ln()).sqrt() / 20.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(s, 1.900718, epsilon = 1e-5);
        // halving h^d doubles the scale
        let s2 = calib_gp(500, &budget(1.0, 1e-4), 0.2 / 2f64.sqrt(), 2);
        assert_relative_eq!(s2, 2.0 * s, epsilon = 1e-9);
    }

    #[test]
    fn calib_tree_formula() {
        let s = calib_tree(&budget(1.0, 0.01), 6);
        assert_relative_eq!(s, (6.0 * (4.0 * 100f64.ln() + 2.0)).sqrt(), epsilon = 1e-12);
        assert_relative_eq!(s, 11.0690, epsilon = 1e-3);
        let s21 = calib_tree(&budget(2.0, 0.01), 1);
        assert_relative_eq!(
            s21,
            ((4.0 * 100f64.ln() / 2.0 + 2.0) / 2.0).sqrt(),
            epsilon = 1e-12
        );
        assert_relative_eq!(s21, 2.36752, epsilon = 1e-4);
        // sqrt(M) scaling
        let s1 = calib_tree(&budget(1.0, 0.01), 1);
        let s4 = calib_tree(&budget(1.0, 0.01), 4);
        assert_relative_eq!(s4, 2.0 * s1, epsilon = 1e-12);
    }

    #[test]
    fn calibrations_monotone_in_parameters() {
        let mut rng = RngStream::new(101).rng();
        use rand::Rng;
        for _ in 0..200 {
            let eps: f64 = rng.random_range(0.1..5.0);
            let delta: f64 = rng.random_range(1e-8..0.1);
            let n: usize = rng.random_range(10..10_000);
            let m: usize = rng.random_range(1..12);
            let h: f64 = rng.random_range(0.05..0.9);
            let b = budget(eps, delta);
            // decreasing in eps
            let b_up = budget(eps * 1.5, delta);
            assert!(calib_scalar(n, &b_up) < calib_scalar(n, &b));
            assert!(calib_gp(n, &b_up, h, 2) < calib_gp(n, &b, h, 2));
            assert!(calib_tree(&b_up, m) < calib_tree(&b, m));
            // decreasing in n
            assert!(calib_scalar(n * 2, &b) < calib_scalar(n, &b));
            assert!(calib_gp(n * 2, &b, h, 2) < calib_gp(n, &b, h, 2));
            // increasing in M
            assert!(calib_tree(&b, m + 1) > calib_tree(&b, m));
            // increasing in ln(1/delta)
            let b_leak = budget(eps, delta / 10.0);
            assert!(calib_scalar(n, &b_leak) > calib_scalar(n, &b));
            assert!(calib_tree(&b_leak, m) > calib_tree(&b, m));
        }
    }

    #[test]
    fn scalar_gauss_deterministic() {
        let sigma = 0.7;
        let a = scalar_gauss(0.3, sigma, &mut RngStream::new(5).child(1).rng()).unwrap();
        let b = scalar_gauss(0.3, sigma, &mut RngStream::new(5).child(1).rng()).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            scalar_gauss(0.3, 0.0, &mut RngStream::new(5).rng()),
            Err(Error::NonPositiveSigma(_))
        ));
    }

    #[test]
    fn scalar_gauss_moments() {
        let mut rng = RngStream::new(6).rng();
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| scalar_gauss(0.0, 1.0, &mut rng).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        let mut rng = RngStream::new(7).rng();
        let draws: Vec<f64> = (0..n)
            .map(|_| scalar_gauss(0.0, 2.0, &mut rng).unwrap())
            .collect();
        let var = draws.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((var - 4.0).abs() / 4.0 < 0.05, "var {var}");
    }

    #[test]
    fn gp_sample_is_fixed_function_and_reproducible() {
        let lat = Lattice::new(2, 8);
        let s1 = sample_gp(&lat, 0.3, 10, &mut RngStream::new(9).child(2).rng()).unwrap();
        let s2 = sample_gp(&lat, 0.3, 10, &mut RngStream::new(9).child(2).rng()).unwrap();
        for flat in 0..lat.len() {
            assert_eq!(s1.value_at(flat), s2.value_at(flat));
            assert_eq!(s1.value_at(flat), s1.value_at(flat));
        }
        let x = [0.37, 0.64];
        assert_eq!(s1.eval(&x), s1.eval(&x));
    }

    #[test]
    fn gp_sample_matches_eigenexpansion() {
        let lat = Lattice::new(2, 6);
        let s = sample_gp(&lat, 0.25, 12, &mut RngStream::new(11).rng())
            .unwrap()
            .with_scale(2.5);
        let basis = s.basis();
        for flat in 0..lat.len() {
            let manual: f64 = s
                .coeffs()
                .iter()
                .enumerate()
                .map(|(j, c)| c * basis.eigval(j).sqrt() * basis.eigvec_entry(j, flat))
                .sum();
            assert_relative_eq!(s.value_at(flat), 2.5 * manual, epsilon = 1e-10);
        }
    }

    #[test]
    fn gp_zero_mean_and_unit_variance_at_full_rank() {
        let lat = Lattice::new(1, 12);
        let h = 0.15;
        let basis = shared_basis(&lat, h).unwrap();
        let mut rng = RngStream::new(13).rng();
        let reps = 10_000;
        let probe = 5usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..reps {
            let s = sample_gp_with_basis(&basis, basis.rank(), &mut rng).unwrap();
            let v = s.value_at(probe);
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / reps as f64;
        let var = sumsq / reps as f64;
        assert!(mean.abs() < 0.04, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "variance {var} vs K(0) = 1");
    }

    #[test]
    fn gp_covariance_between_points() {
        let lat = Lattice::new(1, 10);
        let h = 0.2;
        let basis = shared_basis(&lat, h).unwrap();
        let (p, q) = (3usize, 5usize);
        let dist = (lat.point(p)[0] - lat.point(q)[0]).abs();
        let want = kernel_eval_1d(dist / h);
        let mut rng = RngStream::new(15).rng();
        let reps = 10_000;
        let mut acc = 0.0;
        for _ in 0..reps {
            let s = sample_gp_with_basis(&basis, basis.rank(), &mut rng).unwrap();
            acc += s.value_at(p) * s.value_at(q);
        }
        let cov = acc / reps as f64;
        assert!((cov - want).abs() < 0.05, "cov {cov} vs {want}");
    }

    #[test]
    fn eigenvalue_clipping_negligible() {
        for res in [10, 30, 50] {
            let lat = Lattice::new(2, res);
            let basis = GpBasis::new(&lat, 0.2).unwrap();
            assert!(
                basis.clipping_relative_error() < 1e-6,
                "res {res}: clipping error {}",
                basis.clipping_relative_error()
            );
        }
    }

    #[test]
    fn truncation_clamps_to_rank() {
        let lat = Lattice::new(1, 5);
        let s = sample_gp(&lat, 0.3, 999, &mut RngStream::new(17).rng()).unwrap();
        assert_eq!(s.coeffs().len(), 5);
    }
}
