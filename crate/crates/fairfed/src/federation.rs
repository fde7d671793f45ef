//! Step S1: per-site private estimators of class probabilities and
//! regression functions, their weighted central aggregation, and the
//! theory-driven weight, bandwidth and tree-depth selectors.

use crate::core::{stream, NoiseMode, PrivacyBudget, RngStream, SplitSite};
use crate::error::{Error, Flag, Flags, Result};
use crate::kde::{kde_on_lattice, Lattice};
use crate::privacy::{calib_gp, calib_scalar, sample_gp_with_basis, scalar_gauss, shared_basis};

/// Floor applied to the aggregated density denominator before forming the
/// regression ratio.
pub const DENSITY_FLOOR: f64 = 1e-8;
/// Clamp band for the aggregated class probabilities.
pub const PI_CLAMP: (f64, f64) = (1e-6, 1.0 - 1e-6);

/// One site's privatised release: noisy class fractions and noisy density
/// grids for both sensitive groups. All sites share one lattice.
#[derive(Debug, Clone)]
pub struct SiteEstimate {
    pub site_id: usize,
    pub pi_tilde: [f64; 2],
    pub px_grid: [Vec<f64>; 2],
    pub pxy_grid: [Vec<f64>; 2],
    pub lattice: Lattice,
}

/// Central aggregation of the site estimates: clamped class probabilities
/// and the clamped regression function on the lattice.
#[derive(Debug, Clone)]
pub struct RegressionEstimate {
    /// Aggregated class probabilities before clamping, kept for diagnostics.
    pub pi_raw: [f64; 2],
    /// Clamped class probabilities used downstream.
    pub pi_tilde: [f64; 2],
    /// Clamped regression function values per group on the lattice.
    pub eta_grid: [Vec<f64>; 2],
    /// Aggregated feature densities per group (diagnostics).
    pub px_grid: [Vec<f64>; 2],
    pub h: f64,
    pub lattice: Lattice,
    pub flags: Flags,
}

impl RegressionEstimate {
    /// Regression value at an arbitrary point: multilinear interpolation of
    /// the lattice values, clamped to `[0, 1]`.
    pub fn eta(&self, x: &[f64], a: u8) -> f64 {
        self.lattice
            .interpolate(&self.eta_grid[a as usize], x)
            .clamp(0.0, 1.0)
    }

    /// Group decision threshold `1/2 + tau (2a-1) / (2 pi_a)`.
    pub fn group_threshold(&self, a: u8, tau: f64) -> f64 {
        let sign = 2.0 * a as f64 - 1.0;
        0.5 + tau * sign / (2.0 * self.pi_tilde[a as usize])
    }
}

/// Smoothness and margin exponents used only by the theoretical selectors.
#[derive(Debug, Clone, Copy)]
pub struct TheoryParams {
    pub beta: f64,
    pub gamma: f64,
}

impl TheoryParams {
    pub fn new(beta: f64, gamma: f64) -> Result<Self> {
        if beta <= 0.0 || gamma < 0.0 {
            return Err(Error::InvalidTheoryParams(format!(
                "beta must be > 0 and gamma >= 0, got beta={beta}, gamma={gamma}"
            )));
        }
        Ok(Self { beta, gamma })
    }
}

/// Build one site's private estimate from its training half.
///
/// The class fraction gets scalar Gaussian noise; each density grid gets an
/// independent Gaussian-process draw scaled by the functional calibration.
/// The joint density sums over the positive-label subset but divides by the
/// whole group count.
pub fn site_estimate(
    split: &SplitSite,
    budget: &PrivacyBudget,
    h: f64,
    lattice: &Lattice,
    k_eigen: usize,
    noise: NoiseMode,
    run_stream: &RngStream,
) -> Result<SiteEstimate> {
    let n_s = split.n_train();
    if n_s == 0 {
        return Err(Error::EmptyDataset);
    }
    let sigma_pi = calib_scalar(n_s, budget);
    let mut pi_tilde = [0.0; 2];
    let mut px_grid: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut pxy_grid: [Vec<f64>; 2] = [Vec::new(), Vec::new()];

    let basis = match noise {
        NoiseMode::Calibrated => Some(shared_basis(lattice, h)?),
        NoiseMode::Disabled => None,
    };

    for a in 0..2u8 {
        let group: Vec<Vec<f64>> = split
            .train
            .iter()
            .filter(|r| r.a == a)
            .map(|r| r.x.clone())
            .collect();
        let positives: Vec<Vec<f64>> = split
            .train
            .iter()
            .filter(|r| r.a == a && r.y == 1)
            .map(|r| r.x.clone())
            .collect();
        let n_sa = group.len();
        if n_sa == 0 {
            return Err(Error::MissingGroup { group: a });
        }

        let frac = n_sa as f64 / n_s as f64;
        pi_tilde[a as usize] = match noise {
            NoiseMode::Calibrated => {
                let mut rng = run_stream
                    .site_mechanism(split.site_id, stream::PI_NOISE)
                    .child(a as u64)
                    .rng();
                scalar_gauss(frac, sigma_pi, &mut rng)?
            }
            NoiseMode::Disabled => frac,
        };

        let mut px = kde_on_lattice(&group, lattice, h, n_sa)?;
        let mut pxy = kde_on_lattice(&positives, lattice, h, n_sa)?;
        if let Some(basis) = &basis {
            let scale = calib_gp(n_sa, budget, h, lattice.dim());
            let w1 = sample_gp_with_basis(
                basis,
                k_eigen,
                &mut run_stream
                    .site_mechanism(split.site_id, stream::GP_PX)
                    .child(a as u64)
                    .rng(),
            )?;
            let w2 = sample_gp_with_basis(
                basis,
                k_eigen,
                &mut run_stream
                    .site_mechanism(split.site_id, stream::GP_PXY)
                    .child(a as u64)
                    .rng(),
            )?;
            for (flat, v) in px.iter_mut().enumerate() {
                *v += scale * w1.value_at(flat);
            }
            for (flat, v) in pxy.iter_mut().enumerate() {
                *v += scale * w2.value_at(flat);
            }
        }
        px_grid[a as usize] = px;
        pxy_grid[a as usize] = pxy;
    }

    Ok(SiteEstimate {
        site_id: split.site_id,
        pi_tilde,
        px_grid,
        pxy_grid,
        lattice: lattice.clone(),
    })
}

/// Weighted central aggregation: `pi = sum nu_s pi^s`, and the regression
/// ratio formed pointwise from the aggregated numerator and denominator.
pub fn aggregate(estimates: &[SiteEstimate], nu: &[f64], h: f64) -> Result<RegressionEstimate> {
    if estimates.len() != nu.len() {
        return Err(Error::WeightMismatch {
            estimates: estimates.len(),
            weights: nu.len(),
        });
    }
    assert!(!estimates.is_empty());
    let lattice = estimates[0].lattice.clone();
    for e in estimates {
        assert_eq!(e.lattice, lattice, "site estimates must share one lattice");
    }
    let n = lattice.len();
    let mut flags = Flags::new();

    let mut pi_raw = [0.0; 2];
    let mut eta_grid: [Vec<f64>; 2] = [vec![0.0; n], vec![0.0; n]];
    let mut px_agg: [Vec<f64>; 2] = [vec![0.0; n], vec![0.0; n]];
    for a in 0..2usize {
        let mut numer = vec![0.0; n];
        for (e, &w) in estimates.iter().zip(nu.iter()) {
            pi_raw[a] += w * e.pi_tilde[a];
            for flat in 0..n {
                px_agg[a][flat] += w * e.px_grid[a][flat];
                numer[flat] += w * e.pxy_grid[a][flat];
            }
        }
        for flat in 0..n {
            let mut den = px_agg[a][flat];
            if den <= DENSITY_FLOOR {
                den = DENSITY_FLOOR;
                flags.raise(Flag::DegenerateDensity);
            }
            let eta = numer[flat] / den;
            if !(0.0..=1.0).contains(&eta) {
                flags.raise(Flag::EstimateClamped);
            }
            eta_grid[a][flat] = eta.clamp(0.0, 1.0);
        }
    }

    let mut pi_tilde = [0.0; 2];
    for a in 0..2 {
        if !(PI_CLAMP.0..=PI_CLAMP.1).contains(&pi_raw[a]) {
            flags.raise(Flag::EstimateClamped);
        }
        pi_tilde[a] = pi_raw[a].clamp(PI_CLAMP.0, PI_CLAMP.1);
    }

    Ok(RegressionEstimate {
        pi_raw,
        pi_tilde,
        eta_grid,
        px_grid: px_agg,
        h,
        lattice,
        flags,
    })
}

/// Variance-balancing weights: `nu_s` proportional to
/// `min(N_s, N_s^2 eps_s^2 h^d)` and `mu_s` proportional to
/// `min(N_s, N_s^2 eps_s^2)`, each normalised to sum to one.
pub fn effective_weights(sizes: &[usize], eps: &[f64], h: f64, d: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(sizes.len(), eps.len());
    assert!(!sizes.is_empty());
    let hd = h.powi(d as i32);
    let u: Vec<f64> = sizes
        .iter()
        .zip(eps)
        .map(|(&n, &e)| {
            let n = n as f64;
            n.min(n * n * e * e * hd)
        })
        .collect();
    let up: Vec<f64> = sizes
        .iter()
        .zip(eps)
        .map(|(&n, &e)| {
            let n = n as f64;
            n.min(n * n * e * e)
        })
        .collect();
    let su: f64 = u.iter().sum();
    let sup: f64 = up.iter().sum();
    (
        u.iter().map(|v| v / su).collect(),
        up.iter().map(|v| v / sup).collect(),
    )
}

/// Homogeneous-setting bandwidth rate, evaluated with constant 1 and clamped
/// to `(1e-3, 0.99)`. A diagnostic: cross-validation is the practical
/// default.
pub fn theoretical_bandwidth(
    s: usize,
    n: usize,
    eps: f64,
    theory: TheoryParams,
    d: usize,
    fairness_active: bool,
) -> Result<f64> {
    if fairness_active && theory.gamma == 0.0 {
        return Err(Error::InvalidTheoryParams(
            "gamma must be positive when the fairness terms are active".into(),
        ));
    }
    let sn = s as f64 * n as f64;
    let sn2e2 = s as f64 * (n as f64).powi(2) * eps * eps;
    let g = theory.gamma;
    let b = theory.beta;
    let dd = d as f64;
    let mut h =
        sn.powf(-(1.0 + g) / (2.0 * b + dd)) + sn2e2.powf(-(1.0 + g) / (2.0 * b + 2.0 * dd));
    if fairness_active {
        h += sn.powf(-(1.0 + g) / (2.0 * g * b)) + sn2e2.powf(-(1.0 + g) / (2.0 * g * b));
    }
    Ok(h.clamp(1e-3 + f64::EPSILON, 0.99))
}

/// Tree depth rule `M = max(floor(log2(sum_s min(N_s, N_s^2 eps_s^2))) + 1, 6)`.
pub fn select_depth(sizes: &[usize], eps: &[f64]) -> usize {
    assert_eq!(sizes.len(), eps.len());
    let total: f64 = sizes
        .iter()
        .zip(eps)
        .map(|(&n, &e)| {
            let n = n as f64;
            n.min(n * n * e * e)
        })
        .sum();
    let m = (total.log2().floor() as i64 + 1).max(1) as usize;
    m.max(6)
}

/// Disparity-estimation error scale with all constants set to one;
/// diagnostics only.
#[allow(clippy::too_many_arguments)]
pub fn rho_scale(
    nu: &[f64],
    mu: &[f64],
    sizes: &[usize],
    eps: &[f64],
    h: f64,
    d: usize,
    theory: TheoryParams,
) -> f64 {
    let hd = h.powi(d as i32);
    let mut reg_var = 0.0;
    let mut reg_max = 0.0f64;
    let mut reg_priv = 0.0;
    for ((&w, &n), &e) in nu.iter().zip(sizes).zip(eps) {
        let n = n as f64;
        reg_var += w * w / (n * hd);
        reg_max = reg_max.max(w / (n * hd));
        reg_priv += w * w / (n * n * e * e * hd * hd);
    }
    let reg = (reg_var.sqrt() + reg_max + h.powf(theory.beta) + reg_priv.sqrt()).powf(theory.gamma);
    let mut tail_var = 0.0;
    let mut tail_max = 0.0f64;
    let mut tail_priv = 0.0;
    for ((&w, &n), &e) in mu.iter().zip(sizes).zip(eps) {
        let n = n as f64;
        tail_var += w * w / n;
        tail_max = tail_max.max(w / n);
        tail_priv += w * w / (n * n * e * e);
    }
    reg + tail_var.sqrt() + tail_max + tail_priv.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{LabeledRecord, SiteDataset};
    use crate::kde::kde_eval;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn toy_split(n: usize, seed: u64) -> SplitSite {
        let mut rng = RngStream::new(seed).rng();
        let records: Vec<LabeledRecord> = (0..2 * n)
            .map(|_| {
                let a = u8::from(rng.random::<f64>() < 0.4);
                let x = vec![rng.random::<f64>(), rng.random::<f64>()];
                let y = u8::from(rng.random::<f64>() < x[0]);
                LabeledRecord::new(x, a, y)
            })
            .collect();
        SiteDataset::new(0, records).split(&mut RngStream::new(seed).child(stream::SPLIT).rng())
    }

    fn budget() -> PrivacyBudget {
        PrivacyBudget::new(1.0, 1e-4).unwrap()
    }

    #[test]
    fn zero_noise_pi_is_empirical_fraction() {
        let mut split = toy_split(100, 1);
        // force 30 of 100 training records into group 1
        for (i, r) in split.train.iter_mut().enumerate() {
            r.a = u8::from(i < 30);
        }
        let lat = Lattice::new(2, 6);
        let est = site_estimate(
            &split,
            &budget(),
            0.2,
            &lat,
            35,
            NoiseMode::Disabled,
            &RngStream::new(1),
        )
        .unwrap();
        assert_relative_eq!(est.pi_tilde[1], 0.3, epsilon = 1e-12);
        assert_relative_eq!(est.pi_tilde[0], 0.7, epsilon = 1e-12);
    }

    #[test]
    fn zero_noise_all_positive_makes_joint_equal_marginal() {
        let mut split = toy_split(60, 2);
        for r in split.train.iter_mut() {
            r.y = 1;
        }
        let lat = Lattice::new(2, 5);
        let est = site_estimate(
            &split,
            &budget(),
            0.25,
            &lat,
            35,
            NoiseMode::Disabled,
            &RngStream::new(2),
        )
        .unwrap();
        for a in 0..2 {
            for flat in 0..lat.len() {
                assert_relative_eq!(est.pxy_grid[a][flat], est.px_grid[a][flat], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn noisy_pi_concentrates_on_empirical_fraction() {
        let mut split = toy_split(100, 3);
        for (i, r) in split.train.iter_mut().enumerate() {
            r.a = u8::from(i < 30);
        }
        let lat = Lattice::new(2, 4);
        let sigma = calib_scalar(split.n_train(), &budget());
        let reps = 200;
        let mut sum = 0.0;
        for rep in 0..reps {
            let est = site_estimate(
                &split,
                &budget(),
                0.2,
                &lat,
                10,
                NoiseMode::Calibrated,
                &RngStream::new(1000 + rep),
            )
            .unwrap();
            sum += est.pi_tilde[1];
        }
        let mean = sum / reps as f64;
        assert!(
            (mean - 0.3).abs() <= 3.0 * sigma / (reps as f64).sqrt(),
            "mean {mean}, sigma {sigma}"
        );
    }

    #[test]
    fn aggregate_identity_for_single_site() {
        let split = toy_split(80, 4);
        let lat = Lattice::new(2, 6);
        let est = site_estimate(
            &split,
            &budget(),
            0.2,
            &lat,
            35,
            NoiseMode::Disabled,
            &RngStream::new(4),
        )
        .unwrap();
        let agg = aggregate(std::slice::from_ref(&est), &[1.0], 0.2).unwrap();
        for a in 0..2usize {
            for flat in 0..lat.len() {
                let want = (est.pxy_grid[a][flat] / est.px_grid[a][flat]).clamp(0.0, 1.0);
                assert_relative_eq!(agg.eta_grid[a][flat], want, epsilon = 1e-12);
            }
        }
        // and the ratio equals the direct non-private KDE ratio
        let group: Vec<Vec<f64>> = split
            .train
            .iter()
            .filter(|r| r.a == 1)
            .map(|r| r.x.clone())
            .collect();
        let pos: Vec<Vec<f64>> = split
            .train
            .iter()
            .filter(|r| r.a == 1 && r.y == 1)
            .map(|r| r.x.clone())
            .collect();
        for flat in (0..lat.len()).step_by(7) {
            let q = lat.point(flat);
            let num = kde_eval(&pos, &q, 0.2, group.len()).unwrap();
            let den = kde_eval(&group, &q, 0.2, group.len()).unwrap();
            assert_relative_eq!(
                agg.eta_grid[1][flat],
                (num / den).clamp(0.0, 1.0),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn aggregate_weighted_mean_of_pi() {
        let split = toy_split(50, 5);
        let lat = Lattice::new(2, 4);
        let mut e1 = site_estimate(
            &split,
            &budget(),
            0.2,
            &lat,
            10,
            NoiseMode::Disabled,
            &RngStream::new(5),
        )
        .unwrap();
        let mut e2 = e1.clone();
        e1.pi_tilde[1] = 0.2;
        e2.pi_tilde[1] = 0.4;
        let agg = aggregate(&[e1, e2], &[0.5, 0.5], 0.2).unwrap();
        assert_relative_eq!(agg.pi_tilde[1], 0.3, epsilon = 1e-12);
    }

    #[test]
    fn identical_sites_zero_noise_match_single_site() {
        let split = toy_split(70, 6);
        let lat = Lattice::new(2, 5);
        let est = site_estimate(
            &split,
            &budget(),
            0.3,
            &lat,
            10,
            NoiseMode::Disabled,
            &RngStream::new(6),
        )
        .unwrap();
        let single = aggregate(std::slice::from_ref(&est), &[1.0], 0.3).unwrap();
        let double = aggregate(&[est.clone(), est], &[0.5, 0.5], 0.3).unwrap();
        for a in 0..2usize {
            for flat in 0..lat.len() {
                assert_relative_eq!(
                    double.eta_grid[a][flat],
                    single.eta_grid[a][flat],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn aggregate_permutation_equivariant() {
        let s1 = toy_split(40, 7);
        let s2 = {
            let mut s = toy_split(60, 8);
            s.site_id = 1;
            s
        };
        let lat = Lattice::new(2, 4);
        let e1 = site_estimate(
            &s1,
            &budget(),
            0.2,
            &lat,
            10,
            NoiseMode::Disabled,
            &RngStream::new(7),
        )
        .unwrap();
        let e2 = site_estimate(
            &s2,
            &budget(),
            0.2,
            &lat,
            10,
            NoiseMode::Disabled,
            &RngStream::new(8),
        )
        .unwrap();
        let fwd = aggregate(&[e1.clone(), e2.clone()], &[0.3, 0.7], 0.2).unwrap();
        let rev = aggregate(&[e2, e1], &[0.7, 0.3], 0.2).unwrap();
        assert_eq!(fwd.pi_raw, rev.pi_raw);
        assert_eq!(fwd.eta_grid, rev.eta_grid);
    }

    #[test]
    fn zero_noise_pis_sum_to_one() {
        let split = toy_split(90, 9);
        let lat = Lattice::new(2, 4);
        let est = site_estimate(
            &split,
            &budget(),
            0.2,
            &lat,
            10,
            NoiseMode::Disabled,
            &RngStream::new(9),
        )
        .unwrap();
        let agg = aggregate(std::slice::from_ref(&est), &[1.0], 0.2).unwrap();
        assert_relative_eq!(agg.pi_raw[0] + agg.pi_raw[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn weights_homogeneous_are_uniform() {
        let (nu, mu) = effective_weights(&[2000, 2000, 2000], &[1.0, 1.0, 1.0], 0.2, 2);
        for w in nu.iter().chain(mu.iter()) {
            assert_relative_eq!(*w, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn weights_min_branch_example() {
        let (_, mu) = effective_weights(&[100, 10_000], &[1.0, 0.01], 0.2, 2);
        assert_relative_eq!(mu[0], 100.0 / 10_100.0, epsilon = 1e-12);
        assert_relative_eq!(mu[1], 10_000.0 / 10_100.0, epsilon = 1e-12);
    }

    #[test]
    fn weights_normalised_and_scale_invariant_within_branch() {
        let mut rng = RngStream::new(10).rng();
        for _ in 0..50 {
            let s = rng.random_range(1..6);
            let sizes: Vec<usize> = (0..s).map(|_| rng.random_range(10..10_000)).collect();
            let eps: Vec<f64> = (0..s).map(|_| rng.random_range(0.01..4.0)).collect();
            let (nu, mu) = effective_weights(&sizes, &eps, 0.3, 2);
            assert_relative_eq!(nu.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert_relative_eq!(mu.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        // all sites in the N-branch: scaling N leaves weights unchanged
        let sizes = [100usize, 200, 400];
        let eps = [5.0, 5.0, 5.0]; // N^2 eps^2 >> N
        let (nu1, mu1) = effective_weights(&sizes, &eps, 0.3, 2);
        let scaled: Vec<usize> = sizes.iter().map(|&n| 3 * n).collect();
        let (nu2, mu2) = effective_weights(&scaled, &eps, 0.3, 2);
        for (a, b) in nu1.iter().zip(&nu2).chain(mu1.iter().zip(&mu2)) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn bandwidth_rate_example() {
        let theory = TheoryParams::new(1.0, 1.0).unwrap();
        let h = theoretical_bandwidth(1, 10_000, 1.0, theory, 2, true).unwrap();
        let want = 1e-2 + 1e8f64.powf(-1.0 / 3.0) + 1e-4 + 1e-8;
        assert_relative_eq!(h, want, epsilon = 1e-10);
        assert_relative_eq!(h, 0.0122544, epsilon = 1e-4);
        // inactive fairness drops the last two terms
        let h0 = theoretical_bandwidth(1, 10_000, 1.0, theory, 2, false).unwrap();
        assert_relative_eq!(h0, 1e-2 + 1e8f64.powf(-1.0 / 3.0), epsilon = 1e-10);
        // eps -> infinity recovers the non-private terms
        let hinf = theoretical_bandwidth(1, 10_000, 1e9, theory, 2, false).unwrap();
        assert_relative_eq!(hinf, 1e-2, epsilon = 1e-6);
        // gamma = 0 with active fairness is rejected
        let t0 = TheoryParams::new(1.0, 0.0).unwrap();
        assert!(theoretical_bandwidth(1, 100, 1.0, t0, 2, true).is_err());
    }

    #[test]
    fn rho_scale_positive_and_shrinks_with_data() {
        let theory = TheoryParams::new(1.0, 1.0).unwrap();
        let small = rho_scale(&[1.0], &[1.0], &[500], &[1.0], 0.2, 2, theory);
        let large = rho_scale(&[1.0], &[1.0], &[50_000], &[1.0], 0.2, 2, theory);
        assert!(small > 0.0 && large > 0.0);
        assert!(large < small);
    }

    #[test]
    fn depth_selection_rule() {
        assert_eq!(select_depth(&[2000, 2000, 2000], &[1.0, 1.0, 1.0]), 13);
        assert_eq!(select_depth(&[10], &[0.1]), 6); // max(4, 6)
        assert_eq!(select_depth(&[64], &[10.0]), 7); // power-of-two edge
    }
}
