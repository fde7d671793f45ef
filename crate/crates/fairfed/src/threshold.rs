//! Step S2: private threshold search.
//!
//! The federated path bins calibration z-scores into per-site dyadic count
//! trees with per-node Gaussian noise, evaluates the disparity curve on a
//! fixed grid through canonical-cover tail queries, corrects it to be
//! non-increasing, and picks the smallest-magnitude grid point whose
//! corrected disparity lands in the selection band.
//!
//! The single-server path keeps the exact empirical step curve and shifts it
//! vertically by one calibrated Gaussian draw before scanning breakpoints.

use crate::core::{stream, NoiseMode, PrivacyBudget, RngStream, SplitSite};
use crate::error::{Error, Flag, Flags, Result};
use crate::federation::RegressionEstimate;
use crate::privacy::{calib_cdp_shift, calib_tree, scalar_gauss};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

/// Calibration z-scores grouped by site and sensitive group:
/// `z = 2 (2a - 1) pi_a (eta_a(x) - 1/2)`, clamped to `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct ZScores {
    pub sites: Vec<SiteZ>,
}

#[derive(Debug, Clone)]
pub struct SiteZ {
    pub site_id: usize,
    /// Calibration size of the site (enters the omega tolerance).
    pub n_calib: usize,
    /// `z[a]` holds group-`a` scores.
    pub z: [Vec<f64>; 2],
}

/// Z-score of one record.
pub fn z_score(est: &RegressionEstimate, x: &[f64], a: u8) -> f64 {
    let sign = 2.0 * a as f64 - 1.0;
    let eta = est.eta(x, a);
    (2.0 * sign * est.pi_tilde[a as usize] * (eta - 0.5)).clamp(-1.0, 1.0)
}

/// Z-scores for every calibration record of every site.
pub fn compute_z(splits: &[SplitSite], est: &RegressionEstimate) -> ZScores {
    let sites = splits
        .iter()
        .map(|s| {
            let mut z: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
            for r in &s.calib {
                z[r.a as usize].push(z_score(est, &r.x, r.a));
            }
            SiteZ {
                site_id: s.site_id,
                n_calib: s.calib.len(),
                z,
            }
        })
        .collect();
    ZScores { sites }
}

/// Per-site, per-group dyadic count tree with independent Gaussian noise on
/// every node of every level. Levels are 1-based in the math; internally
/// level `l` lives at index `l - 1` and holds `2^l` nodes.
///
/// Leaf `j` covers `[-1 + (j-1) 2^{1-M}, -1 + j 2^{1-M})`, the last leaf
/// right-closed.
#[derive(Debug, Clone)]
pub struct NoisyTree {
    pub site_id: usize,
    pub group: u8,
    pub depth: usize,
    /// Clean counts; retained for tests and sensitivity checks only.
    pub clean: Vec<Vec<f64>>,
    /// Noisy releases `N = count + w`.
    pub noisy: Vec<Vec<f64>>,
}

impl NoisyTree {
    pub fn leaves(&self) -> usize {
        1 << self.depth
    }

    pub fn clean_node(&self, level: usize, k: usize) -> f64 {
        self.clean[level - 1][k - 1]
    }

    pub fn noisy_node(&self, level: usize, k: usize) -> f64 {
        self.noisy[level - 1][k - 1]
    }

    /// Noisy group total `N_{s,a} = N_{s,a,1,1} + N_{s,a,1,2}`.
    pub fn noisy_total(&self) -> f64 {
        self.noisy[0][0] + self.noisy[0][1]
    }
}

/// Smallest bin length for a depth-`M` tree, `theta = 2^{1-M}`.
pub fn bin_width(depth: usize) -> f64 {
    2f64.powi(1 - depth as i32)
}

/// Evaluation grid `tau_j = -1 + (j-1) 2^{1-M}`, `j in [2^M + 1]`.
pub fn evaluation_grid(depth: usize) -> Vec<f64> {
    let theta = bin_width(depth);
    (0..=(1usize << depth))
        .map(|j| -1.0 + j as f64 * theta)
        .collect()
}

/// Bin the z-scores into leaves, sum children into parents, then add
/// independent `N(0, sigma_tree^2)` noise to every node.
pub fn build_tree(
    z: &[f64],
    depth: usize,
    budget: &PrivacyBudget,
    noise: NoiseMode,
    rng: &mut ChaCha12Rng,
) -> Result<NoisyTree> {
    assert!(depth >= 1);
    let leaves = 1usize << depth;
    let theta = bin_width(depth);
    let mut leaf_counts = vec![0.0f64; leaves];
    for &v in z {
        if !(-1.0..=1.0).contains(&v) || v.is_nan() {
            return Err(Error::ZOutOfRange(v));
        }
        // half-open bins, z = 1 assigned to the last leaf
        let idx = (((v + 1.0) / theta).floor() as usize).min(leaves - 1);
        leaf_counts[idx] += 1.0;
    }
    let mut clean: Vec<Vec<f64>> = Vec::with_capacity(depth);
    clean.push(leaf_counts);
    // clean[0] currently holds the leaves; build parents bottom-up then flip
    while clean.last().expect("non-empty").len() > 2 {
        let child = clean.last().expect("non-empty");
        let parent: Vec<f64> = child.chunks_exact(2).map(|c| c[0] + c[1]).collect();
        clean.push(parent);
    }
    clean.reverse(); // clean[l-1] is level l, clean[depth-1] the leaves

    let noisy = match noise {
        NoiseMode::Disabled => clean.clone(),
        NoiseMode::Calibrated => {
            let sigma = calib_tree(budget, depth);
            let normal = Normal::new(0.0, sigma).expect("positive sigma");
            clean
                .iter()
                .map(|level| level.iter().map(|&c| c + normal.sample(rng)).collect())
                .collect()
        }
    };

    Ok(NoisyTree {
        site_id: 0,
        group: 0,
        depth,
        clean,
        noisy,
    })
}

/// Canonical dyadic cover of the leaf suffix `[j, 2^M]`: the minimal set of
/// nodes tiling it, at most one per level. `j = 1` has no in-tree cover (the
/// tree has no single root node), so the full population is read as the sum
/// of the two level-1 nodes. `j = 2^M + 1` is the empty suffix.
fn suffix_cover(depth: usize, j: usize) -> Vec<(usize, usize)> {
    let leaves = 1usize << depth;
    debug_assert!((1..=leaves + 1).contains(&j));
    if j == 1 {
        return vec![(1, 1), (1, 2)];
    }
    let mut cover = Vec::new();
    let mut lo = j;
    while lo <= leaves {
        // largest block size 2^t aligned at lo and fitting in the suffix
        let mut t = 0usize;
        while (lo - 1).is_multiple_of(1 << (t + 1)) && lo + (1 << (t + 1)) - 1 <= leaves {
            t += 1;
        }
        let level = depth - t;
        let k = (lo - 1) / (1 << t) + 1;
        cover.push((level, k));
        lo += 1 << t;
    }
    cover
}

/// Noisy tail count for grid index `j`: the sum of the noisy nodes covering
/// leaves `j..2^M`.
pub fn tail_query(tree: &NoisyTree, j: usize) -> Result<f64> {
    tail_query_with(tree, j, |t, l, k| t.noisy_node(l, k))
}

/// As [`tail_query`] but over the clean counts (test paths).
pub fn tail_query_clean(tree: &NoisyTree, j: usize) -> Result<f64> {
    tail_query_with(tree, j, |t, l, k| t.clean_node(l, k))
}

fn tail_query_with(
    tree: &NoisyTree,
    j: usize,
    node: impl Fn(&NoisyTree, usize, usize) -> f64,
) -> Result<f64> {
    let max = tree.leaves() + 1;
    if j < 1 || j > max {
        return Err(Error::IndexOutOfRange { index: j, max });
    }
    if j == max {
        return Ok(0.0);
    }
    Ok(suffix_cover(tree.depth, j)
        .into_iter()
        .map(|(l, k)| node(tree, l, k))
        .sum())
}

/// Both group trees of one site.
#[derive(Debug, Clone)]
pub struct SiteTrees {
    pub site_id: usize,
    /// Indexed by sensitive group.
    pub trees: [NoisyTree; 2],
}

/// Build the pair of noisy trees for every site from the z-scores.
pub fn build_site_trees(
    z: &ZScores,
    depth: usize,
    budgets: &[PrivacyBudget],
    noise: NoiseMode,
    run_stream: &RngStream,
) -> Result<Vec<SiteTrees>> {
    assert_eq!(z.sites.len(), budgets.len());
    z.sites
        .iter()
        .zip(budgets)
        .map(|(site, budget)| {
            let make = |a: usize| -> Result<NoisyTree> {
                let mut rng = run_stream
                    .site_mechanism(site.site_id, stream::TREE)
                    .child(a as u64)
                    .rng();
                let mut tree = build_tree(&site.z[a], depth, budget, noise, &mut rng)?;
                tree.site_id = site.site_id;
                tree.group = a as u8;
                Ok(tree)
            };
            Ok(SiteTrees {
                site_id: site.site_id,
                trees: [make(0)?, make(1)?],
            })
        })
        .collect()
}

/// The disparity curve on the evaluation grid, plus its monotone-corrected
/// version once a correction has run.
#[derive(Debug, Clone)]
pub struct DisparityCurve {
    pub grid: Vec<f64>,
    pub dd: Vec<f64>,
    pub dd_mono: Option<Vec<f64>>,
    pub omega: f64,
    pub flags: Flags,
}

impl DisparityCurve {
    /// Values scanned by the selection: corrected if present, raw otherwise.
    pub fn selection_values(&self) -> &[f64] {
        self.dd_mono.as_deref().unwrap_or(&self.dd)
    }

    /// Debug rows `(tau, dd, dd_mono?)`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tau", "dd", "dd_mono"])
            .map_err(|e| Error::ParseError(e.to_string()))?;
        for (j, &tau) in self.grid.iter().enumerate() {
            let mono = self
                .dd_mono
                .as_ref()
                .map(|m| format!("{}", m[j]))
                .unwrap_or_default();
            w.write_record(&[format!("{tau}"), format!("{}", self.dd[j]), mono])
                .map_err(|e| Error::ParseError(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Weighted disparity curve over the grid:
/// `DD_s(tau_j) = Tail_{s,1}(tau_j)/N_{s,1} - (N_{s,0} - Tail_{s,0}(tau_j))/N_{s,0}`,
/// aggregated as `sum_s mu_s DD_s`. A non-positive noisy group total is
/// floored at 1 and flagged.
pub fn dd_grid(site_trees: &[SiteTrees], mu: &[f64]) -> Result<DisparityCurve> {
    if site_trees.len() != mu.len() {
        return Err(Error::WeightMismatch {
            estimates: site_trees.len(),
            weights: mu.len(),
        });
    }
    assert!(!site_trees.is_empty());
    let depth = site_trees[0].trees[0].depth;
    for st in site_trees {
        for t in &st.trees {
            if t.depth != depth {
                return Err(Error::DepthMismatch(depth, t.depth));
            }
        }
    }
    let grid = evaluation_grid(depth);
    let mut flags = Flags::new();
    let mut dd = vec![0.0; grid.len()];
    for (st, &w) in site_trees.iter().zip(mu) {
        let mut totals = [0.0; 2];
        for (total, tree) in totals.iter_mut().zip(&st.trees) {
            let t = tree.noisy_total();
            if t <= 0.0 {
                flags.raise(Flag::NoisyCountFloored);
                *total = 1.0;
            } else {
                *total = t;
            }
        }
        for j in 1..=grid.len() {
            let tail1 = tail_query(&st.trees[1], j)?;
            let tail0 = tail_query(&st.trees[0], j)?;
            dd[j - 1] += w * (tail1 / totals[1] - (totals[0] - tail0) / totals[0]);
        }
    }
    Ok(DisparityCurve {
        grid,
        dd,
        dd_mono: None,
        omega: 0.0,
        flags,
    })
}

/// Tolerance for the monotone correction,
/// `omega = C_omega sqrt(sum_s mu_s^2 M^4 ln(1/delta_s) ln(M/eta) / (n_s^2 eps_s^2))`.
pub fn omega_tolerance(
    mu: &[f64],
    depth: usize,
    budgets: &[PrivacyBudget],
    n_calib: &[usize],
    eta_tol: f64,
    c_omega: f64,
) -> f64 {
    assert_eq!(mu.len(), budgets.len());
    assert_eq!(mu.len(), n_calib.len());
    let m = depth as f64;
    let inner: f64 = mu
        .iter()
        .zip(budgets)
        .zip(n_calib)
        .map(|((&w, b), &n)| {
            w * w * m.powi(4) * (1.0 / b.delta).ln() * (m / eta_tol).ln()
                / ((n as f64).powi(2) * b.epsilon * b.epsilon)
        })
        .sum();
    c_omega * inner.sqrt()
}

fn is_non_increasing(g: &[f64]) -> bool {
    g.windows(2).all(|w| w[0] >= w[1])
}

/// Forward non-increasing fit: returns the input unchanged when it is
/// already non-increasing, `None` when no fit within sup-distance `omega`
/// exists, and otherwise a non-increasing sequence within `omega` of `g`.
pub fn monotone_fit(g: &[f64], omega: f64) -> Option<Vec<f64>> {
    assert!(omega >= 0.0);
    if is_non_increasing(g) {
        return Some(g.to_vec());
    }
    let mut f = Vec::with_capacity(g.len());
    f.push(g[0] + omega);
    for i in 1..g.len() {
        let fi = f[i - 1].min(g[i] + omega);
        if fi < g[i] - omega {
            return None;
        }
        f.push(fi);
    }
    Some(f)
}

/// Relaxed backward fit that always returns a sequence within sup-distance
/// `omega` of `g` (clamped into `[0, 1]` bounds where the tolerance allows),
/// as close to non-increasing as the bias budget permits. The output is not
/// guaranteed monotone.
pub fn monotone_fit_relaxed(g: &[f64], omega: f64) -> Vec<f64> {
    assert!(omega >= 0.0);
    if is_non_increasing(g) {
        return g.to_vec();
    }
    let n = g.len();
    let mut f = vec![0.0; n];
    f[n - 1] = (g[n - 1] + omega).min(1.0);
    for i in (0..n - 1).rev() {
        let hi = (g[i] + omega).min(1.0);
        let lo = (g[i] - omega).max(0.0);
        f[i] = hi.min(lo.max(f[i + 1]));
    }
    f
}

/// Threshold selection on the corrected grid curve. Zero when the curve at
/// `tau = 0` is already within `alpha`; otherwise the smallest-magnitude
/// grid point whose value lands in `[alpha - rho_star, alpha + rho_star]`
/// in absolute value, ties between `+tau` and `-tau` broken positive. When
/// the band is missed entirely the nearest-to-`alpha` point is returned and
/// flagged.
pub fn select_threshold(curve: &DisparityCurve, alpha: f64, rho_star: f64) -> (f64, Flags) {
    assert!(rho_star > 0.0, "rho_star must be positive");
    let values = curve.selection_values();
    let grid = &curve.grid;
    let mut flags = Flags::new();

    let zero_idx = (grid.len() - 1) / 2;
    debug_assert_eq!(grid[zero_idx], 0.0);
    if values[zero_idx].abs() <= alpha {
        return (0.0, flags);
    }

    // grid indices ordered by |tau|, positive before negative on ties
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&p, &q| {
        grid[p]
            .abs()
            .total_cmp(&grid[q].abs())
            .then_with(|| grid[q].total_cmp(&grid[p]))
    });

    for &j in &order {
        let v = values[j].abs();
        if v >= alpha - rho_star && v <= alpha + rho_star {
            return (grid[j], flags);
        }
    }

    flags.raise(Flag::InfeasibleBand);
    let best = order
        .iter()
        .copied()
        .min_by(|&p, &q| {
            (values[p].abs() - alpha)
                .abs()
                .total_cmp(&(values[q].abs() - alpha).abs())
        })
        .expect("non-empty grid");
    (grid[best], flags)
}

/// Exact empirical disparity step curve for the single-server path, shifted
/// vertically by one Gaussian draw.
#[derive(Debug, Clone)]
pub struct StepCurve {
    /// Group-1 z-scores, ascending.
    z1: Vec<f64>,
    /// Group-0 z-scores, ascending.
    z0: Vec<f64>,
    n1: usize,
    n0: usize,
    /// The single vertical noise shift.
    pub w: f64,
}

impl StepCurve {
    /// `#{z1 >= tau}/n1 - #{z0 <= tau}/n0 + w`.
    pub fn eval(&self, tau: f64) -> f64 {
        let ge = self.z1.len() - self.z1.partition_point(|&v| v < tau);
        let le = self.z0.partition_point(|&v| v <= tau);
        ge as f64 / self.n1 as f64 - le as f64 / self.n0 as f64 + self.w
    }

    /// All candidate thresholds: the z-scores of both groups, ascending.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self.z1.iter().chain(self.z0.iter()).copied().collect();
        b.sort_by(f64::total_cmp);
        b
    }
}

/// Build the single-server disparity curve from one site's calibration data,
/// with `w ~ N(0, sigma^2)`, `sigma = 2 sqrt(2 ln(1.25/delta)) / ((n0 ^ n1) eps)`.
pub fn cdp_curve(
    split: &SplitSite,
    est: &RegressionEstimate,
    budget: &PrivacyBudget,
    noise: NoiseMode,
    run_stream: &RngStream,
) -> Result<StepCurve> {
    let mut z: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for r in &split.calib {
        z[r.a as usize].push(z_score(est, &r.x, r.a));
    }
    for a in 0..2u8 {
        if z[a as usize].is_empty() {
            return Err(Error::MissingGroup { group: a });
        }
    }
    let n0 = z[0].len();
    let n1 = z[1].len();
    let w = match noise {
        NoiseMode::Disabled => 0.0,
        NoiseMode::Calibrated => {
            let sigma = calib_cdp_shift(n0.min(n1), budget);
            let mut rng = run_stream
                .site_mechanism(split.site_id, stream::CDP_SHIFT)
                .rng();
            scalar_gauss(0.0, sigma, &mut rng)?
        }
    };
    let [mut z0, mut z1] = z;
    z0.sort_by(f64::total_cmp);
    z1.sort_by(f64::total_cmp);
    Ok(StepCurve { z1, z0, n1, n0, w })
}

/// Smallest-magnitude cut-off at which the shifted step curve enters
/// `[-alpha, alpha]`, scanning breakpoints exactly as the indicators define
/// them. A step that jumps over the band entirely falls back to the
/// breakpoint of smallest curve magnitude, flagged.
pub fn cdp_select(curve: &StepCurve, alpha: f64) -> (f64, Flags) {
    assert!(alpha >= 0.0);
    let mut flags = Flags::new();
    let at_zero = curve.eval(0.0);
    if at_zero.abs() <= alpha {
        return (0.0, flags);
    }
    let breakpoints = curve.breakpoints();
    if at_zero > alpha {
        for &tau in breakpoints.iter().filter(|&&t| t > 0.0) {
            let v = curve.eval(tau);
            if v <= alpha {
                if v < -alpha {
                    break; // jumped over the band
                }
                return (tau, flags);
            }
        }
    } else {
        for &tau in breakpoints.iter().rev().filter(|&&t| t < 0.0) {
            let v = curve.eval(tau);
            if v >= -alpha {
                if v > alpha {
                    break;
                }
                return (tau, flags);
            }
        }
    }
    flags.raise(Flag::InfeasibleJump);
    let best = breakpoints
        .iter()
        .copied()
        .min_by(|&p, &q| {
            curve
                .eval(p)
                .abs()
                .total_cmp(&curve.eval(q).abs())
                .then_with(|| p.abs().total_cmp(&q.abs()))
        })
        .unwrap_or(0.0);
    (best, flags)
}

/// Full federated threshold search: trees, grid curve, relaxed monotone
/// correction and band selection. Returns the selected threshold and the
/// curve (with corrections and flags) for diagnostics.
#[allow(clippy::too_many_arguments)]
pub fn fdp_threshold_search(
    splits: &[SplitSite],
    est: &RegressionEstimate,
    budgets: &[PrivacyBudget],
    mu: &[f64],
    depth: usize,
    alpha: f64,
    rho_star: f64,
    c_omega: f64,
    eta_tol: f64,
    noise: NoiseMode,
    run_stream: &RngStream,
) -> Result<(f64, DisparityCurve)> {
    let z = compute_z(splits, est);
    let trees = build_site_trees(&z, depth, budgets, noise, run_stream)?;
    let mut curve = dd_grid(&trees, mu)?;
    let n_calib: Vec<usize> = z.sites.iter().map(|s| s.n_calib).collect();
    curve.omega = omega_tolerance(mu, depth, budgets, &n_calib, eta_tol, c_omega);
    let corrected = monotone_fit_relaxed(&curve.dd, curve.omega);
    if !is_non_increasing(&corrected) {
        curve.flags.raise(Flag::NonMonotoneCorrection);
    }
    curve.dd_mono = Some(corrected);
    let (tau, flags) = select_threshold(&curve, alpha, rho_star);
    curve.flags.extend(&flags);
    Ok((tau, curve))
}

/// Debug serialisation of the trees: rows `(site, a, level, k, [clean,] noisy)`.
/// Clean counts are only written when `include_clean` is set; the default
/// privacy-honouring output omits them.
pub fn write_trees_csv<W: std::io::Write>(
    trees: &[SiteTrees],
    out: W,
    include_clean: bool,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if include_clean {
        w.write_record(["site", "a", "level", "k", "clean_count", "noisy_count"])
            .map_err(|e| Error::ParseError(e.to_string()))?;
    } else {
        w.write_record(["site", "a", "level", "k", "noisy_count"])
            .map_err(|e| Error::ParseError(e.to_string()))?;
    }
    for st in trees {
        for tree in &st.trees {
            for level in 1..=tree.depth {
                for k in 1..=(1usize << level) {
                    let mut rec = vec![
                        st.site_id.to_string(),
                        tree.group.to_string(),
                        level.to_string(),
                        k.to_string(),
                    ];
                    if include_clean {
                        rec.push(format!("{}", tree.clean_node(level, k)));
                    }
                    rec.push(format!("{}", tree.noisy_node(level, k)));
                    w.write_record(&rec)
                        .map_err(|e| Error::ParseError(e.to_string()))?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reference implementation of the tail query used to cross-check the
/// canonical-cover walk: sums every node whose leaf range starts at or after
/// `j` while its parent's range starts before `j`.
#[doc(hidden)]
pub fn tail_query_formula(tree: &NoisyTree, j: usize, clean: bool) -> f64 {
    let m = tree.depth;
    let mut total = 0.0;
    for l in 1..=m {
        for k in 1..=(1usize << l) {
            let left = (k - 1) * (1 << (m - l)) + 1;
            let parent_left = (k.div_ceil(2) - 1) * (1 << (m - l + 1)) + 1;
            if left >= j && parent_left < j {
                total += if clean {
                    tree.clean_node(l, k)
                } else {
                    tree.noisy_node(l, k)
                };
            }
        }
    }
    total
}
