//! Domain types, configuration, dataset validation and deterministic RNG
//! stream derivation shared by all other modules.

use crate::error::{Error, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// One observation: features in `[0,1]^d`, sensitive bit, label bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub x: Vec<f64>,
    pub a: u8,
    pub y: u8,
}

impl LabeledRecord {
    pub fn new(x: Vec<f64>, a: u8, y: u8) -> Self {
        debug_assert!(a <= 1 && y <= 1);
        Self { x, a, y }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// All records held by one site, before the train/calibration split.
#[derive(Debug, Clone)]
pub struct SiteDataset {
    pub site_id: usize,
    pub records: Vec<LabeledRecord>,
}

impl SiteDataset {
    pub fn new(site_id: usize, records: Vec<LabeledRecord>) -> Self {
        Self { site_id, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Uniform random permutation split with `n_s = ceil(N_s / 2)` training
    /// records; the remainder becomes calibration data.
    pub fn split(&self, rng: &mut ChaCha12Rng) -> SplitSite {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..self.records.len()).collect();
        idx.shuffle(rng);
        let n_train = self.records.len().div_ceil(2);
        let train = idx[..n_train]
            .iter()
            .map(|&i| self.records[i].clone())
            .collect();
        let calib = idx[n_train..]
            .iter()
            .map(|&i| self.records[i].clone())
            .collect();
        SplitSite {
            site_id: self.site_id,
            train,
            calib,
        }
    }
}

/// A site's data after the train/calibration split.
#[derive(Debug, Clone)]
pub struct SplitSite {
    pub site_id: usize,
    pub train: Vec<LabeledRecord>,
    pub calib: Vec<LabeledRecord>,
}

impl SplitSite {
    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn n_calib(&self) -> usize {
        self.calib.len()
    }

    /// Training records in group `a`, regardless of label.
    pub fn n_train_group(&self, a: u8) -> usize {
        self.train.iter().filter(|r| r.a == a).count()
    }

    /// Training count in cell `(a, y)`.
    pub fn n_train_cell(&self, a: u8, y: u8) -> usize {
        self.train.iter().filter(|r| r.a == a && r.y == y).count()
    }

    pub fn n_calib_group(&self, a: u8) -> usize {
        self.calib.iter().filter(|r| r.a == a).count()
    }

    /// Swap the roles of the two halves (for cross-fitting).
    pub fn swapped(&self) -> SplitSite {
        SplitSite {
            site_id: self.site_id,
            train: self.calib.clone(),
            calib: self.train.clone(),
        }
    }
}

/// What to do with feature coordinates outside `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainPolicy {
    #[default]
    Reject,
    Clamp,
}

/// A dataset that passed [`validate_dataset`]: domain-checked records plus
/// per-(a, y) cell counts.
#[derive(Debug, Clone)]
pub struct ValidatedDataset {
    pub records: Vec<LabeledRecord>,
    /// `counts[a][y]`
    pub counts: [[usize; 2]; 2],
}

impl ValidatedDataset {
    pub fn count(&self, a: u8, y: u8) -> usize {
        self.counts[a as usize][y as usize]
    }

    pub fn group_count(&self, a: u8) -> usize {
        self.counts[a as usize][0] + self.counts[a as usize][1]
    }
}

/// Check domain invariants and count the (a, y) cells. Both sensitive groups
/// must be present.
pub fn validate_dataset(
    records: &[LabeledRecord],
    policy: DomainPolicy,
) -> Result<ValidatedDataset> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = Vec::with_capacity(records.len());
    let mut counts = [[0usize; 2]; 2];
    for (index, rec) in records.iter().enumerate() {
        let mut rec = rec.clone();
        for v in rec.x.iter_mut() {
            if !v.is_finite() || *v < 0.0 || *v > 1.0 {
                match policy {
                    DomainPolicy::Reject => {
                        return Err(Error::OutOfDomain { index, value: *v });
                    }
                    DomainPolicy::Clamp => *v = v.clamp(0.0, 1.0),
                }
            }
        }
        counts[rec.a as usize][rec.y as usize] += 1;
        out.push(rec);
    }
    for a in 0..2u8 {
        if counts[a as usize][0] + counts[a as usize][1] == 0 {
            return Err(Error::MissingGroup { group: a });
        }
    }
    Ok(ValidatedDataset {
        records: out,
        counts,
    })
}

/// Per-site `(epsilon, delta)` pair governing every noise calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if epsilon <= 0.0 || !epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be > 0, got {epsilon}"
            )));
        }
        if delta <= 0.0 || delta >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "delta must be in (0,1), got {delta}"
            )));
        }
        Ok(Self { epsilon, delta })
    }

    /// Default leakage `delta = (N/2)^-2` for a site of size `n`.
    pub fn default_delta(n: usize) -> f64 {
        let half = (n as f64 / 2.0).max(2.0);
        half.powi(-2)
    }
}

/// Whether mechanisms draw calibrated noise or output their clean values.
/// `Disabled` exists for tests that check noiseless algebraic identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    #[default]
    Calibrated,
    Disabled,
}

/// Everything the pipeline needs to know that is not data: sites, budgets,
/// aggregation weights, the disparity level and the tuning constants of the
/// threshold search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FederationConfig {
    pub sites: usize,
    pub budgets: Vec<PrivacyBudget>,
    /// Regression aggregation weights, sum to 1.
    pub nu: Vec<f64>,
    /// Disparity aggregation weights, sum to 1.
    pub mu: Vec<f64>,
    /// Target disparity level, >= 0.
    pub alpha: f64,
    /// Optional safety margin subtracted from `alpha` inside the threshold
    /// selection only (reporting stays at the nominal level). Keeping the
    /// population disparity below `alpha` with high probability requires
    /// backing the selection target off by the estimation-error scale;
    /// zero reproduces the plain algorithms.
    pub alpha_backoff: f64,
    /// Bandwidth; `None` selects by cross-validation at run time.
    pub h: Option<f64>,
    /// Tree depth; `None` applies the depth-selection rule.
    pub depth: Option<usize>,
    /// Selection band half-width rho*.
    pub rho_star: f64,
    /// Monotone-correction tolerance constant.
    pub c_omega: f64,
    /// Tolerance probability eta in the omega formula.
    pub eta_tol: f64,
    /// Gaussian-process truncation rank.
    pub k_eigen: usize,
    /// Lattice points per axis for grid-sampled function estimates.
    pub grid_resolution: usize,
    pub noise: NoiseMode,
    pub policy: DomainPolicy,
}

impl FederationConfig {
    /// Homogeneous configuration: equal weights, one shared epsilon, default
    /// delta per site size.
    pub fn homogeneous(sites: usize, site_size: usize, epsilon: f64, alpha: f64) -> Result<Self> {
        let delta = PrivacyBudget::default_delta(site_size);
        let budget = PrivacyBudget::new(epsilon, delta)?;
        let w = 1.0 / sites as f64;
        let cfg = Self {
            sites,
            budgets: vec![budget; sites],
            nu: vec![w; sites],
            mu: vec![w; sites],
            alpha,
            alpha_backoff: 0.0,
            h: None,
            depth: None,
            rho_star: 0.03,
            c_omega: 0.1,
            eta_tol: 0.05,
            k_eigen: 35,
            grid_resolution: 30,
            noise: NoiseMode::Calibrated,
            policy: DomainPolicy::Reject,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.sites;
        if s == 0 {
            return Err(Error::InvalidConfig("need at least one site".into()));
        }
        if self.budgets.len() != s || self.nu.len() != s || self.mu.len() != s {
            return Err(Error::InvalidConfig(
                "budgets, nu and mu must all have one entry per site".into(),
            ));
        }
        for w in self.nu.iter().chain(self.mu.iter()) {
            if *w < 0.0 {
                return Err(Error::InvalidConfig("weights must be nonnegative".into()));
            }
        }
        let tol = 1e-9;
        if (self.nu.iter().sum::<f64>() - 1.0).abs() > tol {
            return Err(Error::InvalidConfig("nu weights must sum to 1".into()));
        }
        if (self.mu.iter().sum::<f64>() - 1.0).abs() > tol {
            return Err(Error::InvalidConfig("mu weights must sum to 1".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::InvalidConfig("alpha must be >= 0".into()));
        }
        if self.alpha_backoff < 0.0 {
            return Err(Error::InvalidConfig("alpha_backoff must be >= 0".into()));
        }
        if let Some(h) = self.h {
            if h <= 0.0 || h >= 1.0 {
                return Err(Error::InvalidConfig(format!("h must be in (0,1), got {h}")));
            }
        }
        if let Some(m) = self.depth {
            if m == 0 {
                return Err(Error::InvalidConfig("tree depth must be >= 1".into()));
            }
        }
        if self.rho_star <= 0.0 {
            return Err(Error::InvalidConfig("rho_star must be > 0".into()));
        }
        if self.eta_tol <= 0.0 || self.eta_tol >= 1.0 {
            return Err(Error::InvalidConfig("eta_tol must be in (0,1)".into()));
        }
        if self.k_eigen == 0 {
            return Err(Error::InvalidConfig("k_eigen must be >= 1".into()));
        }
        if self.grid_resolution < 2 {
            return Err(Error::InvalidConfig("grid_resolution must be >= 2".into()));
        }
        Ok(())
    }
}

/// Tags identifying which mechanism a derived RNG stream feeds. Keeping them
/// in one place guarantees distinct lineages across sub-mechanisms.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const PI_NOISE: u64 = 2;
    pub const GP_PX: u64 = 3;
    pub const GP_PXY: u64 = 4;
    pub const TREE: u64 = 5;
    pub const CDP_SHIFT: u64 = 6;
    pub const DATAGEN: u64 = 7;
    pub const PARTITION: u64 = 8;
    pub const CV_FOLDS: u64 = 9;
    pub const PREDICT: u64 = 10;
    pub const ORACLE: u64 = 11;
    pub const CELL: u64 = 12;
    pub const PILOT: u64 = 13;
}

/// Deterministic RNG stream: a master seed plus a lineage of integers
/// identifying (site, mechanism, replicate). Identical lineage and seed give
/// identical draws; distinct lineages are independent for all practical
/// purposes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    master_seed: u64,
    lineage: Vec<u64>,
}

impl RngStream {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master_seed,
            lineage: Vec::new(),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn lineage(&self) -> &[u64] {
        &self.lineage
    }

    /// Derive a child stream by appending one lineage element.
    pub fn child(&self, tag: u64) -> Self {
        let mut lineage = self.lineage.clone();
        lineage.push(tag);
        Self {
            master_seed: self.master_seed,
            lineage,
        }
    }

    /// Convenience for `(site, mechanism)` children.
    pub fn site_mechanism(&self, site_id: usize, mechanism: u64) -> Self {
        self.child(site_id as u64).child(mechanism)
    }

    /// Hash seed and lineage into a concrete generator. The same stream
    /// always yields the same generator state.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut state = splitmix64(self.master_seed ^ 0x9e37_79b9_7f4a_7c15);
        for &elem in &self.lineage {
            state = splitmix64(state ^ splitmix64(elem.wrapping_add(0x85eb_ca6b)));
        }
        let mut seed = [0u8; 32];
        let mut s = state;
        for chunk in seed.chunks_exact_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        ChaCha12Rng::from_seed(seed)
    }

    /// A u64 drawn from the stream's hash, handy as a row seed label.
    pub fn fingerprint(&self) -> u64 {
        let mut state = splitmix64(self.master_seed ^ 0x9e37_79b9_7f4a_7c15);
        for &elem in &self.lineage {
            state = splitmix64(state ^ splitmix64(elem.wrapping_add(0x85eb_ca6b)));
        }
        state
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rec(x: Vec<f64>, a: u8, y: u8) -> LabeledRecord {
        LabeledRecord::new(x, a, y)
    }

    #[test]
    fn validate_counts_cells() {
        let records = vec![rec(vec![0.2, 0.3], 1, 0), rec(vec![0.9, 0.1], 0, 1)];
        let v = validate_dataset(&records, DomainPolicy::Reject).unwrap();
        assert_eq!(v.count(1, 0), 1);
        assert_eq!(v.count(0, 1), 1);
        assert_eq!(v.count(0, 0), 0);
        assert_eq!(v.count(1, 1), 0);
    }

    #[test]
    fn validate_clamps_when_asked() {
        let records = vec![rec(vec![1.2, 0.3], 1, 0), rec(vec![0.5, -0.1], 0, 0)];
        let v = validate_dataset(&records, DomainPolicy::Clamp).unwrap();
        assert_eq!(v.records[0].x, vec![1.0, 0.3]);
        assert_eq!(v.records[1].x, vec![0.5, 0.0]);
    }

    #[test]
    fn validate_rejects_out_of_domain() {
        let records = vec![rec(vec![1.2, 0.3], 1, 0), rec(vec![0.1, 0.1], 0, 0)];
        assert!(matches!(
            validate_dataset(&records, DomainPolicy::Reject),
            Err(Error::OutOfDomain { index: 0, .. })
        ));
    }

    #[test]
    fn validate_requires_both_groups() {
        let records = vec![rec(vec![0.2, 0.3], 1, 0)];
        assert!(matches!(
            validate_dataset(&records, DomainPolicy::Reject),
            Err(Error::MissingGroup { group: 0 })
        ));
    }

    #[test]
    fn validate_rejects_empty() {
        assert!(matches!(
            validate_dataset(&[], DomainPolicy::Reject),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn split_partitions_exactly() {
        let records: Vec<_> = (0..101)
            .map(|i| rec(vec![i as f64 / 101.0], (i % 2) as u8, ((i / 2) % 2) as u8))
            .collect();
        let site = SiteDataset::new(0, records.clone());
        let split = site.split(&mut RngStream::new(7).child(stream::SPLIT).rng());
        assert_eq!(split.n_train(), 51); // ceil(101/2)
        assert_eq!(split.n_calib(), 50);
        let mut all: Vec<_> = split.train.iter().chain(split.calib.iter()).collect();
        all.sort_by(|p, q| p.x[0].partial_cmp(&q.x[0]).unwrap());
        let mut orig: Vec<_> = records.iter().collect();
        orig.sort_by(|p, q| p.x[0].partial_cmp(&q.x[0]).unwrap());
        assert_eq!(all, orig);
        // cell counts add up to the train size
        let total: usize = (0..2)
            .flat_map(|a| (0..2).map(move |y| (a, y)))
            .map(|(a, y)| split.n_train_cell(a, y))
            .sum();
        assert_eq!(total, split.n_train());
    }

    #[test]
    fn split_is_deterministic() {
        let records: Vec<_> = (0..40)
            .map(|i| rec(vec![i as f64 / 40.0], (i % 2) as u8, 0))
            .collect();
        let site = SiteDataset::new(3, records);
        let s1 = site.split(&mut RngStream::new(11).child(stream::SPLIT).rng());
        let s2 = site.split(&mut RngStream::new(11).child(stream::SPLIT).rng());
        assert_eq!(s1.train, s2.train);
        assert_eq!(s1.calib, s2.calib);
    }

    #[test]
    fn rng_streams_reproducible_and_distinct() {
        let root = RngStream::new(42);
        let a: f64 = root.site_mechanism(0, stream::PI_NOISE).rng().random();
        let b: f64 = root.site_mechanism(0, stream::PI_NOISE).rng().random();
        assert_eq!(a, b);
        let c: f64 = root.site_mechanism(1, stream::PI_NOISE).rng().random();
        let d: f64 = root.site_mechanism(0, stream::GP_PX).rng().random();
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn budget_rejects_bad_values() {
        assert!(PrivacyBudget::new(0.0, 0.1).is_err());
        assert!(PrivacyBudget::new(1.0, 0.0).is_err());
        assert!(PrivacyBudget::new(1.0, 1.0).is_err());
        assert!(PrivacyBudget::new(1.0, 1e-4).is_ok());
    }

    #[test]
    fn config_validation() {
        let mut cfg = FederationConfig::homogeneous(2, 1000, 1.0, 0.3).unwrap();
        assert!(cfg.validate().is_ok());
        cfg.nu = vec![0.7, 0.7];
        assert!(cfg.validate().is_err());
    }
}
