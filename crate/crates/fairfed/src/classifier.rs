//! Final plug-in classifier assembly, cross-fitting, evaluation metrics and
//! the Monte Carlo oracle baselines available when the data-generating
//! process is known.

use crate::core::LabeledRecord;
use crate::error::{Error, Flags, Result};
use crate::federation::RegressionEstimate;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Which threshold-search path produced the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Fdp,
    Cdp,
}

/// Anything that assigns a positive-label probability to `(x, a)`.
/// Deterministic classifiers return 0 or 1.
pub trait ProbClassifier {
    fn prob(&self, x: &[f64], a: u8) -> f64;
}

/// The plug-in classifier: predict 1 when the (interpolated, clamped)
/// regression value reaches the shifted group threshold
/// `1/2 + tau (2a-1) / (2 pi_a)`.
#[derive(Debug, Clone)]
pub struct FairClassifier {
    pub est: RegressionEstimate,
    pub tau: f64,
    pub mode: Mode,
}

impl FairClassifier {
    pub fn predict(&self, x: &[f64], a: u8) -> u8 {
        u8::from(self.est.eta(x, a) >= self.est.group_threshold(a, self.tau))
    }
}

impl ProbClassifier for FairClassifier {
    fn prob(&self, x: &[f64], a: u8) -> f64 {
        self.predict(x, a) as f64
    }
}

/// Average of two classifiers trained on swapped halves; a probabilistic
/// classifier with values in {0, 1/2, 1}.
#[derive(Debug, Clone)]
pub struct CrossFitClassifier {
    pub first: FairClassifier,
    pub second: FairClassifier,
}

impl ProbClassifier for CrossFitClassifier {
    fn prob(&self, x: &[f64], a: u8) -> f64 {
        0.5 * (self.first.prob(x, a) + self.second.prob(x, a))
    }
}

/// One sampled label from the averaged classifier.
pub fn cross_fit(
    first: &FairClassifier,
    second: &FairClassifier,
    x: &[f64],
    a: u8,
    rng: &mut ChaCha12Rng,
) -> u8 {
    let p = 0.5 * (first.prob(x, a) + second.prob(x, a));
    u8::from(rng.random::<f64>() < p)
}

/// How probabilistic predictions enter the metrics: `Expectation` uses the
/// probabilities directly, `Sampled` draws one Bernoulli label per record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalMode {
    #[default]
    Expectation,
    Sampled,
}

/// Misclassification rate of a (possibly probabilistic) classifier.
pub fn misclassification(
    clf: &impl ProbClassifier,
    test: &[LabeledRecord],
    mode: EvalMode,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let total: f64 = test
        .iter()
        .map(|r| {
            let p = clf.prob(&r.x, r.a);
            match mode {
                EvalMode::Expectation => {
                    if r.y == 1 {
                        1.0 - p
                    } else {
                        p
                    }
                }
                EvalMode::Sampled => {
                    let pred = u8::from(rng.random::<f64>() < p);
                    f64::from(pred != r.y)
                }
            }
        })
        .sum();
    Ok(total / test.len() as f64)
}

/// Demographic disparity on a test set: difference of mean predicted-positive
/// rates between the sensitive groups.
pub fn empirical_dd(
    clf: &impl ProbClassifier,
    test: &[LabeledRecord],
    mode: EvalMode,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for r in test {
        let p = clf.prob(&r.x, r.a);
        let v = match mode {
            EvalMode::Expectation => p,
            EvalMode::Sampled => f64::from(rng.random::<f64>() < p),
        };
        sums[r.a as usize] += v;
        counts[r.a as usize] += 1;
    }
    for a in 0..2u8 {
        if counts[a as usize] == 0 {
            return Err(Error::MissingGroup { group: a });
        }
    }
    Ok(sums[1] / counts[1] as f64 - sums[0] / counts[0] as f64)
}

/// Everything a single run reports.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub misclassification: f64,
    pub empirical_dd: f64,
    pub d_fair: Option<f64>,
    pub flags: Flags,
}

/// A population with known group probabilities, group-conditional feature
/// laws and regression functions. The synthetic generator implements this;
/// CSV data cannot, which is what makes the oracle paths synthetic-only.
pub trait PopulationModel {
    fn dim(&self) -> usize;
    fn pi1(&self) -> f64;
    fn sample_x(&self, a: u8, rng: &mut ChaCha12Rng) -> Vec<f64>;
    fn eta(&self, x: &[f64], a: u8) -> f64;

    fn pi(&self, a: u8) -> f64 {
        if a == 1 {
            self.pi1()
        } else {
            1.0 - self.pi1()
        }
    }

    /// Shifted group threshold under the true class probabilities.
    fn group_threshold(&self, a: u8, tau: f64) -> f64 {
        let sign = 2.0 * a as f64 - 1.0;
        0.5 + tau * sign / (2.0 * self.pi(a))
    }
}

/// Monte Carlo baselines computed from the true population: unconstrained
/// Bayes risk, intrinsic disparity, the adjusted threshold `tau*` for a
/// disparity level, and the fair Bayes risk at `tau*`.
#[derive(Debug, Clone)]
pub struct OracleBaseline {
    pub bayes_risk_unconstrained: f64,
    /// Signed disparity of the unconstrained group-wise Bayes rule.
    pub intrinsic_dd: f64,
    pub alpha: f64,
    pub tau_star: f64,
    pub fair_bayes_risk: f64,
    pub mc_n: usize,
}

/// Bisection tolerance in `tau` for the oracle threshold.
const TAU_BISECT_TOL: f64 = 1e-4;

/// Simulate the fair Bayes baselines on `mc_n` fresh draws. The disparity
/// curve is evaluated on one shared sample (common random numbers), so it is
/// exactly non-increasing and the bisection is deterministic.
pub fn bayes_oracle<G: PopulationModel>(
    gen: &G,
    alpha: f64,
    mc_n: usize,
    rng: &mut ChaCha12Rng,
) -> OracleBaseline {
    assert!(mc_n >= 1000, "oracle needs a meaningful sample size");
    let mut eta_by_group: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut risk_acc = 0.0;
    let mut joint: Vec<(u8, f64)> = Vec::with_capacity(mc_n);
    for _ in 0..mc_n {
        let a = u8::from(rng.random::<f64>() < gen.pi1());
        let x = gen.sample_x(a, rng);
        let e = gen.eta(&x, a);
        risk_acc += e.min(1.0 - e);
        eta_by_group[a as usize].push(e);
        joint.push((a, e));
    }
    let bayes_risk_unconstrained = risk_acc / mc_n as f64;
    for v in eta_by_group.iter_mut() {
        v.sort_by(f64::total_cmp);
    }

    // P(eta_a >= t) from the sorted group sample
    let tail = |a: usize, t: f64| -> f64 {
        let v = &eta_by_group[a];
        if v.is_empty() {
            return 0.0;
        }
        let below = v.partition_point(|&e| e < t);
        (v.len() - below) as f64 / v.len() as f64
    };
    let dd_at = |tau: f64| -> f64 {
        tail(1, gen.group_threshold(1, tau)) - tail(0, gen.group_threshold(0, tau))
    };

    let intrinsic_dd = dd_at(0.0);
    let tau_star = if intrinsic_dd.abs() <= alpha {
        0.0
    } else {
        // DD is non-increasing; push tau toward the sign that shrinks |DD|
        let sign = intrinsic_dd.signum();
        let target = sign * alpha;
        let mut lo = 0.0f64;
        let mut hi = sign;
        // lo keeps |DD| > alpha, hi satisfies the constraint
        while (hi - lo).abs() > TAU_BISECT_TOL {
            let mid = 0.5 * (lo + hi);
            let v = dd_at(mid);
            let satisfied = if sign > 0.0 { v <= target } else { v >= target };
            if satisfied {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    };

    let t_thresh = [
        gen.group_threshold(0, tau_star),
        gen.group_threshold(1, tau_star),
    ];
    let fair_bayes_risk = joint
        .iter()
        .map(|&(a, e)| {
            if e >= t_thresh[a as usize] {
                1.0 - e
            } else {
                e
            }
        })
        .sum::<f64>()
        / mc_n as f64;

    OracleBaseline {
        bayes_risk_unconstrained,
        intrinsic_dd,
        alpha,
        tau_star,
        fair_bayes_risk,
        mc_n,
    }
}

/// Monte Carlo estimate (value and standard error) of the fairness-aware
/// excess risk
/// `2 sum_a pi_a E_{X|A=a}[(f(X,a) - f*(X,a)) (T*_a - eta_a(X))]`,
/// where `f*` is the fair Bayes rule at the oracle's `tau*`.
pub fn d_fair<G: PopulationModel>(
    clf: &impl ProbClassifier,
    gen: &G,
    oracle: &OracleBaseline,
    mc_n: usize,
    rng: &mut ChaCha12Rng,
) -> (f64, f64) {
    assert!(mc_n >= 1000);
    let t_thresh = [
        gen.group_threshold(0, oracle.tau_star),
        gen.group_threshold(1, oracle.tau_star),
    ];
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..mc_n {
        let a = u8::from(rng.random::<f64>() < gen.pi1());
        let x = gen.sample_x(a, rng);
        let e = gen.eta(&x, a);
        let f_star = f64::from(e >= t_thresh[a as usize]);
        let term = 2.0 * (clf.prob(&x, a) - f_star) * (t_thresh[a as usize] - e);
        sum += term;
        sumsq += term * term;
    }
    let mean = sum / mc_n as f64;
    let var = (sumsq / mc_n as f64 - mean * mean).max(0.0);
    (mean, (var / mc_n as f64).sqrt())
}

/// Monte Carlo risk and disparity of an arbitrary probabilistic classifier
/// under the true population (expectation over the label draw).
pub fn population_metrics<G: PopulationModel>(
    clf: &impl ProbClassifier,
    gen: &G,
    mc_n: usize,
    rng: &mut ChaCha12Rng,
) -> (f64, f64) {
    let mut risk = 0.0;
    let mut rate = [0.0; 2];
    let mut count = [0usize; 2];
    for _ in 0..mc_n {
        let a = u8::from(rng.random::<f64>() < gen.pi1());
        let x = gen.sample_x(a, rng);
        let e = gen.eta(&x, a);
        let p = clf.prob(&x, a);
        // P(pred != Y) = p (1 - eta) + (1 - p) eta
        risk += p * (1.0 - e) + (1.0 - p) * e;
        rate[a as usize] += p;
        count[a as usize] += 1;
    }
    let dd = rate[1] / count[1].max(1) as f64 - rate[0] / count[0].max(1) as f64;
    (risk / mc_n as f64, dd)
}
