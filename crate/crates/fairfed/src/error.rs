//! Crate-wide error and warning-flag types.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Fatal errors. Anything recoverable is reported through [`Flag`] instead.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("feature out of [0,1] domain at record {index}: {value}")]
    OutOfDomain { index: usize, value: f64 },
    #[error("sensitive group {group} has no records")]
    MissingGroup { group: u8 },
    #[error("bandwidth must be positive, got {0}")]
    ZeroBandwidth(f64),
    #[error("cross-validation fold lacks a sensitive group")]
    InsufficientData,
    #[error("noise scale must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("eigendecomposition failed to converge")]
    EigenFailure,
    #[error("got {estimates} site estimates but {weights} weights")]
    WeightMismatch { estimates: usize, weights: usize },
    #[error("z-score {0} outside [-1, 1]")]
    ZOutOfRange(f64),
    #[error("grid index {index} outside [1, {max}]")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("trees disagree on depth: {0} vs {1}")]
    DepthMismatch(usize, usize),
    #[error("site sizes sum to {given}, dataset has {expected} records")]
    SizeMismatch { given: usize, expected: usize },
    #[error("empty test set")]
    EmptyTestSet,
    #[error("operation requires a synthetic generator with known eta/pi")]
    NotSynthetic,
    #[error("invalid theory parameters: {0}")]
    InvalidTheoryParams(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("CSV parse error: {0}")]
    ParseError(String),
    #[error("column {0:?} not found in CSV header")]
    UnknownColumn(String),
    #[error("degenerate rescaling range for column {0:?}")]
    DegenerateRange(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Non-fatal warnings raised during a pipeline run. They never abort the run;
/// the experiment harness collects them into the output's `flags` column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flag {
    /// No grid point fell inside the disparity selection band; the nearest
    /// point was returned instead.
    InfeasibleBand,
    /// The step curve jumped over the target band entirely.
    InfeasibleJump,
    /// Aggregated density dipped below the floor at some lattice point.
    DegenerateDensity,
    /// A noisy group count came out non-positive and was floored at 1.
    NoisyCountFloored,
    /// Eta or pi estimates left their valid range and were clamped.
    EstimateClamped,
    /// The relaxed monotone correction returned a non-monotone sequence.
    NonMonotoneCorrection,
}

impl Flag {
    pub fn name(self) -> &'static str {
        match self {
            Flag::InfeasibleBand => "infeasible_band",
            Flag::InfeasibleJump => "infeasible_jump",
            Flag::DegenerateDensity => "degenerate_density",
            Flag::NoisyCountFloored => "noisy_count_floored",
            Flag::EstimateClamped => "estimate_clamped",
            Flag::NonMonotoneCorrection => "non_monotone_correction",
        }
    }
}

impl std::fmt::Display for Flag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered, duplicate-free collection of warning flags.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Flags(Vec<Flag>);

impl Flags {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn raise(&mut self, flag: Flag) {
        if !self.0.contains(&flag) {
            self.0.push(flag);
        }
    }

    pub fn extend(&mut self, other: &Flags) {
        for &f in &other.0 {
            self.raise(f);
        }
    }

    pub fn contains(&self, flag: Flag) -> bool {
        self.0.contains(&flag)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Flag> + '_ {
        self.0.iter().copied()
    }

    /// Semicolon-joined flag names, as written to result CSVs.
    pub fn join(&self) -> String {
        self.0
            .iter()
            .map(|f| f.name())
            .collect::<Vec<_>>()
            .join(";")
    }
}
