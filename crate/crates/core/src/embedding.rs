//! Shared domain types and the distance/normalization primitives.
//!
//! Distances are carried squared. Square roots are taken only where a
//! formula needs the unsquared distance (contrastive loss, Exponential
//! kernel).

use serde::{Deserialize, Serialize};

use crate::dataset::Descriptor;
use crate::error::{check_dim, Error, Result};

/// Inputs with an L2 norm at or below this value are rejected by
/// [`l2_normalize`].
pub const EPSILON_NORM: f64 = 1e-12;

/// Default triplet ranking margin `m`.
pub const DEFAULT_MARGIN_M: f64 = 0.1;
/// Default contrastive margin `tau`.
pub const DEFAULT_MARGIN_TAU: f64 = 0.7;

/// A feature vector, optionally carrying the unit-norm guarantee.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    normalized: bool,
}

impl Embedding {
    /// Wraps raw values without normalizing them.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        validate_vector(&values)?;
        Ok(Self {
            values,
            normalized: false,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

fn validate_vector(values: &[f64]) -> Result<()> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "embedding dimension must be at least 2, got {}",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("embedding coordinate {i}")));
    }
    Ok(())
}

/// Squared Euclidean distance `Σ(aᵢ−bᵢ)²`.
pub fn l2_distance_squared(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(dist_sq(a, b))
}

/// Normalizes `x` to unit L2 norm.
///
/// Fails with [`Error::DegenerateInput`] when `‖x‖ ≤ EPSILON_NORM`; a
/// near-zero vector has no meaningful direction.
pub fn l2_normalize(x: &[f64]) -> Result<Embedding> {
    validate_vector(x)?;
    let n = norm(x);
    if n <= EPSILON_NORM {
        return Err(Error::DegenerateInput(format!(
            "cannot normalize vector with norm {n:e}"
        )));
    }
    Ok(Embedding {
        values: x.iter().map(|v| v / n).collect(),
        normalized: true,
    })
}

// Unchecked helpers shared by the numeric modules. Callers validate lengths.

pub(crate) fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// `scale · (a − b)`
pub(crate) fn scaled_diff(a: &[f64], b: &[f64], scale: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| scale * (x - y)).collect()
}

/// `acc += scale · v`
pub(crate) fn axpy(acc: &mut [f64], v: &[f64], scale: f64) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += scale * x;
    }
}

/// Which objective family a [`LossSpec`] selects. Kernel and negative mode
/// only exist for the SARE family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LossFamily {
    TripletRanking,
    Contrastive,
    Sare { kernel: Kernel, mode: NegativeMode },
}

/// Kernel turning an embedding distance into an unnormalized match weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `exp(−d²)`
    Gaussian,
    /// `1 / (1 + d²)`
    Cauchy,
    /// `exp(−d)`
    Exponential,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::Gaussian, Kernel::Cauchy, Kernel::Exponential];

    /// Log of the kernel value as a function of the squared distance.
    pub(crate) fn log_weight(self, d_sq: f64) -> f64 {
        match self {
            Kernel::Gaussian => -d_sq,
            Kernel::Cauchy => -d_sq.ln_1p(),
            Kernel::Exponential => -d_sq.sqrt(),
        }
    }
}

/// How a SARE loss combines several negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// One single-negative loss per negative, averaged.
    Independent,
    /// One softmax-style loss over all negatives at once.
    Joint,
}

/// Objective selection plus margins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    #[serde(flatten)]
    pub family: LossFamily,
    #[serde(default = "default_margin_m")]
    pub margin_m: f64,
    #[serde(default = "default_margin_tau")]
    pub margin_tau: f64,
}

fn default_margin_m() -> f64 {
    DEFAULT_MARGIN_M
}

fn default_margin_tau() -> f64 {
    DEFAULT_MARGIN_TAU
}

impl LossSpec {
    pub fn triplet() -> Self {
        Self::with_family(LossFamily::TripletRanking)
    }

    pub fn contrastive() -> Self {
        Self::with_family(LossFamily::Contrastive)
    }

    pub fn sare(kernel: Kernel, mode: NegativeMode) -> Self {
        Self::with_family(LossFamily::Sare { kernel, mode })
    }

    fn with_family(family: LossFamily) -> Self {
        Self {
            family,
            margin_m: DEFAULT_MARGIN_M,
            margin_tau: DEFAULT_MARGIN_TAU,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin_m > 0.0 && self.margin_m.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "margin_m must be positive, got {}",
                self.margin_m
            )));
        }
        if !(self.margin_tau > 0.0 && self.margin_tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "margin_tau must be positive, got {}",
                self.margin_tau
            )));
        }
        Ok(())
    }

    /// Short identifier such as `sare-gaussian-joint`.
    pub fn label(&self) -> String {
        match self.family {
            LossFamily::TripletRanking => "triplet".to_string(),
            LossFamily::Contrastive => "contrastive".to_string(),
            LossFamily::Sare { kernel, mode } => {
                let k = match kernel {
                    Kernel::Gaussian => "gaussian",
                    Kernel::Cauchy => "cauchy",
                    Kernel::Exponential => "exponential",
                };
                let m = match mode {
                    NegativeMode::Independent => "independent",
                    NegativeMode::Joint => "joint",
                };
                format!("sare-{k}-{m}")
            }
        }
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        Self::sare(Kernel::Gaussian, NegativeMode::Joint)
    }
}

/// Scalar loss with its gradients w.r.t. query, positive and every negative.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_query: Vec<f64>,
    pub d_positive: Vec<f64>,
    pub d_negatives: Vec<Vec<f64>>,
}

impl LossGrad {
    pub fn zeros(dim: usize, n_negatives: usize) -> Self {
        Self {
            loss: 0.0,
            d_query: vec![0.0; dim],
            d_positive: vec![0.0; dim],
            d_negatives: vec![vec![0.0; dim]; n_negatives],
        }
    }

    /// Largest coordinate of `d_query + d_positive + Σ d_negatives`.
    pub fn translation_residual(&self) -> f64 {
        (0..self.d_query.len())
            .map(|i| {
                let s: f64 = self.d_negatives.iter().map(|n| n[i]).sum();
                (self.d_query[i] + self.d_positive[i] + s).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Iterates `(tensor, gradient)` pairs in a fixed order.
    pub fn tensors(&self) -> impl Iterator<Item = (TensorName, &[f64])> {
        [
            (TensorName::Query, self.d_query.as_slice()),
            (TensorName::Positive, self.d_positive.as_slice()),
        ]
        .into_iter()
        .chain(
            self.d_negatives
                .iter()
                .enumerate()
                .map(|(i, g)| (TensorName::Negative(i), g.as_slice())),
        )
    }

    pub(crate) fn scale(&mut self, s: f64) {
        self.loss *= s;
        for g in self.all_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    fn all_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        [&mut self.d_query, &mut self.d_positive]
            .into_iter()
            .chain(self.d_negatives.iter_mut())
    }
}

/// Names one of the tensors in a tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorName {
    Query,
    Positive,
    Negative(usize),
}

impl std::fmt::Display for TensorName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TensorName::Query => f.write_str("query"),
            TensorName::Positive => f.write_str("positive"),
            TensorName::Negative(i) => write!(f, "negative[{i}]"),
        }
    }
}

/// Match-ability prior `h` and the kernel-derived distribution `c` over
/// the slots `[positive, negative_1, …, negative_N]`. The query slot is
/// omitted: `h_{q|q} = 0` and it is never a candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchDistribution {
    pub prior_h: Vec<f64>,
    pub learned_c: Vec<f64>,
}

impl MatchDistribution {
    /// `c_{p|q}`
    pub fn positive(&self) -> f64 {
        self.learned_c[0]
    }

    /// `c_{n|q}` for each negative.
    pub fn negatives(&self) -> &[f64] {
        &self.learned_c[1..]
    }

    /// Kullback-Leibler divergence `KL(h ‖ c)`, which reduces to `−log c_{p|q}`.
    pub fn kl_from_prior(&self) -> f64 {
        self.prior_h
            .iter()
            .zip(&self.learned_c)
            .filter(|(h, _)| **h > 0.0)
            .map(|(h, c)| h * (h / c).ln())
            .sum()
    }
}

/// One query, one positive and `N ≥ 1` negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple {
    pub query: Descriptor,
    pub positive: Descriptor,
    pub negatives: Vec<Descriptor>,
}

impl TrainingTuple {
    /// Checks shape and the geographic constraints: the positive lies
    /// within `r_pos` of the query and every negative beyond `r_neg`.
    pub fn validate(&self, r_pos: f64, r_neg: f64) -> Result<()> {
        if self.negatives.is_empty() {
            return Err(Error::InvalidArgument(
                "training tuple needs at least one negative".into(),
            ));
        }
        let dim = self.query.features.len();
        check_dim(dim, self.positive.features.len())?;
        for n in &self.negatives {
            check_dim(dim, n.features.len())?;
        }
        let gp = self.query.geo_distance(&self.positive);
        if gp > r_pos {
            return Err(Error::InvalidArgument(format!(
                "positive {} is {gp:.3} m from query {} (limit {r_pos} m)",
                self.positive.image_id, self.query.image_id
            )));
        }
        for n in &self.negatives {
            let gn = self.query.geo_distance(n);
            if gn <= r_neg {
                return Err(Error::InvalidArgument(format!(
                    "negative {} is {gn:.3} m from query {} (must exceed {r_neg} m)",
                    n.image_id, self.query.image_id
                )));
            }
        }
        Ok(())
    }
}
