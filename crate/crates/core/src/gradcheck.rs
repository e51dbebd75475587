//! Central finite-difference oracle for the analytic loss gradients.
//!
//! Two arithmetics are available. [`Arithmetic::Double`] differences the
//! library loss in `f64`; its round-off, about `1e-16·|L| / eps`, limits
//! the relative accuracy on gradient coordinates much smaller than `|L|`.
//! [`Arithmetic::DoubleDouble`] differences an independent re-derivation
//! of each loss from its formula in ~32-digit arithmetic, which resolves
//! coordinates down to the `1e-8` relative floor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dd::Dd;
use crate::embedding::{dist_sq, Kernel, LossFamily, LossGrad, LossSpec, NegativeMode, TensorName};
use crate::error::{Error, Result};
use crate::losses;

/// Default finite-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Default step in double-double arithmetic, where round-off no longer
/// competes with truncation error.
pub const DEFAULT_EXTENDED_EPS: f64 = 1e-7;
/// Floor on the relative-error denominator.
pub const RELATIVE_FLOOR: f64 = 1e-8;

/// Number format used to evaluate the loss while differencing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arithmetic {
    Double,
    #[default]
    DoubleDouble,
}

impl Arithmetic {
    pub fn default_eps(self) -> f64 {
        match self {
            Arithmetic::Double => DEFAULT_EPS,
            Arithmetic::DoubleDouble => DEFAULT_EXTENDED_EPS,
        }
    }
}

/// Worst relative error found while comparing gradients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_coordinate: (TensorName, usize),
    pub trials: usize,
    pub eps: f64,
}

impl GradCheckReport {
    /// Folds another report into this one, keeping the worse coordinate.
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_relative_error > self.max_relative_error {
            self.max_relative_error = other.max_relative_error;
            self.worst_coordinate = other.worst_coordinate;
        }
        self.trials += other.trials;
    }

    pub fn passes(&self, threshold: f64) -> bool {
        self.max_relative_error <= threshold
    }
}

/// Numerical gradients of `spec`'s loss by central differences,
/// `(L(x + eps·eᵢ) − L(x − eps·eᵢ)) / (2·eps)` for every coordinate of the
/// query, positive and each negative.
///
/// The returned `loss` is the unperturbed value.
pub fn finite_difference_gradients<N: AsRef<[f64]>>(
    spec: &LossSpec,
    q: &[f64],
    p: &[f64],
    negs: &[N],
    eps: f64,
) -> Result<LossGrad> {
    check_eps(eps)?;
    let mut tensors: Vec<Vec<f64>> = vec![q.to_vec(), p.to_vec()];
    tensors.extend(negs.iter().map(|n| n.as_ref().to_vec()));

    let eval = |ts: &[Vec<f64>], at: (TensorName, usize)| -> Result<f64> {
        let loss = losses::evaluate(spec, &ts[0], &ts[1], &ts[2..])?.loss;
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(Error::NonFinite(format!(
                "loss while probing {} coordinate {}",
                at.0, at.1
            )))
        }
    };

    let base = losses::evaluate(spec, q, p, negs)?.loss;
    let mut grads: Vec<Vec<f64>> = tensors.iter().map(|t| vec![0.0; t.len()]).collect();
    for t in 0..tensors.len() {
        let name = tensor_name(t);
        for i in 0..tensors[t].len() {
            let orig = tensors[t][i];
            tensors[t][i] = orig + eps;
            let up = eval(&tensors, (name, i))?;
            tensors[t][i] = orig - eps;
            let down = eval(&tensors, (name, i))?;
            tensors[t][i] = orig;
            grads[t][i] = (up - down) / (2.0 * eps);
        }
    }
    let mut it = grads.into_iter();
    let d_query = it.next().unwrap_or_default();
    let d_positive = it.next().unwrap_or_default();
    Ok(LossGrad {
        loss: base,
        d_query,
        d_positive,
        d_negatives: it.collect(),
    })
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "eps must lie in [1e-7, 1e-3], got {eps}"
        )));
    }
    Ok(())
}

/// Loss from squared query distances in double-double arithmetic.
fn reference_loss(spec: &LossSpec, dp_sq: Dd, dn_sq: &[Dd]) -> Dd {
    let n = Dd::from(dn_sq.len() as f64);
    let half = Dd::from(0.5);
    match spec.family {
        LossFamily::TripletRanking => {
            let m = Dd::from(spec.margin_m);
            dn_sq
                .iter()
                .fold(Dd::ZERO, |acc, &dn| acc + (m + dp_sq - dn).max0())
                / n
        }
        LossFamily::Contrastive => {
            let tau = Dd::from(spec.margin_tau);
            let neg = dn_sq.iter().fold(Dd::ZERO, |acc, &dn| {
                let gap = (tau - dn.sqrt()).max0();
                acc + half * gap * gap
            });
            half * dp_sq + neg / n
        }
        LossFamily::Sare { kernel, mode } => {
            // kernel(dn) / kernel(dp)
            let ratio = |dn: Dd| match kernel {
                Kernel::Gaussian => (dp_sq - dn).exp(),
                Kernel::Cauchy => (Dd::ONE + dp_sq) / (Dd::ONE + dn),
                Kernel::Exponential => (dp_sq.sqrt() - dn.sqrt()).exp(),
            };
            match mode {
                NegativeMode::Joint => {
                    (Dd::ONE + dn_sq.iter().fold(Dd::ZERO, |acc, &d| acc + ratio(d))).ln()
                }
                // mean of log(1 + ratio), taken as the log of a product
                NegativeMode::Independent => {
                    dn_sq
                        .iter()
                        .fold(Dd::ONE, |acc, &d| acc * (Dd::ONE + ratio(d)))
                        .ln()
                        / n
                }
            }
        }
    }
}

fn dd_dist_sq(a: &[f64], b: &[f64]) -> Dd {
    a.iter().zip(b).fold(Dd::ZERO, |acc, (x, y)| {
        let d = Dd::from(*x) - Dd::from(*y);
        acc + d * d
    })
}

/// Same differences as [`finite_difference_gradients`], with the loss
/// re-derived from its formula and evaluated in double-double arithmetic.
/// Perturbed squared distances are updated exactly from the one
/// coordinate that moves.
pub fn extended_finite_difference_gradients<N: AsRef<[f64]>>(
    spec: &LossSpec,
    q: &[f64],
    p: &[f64],
    negs: &[N],
    eps: f64,
) -> Result<LossGrad> {
    check_eps(eps)?;
    // Shape, finiteness and degenerate-direction checks.
    losses::evaluate(spec, q, p, negs)?;
    let negs: Vec<&[f64]> = negs.iter().map(AsRef::as_ref).collect();
    let dp = dd_dist_sq(q, p);
    let dn: Vec<Dd> = negs.iter().map(|n| dd_dist_sq(q, n)).collect();
    let h = Dd::from(eps);
    let moved = |base: Dd, x: f64, y: f64, step: Dd| {
        let old = Dd::from(x) - Dd::from(y);
        let new = old + step;
        base - old * old + new * new
    };
    let finite = |v: Dd, at: (TensorName, usize)| {
        let x = v.to_f64();
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::NonFinite(format!(
                "loss while probing {} coordinate {}",
                at.0, at.1
            )))
        }
    };
    let diff = |plus: Dd, minus: Dd, at| finite((plus - minus) / (h + h), at);

    let d_query = (0..q.len())
        .map(|i| {
            let at = |step: Dd| {
                let dn2: Vec<Dd> = dn
                    .iter()
                    .zip(&negs)
                    .map(|(&b, n)| moved(b, q[i], n[i], step))
                    .collect();
                reference_loss(spec, moved(dp, q[i], p[i], step), &dn2)
            };
            diff(at(h), at(-h), (TensorName::Query, i))
        })
        .collect::<Result<_>>()?;
    let d_positive = (0..p.len())
        .map(|i| {
            let at = |step: Dd| reference_loss(spec, moved(dp, p[i], q[i], step), &dn);
            diff(at(h), at(-h), (TensorName::Positive, i))
        })
        .collect::<Result<_>>()?;
    let d_negatives = negs
        .iter()
        .enumerate()
        .map(|(j, n)| {
            (0..n.len())
                .map(|i| {
                    let at = |step: Dd| {
                        let mut dn2 = dn.clone();
                        dn2[j] = moved(dn[j], n[i], q[i], step);
                        reference_loss(spec, dp, &dn2)
                    };
                    diff(at(h), at(-h), (TensorName::Negative(j), i))
                })
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    Ok(LossGrad {
        loss: finite(reference_loss(spec, dp, &dn), (TensorName::Query, 0))?,
        d_query,
        d_positive,
        d_negatives,
    })
}

fn tensor_name(t: usize) -> TensorName {
    match t {
        0 => TensorName::Query,
        1 => TensorName::Positive,
        k => TensorName::Negative(k - 2),
    }
}

/// Per-coordinate relative error `|a − n| / max(1e-8, |a|, |n|)`; reports
/// the maximum.
pub fn compare(analytic: &LossGrad, numeric: &LossGrad) -> Result<GradCheckReport> {
    if analytic.d_negatives.len() != numeric.d_negatives.len() {
        return Err(Error::InvalidArgument(format!(
            "negative count differs: {} vs {}",
            analytic.d_negatives.len(),
            numeric.d_negatives.len()
        )));
    }
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_coordinate: (TensorName::Query, 0),
        trials: 1,
        eps: 0.0,
    };
    for ((name, a), (_, n)) in analytic.tensors().zip(numeric.tensors()) {
        if a.len() != n.len() {
            return Err(Error::DimensionMismatch {
                expected: a.len(),
                actual: n.len(),
            });
        }
        for (i, (x, y)) in a.iter().zip(n).enumerate() {
            let rel = (x - y).abs() / RELATIVE_FLOOR.max(x.abs()).max(y.abs());
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_coordinate = (name, i);
            }
        }
    }
    Ok(report)
}

/// Analytic-vs-numeric check at one point in `f64`.
pub fn check_point<N: AsRef<[f64]>>(
    spec: &LossSpec,
    q: &[f64],
    p: &[f64],
    negs: &[N],
    eps: f64,
) -> Result<GradCheckReport> {
    check_point_in(Arithmetic::Double, spec, q, p, negs, eps)
}

/// Analytic-vs-numeric check at one point in the chosen arithmetic.
pub fn check_point_in<N: AsRef<[f64]>>(
    arithmetic: Arithmetic,
    spec: &LossSpec,
    q: &[f64],
    p: &[f64],
    negs: &[N],
    eps: f64,
) -> Result<GradCheckReport> {
    let analytic = losses::evaluate(spec, q, p, negs)?;
    let numeric = match arithmetic {
        Arithmetic::Double => finite_difference_gradients(spec, q, p, negs, eps)?,
        Arithmetic::DoubleDouble => extended_finite_difference_gradients(spec, q, p, negs, eps)?,
    };
    let mut report = compare(&analytic, &numeric)?;
    report.eps = eps;
    Ok(report)
}

/// Distance from the point to the nearest non-differentiable set of the
/// loss, measured in the argument of the hinge or `1/d` factor. Smooth
/// losses with no kink return `f64::INFINITY`.
pub fn kink_distance<N: AsRef<[f64]>>(spec: &LossSpec, q: &[f64], p: &[f64], negs: &[N]) -> f64 {
    let dp_sq = dist_sq(q, p);
    let dn_sq = negs.iter().map(|n| dist_sq(q, n.as_ref()));
    match spec.family {
        LossFamily::TripletRanking => dn_sq
            .map(|d| (spec.margin_m + dp_sq - d).abs())
            .fold(f64::INFINITY, f64::min),
        LossFamily::Contrastive => dn_sq
            .map(|d| {
                let d = d.sqrt();
                (spec.margin_tau - d).abs().min(d)
            })
            .fold(f64::INFINITY, f64::min),
        LossFamily::Sare {
            kernel: Kernel::Exponential,
            ..
        } => dn_sq.map(f64::sqrt).fold(dp_sq.sqrt(), f64::min),
        LossFamily::Sare { .. } => f64::INFINITY,
    }
}

/// Settings for [`random_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomCheckConfig {
    pub loss: LossSpec,
    pub dim: usize,
    pub negatives: usize,
    pub trials: usize,
    /// Step; `None` picks the arithmetic's default.
    pub eps: Option<f64>,
    pub arithmetic: Arithmetic,
    pub seed: u64,
}

impl Default for RandomCheckConfig {
    fn default() -> Self {
        Self {
            loss: LossSpec::default(),
            dim: 32,
            negatives: 10,
            trials: 100,
            eps: None,
            arithmetic: Arithmetic::default(),
            seed: 7,
        }
    }
}

impl RandomCheckConfig {
    pub fn step(&self) -> f64 {
        self.eps.unwrap_or(self.arithmetic.default_eps())
    }
}

/// Outcome of [`random_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RandomCheckOutcome {
    pub report: GradCheckReport,
    /// Sampled tuples discarded for lying within `10·eps` of a kink.
    pub rejected: usize,
}

/// Checks `trials` random tuples of unit vectors, skipping points within
/// `10·eps` of a kink.
pub fn random_check(cfg: &RandomCheckConfig) -> Result<RandomCheckOutcome> {
    cfg.loss.validate()?;
    if cfg.dim < 2 || cfg.negatives == 0 || cfg.trials == 0 {
        return Err(Error::InvalidArgument(format!(
            "need dim ≥ 2, negatives ≥ 1 and trials ≥ 1; got {}, {}, {}",
            cfg.dim, cfg.negatives, cfg.trials
        )));
    }
    let eps = cfg.step();
    check_eps(eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut unit = || -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
            if let Ok(e) = crate::embedding::l2_normalize(&v) {
                return e.into_values();
            }
        }
    };
    let mut merged: Option<GradCheckReport> = None;
    let mut rejected = 0usize;
    let max_rejections = 1000 * cfg.trials;
    let mut accepted = 0;
    while accepted < cfg.trials {
        let q = unit();
        let p = unit();
        let negs: Vec<Vec<f64>> = (0..cfg.negatives).map(|_| unit()).collect();
        if kink_distance(&cfg.loss, &q, &p, &negs) < 10.0 * eps {
            rejected += 1;
            if rejected > max_rejections {
                return Err(Error::InvalidArgument(format!(
                    "{rejected} samples fell within 10·eps of a kink; increase dim or reduce eps"
                )));
            }
            continue;
        }
        let r = check_point_in(cfg.arithmetic, &cfg.loss, &q, &p, &negs, eps)?;
        match &mut merged {
            None => merged = Some(r),
            Some(m) => m.merge(&r),
        }
        accepted += 1;
    }
    let mut report = merged.expect("at least one trial");
    report.eps = eps;
    Ok(RandomCheckOutcome { report, rejected })
}
