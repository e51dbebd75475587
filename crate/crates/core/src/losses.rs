//! Metric-embedding objectives with closed-form gradients.
//!
//! Three families are provided:
//!
//! * **Triplet ranking**: `max(0, m + ‖q−p‖² − ‖q−n‖²)`.
//! * **Contrastive**: `½‖a−b‖²` for matching pairs and
//!   `½ max(0, τ − ‖a−b‖)²` for non-matching pairs.
//! * **SARE** (stochastic attraction-repulsion embedding): the
//!   Kullback-Leibler divergence between the one-hot match-ability prior
//!   `h` (1 on the positive, 0 on every negative) and the distribution
//!   `c` obtained by fitting a kernel `K` on embedding distances:
//!
//!   ```text
//!   c_{p|q} = K(‖q−p‖) / (K(‖q−p‖) + Σₙ K(‖q−n‖)),     L = −log c_{p|q}
//!   ```
//!
//!   With several negatives, *independent* mode forms one single-negative
//!   loss per negative and averages them; *joint* mode puts all negatives
//!   into the one denominator above.
//!
//! Every function returns [`LossGrad`] with gradients w.r.t. the query,
//! positive and negatives. Since all losses depend only on pairwise
//! differences, the query gradient is always `−∂L/∂p − Σ ∂L/∂n`.
//!
//! Inputs may be any finite vectors. Unit norm is the caller's invariant;
//! the finite-difference oracle perturbs points off the sphere.
//!
//! Independent-mode SARE is computed from `c_{p|q}` (the per-kernel
//! gradients `2(1−c)(p−q)`, `2(1−ĉ)(p−q)/(1+‖p−q‖²)`, `(1−c̄)(p−q)/‖p−q‖`,
//! and their negative-side counterparts). Joint mode uses the log-sum
//! forms `log(1 + Σₙ Rₙ)` with `η = 1 + Σₙ Rₙ`. At `N = 1` both routes
//! must agree, which the tests exercise.

use crate::embedding::{
    axpy, dist_sq, scaled_diff, Kernel, LossFamily, LossGrad, LossSpec, MatchDistribution,
    NegativeMode,
};
use crate::error::{check_dim, Error, Result};

/// Evaluates the tuple-level objective selected by `spec`.
///
/// With `N` negatives the triplet loss is the mean of the `N` triplet
/// losses, and the contrastive loss is the positive-pair term plus the
/// mean of the `N` negative-pair terms.
pub fn evaluate<N: AsRef<[f64]>>(
    spec: &LossSpec,
    q: &[f64],
    p: &[f64],
    negs: &[N],
) -> Result<LossGrad> {
    spec.validate()?;
    check_tuple(q, p, negs)?;
    match spec.family {
        LossFamily::TripletRanking => {
            average_over_negatives(q, p, negs, |n| triplet_ranking(q, p, n, spec.margin_m))
        }
        LossFamily::Contrastive => {
            let pos = contrastive(q, p, true, spec.margin_tau)?;
            let mut out = average_over_negatives(q, p, negs, |n| {
                let pair = contrastive(q, n, false, spec.margin_tau)?;
                Ok(LossGrad {
                    d_positive: vec![0.0; q.len()],
                    ..pair
                })
            })?;
            out.loss += pos.loss;
            axpy(&mut out.d_query, &pos.d_query, 1.0);
            axpy(&mut out.d_positive, &pos.d_positive, 1.0);
            Ok(out)
        }
        LossFamily::Sare { kernel, mode } => sare(q, p, negs, kernel, mode),
    }
}

/// Triplet ranking loss `max(0, m + ‖q−p‖² − ‖q−n‖²)`.
///
/// When the hinge is inactive, including exactly at the boundary, all
/// gradients are zero.
pub fn triplet_ranking(q: &[f64], p: &[f64], n: &[f64], m: f64) -> Result<LossGrad> {
    check_tuple(q, p, &[n])?;
    positive_param("margin m", m)?;
    let hinge = m + dist_sq(q, p) - dist_sq(q, n);
    if hinge <= 0.0 {
        return Ok(LossGrad::zeros(q.len(), 1));
    }
    let d_positive = scaled_diff(p, q, 2.0);
    let d_negative = scaled_diff(q, n, 2.0);
    Ok(LossGrad {
        loss: hinge,
        d_query: query_grad(&d_positive, std::slice::from_ref(&d_negative)),
        d_positive,
        d_negatives: vec![d_negative],
    })
}

/// Contrastive loss on a single pair `(a, b)`.
///
/// The result is laid out as a tuple with `a` in the query slot. For a
/// matching pair `b` occupies the positive slot and `d_negatives` is
/// empty; for a non-matching pair `b` is the single negative and the
/// positive gradient is empty.
pub fn contrastive(a: &[f64], b: &[f64], is_positive: bool, tau: f64) -> Result<LossGrad> {
    check_dim(a.len(), b.len())?;
    positive_param("margin tau", tau)?;
    let d_sq = dist_sq(a, b);
    if is_positive {
        let d_b = scaled_diff(b, a, 1.0);
        return Ok(LossGrad {
            loss: 0.5 * d_sq,
            d_query: d_b.iter().map(|v| -v).collect(),
            d_positive: d_b,
            d_negatives: Vec::new(),
        });
    }
    let d = d_sq.sqrt();
    if d == 0.0 {
        return Err(Error::DegenerateDirection(
            "contrastive negative pair at zero distance".into(),
        ));
    }
    if d >= tau {
        return Ok(LossGrad {
            loss: 0.0,
            d_query: vec![0.0; a.len()],
            d_positive: Vec::new(),
            d_negatives: vec![vec![0.0; a.len()]],
        });
    }
    let gap = tau - d;
    // −(1 − τ/d)(a − b)
    let d_b = scaled_diff(a, b, tau / d - 1.0);
    Ok(LossGrad {
        loss: 0.5 * gap * gap,
        d_query: d_b.iter().map(|v| -v).collect(),
        d_positive: Vec::new(),
        d_negatives: vec![d_b],
    })
}

/// Kernel match probabilities `c_{p|q}` and `c_{n|q}` for every negative,
/// alongside the one-hot prior.
pub fn match_probability<N: AsRef<[f64]>>(
    q: &[f64],
    p: &[f64],
    negs: &[N],
    kernel: Kernel,
) -> Result<MatchDistribution> {
    check_tuple(q, p, negs)?;
    let logs: Vec<f64> = std::iter::once(dist_sq(q, p))
        .chain(negs.iter().map(|n| dist_sq(q, n.as_ref())))
        .map(|d| kernel.log_weight(d))
        .collect();
    // Shift by the max log-weight so exp never underflows to an all-zero row.
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut prior_h = vec![0.0; weights.len()];
    prior_h[0] = 1.0;
    Ok(MatchDistribution {
        prior_h,
        learned_c: weights.iter().map(|w| w / total).collect(),
    })
}

/// SARE loss `−log c_{p|q}` with the given kernel and negative mode.
pub fn sare<N: AsRef<[f64]>>(
    q: &[f64],
    p: &[f64],
    negs: &[N],
    kernel: Kernel,
    mode: NegativeMode,
) -> Result<LossGrad> {
    check_tuple(q, p, negs)?;
    if kernel == Kernel::Exponential {
        check_exponential_support(q, p, negs)?;
    }
    match mode {
        NegativeMode::Independent => {
            average_over_negatives(q, p, negs, |n| sare_single(q, p, n, kernel))
        }
        NegativeMode::Joint => Ok(match kernel {
            Kernel::Gaussian => sare_joint_gaussian(q, p, negs),
            Kernel::Cauchy => sare_joint_cauchy(q, p, negs),
            Kernel::Exponential => sare_joint_exponential(q, p, negs),
        }),
    }
}

/// Single-negative SARE from the match probability.
fn sare_single(q: &[f64], p: &[f64], n: &[f64], kernel: Kernel) -> Result<LossGrad> {
    let dist = match_probability(q, p, &[n], kernel)?;
    let c_p = dist.positive();
    // 1 − c_{p|q}, read from the negative slot to avoid cancellation.
    let repel = dist.negatives()[0];
    let (scale_p, scale_n) = match kernel {
        Kernel::Gaussian => (2.0 * repel, 2.0 * repel),
        Kernel::Cauchy => (
            2.0 * repel / (1.0 + dist_sq(q, p)),
            2.0 * repel / (1.0 + dist_sq(q, n)),
        ),
        Kernel::Exponential => (repel / dist_sq(q, p).sqrt(), repel / dist_sq(q, n).sqrt()),
    };
    let d_positive = scaled_diff(p, q, scale_p);
    let d_negative = scaled_diff(q, n, scale_n);
    Ok(LossGrad {
        loss: (repel / c_p).ln_1p(),
        d_query: query_grad(&d_positive, std::slice::from_ref(&d_negative)),
        d_positive,
        d_negatives: vec![d_negative],
    })
}

/// `log(1 + Σₙ exp(tₙ))` and the weights `exp(tₙ)/η`, computed with a
/// max-shift so large exponents do not overflow.
fn log_one_plus_sum_exp(exponents: &[f64]) -> (f64, Vec<f64>) {
    let shift = exponents.iter().copied().fold(0.0, f64::max);
    let shifted: Vec<f64> = exponents.iter().map(|t| (t - shift).exp()).collect();
    let sum: f64 = shifted.iter().sum();
    let loss = if shift == 0.0 {
        sum.ln_1p()
    } else {
        shift + ((-shift).exp() + sum).ln()
    };
    let eta_shifted = (-shift).exp() + sum;
    (loss, shifted.iter().map(|s| s / eta_shifted).collect())
}

fn sare_joint_gaussian<N: AsRef<[f64]>>(q: &[f64], p: &[f64], negs: &[N]) -> LossGrad {
    let dp_sq = dist_sq(q, p);
    let exponents: Vec<f64> = negs
        .iter()
        .map(|n| dp_sq - dist_sq(q, n.as_ref()))
        .collect();
    let (loss, weights) = log_one_plus_sum_exp(&exponents);

    // ∂L/∂p = Σₙ −(2/η) exp(‖q−p‖² − ‖q−n‖²) (q − p)
    let pull: f64 = weights.iter().sum();
    let d_positive = scaled_diff(q, p, -2.0 * pull);
    // ∂L/∂n = (2/η) exp(‖q−p‖² − ‖q−n‖²) (q − n)
    let d_negatives: Vec<Vec<f64>> = negs
        .iter()
        .zip(&weights)
        .map(|(n, w)| scaled_diff(q, n.as_ref(), 2.0 * w))
        .collect();
    LossGrad {
        loss,
        d_query: query_grad(&d_positive, &d_negatives),
        d_positive,
        d_negatives,
    }
}

fn sare_joint_cauchy<N: AsRef<[f64]>>(q: &[f64], p: &[f64], negs: &[N]) -> LossGrad {
    let one_dp = 1.0 + dist_sq(q, p);
    let one_dn: Vec<f64> = negs.iter().map(|n| 1.0 + dist_sq(q, n.as_ref())).collect();
    let ratio_sum: f64 = one_dn.iter().map(|d| one_dp / d).sum();
    let eta = 1.0 + ratio_sum;

    // ∂L/∂p = Σₙ −2 / (η (1 + ‖q−n‖²)) (q − p)
    let pull: f64 = one_dn.iter().map(|d| 1.0 / (eta * d)).sum();
    let d_positive = scaled_diff(q, p, -2.0 * pull);
    // ∂L/∂n = 2 (1 + ‖q−p‖²) / (η (1 + ‖q−n‖²)²) (q − n)
    let d_negatives: Vec<Vec<f64>> = negs
        .iter()
        .zip(&one_dn)
        .map(|(n, d)| scaled_diff(q, n.as_ref(), 2.0 * one_dp / (eta * d * d)))
        .collect();
    LossGrad {
        loss: ratio_sum.ln_1p(),
        d_query: query_grad(&d_positive, &d_negatives),
        d_positive,
        d_negatives,
    }
}

fn sare_joint_exponential<N: AsRef<[f64]>>(q: &[f64], p: &[f64], negs: &[N]) -> LossGrad {
    let dp = dist_sq(q, p).sqrt();
    let dn: Vec<f64> = negs.iter().map(|n| dist_sq(q, n.as_ref()).sqrt()).collect();
    let exponents: Vec<f64> = dn.iter().map(|d| dp - d).collect();
    let (loss, weights) = log_one_plus_sum_exp(&exponents);

    // ∂L/∂p = Σₙ −exp(‖q−p‖ − ‖q−n‖) / (η ‖q−p‖) (q − p)
    let pull: f64 = weights.iter().sum();
    let d_positive = scaled_diff(q, p, -pull / dp);
    // ∂L/∂n = exp(‖q−p‖ − ‖q−n‖) / (η ‖q−n‖) (q − n)
    let d_negatives: Vec<Vec<f64>> = negs
        .iter()
        .zip(weights.iter().zip(&dn))
        .map(|(n, (w, d))| scaled_diff(q, n.as_ref(), w / d))
        .collect();
    LossGrad {
        loss,
        d_query: query_grad(&d_positive, &d_negatives),
        d_positive,
        d_negatives,
    }
}

fn query_grad(d_positive: &[f64], d_negatives: &[Vec<f64>]) -> Vec<f64> {
    let mut d_query: Vec<f64> = d_positive.iter().map(|v| -v).collect();
    for g in d_negatives {
        axpy(&mut d_query, g, -1.0);
    }
    d_query
}

/// Runs a single-negative loss per negative and averages loss and
/// gradients. Summation order over negatives is fixed left to right.
fn average_over_negatives<N, F>(q: &[f64], p: &[f64], negs: &[N], mut single: F) -> Result<LossGrad>
where
    N: AsRef<[f64]>,
    F: FnMut(&[f64]) -> Result<LossGrad>,
{
    let mut out = LossGrad::zeros(q.len(), 0);
    debug_assert_eq!(p.len(), q.len());
    for n in negs {
        let mut one = single(n.as_ref())?;
        out.loss += one.loss;
        axpy(&mut out.d_query, &one.d_query, 1.0);
        axpy(&mut out.d_positive, &one.d_positive, 1.0);
        out.d_negatives.push(one.d_negatives.swap_remove(0));
    }
    out.scale(1.0 / negs.len() as f64);
    Ok(out)
}

fn check_tuple<N: AsRef<[f64]>>(q: &[f64], p: &[f64], negs: &[N]) -> Result<()> {
    if negs.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one negative is required".into(),
        ));
    }
    check_dim(q.len(), p.len())?;
    for n in negs {
        check_dim(q.len(), n.as_ref().len())?;
    }
    let finite = q.iter().chain(p).all(|v| v.is_finite())
        && negs
            .iter()
            .all(|n| n.as_ref().iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::NonFinite("loss input".into()));
    }
    Ok(())
}

fn check_exponential_support<N: AsRef<[f64]>>(q: &[f64], p: &[f64], negs: &[N]) -> Result<()> {
    if dist_sq(q, p) == 0.0 {
        return Err(Error::DegenerateDirection(
            "exponential kernel with query == positive".into(),
        ));
    }
    if let Some(i) = negs.iter().position(|n| dist_sq(q, n.as_ref()) == 0.0) {
        return Err(Error::DegenerateDirection(format!(
            "exponential kernel with query == negative[{i}]"
        )));
    }
    Ok(())
}

fn positive_param(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{name} must be positive, got {v}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::norm;

    const MODES: [NegativeMode; 2] = [NegativeMode::Independent, NegativeMode::Joint];

    /// Unit vectors in the plane at the given angle.
    fn at(theta: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin()]
    }

    /// Point on the unit circle at squared distance `d_sq` from (1, 0).
    fn at_dist_sq(d_sq: f64) -> Vec<f64> {
        // ‖(1,0) − (cos θ, sin θ)‖² = 2 − 2 cos θ
        at((1.0 - d_sq / 2.0).acos())
    }

    #[test]
    fn triplet_saturated() {
        let q = vec![1.0, 0.0];
        let g = triplet_ranking(&q, &at_dist_sq(0.04), &at_dist_sq(0.25), 0.1).unwrap();
        assert_eq!(g, LossGrad::zeros(2, 1));

        let g = triplet_ranking(&q, &[0.0, 1.0], &[-1.0, 0.0], 0.1).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.tensors().all(|(_, v)| v.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn triplet_positive_equals_negative() {
        let q = at(0.3);
        let p = at(1.1);
        let g = triplet_ranking(&q, &p, &p, 0.1).unwrap();
        assert!((g.loss - 0.1).abs() < 1e-15);
        assert!(norm(&g.d_positive) > 0.0);
        assert!(norm(&g.d_negatives[0]) > 0.0);
        // p = n so the query gradient cancels.
        assert!(norm(&g.d_query) < 1e-15);
    }

    #[test]
    fn contrastive_examples() {
        let a = vec![0.0, 0.0];
        let g = contrastive(&a, &[0.4, 0.0], true, 0.7).unwrap();
        assert!((g.loss - 0.08).abs() < 1e-15);
        assert!((g.d_positive[0] - 0.4).abs() < 1e-15);
        assert!(g.d_negatives.is_empty());

        let g = contrastive(&a, &[0.9, 0.0], false, 0.7).unwrap();
        assert_eq!(g.loss, 0.0);
        assert_eq!(g.d_negatives[0], vec![0.0, 0.0]);

        let g = contrastive(&a, &[0.3, 0.4], false, 0.7).unwrap();
        assert!((g.loss - 0.02).abs() < 1e-15);
        assert!((norm(&g.d_negatives[0]) - 0.2).abs() < 1e-15);
        assert!((norm(&g.d_query) - 0.2).abs() < 1e-15);
        // Pushes b away from a.
        assert!(g.d_negatives[0][0] < 0.0);
    }

    #[test]
    fn contrastive_zero_distance_negative_is_degenerate() {
        assert!(matches!(
            contrastive(&[0.5, 0.5], &[0.5, 0.5], false, 0.7),
            Err(Error::DegenerateDirection(_))
        ));
        // Matching pair at zero distance is fine.
        assert_eq!(
            contrastive(&[0.5, 0.5], &[0.5, 0.5], true, 0.7)
                .unwrap()
                .loss,
            0.0
        );
    }

    #[test]
    fn match_probability_symmetric() {
        let q = at(0.0);
        for kernel in Kernel::ALL {
            let dist = match_probability(&q, &at(0.7), &[at(-0.7)], kernel).unwrap();
            assert!((dist.positive() - 0.5).abs() < 1e-15);
            assert_eq!(dist.prior_h, vec![1.0, 0.0]);

            let negs = vec![at(-0.7); 7];
            let dist = match_probability(&q, &at(0.7), &negs, kernel).unwrap();
            assert!((dist.positive() - 1.0 / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn match_probability_gaussian_value() {
        let q = vec![1.0, 0.0];
        let dist =
            match_probability(&q, &at_dist_sq(0.2), &[at_dist_sq(0.8)], Kernel::Gaussian).unwrap();
        // 1 / (1 + e^{-0.6})
        assert!((dist.positive() - 0.645_656_306_225_795).abs() < 1e-12);
        assert!((dist.kl_from_prior() + dist.positive().ln()).abs() < 1e-15);
    }

    #[test]
    fn sare_single_negative_modes_agree() {
        let q = at(0.2);
        let p = at(0.9);
        let n = at(-1.4);
        for kernel in Kernel::ALL {
            let ind = sare(&q, &p, &[&n], kernel, NegativeMode::Independent).unwrap();
            let joint = sare(&q, &p, &[&n], kernel, NegativeMode::Joint).unwrap();
            assert!((ind.loss - joint.loss).abs() < 1e-15, "{kernel:?}");
            for ((_, a), (_, b)) in ind.tensors().zip(joint.tensors()) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-14, "{kernel:?}");
                }
            }
        }
    }

    #[test]
    fn sare_gaussian_symmetric_point() {
        let q = at(0.0);
        let p = at(0.8);
        let n = at(-0.8);
        let dn = dist_sq(&q, &n).sqrt();
        for mode in MODES {
            let g = sare(&q, &p, &[&n], Kernel::Gaussian, mode).unwrap();
            assert!((g.loss - std::f64::consts::LN_2).abs() < 1e-15);
            assert!((norm(&g.d_negatives[0]) - dn).abs() < 1e-15);
        }
    }

    #[test]
    fn sare_joint_scalar_values() {
        let q = vec![1.0, 0.0];
        let g = sare(
            &q,
            &q,
            &[at_dist_sq(1.0)],
            Kernel::Cauchy,
            NegativeMode::Joint,
        )
        .unwrap();
        assert!((g.loss - 1.5f64.ln()).abs() < 1e-15);

        let p = at_dist_sq(0.25); // d = 0.5
        let n = at_dist_sq(1.0); // d = 1.0
        let g = sare(&q, &p, &[n], Kernel::Exponential, NegativeMode::Joint).unwrap();
        assert!((g.loss - 0.474_076_984_180_107_3).abs() < 1e-12);
        assert!((g.loss - (-0.5f64).exp().ln_1p()).abs() < 1e-15);
    }

    #[test]
    fn exponential_zero_distance_is_degenerate() {
        let q = at(0.1);
        for mode in MODES {
            assert!(matches!(
                sare(&q, &q, &[at(1.0)], Kernel::Exponential, mode),
                Err(Error::DegenerateDirection(_))
            ));
            assert!(matches!(
                sare(
                    &q,
                    &at(1.0),
                    &[at(2.0), q.clone()],
                    Kernel::Exponential,
                    mode
                ),
                Err(Error::DegenerateDirection(_))
            ));
        }
        // The other kernels handle q == p.
        assert!(sare(&q, &q, &[at(1.0)], Kernel::Gaussian, NegativeMode::Joint).is_ok());
    }

    #[test]
    fn rejects_bad_shapes() {
        let empty: [Vec<f64>; 0] = [];
        assert!(sare(
            &[1.0, 0.0],
            &[0.0, 1.0],
            &empty,
            Kernel::Gaussian,
            NegativeMode::Joint
        )
        .is_err());
        assert!(matches!(
            triplet_ranking(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0, 0.0], 0.1),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(triplet_ranking(&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0], -0.1).is_err());
    }

    #[test]
    fn joint_loss_matches_kl_of_match_distribution() {
        let q = at(0.0);
        let p = at(0.5);
        let negs = vec![at(1.0), at(-0.3), at(2.5)];
        for kernel in Kernel::ALL {
            let dist = match_probability(&q, &p, &negs, kernel).unwrap();
            let g = sare(&q, &p, &negs, kernel, NegativeMode::Joint).unwrap();
            assert!((g.loss - dist.kl_from_prior()).abs() < 1e-14, "{kernel:?}");
            assert!(g.loss > 0.0);
        }
    }

    #[test]
    fn gaussian_joint_is_overflow_safe() {
        let q = vec![0.0, 0.0];
        let p = vec![40.0, 0.0];
        let n = vec![0.0, 1.0];
        let g = sare(&q, &p, &[n], Kernel::Gaussian, NegativeMode::Joint).unwrap();
        assert!((g.loss - (1600.0 - 1.0)).abs() < 1e-9);
        assert!(g.tensors().all(|(_, v)| v.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn evaluate_contrastive_tuple_layout() {
        let q = vec![0.0, 0.0];
        let p = vec![0.4, 0.0];
        let negs = [vec![0.0, 0.5], vec![3.0, 0.0]];
        let g = evaluate(&LossSpec::contrastive(), &q, &p, &negs).unwrap();
        // 0.08 + (0.02 + 0) / 2
        assert!((g.loss - 0.09).abs() < 1e-15);
        assert_eq!(g.d_negatives.len(), 2);
        assert_eq!(g.d_negatives[1], vec![0.0, 0.0]);
        assert!(g.translation_residual() < 1e-15);
    }
}
