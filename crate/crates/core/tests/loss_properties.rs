mod common;

use proptest::prelude::*;
use sare_core::gradcheck::{check_point_in, kink_distance, Arithmetic, DEFAULT_EPS};
use sare_core::gradfield::{closed_form_magnitude, GradTarget};
use sare_core::losses::{self, match_probability};
use sare_core::{Kernel, LossSpec, NegativeMode};

use common::all_specs;

fn point(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5f64..1.5, dim)
}

fn tuple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    (2usize..9, 1usize..7)
        .prop_flat_map(|(d, n)| (point(d), point(d), prop::collection::vec(point(d), n)))
}

fn spec() -> impl Strategy<Value = LossSpec> {
    prop::sample::select(all_specs())
}

fn kernel() -> impl Strategy<Value = Kernel> {
    prop::sample::select(Kernel::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn analytic_gradients_match_extended_precision_differences(spec in spec(), (q, p, negs) in tuple()) {
        prop_assume!(kink_distance(&spec, &q, &p, &negs) > 10.0 * DEFAULT_EPS);
        let r = check_point_in(Arithmetic::DoubleDouble, &spec, &q, &p, &negs, 1e-7).unwrap();
        prop_assert!(r.max_relative_error <= 1e-6, "{} {:?}", spec.label(), r);
    }

    #[test]
    fn gradients_sum_to_zero(spec in spec(), (q, p, negs) in tuple()) {
        prop_assume!(kink_distance(&spec, &q, &p, &negs) > 0.0);
        let g = losses::evaluate(&spec, &q, &p, &negs).unwrap();
        prop_assert!(g.translation_residual() <= 1e-10);
    }

    #[test]
    fn match_probabilities_sum_to_one(k in kernel(), (q, p, negs) in tuple()) {
        let c = match_probability(&q, &p, &negs, k).unwrap();
        let total = c.positive() + c.negatives().iter().sum::<f64>();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(c.learned_c.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn sare_loss_is_positive(k in kernel(), joint in any::<bool>(), (q, p, negs) in tuple()) {
        let mode = if joint { NegativeMode::Joint } else { NegativeMode::Independent };
        let spec = LossSpec::sare(k, mode);
        prop_assume!(kink_distance(&spec, &q, &p, &negs) > 0.0);
        prop_assert!(losses::evaluate(&spec, &q, &p, &negs).unwrap().loss > 0.0);
    }

    #[test]
    fn hinge_losses_are_non_negative(spec in prop::sample::select(vec![LossSpec::triplet(), LossSpec::contrastive()]), (q, p, negs) in tuple()) {
        prop_assume!(kink_distance(&spec, &q, &p, &negs) > 0.0);
        prop_assert!(losses::evaluate(&spec, &q, &p, &negs).unwrap().loss >= 0.0);
    }
}

#[test]
fn gaussian_force_on_negative_decays_past_unit_gap() {
    // |∂L/∂n| = 2·dn·σ(dp² − dn²) must fall as dn grows once dn² > dp² + 1.
    let spec = LossSpec::sare(Kernel::Gaussian, NegativeMode::Joint);
    let steps = 400;
    let mut checked = 0;
    for i in 0..=steps {
        let dp = 2.0 * i as f64 / steps as f64;
        let start = (dp * dp + 1.0).sqrt();
        let dns: Vec<f64> = (0..=steps)
            .map(|j| start + (3.0 - start).max(0.0) * j as f64 / steps as f64)
            .collect();
        let mags: Vec<f64> = dns
            .iter()
            .map(|&dn| closed_form_magnitude(&spec, GradTarget::WrtN, dp, dn).unwrap())
            .collect();
        for w in mags.windows(2) {
            if w[0] > 0.0 {
                assert!(w[1] <= w[0], "dp={dp}: {} then {}", w[0], w[1]);
                checked += 1;
            }
        }
    }
    assert!(checked > 100_000);
}
