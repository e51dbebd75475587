mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sare_core::dataset::synth_generate;
use sare_core::eval::{
    average_precision, evaluate_split, mean_average_precision, pca_fit, recall_at_n, EvalConfig,
    RetrievalDb,
};
use sare_core::{Architecture, EmbedderModel, SynthConfig};

#[test]
fn pca_matches_jacobi_on_random_50_by_8() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let data: Vec<Vec<f64>> = (0..50)
        .map(|_| {
            (0..8)
                .map(|j| rng.sample::<f64, _>(StandardNormal) * (1.0 + j as f64))
                .collect()
        })
        .collect();
    let n = data.len() as f64;
    let mean: Vec<f64> = (0..8)
        .map(|j| data.iter().map(|x| x[j]).sum::<f64>() / n)
        .collect();
    let cov: Vec<Vec<f64>> = (0..8)
        .map(|i| {
            (0..8)
                .map(|j| {
                    data.iter()
                        .map(|x| (x[i] - mean[i]) * (x[j] - mean[j]))
                        .sum::<f64>()
                        / n
                })
                .collect()
        })
        .collect();
    let (vals, vecs) = common::jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..8).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));

    let proj = pca_fit(&data, 4).unwrap();
    for (r, &col) in order[..4].iter().enumerate() {
        let oracle: Vec<f64> = (0..8).map(|i| vecs[i][col]).collect();
        let sign = oracle
            .iter()
            .zip(&proj.components[r])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .signum();
        for (a, b) in oracle.iter().zip(&proj.components[r]) {
            assert!((sign * a - b).abs() < 1e-8, "component {r}: {a} vs {b}");
        }
        assert!((vals[col] - proj.eigenvalues[r]).abs() < 1e-8);
    }
    for (i, a) in proj.components.iter().enumerate() {
        for (j, b) in proj.components.iter().enumerate() {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            assert!((dot - f64::from(u8::from(i == j))).abs() < 1e-10);
        }
    }
}

#[test]
fn evaluate_split_on_synthetic_data() {
    let cfg = SynthConfig {
        n_places: 20,
        views_per_place: 3,
        queries_per_place: 2,
        d_in: 12,
        view_noise_sigma: 0.05,
        map_extent_m: 1000.0,
        seed: 9,
    };
    let ds = synth_generate(&cfg).unwrap();
    let model = EmbedderModel::new(Architecture::Linear, 12, 6, 1).unwrap();
    let eval = EvalConfig {
        top_k: 5,
        ..EvalConfig::default()
    };
    let out = evaluate_split(&model, &ds, &eval).unwrap();
    assert_eq!(out.report.dim, 6);
    assert_eq!(out.top_k.len(), ds.queries_test.len());
    assert!(out.top_k.iter().all(|(_, ids)| ids.len() == 5));
    assert!(out.curve.recalls.windows(2).all(|w| w[0] <= w[1]));
    assert!((0.0..=1.0).contains(&out.report.map));

    let reduced = evaluate_split(
        &model,
        &ds,
        &EvalConfig {
            pca_dim: Some(3),
            ..eval
        },
    )
    .unwrap();
    assert_eq!(reduced.report.dim, 3);
}

fn unit2(angle: f64) -> Vec<f64> {
    vec![angle.cos(), angle.sin()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recall_is_nondecreasing_in_n(
        db_angles in prop::collection::vec(0.0f64..std::f64::consts::TAU, 2..20),
        q_angles in prop::collection::vec(0.0f64..std::f64::consts::TAU, 1..8),
        xs in prop::collection::vec(0.0f64..200.0, 28),
    ) {
        let db = RetrievalDb::new(
            (0..db_angles.len() as u64).collect(),
            db_angles.iter().enumerate().map(|(i, _)| [xs[i], 0.0]).collect(),
            db_angles.iter().map(|&a| unit2(a)).collect(),
        ).unwrap();
        let q: Vec<Vec<f64>> = q_angles.iter().map(|&a| unit2(a)).collect();
        let pos: Vec<[f64; 2]> = (0..q.len()).map(|i| [xs[20 + i], 0.0]).collect();
        let curve = recall_at_n(&db, &q, &pos, &[1, 2, 3, 5, 10, 25], 25.0).unwrap();
        prop_assert!(curve.recalls.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn perfect_rankings_have_unit_map(
        sizes in prop::collection::vec((1usize..5, 0usize..6), 1..6),
    ) {
        let mut rankings = Vec::new();
        let mut relevance = Vec::new();
        for (q, &(rel, irr)) in sizes.iter().enumerate() {
            let base = 100 * q as u64;
            let relevant: Vec<u64> = (0..rel as u64).map(|i| base + i).collect();
            let mut ranking = relevant.clone();
            ranking.extend((0..irr as u64).map(|i| base + 50 + i));
            relevance.push(relevant.into_iter().collect::<HashSet<_>>());
            rankings.push(ranking);
        }
        prop_assert_eq!(mean_average_precision(&rankings, &relevance).unwrap(), 1.0);
    }

    #[test]
    fn single_relevant_at_rank_k(k in 1usize..30) {
        let ranking: Vec<u64> = (0..30).collect();
        let ap = average_precision(&ranking, &HashSet::from([k as u64 - 1])).unwrap();
        prop_assert!((ap - 1.0 / k as f64).abs() < 1e-15);
    }
}
