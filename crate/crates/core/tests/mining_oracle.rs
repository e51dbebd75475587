use proptest::prelude::*;
use sare_core::dataset::{synth_generate, Descriptor};
use sare_core::mining::{mine_tuples, mine_with_embeddings, MiningConfig};
use sare_core::{l2_distance_squared, Architecture, EmbedderModel, SynthConfig};

fn desc(id: u64, place: i64, x: f64, y: f64, angle_deg: f64) -> Descriptor {
    let a = angle_deg.to_radians();
    Descriptor {
        image_id: id,
        place_id: place,
        x,
        y,
        features: vec![a.cos(), a.sin()],
    }
}

/// Every `k`-subset of `0..n`.
fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if n < k {
        return vec![];
    }
    let mut with_last: Vec<Vec<usize>> = subsets(n - 1, k - 1);
    for s in &mut with_last {
        s.push(n - 1);
    }
    let mut out = subsets(n - 1, k);
    out.extend(with_last);
    out
}

/// Exhaustive mining: the positive is the minimum over all nearby
/// candidates; the negatives are the far subset whose sorted
/// `(distance, id)` keys are lexicographically smallest.
fn brute_force(q: &Descriptor, db: &[Descriptor], cfg: &MiningConfig) -> Option<(u64, Vec<u64>)> {
    let key = |d: &Descriptor| {
        (
            l2_distance_squared(&q.features, &d.features).unwrap(),
            d.image_id,
        )
    };
    let geo = |d: &Descriptor| ((d.x - q.x).powi(2) + (d.y - q.y).powi(2)).sqrt();
    let mut best_pos: Option<(f64, u64)> = None;
    for d in db.iter().filter(|d| geo(d) <= cfg.r_pos) {
        let k = key(d);
        if best_pos.is_none_or(|b| k.0 < b.0 || (k.0 == b.0 && k.1 < b.1)) {
            best_pos = Some(k);
        }
    }
    let far: Vec<&Descriptor> = db.iter().filter(|d| geo(d) > cfg.r_neg).collect();
    let mut best: Option<Vec<(f64, u64)>> = None;
    for s in subsets(far.len(), cfg.n_neg) {
        let mut keys: Vec<(f64, u64)> = s.iter().map(|&i| key(far[i])).collect();
        keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let smaller = match &best {
            None => true,
            Some(b) => keys
                .iter()
                .zip(b)
                .map(|(x, y)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)))
                .find(|o| o.is_ne())
                .is_some_and(|o| o.is_lt()),
        };
        if smaller {
            best = Some(keys);
        }
    }
    Some((best_pos?.1, best?.iter().map(|k| k.1).collect()))
}

#[test]
fn three_place_toy_matches_brute_force() {
    // Three places 100 m apart; embeddings hand-placed on the unit circle
    // so some far views sit closer to the query than its own place does.
    let db = vec![
        desc(0, 0, 0.0, 0.0, 10.0),
        desc(1, 0, 3.0, 2.0, 40.0),
        desc(2, 0, -4.0, 1.0, 25.0),
        desc(3, 1, 100.0, 0.0, 20.0),
        desc(4, 1, 103.0, -2.0, 90.0),
        desc(5, 1, 98.0, 4.0, 5.0),
        desc(6, 2, 0.0, 100.0, 180.0),
        desc(7, 2, 2.0, 103.0, 15.0),
        desc(8, 2, -1.0, 97.0, 15.0),
    ];
    let queries = vec![
        desc(20, 0, 1.0, 1.0, 12.0),
        desc(21, 1, 101.0, 1.0, 60.0),
        desc(22, 2, 0.5, 99.0, 170.0),
    ];
    let emb = |ds: &[Descriptor]| ds.iter().map(|d| d.features.clone()).collect::<Vec<_>>();
    for n_neg in 1..=4 {
        let cfg = MiningConfig {
            n_neg,
            ..MiningConfig::default()
        };
        let tuples = mine_with_embeddings(&queries, &emb(&queries), &db, &emb(&db), &cfg).unwrap();
        assert_eq!(tuples.len(), 3);
        for (q, t) in queries.iter().zip(&tuples) {
            let (pos, negs) = brute_force(q, &db, &cfg).unwrap();
            assert_eq!(t.query.image_id, q.image_id);
            assert_eq!(
                t.positive.image_id, pos,
                "query {} n_neg {n_neg}",
                q.image_id
            );
            let got: Vec<u64> = t.negatives.iter().map(|d| d.image_id).collect();
            assert_eq!(got, negs, "query {} n_neg {n_neg}", q.image_id);
        }
    }
}

#[test]
fn identical_views_pick_lowest_id_positive() {
    let cfg = SynthConfig {
        n_places: 12,
        views_per_place: 4,
        queries_per_place: 1,
        d_in: 8,
        view_noise_sigma: 0.0,
        map_extent_m: 1000.0,
        seed: 3,
    };
    let ds = synth_generate(&cfg).unwrap();
    let model = EmbedderModel::new(Architecture::Linear, 8, 4, 1).unwrap();
    let mining = MiningConfig {
        n_neg: 3,
        ..MiningConfig::default()
    };
    for t in mine_tuples(&ds, &model, &mining).unwrap() {
        let lowest = ds
            .database
            .iter()
            .filter(|d| d.geo_distance(&t.query) <= mining.r_pos)
            .map(|d| d.image_id)
            .min()
            .unwrap();
        assert_eq!(t.positive.image_id, lowest);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mined_tuples_satisfy_radii_and_hardness(seed in 0u64..1000, n_neg in 1usize..6) {
        let cfg = SynthConfig {
            n_places: 15,
            views_per_place: 3,
            queries_per_place: 2,
            d_in: 6,
            view_noise_sigma: 0.2,
            map_extent_m: 800.0,
            seed,
        };
        let ds = synth_generate(&cfg).unwrap();
        let model = EmbedderModel::new(Architecture::Linear, 6, 4, seed).unwrap();
        let mining = MiningConfig { n_neg, ..MiningConfig::default() };
        let tuples = mine_tuples(&ds, &model, &mining).unwrap();
        for t in &tuples {
            t.validate(mining.r_pos, mining.r_neg).unwrap();
            prop_assert_eq!(t.negatives.len(), n_neg);
            let e = |d: &Descriptor| model.embed(&d.features).unwrap().into_values();
            let qe = e(&t.query);
            let worst = t
                .negatives
                .iter()
                .map(|n| l2_distance_squared(&qe, &e(n)).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            let chosen: Vec<u64> = t.negatives.iter().map(|n| n.image_id).collect();
            for d in ds.database.iter().filter(|d| d.geo_distance(&t.query) > mining.r_neg) {
                if !chosen.contains(&d.image_id) {
                    prop_assert!(l2_distance_squared(&qe, &e(d)).unwrap() >= worst);
                }
            }
        }
    }
}
