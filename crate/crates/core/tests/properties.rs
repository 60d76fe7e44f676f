use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;

use trendgen_core::compat::{triplet_loss, triplet_loss_grad, PairingKey};
use trendgen_core::evaluator::{division_allocation, is_unimodal};
use trendgen_core::retrieval::{exact_knn, Neighbor, MAX_K};
use trendgen_core::stylerank::{stylerank, AppearanceTable};

fn vecs(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    let v = || prop::collection::vec(-2.0f64..2.0, dim);
    (v(), v(), v())
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Candidates with ranks 1..=n and appearance counts drawn from `counts`.
fn instance(max_n: usize) -> impl Strategy<Value = (Vec<Neighbor>, AppearanceTable)> {
    prop::collection::vec(0u64..6, 1..max_n).prop_map(|counts| {
        let mut table = AppearanceTable::new();
        let cands = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let id = format!("p{i:03}");
                for _ in 0..c {
                    table.record_appearances([id.as_str()]);
                }
                Neighbor {
                    product_id: id,
                    squared_distance: i as f64,
                    rank: i + 1,
                }
            })
            .collect();
        (cands, table)
    })
}

proptest! {
    #[test]
    fn triplet_loss_is_the_clamped_margin_gap((a, p, n) in vecs(6), m in 0.01f64..1.0) {
        let expected = (sq(&a, &p) - sq(&a, &n) + m).max(0.0);
        let got = triplet_loss(&a, &p, &n, m).unwrap();
        prop_assert!(got >= 0.0);
        prop_assert!((got - expected).abs() <= 1e-12 * (1.0 + expected));
    }

    #[test]
    fn triplet_gradient_matches_central_differences((a, p, n) in vecs(5), m in 0.05f64..1.0) {
        let raw = sq(&a, &p) - sq(&a, &n) + m;
        prop_assume!(raw.abs() > 1e-3);
        let g = triplet_loss_grad(&a, &p, &n, m).unwrap();
        let eps = 1e-6;
        let f = |a: &[f64], p: &[f64], n: &[f64]| triplet_loss(a, p, n, m).unwrap();
        for i in 0..a.len() {
            for (which, analytic) in [(0, g.anchor[i]), (1, g.positive[i]), (2, g.negative[i])] {
                let mut args = [a.clone(), p.clone(), n.clone()];
                args[which][i] += eps;
                let plus = f(&args[0], &args[1], &args[2]);
                args[which][i] -= 2.0 * eps;
                let minus = f(&args[0], &args[1], &args[2]);
                let numeric = (plus - minus) / (2.0 * eps);
                prop_assert!((numeric - analytic).abs() < 1e-5, "coord {i} arg {which}: {numeric} vs {analytic}");
            }
        }
    }

    #[test]
    fn satisfied_triplets_have_no_loss_or_gradient((a, p, n) in vecs(4), m in 0.01f64..0.5) {
        prop_assume!(sq(&a, &n) > sq(&a, &p) + m);
        let g = triplet_loss_grad(&a, &p, &n, m).unwrap();
        prop_assert_eq!(g.loss, 0.0);
        prop_assert!(g.anchor.iter().chain(&g.positive).chain(&g.negative).all(|&v| v == 0.0));
    }

    #[test]
    fn knn_matches_full_sort(
        points in prop::collection::vec(prop::collection::vec(-3i32..3, 3), 1..150),
        query in prop::collection::vec(-3i32..3, 3),
        k in 1usize..130,
        excluded in prop::collection::btree_set(0usize..150, 0..10),
    ) {
        // small integer grid, so equal distances are common
        let ids: Vec<String> = (0..points.len()).map(|i| format!("id{:03}", (i * 37) % 997)).collect();
        prop_assume!(ids.iter().collect::<BTreeSet<_>>().len() == ids.len());
        let vectors = Array2::from_shape_fn((points.len(), 3), |(r, c)| points[r][c] as f64);
        let q: Vec<f64> = query.iter().map(|&v| v as f64).collect();
        let exclude: BTreeSet<String> = excluded.iter().filter(|&&i| i < ids.len()).map(|&i| ids[i].clone()).collect();

        let mut oracle: Vec<(f64, &String)> = ids
            .iter()
            .enumerate()
            .filter(|(_, id)| !exclude.contains(*id))
            .map(|(i, id)| (points[i].iter().zip(&query).map(|(&x, &y)| ((x - y) * (x - y)) as f64).sum(), id))
            .collect();
        oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
        oracle.truncate(k.min(MAX_K));

        let got = exact_knn(&ids, &vectors, &q, k, &exclude).unwrap();
        prop_assert_eq!(got.len(), oracle.len());
        for (i, (n, (d, id))) in got.iter().zip(&oracle).enumerate() {
            prop_assert_eq!(&n.product_id, *id);
            prop_assert_eq!(n.squared_distance, *d);
            prop_assert_eq!(n.rank, i + 1);
        }
    }

    #[test]
    fn stylerank_selects_the_brute_force_minimum((cands, table) in instance(40), lambda in 0.0f64..4.0) {
        let (selected, ranked) = stylerank(&cands, &table, lambda).unwrap();
        // appearance ranks form a permutation ordered by count
        let mut ra: Vec<usize> = ranked.iter().map(|r| r.appearance_rank).collect();
        ra.sort_unstable();
        prop_assert_eq!(ra, (1..=cands.len()).collect::<Vec<_>>());
        for x in &ranked {
            for y in &ranked {
                if table.get(&x.product_id) < table.get(&y.product_id) {
                    prop_assert!(x.appearance_rank < y.appearance_rank);
                }
            }
        }
        let best = ranked
            .iter()
            .map(|r| (r.distance_rank as f64 + lambda * r.appearance_rank as f64, r.distance_rank))
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
            .unwrap();
        prop_assert_eq!(&selected, &cands[best.1 - 1].product_id);
    }

    #[test]
    fn stylerank_ignores_input_order((cands, table) in instance(30), lambda in 0.0f64..3.0, rot in 0usize..30) {
        let mut shuffled = cands.clone();
        shuffled.rotate_left(rot % cands.len());
        shuffled.reverse();
        prop_assert_eq!(
            stylerank(&cands, &table, lambda).unwrap(),
            stylerank(&shuffled, &table, lambda).unwrap()
        );
    }

    #[test]
    fn equal_counts_reduce_to_nearest((cands, _) in instance(40), count in 0u64..5, lambda in 0.0f64..5.0) {
        let mut table = AppearanceTable::new();
        for c in &cands {
            for _ in 0..count {
                table.record_appearances([c.product_id.as_str()]);
            }
        }
        prop_assert_eq!(stylerank(&cands, &table, lambda).unwrap().0, cands[0].product_id.clone());
    }

    #[test]
    fn appearance_table_round_trips(entries in prop::collection::btree_map("[a-z0-9_-]{1,12}", 1u64..1000, 0..30)) {
        let mut t = AppearanceTable::new();
        for (id, n) in &entries {
            for _ in 0..*n % 7 + 1 {
                t.record_appearances([id.as_str()]);
            }
        }
        let text = t.to_text().unwrap();
        let back = AppearanceTable::parse(&text).unwrap();
        prop_assert_eq!(back.to_text().unwrap(), text);
        prop_assert_eq!(back, t);
    }

    #[test]
    fn allocation_is_exhaustive(n in 10usize..5000) {
        let c = division_allocation(n);
        prop_assert_eq!(c.iter().sum::<usize>(), n);
    }

    #[test]
    fn unimodal_detects_single_peak(mut v in prop::collection::vec(0.0f64..1.0, 2..10)) {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assert!(is_unimodal(&v));
        let len = v.len();
        if v[0] < v[len - 1] {
            // valley in the middle breaks unimodality
            let mut w = v.clone();
            w.reverse();
            w.extend(v.iter().skip(1));
            prop_assert!(!is_unimodal(&w));
        }
    }
}

#[test]
fn pairing_slugs_round_trip() {
    for p in trendgen_core::outfit::all_pairings() {
        let back: PairingKey = p.slug().parse().unwrap();
        assert_eq!(back, p);
    }
    assert!("tops:tops".parse::<PairingKey>().is_err());
    assert!("tops".parse::<PairingKey>().is_err());
}
