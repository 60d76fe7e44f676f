use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use trendgen_core::catalog::{
    catalog_to_jsonl, decode_catalog_binary, encode_catalog_binary, outfits_to_jsonl, parse_catalog, parse_outfits,
    Catalog, Division, LoadOptions, Verdict,
};
use trendgen_core::compat::{build_triplets, co_occurrence, validate_triplet, CompatModel, MulticolorRule, PairingKey};
use trendgen_core::evaluator::{synth_expert_outfits, synth_world, EvaluatorConfig, SynthConfig, SynthWorld};
use trendgen_core::nn::TrainConfig;
use trendgen_core::outfit::{default_template, Generator, LogicalClock, OutfitTemplate, Stamper};
use trendgen_core::retrieval::{KnnIndex, QuerySpace};
use trendgen_core::stylerank::AppearanceTable;
use trendgen_core::{compat, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    world: SynthWorld,
    outfits: Vec<trendgen_core::catalog::OutfitRecord>,
    models: BTreeMap<PairingKey, CompatModel>,
    index: KnnIndex,
    templates: BTreeMap<Division, OutfitTemplate>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let frozen = EvaluatorConfig::frozen();
        let cfg = SynthConfig { n: 150, seed: 7, ..frozen.catalog };
        let world = synth_world(&cfg, &frozen.oracle).unwrap();
        let outfits = synth_expert_outfits(&world, &frozen.experts, 7).unwrap();
        let template = default_template(Division::Tops);
        let pairings: Vec<PairingKey> = template.pairings().collect();
        let train = TrainConfig {
            epochs: 3,
            ..frozen.training.train.clone()
        };
        let trained = compat::train_pairings(&world.catalog, &outfits, &pairings, &train, 0.2, 4).unwrap();
        let models: BTreeMap<_, _> = trained.into_iter().map(|(k, (m, _))| (k, m)).collect();
        let index = KnnIndex::build(&world.catalog, &models, QuerySpace::Compat).unwrap();
        Fixture {
            world,
            outfits,
            models,
            index,
            templates: [(Division::Tops, template)].into(),
        }
    })
}

fn tops(f: &Fixture) -> Vec<String> {
    f.world
        .catalog
        .in_division(Division::Tops)
        .map(|p| p.product_id.clone())
        .collect()
}

#[test]
fn three_outfits_are_distinct_and_follow_the_template() {
    let f = fixture();
    let g = Generator::new(&f.world.catalog, &f.index, &f.templates);
    let mut table = AppearanceTable::new();
    let mut stamper = Stamper::new(0, LogicalClock(0));
    for anchor in tops(f).iter().take(10) {
        let before: u64 = table.iter().map(|(_, n)| n).sum();
        let outfits = g.generate_three(anchor, &mut table, 1.0, &mut stamper).unwrap();
        assert_eq!(outfits.len(), 3);
        let after: u64 = table.iter().map(|(_, n)| n).sum();
        assert_eq!(after - before, 9, "one count per selected item");
        let sets: BTreeSet<_> = outfits.iter().map(|o| o.selections.clone()).collect();
        assert_eq!(sets.len(), 3);
        for o in &outfits {
            o.validate(&f.world.catalog, &f.templates[&Division::Tops]).unwrap();
            assert!(!o.duplicate);
            assert!(o.selected_ids().all(|id| id != anchor));
        }
    }
    assert_eq!(stamper.next_seq, 30);
}

#[test]
fn single_outfit_increments_table_once() {
    let f = fixture();
    let g = Generator::new(&f.world.catalog, &f.index, &f.templates);
    let mut table = AppearanceTable::new();
    let mut stamper = Stamper::new(0, LogicalClock(0));
    let anchor = &tops(f)[0];
    let o = g.generate_many(anchor, 1, &mut table, 1.0, &mut stamper).unwrap();
    assert_eq!(table.len(), 3);
    assert!(o[0].selected_ids().all(|id| table.get(id) == 1));
    assert_eq!(table.get(anchor), 0);
}

#[test]
fn lambda_zero_repeats_are_regenerated() {
    // with one candidate per division a repeat can only be fixed by exclusion
    let f = fixture();
    let mut g = Generator::new(&f.world.catalog, &f.index, &f.templates);
    g.k = 1;
    let mut table = AppearanceTable::new();
    let mut stamper = Stamper::new(0, LogicalClock(0));
    let outfits = g.generate_many(&tops(f)[1], 3, &mut table, 0.0, &mut stamper).unwrap();
    let sets: BTreeSet<_> = outfits.iter().map(|o| o.selections.clone()).collect();
    assert_eq!(sets.len(), 3);
    assert!(outfits.iter().all(|o| !o.duplicate));
}

#[test]
fn exhausted_pool_keeps_the_repeat_and_flags_it() {
    let f = fixture();
    let top = f.world.catalog.in_division(Division::Tops).next().unwrap().clone();
    let bottom = f.world.catalog.in_division(Division::Bottoms).next().unwrap().clone();
    let catalog = Catalog::from_products([top.clone(), bottom.clone()]).unwrap();
    let pairing = PairingKey::new(Division::Tops, Division::Bottoms).unwrap();
    let models: BTreeMap<_, _> = [(pairing, f.models[&pairing].clone())].into();
    let index = KnnIndex::build(&catalog, &models, QuerySpace::Compat).unwrap();
    let templates = [(Division::Tops, OutfitTemplate::new(Division::Tops, vec![Division::Bottoms]).unwrap())].into();
    let g = Generator::new(&catalog, &index, &templates);
    let mut table = AppearanceTable::new();
    let mut stamper = Stamper::new(0, LogicalClock(0));
    let outfits = g.generate_three(&top.product_id, &mut table, 1.0, &mut stamper).unwrap();
    assert_eq!(outfits.iter().map(|o| o.duplicate).collect::<Vec<_>>(), [false, true, true]);
    assert_eq!(table.get(&bottom.product_id), 3);
}

#[test]
fn unknown_anchor_and_missing_template() {
    let f = fixture();
    let g = Generator::new(&f.world.catalog, &f.index, &f.templates);
    let mut table = AppearanceTable::new();
    let mut stamper = Stamper::new(0, LogicalClock(0));
    assert!(matches!(
        g.generate_three("nope", &mut table, 1.0, &mut stamper),
        Err(Error::UnknownProduct(_))
    ));
    let bottom = f.world.catalog.in_division(Division::Bottoms).next().unwrap();
    assert!(g.generate_three(&bottom.product_id, &mut table, 1.0, &mut stamper).is_err());
    assert!(table.is_empty(), "failed calls leave the table alone");
}

#[test]
fn triplets_respect_the_construction_rules() {
    let f = fixture();
    for &pairing in f.models.keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = build_triplets(&f.world.catalog, &f.outfits, pairing, 4, &mut rng).unwrap();
        let (co, _) = co_occurrence(&f.world.catalog, &f.outfits, pairing, &[&MulticolorRule]).unwrap();
        assert!(!set.triplets.is_empty());
        for t in &set.triplets {
            validate_triplet(&f.world.catalog, &co, t).unwrap();
        }
    }
}

#[test]
fn rejected_and_pending_outfits_do_not_feed_training() {
    let f = fixture();
    let pairing = *f.models.keys().next().unwrap();
    let mut outfits = f.outfits.clone();
    for o in &mut outfits {
        o.verdict = Verdict::Rejected;
    }
    let (co, _) = co_occurrence(&f.world.catalog, &outfits, pairing, &[&MulticolorRule]).unwrap();
    assert!(co.is_empty());
    outfits[0].verdict = Verdict::Pending;
    let (co, _) = co_occurrence(&f.world.catalog, &outfits, pairing, &[&MulticolorRule]).unwrap();
    assert!(co.is_empty());
}

#[test]
fn catalog_and_outfit_text_round_trip_bitwise() {
    let f = fixture();
    let text = catalog_to_jsonl(&f.world.catalog);
    let back = parse_catalog(text.as_bytes(), LoadOptions::default()).unwrap();
    assert_eq!(back, f.world.catalog);
    assert_eq!(catalog_to_jsonl(&back), text);

    let bin = encode_catalog_binary(&f.world.catalog);
    assert_eq!(encode_catalog_binary(&decode_catalog_binary(&bin).unwrap()), bin);

    let text = outfits_to_jsonl(&f.outfits);
    let back = parse_outfits(text.as_bytes()).unwrap();
    assert_eq!(back, f.outfits);
    assert_eq!(outfits_to_jsonl(&back), text);
}

#[test]
fn cuts_inside_a_record_are_rejected() {
    let f = fixture();
    let text = catalog_to_jsonl(&f.world.catalog);
    let first_end = text.find('\n').unwrap();
    for cut in (1..first_end).step_by(97) {
        assert!(parse_catalog(&text.as_bytes()[..cut], LoadOptions::default()).is_err());
    }
    let outfits = outfits_to_jsonl(&f.outfits);
    let first_end = outfits.find('\n').unwrap();
    for cut in 1..first_end {
        assert!(parse_outfits(&outfits.as_bytes()[..cut]).is_err(), "cut {cut}");
    }
}

#[test]
fn model_snapshots_round_trip_and_detect_truncation() {
    let f = fixture();
    for m in f.models.values() {
        let bytes = m.encode();
        let back = CompatModel::decode(&bytes).unwrap();
        assert_eq!(&back, m);
        assert_eq!(back.encode(), bytes);
        for cut in [0, 3, 7, 16, bytes.len() / 2, bytes.len() - 1] {
            assert!(CompatModel::decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }
}
