//! Synthetic evaluation world: a seeded catalog whose embeddings are noisy
//! projections of hidden style vectors, an automatic judge standing in for
//! human stylists, and the lambda ablation harness.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::catalog::{
    AttributeVector, Catalog, Division, Embedding, OutfitRecord, OutfitSource, Product, RejectReason, Verdict,
    EMBEDDING_DIM, MULTICOLOR,
};
use crate::compat::{
    build_triplets, co_occurrence, train_pairing_with, train_pairings, triplet_satisfaction, CompatModel, CompatTrainReport, MulticolorRule, PairingKey,
    Triplet,
};
use crate::error::{Error, Result};
use crate::nn::TrainConfig;
use crate::outfit::{default_template, Generator, LogicalClock, Outfit, OutfitTemplate, Stamper};
use crate::retrieval::{KnnIndex, QuerySpace};
use crate::stylerank::AppearanceTable;

pub const STYLE_DIM: usize = 8;

const FROZEN: &str = include_str!("../config/evaluator.toml");

/// Division shares of the synthetic catalog, in `Division::ALL` order.
pub const DIVISION_SHARES: [f64; 5] = [0.30, 0.25, 0.15, 0.10, 0.20];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    /// Number of style families the hidden vectors cluster around.
    pub families: usize,
    /// Per-product spread around its family centre is uniform in this range.
    pub spread_min: f64,
    pub spread_max: f64,
    /// Gaussian noise added to every embedding coordinate.
    pub noise_sigma: f64,
    pub multicolor_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub outfits_per_product: usize,
    /// Each expert pick is drawn from the `top_m` most coherent items.
    pub top_m: usize,
    pub holdout_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub coherence_threshold: f64,
    pub variety_cap: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub margin: f64,
    pub negatives_per_pair: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub lambda_grid: Vec<f64>,
    pub anchors: usize,
    pub outfits_per_anchor: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorConfig {
    pub catalog: SynthConfig,
    pub experts: ExpertConfig,
    pub oracle: OracleConfig,
    pub training: TrainingConfig,
    pub ablation: AblationConfig,
}

impl EvaluatorConfig {
    /// The checked-in settings.
    pub fn frozen() -> Self {
        Self::parse(FROZEN).expect("bundled evaluator config parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let c = &self.catalog;
        if c.families == 0 || !(0.0 <= c.spread_min && c.spread_min <= c.spread_max) {
            return bad("catalog: need families >= 1 and 0 <= spread_min <= spread_max");
        }
        if !(0.0..=1.0).contains(&c.multicolor_fraction) || c.noise_sigma < 0.0 {
            return bad("catalog: multicolor_fraction in [0, 1] and noise_sigma >= 0");
        }
        if self.experts.top_m == 0 || !(0.0..1.0).contains(&self.experts.holdout_fraction) {
            return bad("experts: top_m >= 1 and holdout_fraction in [0, 1)");
        }
        if self.oracle.variety_cap == 0 {
            return bad("oracle: variety_cap must be positive");
        }
        self.training.train.validate()?;
        if !(self.training.margin > 0.0) || self.training.negatives_per_pair == 0 {
            return bad("training: margin > 0 and negatives_per_pair >= 1");
        }
        let grid = &self.ablation.lambda_grid;
        if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] < 0.0 {
            return bad("ablation: lambda_grid must be non-empty, ascending and non-negative");
        }
        if self.ablation.k == 0 || self.ablation.outfits_per_anchor == 0 {
            return bad("ablation: k and outfits_per_anchor must be positive");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Oracle

/// Automatic judge: rejects incoherent outfits and over-shown items.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleOracle {
    hidden: HashMap<String, [f64; STYLE_DIM]>,
    multicolor: BTreeSet<String>,
    pub coherence_threshold: f64,
    pub variety_cap: u64,
    /// Times each item appeared in an approved outfit.
    pub approval_log: BTreeMap<String, u64>,
}

impl StyleOracle {
    pub fn hidden(&self, id: &str) -> Option<&[f64; STYLE_DIM]> {
        self.hidden.get(id)
    }

    fn lookup(&self, id: &str) -> Result<&[f64; STYLE_DIM]> {
        self.hidden(id).ok_or_else(|| Error::UnknownProduct(id.to_string()))
    }

    pub fn cosine(&self, a: &str, b: &str) -> Result<f64> {
        Ok(dot(self.lookup(a)?, self.lookup(b)?))
    }

    /// Same judge with an empty approval log.
    pub fn fresh(&self) -> Self {
        Self {
            approval_log: BTreeMap::new(),
            ..self.clone()
        }
    }

    /// Judges `anchor` + `selected`. Coherence is checked before variety;
    /// only approvals touch the log.
    pub fn judge(&mut self, anchor: &str, selected: &[&str]) -> Result<(Verdict, Option<RejectReason>)> {
        let mut items = vec![anchor];
        items.extend_from_slice(selected);
        let vectors = items.iter().map(|id| self.lookup(id)).collect::<Result<Vec<_>>>()?;
        let incoherent = vectors
            .iter()
            .enumerate()
            .any(|(i, a)| vectors[i + 1..].iter().any(|b| dot(*a, *b) < self.coherence_threshold));
        let multicolor = items.iter().filter(|id| self.multicolor.contains(**id)).count();
        if incoherent || multicolor >= 2 {
            return Ok((Verdict::Rejected, Some(RejectReason::Coherence)));
        }
        if selected
            .iter()
            .any(|id| self.approval_log.get(*id).copied().unwrap_or(0) >= self.variety_cap)
        {
            return Ok((Verdict::Rejected, Some(RejectReason::Variety)));
        }
        for id in selected {
            *self.approval_log.entry(id.to_string()).or_insert(0) += 1;
        }
        Ok((Verdict::Approved, None))
    }
}

pub fn oracle_judge(outfit: &Outfit, oracle: &mut StyleOracle) -> Result<(Verdict, Option<RejectReason>)> {
    let selected: Vec<&str> = outfit.selected_ids().collect();
    oracle.judge(&outfit.anchor_id, &selected)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

// ---------------------------------------------------------------------------
// Synthetic catalog

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub catalog: Catalog,
    pub oracle: StyleOracle,
    /// Unit centres of the style families; family 0 is the trending one.
    pub family_centres: Vec<[f64; STYLE_DIM]>,
}

/// Items per division: floor of each share, leftovers to the largest
/// fractional parts.
pub fn division_allocation(n: usize) -> [usize; 5] {
    let mut counts = [0usize; 5];
    let mut fracs: Vec<(f64, usize)> = Vec::with_capacity(5);
    for (i, share) in DIVISION_SHARES.iter().enumerate() {
        let exact = share * n as f64;
        counts[i] = exact.floor() as usize;
        fracs.push((exact - exact.floor(), i));
    }
    fracs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let left = n - counts.iter().sum::<usize>();
    for &(_, i) in fracs.iter().take(left) {
        counts[i] += 1;
    }
    counts
}

const CATEGORIES: [&[&str]; 5] = [
    &["tshirt", "shirt", "blouse", "sweater"],
    &["jeans", "trousers", "skirt", "shorts"],
    &["sneakers", "boots", "loafers", "sandals"],
    &["jacket", "coat", "blazer"],
    &["bag", "belt", "scarf", "hat"],
];
const COLORS: [&str; 6] = ["black", "white", "navy", "beige", "red", "green"];

/// Standard world with the frozen settings but a chosen size and seed.
pub fn synth_catalog(n: usize, seed: u64) -> Result<(Catalog, StyleOracle)> {
    let frozen = EvaluatorConfig::frozen();
    let cfg = SynthConfig { n, seed, ..frozen.catalog };
    let world = synth_world(&cfg, &frozen.oracle)?;
    Ok((world.catalog, world.oracle))
}

pub fn synth_world(cfg: &SynthConfig, oracle: &OracleConfig) -> Result<SynthWorld> {
    if cfg.n < 10 {
        return Err(Error::InvalidArgument(format!(
            "synthetic catalog needs at least 10 products, got {}",
            cfg.n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let family_centres: Vec<[f64; STYLE_DIM]> = (0..cfg.families)
        .map(|_| {
            let mut c = [0.0; STYLE_DIM];
            c.iter_mut().for_each(|v| *v = gauss(&mut rng));
            normalize(&mut c);
            c
        })
        .collect();
    // fixed projections of the hidden style into each embedding half
    let proj_scale = 1.0 / (STYLE_DIM as f64).sqrt();
    let projection = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..EMBEDDING_DIM * STYLE_DIM).map(|_| gauss(rng) * proj_scale).collect()
    };
    let image_proj = projection(&mut rng);
    let text_proj = projection(&mut rng);
    let multicolor_dir: Vec<f64> = (0..EMBEDDING_DIM).map(|_| gauss(&mut rng) * proj_scale).collect();

    let counts = division_allocation(cfg.n);
    let mut products = Vec::with_capacity(cfg.n);
    let mut hidden = HashMap::with_capacity(cfg.n);
    let mut multicolor = BTreeSet::new();
    for (d, &count) in Division::ALL.iter().zip(&counts) {
        for i in 0..count {
            let id = format!("{}-{:04}", d.as_str().to_lowercase(), i);
            let family = rng.gen_range(0..cfg.families);
            let spread = rng.gen_range(cfg.spread_min..=cfg.spread_max);
            let mut h = family_centres[family];
            for v in h.iter_mut() {
                *v += spread * gauss(&mut rng) * proj_scale;
            }
            normalize(&mut h);
            let is_multi = rng.gen_bool(cfg.multicolor_fraction);
            let embed = |proj: &[f64], extra: Option<&[f64]>, rng: &mut ChaCha8Rng| {
                let values: Vec<f32> = (0..EMBEDDING_DIM)
                    .map(|r| {
                        let row = &proj[r * STYLE_DIM..(r + 1) * STYLE_DIM];
                        let mut v = dot(row, &h) + cfg.noise_sigma * gauss(rng);
                        if let Some(dir) = extra {
                            v += dir[r];
                        }
                        v as f32
                    })
                    .collect();
                Embedding::new(values).expect("finite synthetic embedding")
            };
            let image_embedding = embed(&image_proj, None, &mut rng);
            let text_embedding = embed(&text_proj, is_multi.then_some(multicolor_dir.as_slice()), &mut rng);
            let category = CATEGORIES[d.code() as usize].choose(&mut rng).unwrap().to_string();
            let color = if is_multi {
                MULTICOLOR.to_string()
            } else {
                COLORS.choose(&mut rng).unwrap().to_string()
            };
            if is_multi {
                multicolor.insert(id.clone());
            }
            hidden.insert(id.clone(), h);
            products.push(Product {
                title: format!("{color} {category}"),
                image_uri: format!("synthetic://{id}.png"),
                product_id: id,
                attributes: AttributeVector {
                    division: *d,
                    category,
                    color,
                    multicolor: is_multi,
                    extra: None,
                },
                image_embedding,
                text_embedding,
            });
        }
    }
    Ok(SynthWorld {
        catalog: Catalog::from_products(products)?,
        oracle: StyleOracle {
            hidden,
            multicolor,
            coherence_threshold: oracle.coherence_threshold,
            variety_cap: oracle.variety_cap,
            approval_log: BTreeMap::new(),
        },
        family_centres,
    })
}

/// Approved expert outfits: every product anchors `outfits_per_product`
/// outfits following its default template, each pick drawn from the
/// `top_m` items most coherent with the anchor. At most one multicolor
/// item per outfit.
pub fn synth_expert_outfits(world: &SynthWorld, cfg: &ExpertConfig, seed: u64) -> Result<Vec<OutfitRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let catalog = &world.catalog;
    let oracle = &world.oracle;
    let mut out = Vec::new();
    for anchor in catalog.iter() {
        let template = default_template(anchor.division());
        for _ in 0..cfg.outfits_per_product {
            let mut items = vec![anchor.product_id.clone()];
            let mut has_multi = anchor.is_multicolor();
            for &t in &template.targets {
                let mut scored: Vec<(f64, &Product)> = catalog
                    .in_division(t)
                    .filter(|p| !(has_multi && p.is_multicolor()))
                    .map(|p| Ok((oracle.cosine(&anchor.product_id, &p.product_id)?, p)))
                    .collect::<Result<_>>()?;
                if scored.is_empty() {
                    continue;
                }
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.product_id.cmp(&b.1.product_id)));
                let pick = scored[..cfg.top_m.min(scored.len())].choose(&mut rng).unwrap().1;
                has_multi |= pick.is_multicolor();
                items.push(pick.product_id.clone());
            }
            if items.len() < 2 {
                continue;
            }
            out.push(OutfitRecord::new(
                format!("expert-{:05}", out.len()),
                items,
                OutfitSource::Expert,
                Verdict::Approved,
            ));
        }
    }
    Ok(out)
}

/// Seeded split into (train, held-out).
pub fn split_outfits(outfits: &[OutfitRecord], holdout_fraction: f64, seed: u64) -> (Vec<OutfitRecord>, Vec<OutfitRecord>) {
    let mut idx: Vec<usize> = (0..outfits.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (outfits.len() as f64 * holdout_fraction).round() as usize;
    let held: BTreeSet<usize> = idx[..cut].iter().copied().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, o) in outfits.iter().enumerate() {
        if held.contains(&i) {
            test.push(o.clone());
        } else {
            train.push(o.clone());
        }
    }
    (train, test)
}

/// Triplets from held-out outfits whose negatives co-occur with the anchor
/// in no outfit at all.
pub fn heldout_triplets(
    catalog: &Catalog,
    all: &[OutfitRecord],
    heldout: &[OutfitRecord],
    pairing: PairingKey,
    per_anchor: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = build_triplets(catalog, heldout, pairing, per_anchor, &mut rng)?;
    let (co, _) = co_occurrence(catalog, all, pairing, &[&MulticolorRule])?;
    Ok(set
        .triplets
        .into_iter()
        .filter(|t| !co.get(&t.anchor_id).is_some_and(|s| s.contains(&t.negative_id)))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationReport {
    pub pairing: PairingKey,
    pub train: CompatTrainReport,
    pub heldout_triplets: usize,
    /// Fraction of held-out triplets with the positive closer than the negative.
    pub heldout_satisfaction: f64,
}

/// Trains `pairing` on the non-held-out expert outfits and scores the
/// held-out triplets.
pub fn triplet_separation(
    world: &SynthWorld,
    outfits: &[OutfitRecord],
    config: &EvaluatorConfig,
    pairing: PairingKey,
) -> Result<(CompatModel, SeparationReport)> {
    let seed = config.training.train.seed;
    let (train, held) = split_outfits(outfits, config.experts.holdout_fraction, seed);
    let (model, report) = train_pairing_with(
        &world.catalog,
        &train,
        pairing,
        &config.training.train,
        config.training.margin,
        config.training.negatives_per_pair,
    )?;
    let triplets = heldout_triplets(
        &world.catalog,
        outfits,
        &held,
        pairing,
        config.training.negatives_per_pair,
        seed.wrapping_add(1),
    )?;
    let heldout_satisfaction = triplet_satisfaction(&model, &world.catalog, &triplets)?;
    Ok((
        model,
        SeparationReport {
            pairing,
            train: report,
            heldout_triplets: triplets.len(),
            heldout_satisfaction,
        },
    ))
}

/// The `n` Tops closest in hidden style to the trending family centre.
pub fn trend_anchors(world: &SynthWorld, n: usize) -> Vec<String> {
    let centre = &world.family_centres[0];
    let mut tops: Vec<(f64, &str)> = world
        .catalog
        .in_division(Division::Tops)
        .map(|p| {
            let h = world.oracle.hidden(&p.product_id).expect("generated product");
            (dot(h, centre), p.product_id.as_str())
        })
        .collect();
    tops.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    tops.into_iter().take(n).map(|(_, id)| id.to_string()).collect()
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lambda: f64,
    pub approval_rate: f64,
    pub distinct_ratio: f64,
    pub outfits: usize,
    pub coherence_rejects: usize,
    pub variety_rejects: usize,
    pub duplicates: usize,
    /// Generation failures for this lambda, if any.
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn lambda_grid(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.lambda).collect()
    }

    pub fn approval_rates(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.approval_rate).collect()
    }

    pub fn distinct_ratios(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.distinct_ratio).collect()
    }

    pub fn row(&self, lambda: f64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.lambda == lambda)
    }

    /// Line-delimited `lambda approval_rate distinct_ratio` table.
    pub fn to_table(&self) -> String {
        let mut s = String::from("lambda\tapproval_rate\tdistinct_ratio\n");
        for r in &self.rows {
            writeln!(s, "{}\t{:.6}\t{:.6}", r.lambda, r.approval_rate, r.distinct_ratio).unwrap();
        }
        s
    }

    /// `x y` pairs of lambda against approval rate.
    pub fn plot_data(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            writeln!(s, "{} {:.6}", r.lambda, r.approval_rate).unwrap();
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{:>8} {:>10} {:>10} {:>8} {:>10} {:>8} {:>6}\n",
            "lambda", "approval", "distinct", "outfits", "coherence", "variety", "dups"
        );
        for r in &self.rows {
            writeln!(
                s,
                "{:>8.2} {:>9.1}% {:>10.3} {:>8} {:>10} {:>8} {:>6}",
                r.lambda,
                100.0 * r.approval_rate,
                r.distinct_ratio,
                r.outfits,
                r.coherence_rejects,
                r.variety_rejects,
                r.duplicates
            )
            .unwrap();
            for e in &r.errors {
                writeln!(s, "         error: {e}").unwrap();
            }
        }
        s
    }
}

/// Everything the ablation needs besides the lambda grid.
#[derive(Debug, Clone)]
pub struct AblationSetup<'a> {
    pub catalog: &'a Catalog,
    pub index: &'a KnnIndex,
    pub templates: &'a BTreeMap<Division, OutfitTemplate>,
    pub oracle: &'a StyleOracle,
    pub anchors: &'a [String],
    pub outfits_per_anchor: usize,
    pub k: usize,
}

/// For each lambda, with a fresh judge and appearance table, generates the
/// outfits for every anchor in order and judges each one.
pub fn ablate_lambda(setup: &AblationSetup<'_>, grid: &[f64]) -> Result<AblationReport> {
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("lambda grid must be ascending".into()));
    }
    let mut generator = Generator::new(setup.catalog, setup.index, setup.templates);
    generator.k = setup.k;
    let mut report = AblationReport::default();
    for &lambda in grid {
        let (row, _) = ablation_run(&generator, setup, lambda)?;
        report.rows.push(row);
    }
    Ok(report)
}

/// One lambda of the ablation; also returns the generated outfits.
pub fn ablation_run(
    generator: &Generator<'_>,
    setup: &AblationSetup<'_>,
    lambda: f64,
) -> Result<(AblationRow, Vec<Outfit>)> {
    let mut oracle = setup.oracle.fresh();
    let mut table = AppearanceTable::new();
    let mut stamper = Stamper::new(0, LogicalClock::default());
    let mut outfits = Vec::new();
    let mut row = AblationRow {
        lambda,
        approval_rate: 0.0,
        distinct_ratio: 0.0,
        outfits: 0,
        coherence_rejects: 0,
        variety_rejects: 0,
        duplicates: 0,
        errors: Vec::new(),
    };
    let mut approved = 0usize;
    for anchor in setup.anchors {
        let batch = match generator.generate_many(anchor, setup.outfits_per_anchor, &mut table, lambda, &mut stamper) {
            Ok(b) => b,
            Err(e) => {
                row.errors.push(format!("{anchor}: {e}"));
                continue;
            }
        };
        for outfit in batch {
            match oracle_judge(&outfit, &mut oracle)? {
                (Verdict::Approved, _) => approved += 1,
                (_, Some(RejectReason::Coherence)) => row.coherence_rejects += 1,
                _ => row.variety_rejects += 1,
            }
            row.duplicates += usize::from(outfit.duplicate);
            outfits.push(outfit);
        }
    }
    row.outfits = outfits.len();
    if !outfits.is_empty() {
        row.approval_rate = approved as f64 / outfits.len() as f64;
        row.distinct_ratio = diversity_metric(&outfits)?;
    }
    Ok((row, outfits))
}

/// Distinct selected ids over total selected slots.
pub fn diversity_metric(outfits: &[Outfit]) -> Result<f64> {
    let mut distinct = BTreeSet::new();
    let mut slots = 0usize;
    for o in outfits {
        for id in o.selected_ids() {
            distinct.insert(id);
            slots += 1;
        }
    }
    if slots == 0 {
        return Err(Error::Empty("no selections to measure".into()));
    }
    Ok(distinct.len() as f64 / slots as f64)
}

/// Weakly increasing up to the first maximum, weakly decreasing after it.
pub fn is_unimodal(values: &[f64]) -> bool {
    let Some(peak) = argmax(values) else {
        return false;
    };
    values[..=peak].windows(2).all(|w| w[0] <= w[1]) && values[peak..].windows(2).all(|w| w[0] >= w[1])
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.map_or(true, |b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Builds the standard evaluation pipeline: world, expert outfits, models
/// for the pairings the Tops template queries, and the compat-space index.
pub struct StandardRun {
    pub config: EvaluatorConfig,
    pub world: SynthWorld,
    pub outfits: Vec<OutfitRecord>,
    pub models: BTreeMap<PairingKey, CompatModel>,
    pub reports: BTreeMap<PairingKey, CompatTrainReport>,
    pub index: KnnIndex,
    pub templates: BTreeMap<Division, OutfitTemplate>,
    pub anchors: Vec<String>,
}

impl StandardRun {
    pub fn build(config: EvaluatorConfig) -> Result<Self> {
        config.validate()?;
        let world = synth_world(&config.catalog, &config.oracle)?;
        let outfits = synth_expert_outfits(&world, &config.experts, config.catalog.seed)?;
        let template = default_template(Division::Tops);
        let pairings: Vec<PairingKey> = template.pairings().collect();
        let t = &config.training;
        let trained = train_pairings(&world.catalog, &outfits, &pairings, &t.train, t.margin, t.negatives_per_pair)?;
        let mut models = BTreeMap::new();
        let mut reports = BTreeMap::new();
        for (k, (m, r)) in trained {
            models.insert(k, m);
            reports.insert(k, r);
        }
        let index = KnnIndex::build(&world.catalog, &models, QuerySpace::Compat)?;
        let templates: BTreeMap<Division, OutfitTemplate> = [(Division::Tops, template)].into();
        let anchors = trend_anchors(&world, config.ablation.anchors);
        Ok(Self {
            config,
            world,
            outfits,
            models,
            reports,
            index,
            templates,
            anchors,
        })
    }

    pub fn setup(&self) -> AblationSetup<'_> {
        AblationSetup {
            catalog: &self.world.catalog,
            index: &self.index,
            templates: &self.templates,
            oracle: &self.world.oracle,
            anchors: &self.anchors,
            outfits_per_anchor: self.config.ablation.outfits_per_anchor,
            k: self.config.ablation.k,
        }
    }

    pub fn ablate(&self) -> Result<AblationReport> {
        ablate_lambda(&self.setup(), &self.config.ablation.lambda_grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_world(seed: u64) -> SynthWorld {
        let cfg = SynthConfig {
            n: 100,
            seed,
            ..EvaluatorConfig::frozen().catalog
        };
        synth_world(&cfg, &EvaluatorConfig::frozen().oracle).unwrap()
    }

    #[test]
    fn frozen_config_values() {
        let c = EvaluatorConfig::frozen();
        assert_eq!(c.oracle.coherence_threshold, 0.3);
        assert_eq!(c.oracle.variety_cap, 5);
        assert_eq!(c.catalog.n, 1000);
        assert_eq!(c.catalog.seed, 42);
        assert_eq!(c.ablation.lambda_grid, vec![0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0]);
    }

    #[test]
    fn allocation_matches_shares() {
        assert_eq!(division_allocation(1000), [300, 250, 150, 100, 200]);
        for n in 10..200 {
            let c = division_allocation(n);
            assert_eq!(c.iter().sum::<usize>(), n);
            for (count, share) in c.iter().zip(DIVISION_SHARES) {
                assert!((*count as f64 - share * n as f64).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn too_small_catalog_rejected() {
        assert!(synth_catalog(9, 1).is_err());
    }

    #[test]
    fn world_is_deterministic() {
        let a = small_world(3);
        let b = small_world(3);
        assert_eq!(
            crate::catalog::catalog_to_jsonl(&a.catalog),
            crate::catalog::catalog_to_jsonl(&b.catalog)
        );
        assert_eq!(a.oracle, b.oracle);
    }

    #[test]
    fn hidden_vectors_are_unit() {
        let w = small_world(5);
        for p in w.catalog.iter() {
            let h = w.oracle.hidden(&p.product_id).unwrap();
            assert!((dot(h, h) - 1.0).abs() < 1e-9);
            assert_eq!(p.is_multicolor(), w.oracle.multicolor.contains(&p.product_id));
        }
    }

    #[test]
    fn judge_rules() {
        let w = small_world(7);
        let mut o = w.oracle.fresh();
        let id = |i: usize| w.catalog.products()[i].product_id.clone();
        // force identical hidden vectors for a coherent outfit
        let (a, b, c) = (id(0), id(40), id(70));
        let h = *o.hidden(&a).unwrap();
        for x in [&b, &c] {
            o.hidden.insert(x.clone(), h);
        }
        o.multicolor.clear();
        assert_eq!(o.judge(&a, &[&b, &c]).unwrap(), (Verdict::Approved, None));
        assert_eq!(o.approval_log[&b], 1);
        assert!(!o.approval_log.contains_key(&a));

        o.approval_log.insert(b.clone(), o.variety_cap);
        assert_eq!(
            o.judge(&a, &[&b, &c]).unwrap(),
            (Verdict::Rejected, Some(RejectReason::Variety))
        );
        let log = o.approval_log.clone();

        o.multicolor.insert(a.clone());
        o.multicolor.insert(c.clone());
        assert_eq!(
            o.judge(&a, &[&b, &c]).unwrap(),
            (Verdict::Rejected, Some(RejectReason::Coherence))
        );
        assert_eq!(o.approval_log, log);
        assert!(o.judge(&a, &["nope"]).is_err());
    }

    #[test]
    fn diversity_examples() {
        let mk = |ids: &[&str]| Outfit {
            outfit_id: "o".into(),
            anchor_id: "a".into(),
            selections: ids.iter().map(|s| (Division::Bottoms, s.to_string())).collect(),
            lambda_used: 1.0,
            created_at: 0,
            duplicate: false,
        };
        let same = vec![mk(&["x", "y", "z"]); 3];
        assert!((diversity_metric(&same).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(diversity_metric(&[mk(&["x", "y"]), mk(&["z", "w"])]).unwrap(), 1.0);
        let mixed = [mk(&["x", "y", "z"]), mk(&["x", "v", "w"])];
        assert!((diversity_metric(&mixed).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert!(diversity_metric(&[]).is_err());
    }

    #[test]
    fn unimodal_shapes() {
        assert!(is_unimodal(&[0.5, 0.7, 0.9, 0.8, 0.6]));
        assert!(is_unimodal(&[0.5, 0.5, 0.9, 0.9, 0.6]));
        assert!(!is_unimodal(&[0.5, 0.9, 0.6, 0.8]));
        assert!(!is_unimodal(&[]));
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), Some(1));
    }

    #[test]
    fn expert_outfits_are_valid_and_coherent() {
        let w = small_world(11);
        let cfg = EvaluatorConfig::frozen().experts;
        let outfits = synth_expert_outfits(&w, &cfg, 1).unwrap();
        assert_eq!(outfits.len(), w.catalog.len());
        for o in &outfits {
            o.validate(&w.catalog).unwrap();
            let multi = o.item_ids.iter().filter(|id| w.catalog.get(id).unwrap().is_multicolor()).count();
            assert!(multi <= 1);
        }
    }

    #[test]
    fn split_is_a_partition() {
        let w = small_world(2);
        let outfits = synth_expert_outfits(&w, &EvaluatorConfig::frozen().experts, 2).unwrap();
        let (a, b) = split_outfits(&outfits, 0.2, 9);
        assert_eq!(a.len() + b.len(), outfits.len());
        assert_eq!(b.len(), 20);
    }

    #[test]
    fn config_rejects_unsorted_grid() {
        let mut c = EvaluatorConfig::frozen();
        c.ablation.lambda_grid = vec![1.0, 0.5];
        assert!(c.validate().is_err());
        let text = toml::to_string(&EvaluatorConfig::frozen()).unwrap();
        assert_eq!(EvaluatorConfig::parse(&text).unwrap(), EvaluatorConfig::frozen());
    }
}
