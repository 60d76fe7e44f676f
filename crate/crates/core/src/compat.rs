//! Compatibility embeddings: one shared `1024 -> 512` PReLU layer per
//! division pairing, trained with a margin triplet loss on items that
//! co-occur in approved outfits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attribution::embedding_matrix;
use crate::catalog::{write_atomic, ByteReader, Catalog, Division, Embedding1024, OutfitRecord, Product, Verdict};
use crate::catalog::{EMBEDDING_DIM, MULTIMODAL_DIM};
use crate::error::{Error, Result};
use crate::nn::gradcheck::prelu_regime;
use crate::nn::{ActivationKind, Gradients, Mlp, Mode, ModelSnapshot, Objective, Optimizer, TrainConfig};

pub const DEFAULT_MARGIN: f64 = 0.2;
pub const DEFAULT_NEGATIVES_PER_PAIR: usize = 4;

const MAGIC: &[u8; 4] = b"TGCM";
const VERSION: u16 = 1;

/// Ordered (anchor division, target division) pair with distinct sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PairingKey {
    pub anchor: Division,
    pub target: Division,
}

impl PairingKey {
    pub fn new(anchor: Division, target: Division) -> Result<Self> {
        if anchor == target {
            return Err(Error::InvalidArgument(format!(
                "pairing needs two different divisions, got {anchor} twice"
            )));
        }
        Ok(Self { anchor, target })
    }

    /// `tops:bottoms` style name, also used for file names.
    pub fn slug(&self) -> String {
        format!(
            "{}:{}",
            self.anchor.as_str().to_lowercase(),
            self.target.as_str().to_lowercase()
        )
    }
}

impl fmt::Display for PairingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.slug())
    }
}

impl FromStr for PairingKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, t) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("pairing `{s}` is not `anchor:target`")))?;
        PairingKey::new(a.trim().parse()?, t.trim().parse()?)
    }
}

/// Division of the positive item for an anchor of `anchor` division.
pub fn positive_division_for(anchor: Division, rng: &mut impl Rng) -> Division {
    match anchor {
        Division::Bottoms | Division::Footwear | Division::Outerwear => Division::Tops,
        Division::Accessories => *[Division::Tops, Division::Bottoms].choose(rng).unwrap(),
        Division::Tops => *[
            Division::Bottoms,
            Division::Footwear,
            Division::Outerwear,
            Division::Accessories,
        ]
        .choose(rng)
        .unwrap(),
    }
}

/// Every pairing [`positive_division_for`] can produce.
pub fn rule_pairings() -> Vec<PairingKey> {
    let mut out = Vec::new();
    for anchor in Division::ALL {
        let targets: &[Division] = match anchor {
            Division::Tops => &[
                Division::Bottoms,
                Division::Footwear,
                Division::Outerwear,
                Division::Accessories,
            ],
            Division::Accessories => &[Division::Tops, Division::Bottoms],
            _ => &[Division::Tops],
        };
        out.extend(targets.iter().map(|&t| PairingKey { anchor, target: t }));
    }
    out
}

// ---------------------------------------------------------------------------
// Loss

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_triplet_args(fa: &[f64], fp: &[f64], fneg: &[f64], margin: f64) -> Result<()> {
    for v in [fp, fneg] {
        if v.len() != fa.len() {
            return Err(Error::DimensionMismatch {
                expected: fa.len(),
                got: v.len(),
            });
        }
    }
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(Error::InvalidArgument(format!("margin must be positive, got {margin}")));
    }
    Ok(())
}

/// `max(0, |fa - fp|^2 - |fa - fn|^2 + margin)`.
pub fn triplet_loss(fa: &[f64], fp: &[f64], fneg: &[f64], margin: f64) -> Result<f64> {
    check_triplet_args(fa, fp, fneg, margin)?;
    Ok((sq_dist(fa, fp) - sq_dist(fa, fneg) + margin).max(0.0))
}

/// Gradients of [`triplet_loss`] with respect to `(fa, fp, fn)`. The hinge
/// subgradient at exactly zero is taken as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

pub fn triplet_loss_grad(fa: &[f64], fp: &[f64], fneg: &[f64], margin: f64) -> Result<TripletGrad> {
    check_triplet_args(fa, fp, fneg, margin)?;
    let raw = sq_dist(fa, fp) - sq_dist(fa, fneg) + margin;
    let n = fa.len();
    if raw <= 0.0 {
        return Ok(TripletGrad {
            loss: 0.0,
            anchor: vec![0.0; n],
            positive: vec![0.0; n],
            negative: vec![0.0; n],
        });
    }
    let mut g = TripletGrad {
        loss: raw,
        anchor: Vec::with_capacity(n),
        positive: Vec::with_capacity(n),
        negative: Vec::with_capacity(n),
    };
    for i in 0..n {
        g.anchor.push(2.0 * (fneg[i] - fp[i]));
        g.positive.push(2.0 * (fp[i] - fa[i]));
        g.negative.push(2.0 * (fa[i] - fneg[i]));
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Model

#[derive(Debug, Clone, PartialEq)]
pub struct CompatModel {
    pub pairing: PairingKey,
    pub net: Mlp,
    pub margin: f64,
}

impl CompatModel {
    pub fn new(pairing: PairingKey, net: Mlp, margin: f64) -> Result<Self> {
        if net.layers.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "compat model has exactly one layer, got {}",
                net.layers.len()
            )));
        }
        if net.in_dim() != MULTIMODAL_DIM {
            return Err(Error::DimensionMismatch {
                expected: MULTIMODAL_DIM,
                got: net.in_dim(),
            });
        }
        if net.out_dim() != EMBEDDING_DIM {
            return Err(Error::DimensionMismatch {
                expected: EMBEDDING_DIM,
                got: net.out_dim(),
            });
        }
        if !(margin > 0.0 && margin.is_finite()) {
            return Err(Error::InvalidArgument(format!("margin must be positive, got {margin}")));
        }
        Ok(Self { pairing, net, margin })
    }

    /// Seeded, untrained model.
    pub fn init(pairing: PairingKey, margin: f64, seed: u64) -> Result<Self> {
        let net = Mlp::init(
            &[MULTIMODAL_DIM, EMBEDDING_DIM],
            ActivationKind::PRelu,
            ActivationKind::PRelu,
            0.0,
            seed,
        )?;
        Self::new(pairing, net, margin)
    }

    pub fn embed(&self, x: &Embedding1024) -> Result<Vec<f64>> {
        self.net.infer(&x.to_f64())
    }

    pub fn embed_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.net.infer_batch(x)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.pairing.anchor.code());
        out.push(self.pairing.target.code());
        out.extend_from_slice(&self.margin.to_le_bytes());
        ModelSnapshot::new(self.net.clone(), None).encode_into(&mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(r.corrupt("bad magic, expected TGCM".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.corrupt(format!("unsupported version {version}")));
        }
        let division = |r: &mut ByteReader<'_>| {
            let code = r.u8()?;
            Division::from_code(code).ok_or_else(|| r.corrupt(format!("unknown division code {code}")))
        };
        let anchor = division(&mut r)?;
        let target = division(&mut r)?;
        let margin = r.f64()?;
        let at = r.offset;
        let pairing = PairingKey::new(anchor, target).map_err(|e| Error::Corrupt {
            offset: at,
            message: e.to_string(),
        })?;
        let snap = ModelSnapshot::decode_from(&mut r)?;
        if r.remaining() != 0 {
            return Err(r.corrupt("trailing bytes after compat model".into()));
        }
        let at = r.offset;
        Self::new(pairing, snap.net, margin).map_err(|e| Error::Corrupt {
            offset: at,
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

// ---------------------------------------------------------------------------
// Triplet construction

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub anchor_id: String,
    pub positive_id: String,
    pub negative_id: String,
}

impl Triplet {
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}", self.anchor_id, self.positive_id, self.negative_id)
    }
}

/// Expert constraint hook. Rules can veto outfits as positive evidence and
/// insist on specific negatives for an anchor.
pub trait StylingRule: Send + Sync {
    fn name(&self) -> &str;

    /// `false` drops the outfit from the co-occurrence data.
    fn admits(&self, _items: &[&Product]) -> bool {
        true
    }

    /// Items from `pool` that must appear among the anchor's negatives.
    fn required_negatives<'a>(&self, _anchor: &Product, _pool: &[&'a Product]) -> Vec<&'a Product> {
        Vec::new()
    }
}

/// Two or more multicolor garments never make an outfit. Such outfits give
/// no positives, and multicolor anchors are shown multicolor negatives.
#[derive(Debug, Clone, Copy, Default)]
pub struct MulticolorRule;

impl StylingRule for MulticolorRule {
    fn name(&self) -> &str {
        "multicolor"
    }

    fn admits(&self, items: &[&Product]) -> bool {
        items.iter().filter(|p| p.is_multicolor()).count() < 2
    }

    fn required_negatives<'a>(&self, anchor: &Product, pool: &[&'a Product]) -> Vec<&'a Product> {
        if !anchor.is_multicolor() {
            return Vec::new();
        }
        pool.iter().copied().filter(|p| p.is_multicolor()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripletReport {
    /// Approved outfits dropped by a styling rule.
    pub vetoed_outfits: usize,
    /// Anchors of the pairing's division with no co-occurring positive.
    pub skipped_no_positive: usize,
    /// Anchors whose every target item co-occurs with them.
    pub skipped_no_negative: Vec<String>,
    pub anchors_used: usize,
}

impl TripletReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "anchors_used\t{}\nvetoed_outfits\t{}\nskipped_no_positive\t{}\n",
            self.anchors_used, self.vetoed_outfits, self.skipped_no_positive
        );
        for id in &self.skipped_no_negative {
            s.push_str(&format!("skipped_no_negative\t{id}\n"));
        }
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
    pub report: TripletReport,
}

/// Anchor id -> target ids seen with it in an approved, rule-admitted outfit.
pub fn co_occurrence(
    catalog: &Catalog,
    outfits: &[OutfitRecord],
    pairing: PairingKey,
    rules: &[&dyn StylingRule],
) -> Result<(BTreeMap<String, BTreeSet<String>>, usize)> {
    let mut map: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut vetoed = 0;
    for outfit in outfits.iter().filter(|o| o.verdict == Verdict::Approved) {
        let items = outfit
            .item_ids
            .iter()
            .map(|id| catalog.get(id).ok_or_else(|| Error::UnknownProduct(id.clone())))
            .collect::<Result<Vec<_>>>()?;
        if !rules.iter().all(|r| r.admits(&items)) {
            vetoed += 1;
            continue;
        }
        for a in items.iter().filter(|p| p.division() == pairing.anchor) {
            for t in items.iter().filter(|p| p.division() == pairing.target) {
                map.entry(a.product_id.clone())
                    .or_default()
                    .insert(t.product_id.clone());
            }
        }
    }
    Ok((map, vetoed))
}

/// Builds triplets with the default rule set ([`MulticolorRule`]).
pub fn build_triplets(
    catalog: &Catalog,
    outfits: &[OutfitRecord],
    pairing: PairingKey,
    per_anchor: usize,
    rng: &mut impl Rng,
) -> Result<TripletSet> {
    build_triplets_with_rules(catalog, outfits, pairing, per_anchor, rng, &[&MulticolorRule])
}

/// For every approved (anchor, positive) co-occurrence, samples up to
/// `per_anchor` negatives from the positive's division that never co-occur
/// with the anchor. Required negatives from the rules are placed first.
pub fn build_triplets_with_rules(
    catalog: &Catalog,
    outfits: &[OutfitRecord],
    pairing: PairingKey,
    per_anchor: usize,
    rng: &mut impl Rng,
    rules: &[&dyn StylingRule],
) -> Result<TripletSet> {
    if per_anchor == 0 {
        return Err(Error::InvalidArgument("per_anchor must be positive".into()));
    }
    let (co, vetoed) = co_occurrence(catalog, outfits, pairing, rules)?;
    if co.is_empty() {
        return Err(Error::Empty(format!("no approved co-occurrence for pairing {pairing}")));
    }
    let targets: Vec<&Product> = catalog.in_division(pairing.target).collect();
    let mut set = TripletSet::default();
    set.report.vetoed_outfits = vetoed;
    set.report.skipped_no_positive = catalog
        .in_division(pairing.anchor)
        .filter(|p| !co.contains_key(&p.product_id))
        .count();

    for (anchor_id, positives) in &co {
        let anchor = catalog.get(anchor_id).expect("resolved above");
        let pool: Vec<&Product> = targets
            .iter()
            .copied()
            .filter(|p| !positives.contains(&p.product_id))
            .collect();
        if pool.is_empty() {
            set.report.skipped_no_negative.push(anchor_id.clone());
            continue;
        }
        let required: Vec<&Product> = rules
            .iter()
            .flat_map(|r| r.required_negatives(anchor, &pool))
            .collect();
        set.report.anchors_used += 1;
        for positive in positives {
            let mut chosen: Vec<&Product> = Vec::with_capacity(per_anchor);
            if let Some(p) = required.choose(rng) {
                chosen.push(p);
            }
            let rest: Vec<&Product> = pool
                .iter()
                .copied()
                .filter(|p| !chosen.iter().any(|c| c.product_id == p.product_id))
                .collect();
            let want = per_anchor.saturating_sub(chosen.len()).min(rest.len());
            chosen.extend(rest.choose_multiple(rng, want).copied());
            for negative in chosen {
                set.triplets.push(Triplet {
                    anchor_id: anchor_id.clone(),
                    positive_id: positive.clone(),
                    negative_id: negative.product_id.clone(),
                });
            }
        }
    }
    Ok(set)
}

/// Checks the structural triplet invariants against the approved outfits.
pub fn validate_triplet(
    catalog: &Catalog,
    co: &BTreeMap<String, BTreeSet<String>>,
    t: &Triplet,
) -> Result<()> {
    let get = |id: &str| catalog.get(id).ok_or_else(|| Error::UnknownProduct(id.to_string()));
    let (a, p, n) = (get(&t.anchor_id)?, get(&t.positive_id)?, get(&t.negative_id)?);
    let bad = |m: &str| Err(Error::InvalidArgument(format!("triplet {}: {m}", t.to_line())));
    if a.division() == p.division() {
        return bad("anchor and positive share a division");
    }
    if n.division() != p.division() {
        return bad("negative not in the positive's division");
    }
    let seen = co.get(&t.anchor_id);
    if !seen.is_some_and(|s| s.contains(&t.positive_id)) {
        return bad("positive never co-occurs with anchor");
    }
    if seen.is_some_and(|s| s.contains(&t.negative_id)) {
        return bad("negative co-occurs with anchor");
    }
    Ok(())
}

pub fn triplets_to_text(triplets: &[Triplet]) -> String {
    let mut s = String::new();
    for t in triplets {
        s.push_str(&t.to_line());
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompatTrainReport {
    /// Mean per-triplet loss for each epoch.
    pub epoch_losses: Vec<f64>,
    pub triplets: usize,
}

/// Product rows of the catalog needed by `triplets`, as a dense matrix.
struct TripletRows {
    x: Array2<f64>,
    idx: Vec<[usize; 3]>,
}

impl TripletRows {
    fn new(catalog: &Catalog, triplets: &[Triplet]) -> Result<Self> {
        let mut row_of: HashMap<&str, usize> = HashMap::new();
        let mut products: Vec<&Product> = Vec::new();
        let mut idx = Vec::with_capacity(triplets.len());
        for t in triplets {
            let mut slot = [0usize; 3];
            for (s, id) in slot.iter_mut().zip([&t.anchor_id, &t.positive_id, &t.negative_id]) {
                *s = match row_of.get(id.as_str()) {
                    Some(&r) => r,
                    None => {
                        let p = catalog
                            .get(id)
                            .ok_or_else(|| Error::UnknownProduct(id.clone()))?;
                        row_of.insert(&p.product_id, products.len());
                        products.push(p);
                        products.len() - 1
                    }
                };
            }
            idx.push(slot);
        }
        let embeddings: Vec<Embedding1024> = products.iter().map(|p| p.multimodal()).collect();
        Ok(Self {
            x: embedding_matrix(embeddings.iter()),
            idx,
        })
    }
}

/// Summed hinge loss of a batch and dLoss/dOutput for the unique rows.
fn batch_loss_grad(out: &Array2<f64>, local: &[[usize; 3]], margin: f64) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(out.raw_dim());
    let mut loss = 0.0;
    for &[a, p, n] in local {
        let (fa, fp, fneg) = (out.row(a), out.row(p), out.row(n));
        let raw = sq_dist(fa.as_slice().unwrap(), fp.as_slice().unwrap())
            - sq_dist(fa.as_slice().unwrap(), fneg.as_slice().unwrap())
            + margin;
        if raw <= 0.0 {
            continue;
        }
        loss += raw;
        for j in 0..out.ncols() {
            let (va, vp, vn) = (fa[j], fp[j], fneg[j]);
            grad[[a, j]] += 2.0 * (vn - vp);
            grad[[p, j]] += 2.0 * (vp - va);
            grad[[n, j]] += 2.0 * (va - vn);
        }
    }
    (loss, grad)
}

/// Builds triplets from the approved outfits and trains the pairing model.
pub fn train_pairing(
    catalog: &Catalog,
    outfits: &[OutfitRecord],
    pairing: PairingKey,
    config: &TrainConfig,
    margin: f64,
) -> Result<(CompatModel, CompatTrainReport)> {
    train_pairing_with(catalog, outfits, pairing, config, margin, DEFAULT_NEGATIVES_PER_PAIR)
}

pub fn train_pairing_with(
    catalog: &Catalog,
    outfits: &[OutfitRecord],
    pairing: PairingKey,
    config: &TrainConfig,
    margin: f64,
    negatives_per_pair: usize,
) -> Result<(CompatModel, CompatTrainReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let set = build_triplets(catalog, outfits, pairing, negatives_per_pair, &mut rng)?;
    train_on_triplets(catalog, &set.triplets, pairing, config, margin)
}

/// Trains each pairing independently, as many at once as there are cores.
/// Results do not depend on the degree of parallelism.
pub fn train_pairings(
    catalog: &Catalog,
    outfits: &[OutfitRecord],
    pairings: &[PairingKey],
    config: &TrainConfig,
    margin: f64,
    negatives_per_pair: usize,
) -> Result<BTreeMap<PairingKey, (CompatModel, CompatTrainReport)>> {
    let width = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut out = BTreeMap::new();
    for chunk in pairings.chunks(width) {
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&pairing| {
                    s.spawn(move || {
                        train_pairing_with(catalog, outfits, pairing, config, margin, negatives_per_pair)
                            .map(|r| (pairing, r))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        });
        for r in results {
            let (k, v) = r?;
            out.insert(k, v);
        }
    }
    Ok(out)
}

/// Minibatch SGD on the summed triplet loss. Each unique product in a batch
/// is embedded once and its output gradient accumulated across triplets.
pub fn train_on_triplets(
    catalog: &Catalog,
    triplets: &[Triplet],
    pairing: PairingKey,
    config: &TrainConfig,
    margin: f64,
) -> Result<(CompatModel, CompatTrainReport)> {
    config.validate()?;
    if triplets.is_empty() {
        return Err(Error::Empty(format!("no triplets for pairing {pairing}")));
    }
    let mut model = CompatModel::init(pairing, margin, config.seed)?;
    let rows = TripletRows::new(catalog, triplets)?;
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6970);
    let mut opt = Optimizer::new(config);
    let mut report = CompatTrainReport {
        epoch_losses: Vec::with_capacity(config.epochs),
        triplets: triplets.len(),
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut unique: Vec<usize> = Vec::new();
            let mut local_of: HashMap<usize, usize> = HashMap::new();
            let local: Vec<[usize; 3]> = batch
                .iter()
                .map(|&t| {
                    rows.idx[t].map(|r| {
                        *local_of.entry(r).or_insert_with(|| {
                            unique.push(r);
                            unique.len() - 1
                        })
                    })
                })
                .collect();
            let xb = Mlp::gather_rows(&rows.x, &unique);
            let step = (epoch * order.len().div_ceil(config.batch_size) + b) as u64;
            let pass = model
                .net
                .forward_batch(xb.view(), Mode::Train { seed: config.seed, step })?;
            let (loss, grad) = batch_loss_grad(pass.output(), &local, margin);
            total += loss;
            if loss > 0.0 {
                let back = model.net.backward(&pass, grad.view())?;
                opt.step(&mut model.net, &back.grads);
            }
        }
        report.epoch_losses.push(total / triplets.len() as f64);
    }
    model.net.quantize_f32();
    Ok((model, report))
}

/// Fraction of triplets with `|fa - fp| < |fa - fn|` under `model`.
pub fn triplet_satisfaction(model: &CompatModel, catalog: &Catalog, triplets: &[Triplet]) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::Empty("no triplets to score".into()));
    }
    let rows = TripletRows::new(catalog, triplets)?;
    let f = model.embed_batch(rows.x.view())?;
    let ok = rows
        .idx
        .iter()
        .filter(|&&[a, p, n]| {
            let fa = f.row(a);
            let dp = (&fa - &f.row(p)).mapv(|v| v * v).sum();
            let dn = (&fa - &f.row(n)).mapv(|v| v * v).sum();
            dp < dn
        })
        .count();
    Ok(ok as f64 / triplets.len() as f64)
}

// ---------------------------------------------------------------------------
// Gradient check objective

/// Summed triplet loss over fixed `(anchor, positive, negative)` input rows,
/// all embedded through the same network.
pub struct TripletObjective {
    /// Rows `3i`, `3i + 1`, `3i + 2` hold triplet `i`.
    pub inputs: Array2<f64>,
    pub margin: f64,
}

impl TripletObjective {
    pub fn new(anchors: ArrayView2<f64>, positives: ArrayView2<f64>, negatives: ArrayView2<f64>, margin: f64) -> Self {
        let n = anchors.nrows();
        let mut inputs = Array2::zeros((3 * n, anchors.ncols()));
        for i in 0..n {
            inputs.row_mut(3 * i).assign(&anchors.row(i));
            inputs.row_mut(3 * i + 1).assign(&positives.row(i));
            inputs.row_mut(3 * i + 2).assign(&negatives.row(i));
        }
        Self { inputs, margin }
    }

    fn local(&self) -> Vec<[usize; 3]> {
        (0..self.inputs.nrows() / 3).map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect()
    }

    fn pass(&self, net: &Mlp) -> crate::nn::ForwardPass {
        net.forward_batch(self.inputs.view(), Mode::Infer)
            .expect("objective inputs match network")
    }
}

impl Objective for TripletObjective {
    fn loss(&self, net: &Mlp) -> f64 {
        batch_loss_grad(self.pass(net).output(), &self.local(), self.margin).0
    }

    fn gradient(&self, net: &Mlp) -> Gradients {
        let pass = self.pass(net);
        let (_, g) = batch_loss_grad(pass.output(), &self.local(), self.margin);
        net.backward(&pass, g.view()).expect("gradient matches output").grads
    }

    fn regime(&self, net: &Mlp) -> Vec<bool> {
        let pass = self.pass(net);
        let mut r = prelu_regime(net, &pass);
        let out = pass.output();
        for [a, p, n] in self.local() {
            let dp = (&out.row(a) - &out.row(p)).mapv(|v| v * v).sum();
            let dn = (&out.row(a) - &out.row(n)).mapv(|v| v * v).sum();
            r.push(dp - dn + self.margin > 0.0);
        }
        r
    }
}
