//! Outfit assembly: for each target division of the anchor's template, take
//! the kNN candidates under the (anchor, target) pairing and let STYLERANK
//! pick one.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Division, OutfitRecord, OutfitSource, Product, Verdict};
use crate::compat::{rule_pairings, PairingKey};
use crate::error::{Error, Result};
use crate::retrieval::{KnnIndex, MAX_K};
use crate::stylerank::{stylerank, AppearanceTable};

/// Regenerations allowed per outfit when it repeats an earlier one.
pub const MAX_DUPLICATE_RETRIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutfitTemplate {
    pub anchor: Division,
    pub targets: Vec<Division>,
}

impl OutfitTemplate {
    pub fn new(anchor: Division, targets: Vec<Division>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidArgument(format!("template for {anchor} has no targets")));
        }
        let mut seen = BTreeSet::new();
        for &t in &targets {
            if t == anchor || !seen.insert(t) {
                return Err(Error::InvalidArgument(format!(
                    "template for {anchor} repeats {t} or targets the anchor division"
                )));
            }
        }
        Ok(Self { anchor, targets })
    }

    pub fn pairings(&self) -> impl Iterator<Item = PairingKey> + '_ {
        self.targets.iter().map(|&t| PairingKey {
            anchor: self.anchor,
            target: t,
        })
    }
}

pub fn default_template(anchor: Division) -> OutfitTemplate {
    use Division::*;
    let targets = match anchor {
        Tops => vec![Bottoms, Footwear, Accessories],
        Bottoms => vec![Tops, Footwear, Accessories],
        Footwear => vec![Tops, Bottoms, Accessories],
        Outerwear => vec![Tops, Bottoms, Footwear, Accessories],
        Accessories => vec![Tops, Bottoms],
    };
    OutfitTemplate { anchor, targets }
}

pub fn default_templates() -> BTreeMap<Division, OutfitTemplate> {
    Division::ALL.iter().map(|&d| (d, default_template(d))).collect()
}

/// Pairings used by the training rules together with those the default
/// templates query at generation time.
pub fn all_pairings() -> Vec<PairingKey> {
    let mut set: BTreeSet<PairingKey> = rule_pairings().into_iter().collect();
    for t in default_templates().values() {
        set.extend(t.pairings());
    }
    set.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outfit {
    pub outfit_id: String,
    pub anchor_id: String,
    /// In template order.
    pub selections: Vec<(Division, String)>,
    pub lambda_used: f64,
    pub created_at: u64,
    /// Still repeats an earlier outfit after the allowed retries.
    #[serde(default)]
    pub duplicate: bool,
}

impl Outfit {
    pub fn selected_ids(&self) -> impl Iterator<Item = &str> {
        self.selections.iter().map(|(_, id)| id.as_str())
    }

    pub fn to_record(&self) -> OutfitRecord {
        let mut items = vec![self.anchor_id.clone()];
        items.extend(self.selected_ids().map(str::to_string));
        let mut r = OutfitRecord::new(self.outfit_id.clone(), items, OutfitSource::Generated, Verdict::Pending);
        r.lambda = Some(self.lambda_used);
        r.created_at = Some(self.created_at);
        r.duplicate = self.duplicate;
        r
    }

    /// Checks the outfit against its template and the catalog.
    pub fn validate(&self, catalog: &Catalog, template: &OutfitTemplate) -> Result<()> {
        let bad = |message: String| Error::InvalidOutfit {
            outfit_id: self.outfit_id.clone(),
            message,
        };
        let anchor = catalog
            .get(&self.anchor_id)
            .ok_or_else(|| Error::UnknownProduct(self.anchor_id.clone()))?;
        if anchor.division() != template.anchor {
            return Err(bad(format!("anchor is not in {}", template.anchor)));
        }
        let divisions: Vec<Division> = self.selections.iter().map(|(d, _)| *d).collect();
        if divisions != template.targets {
            return Err(bad(format!("selections {divisions:?} do not follow the template")));
        }
        for (d, id) in &self.selections {
            let p = catalog.get(id).ok_or_else(|| Error::UnknownProduct(id.clone()))?;
            if p.division() != *d || *id == self.anchor_id {
                return Err(bad(format!("selection `{id}` does not belong to {d}")));
            }
        }
        Ok(())
    }
}

/// Source of `created_at` timestamps.
pub trait Clock {
    fn now(&mut self) -> u64;
}

/// Counts up from a starting tick; used wherever output must be reproducible.
#[derive(Debug, Clone, Default)]
pub struct LogicalClock(pub u64);

impl Clock for LogicalClock {
    fn now(&mut self) -> u64 {
        let t = self.0;
        self.0 += 1;
        t
    }
}

/// Unix time in seconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&mut self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }
}

/// Assigns sequential outfit ids and timestamps.
#[derive(Debug, Clone)]
pub struct Stamper<C> {
    pub next_seq: u64,
    pub clock: C,
}

impl<C: Clock> Stamper<C> {
    pub fn new(next_seq: u64, clock: C) -> Self {
        Self { next_seq, clock }
    }

    fn stamp(&mut self) -> (String, u64) {
        let id = format!("outfit-{:06}", self.next_seq);
        self.next_seq += 1;
        (id, self.clock.now())
    }
}

/// Read-only generation context.
#[derive(Debug, Clone, Copy)]
pub struct Generator<'a> {
    pub catalog: &'a Catalog,
    pub index: &'a KnnIndex,
    pub templates: &'a BTreeMap<Division, OutfitTemplate>,
    /// Candidates handed to STYLERANK per division (clamped to 100).
    pub k: usize,
}

impl<'a> Generator<'a> {
    pub fn new(catalog: &'a Catalog, index: &'a KnnIndex, templates: &'a BTreeMap<Division, OutfitTemplate>) -> Self {
        Self {
            catalog,
            index,
            templates,
            k: MAX_K,
        }
    }

    fn template(&self, anchor: &Product) -> Result<&'a OutfitTemplate> {
        self.templates
            .get(&anchor.division())
            .ok_or_else(|| Error::InvalidArgument(format!("no template for {}", anchor.division())))
    }

    fn anchor(&self, anchor_id: &str) -> Result<&'a Product> {
        self.catalog
            .get(anchor_id)
            .ok_or_else(|| Error::UnknownProduct(anchor_id.to_string()))
    }

    /// Picks one item per target division without touching the table.
    pub fn propose(
        &self,
        anchor_id: &str,
        table: &AppearanceTable,
        lambda: f64,
        exclusions: &BTreeMap<Division, BTreeSet<String>>,
    ) -> Result<Vec<(Division, String)>> {
        let anchor = self.anchor(anchor_id)?;
        let template = self.template(anchor)?;
        let x = anchor.multimodal();
        let none = BTreeSet::new();
        let mut selections = Vec::with_capacity(template.targets.len());
        for pairing in template.pairings() {
            let q = self.index.query_vector(pairing, &x)?;
            let excluded = exclusions.get(&pairing.target).unwrap_or(&none);
            let candidates = self.index.knn_excluding(pairing, &q, self.k, excluded)?;
            if candidates.is_empty() {
                return Err(Error::EmptyPool(format!(
                    "no {} candidates for anchor `{anchor_id}`",
                    pairing.target
                )));
            }
            let (selected, _) = stylerank(&candidates, table, lambda)?;
            selections.push((pairing.target, selected));
        }
        Ok(selections)
    }

    /// One outfit; the table is updated once with its selections.
    pub fn generate_outfit<C: Clock>(
        &self,
        anchor_id: &str,
        table: &mut AppearanceTable,
        lambda: f64,
        stamper: &mut Stamper<C>,
    ) -> Result<Outfit> {
        let selections = self.propose(anchor_id, table, lambda, &BTreeMap::new())?;
        Ok(self.commit(anchor_id, selections, lambda, false, table, stamper))
    }

    fn commit<C: Clock>(
        &self,
        anchor_id: &str,
        selections: Vec<(Division, String)>,
        lambda: f64,
        duplicate: bool,
        table: &mut AppearanceTable,
        stamper: &mut Stamper<C>,
    ) -> Outfit {
        table.record_appearances(selections.iter().map(|(_, id)| id.as_str()));
        let (outfit_id, created_at) = stamper.stamp();
        Outfit {
            outfit_id,
            anchor_id: anchor_id.to_string(),
            selections,
            lambda_used: lambda,
            created_at,
            duplicate,
        }
    }

    /// `count` outfits for one anchor, generated in sequence with the table
    /// updated between them. An outfit whose full selection set repeats an
    /// earlier one has its most-shown duplicated item excluded and is
    /// regenerated, up to [`MAX_DUPLICATE_RETRIES`] times; after that it is
    /// kept and flagged.
    pub fn generate_many<C: Clock>(
        &self,
        anchor_id: &str,
        count: usize,
        table: &mut AppearanceTable,
        lambda: f64,
        stamper: &mut Stamper<C>,
    ) -> Result<Vec<Outfit>> {
        let mut out: Vec<Outfit> = Vec::with_capacity(count);
        for _ in 0..count {
            let mut exclusions: BTreeMap<Division, BTreeSet<String>> = BTreeMap::new();
            let mut selections = self.propose(anchor_id, table, lambda, &exclusions)?;
            let mut duplicate = false;
            let mut retries = 0;
            while out.iter().any(|o| o.selections == selections) {
                if retries == MAX_DUPLICATE_RETRIES {
                    duplicate = true;
                    break;
                }
                retries += 1;
                let (division, id) = most_shown(&selections, table);
                exclusions.entry(division).or_default().insert(id);
                match self.propose(anchor_id, table, lambda, &exclusions) {
                    Ok(s) => selections = s,
                    Err(Error::EmptyPool(_)) => {
                        // nothing left to swap in; keep the repeat
                        duplicate = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            out.push(self.commit(anchor_id, selections, lambda, duplicate, table, stamper));
        }
        Ok(out)
    }

    pub fn generate_three<C: Clock>(
        &self,
        anchor_id: &str,
        table: &mut AppearanceTable,
        lambda: f64,
        stamper: &mut Stamper<C>,
    ) -> Result<Vec<Outfit>> {
        self.generate_many(anchor_id, 3, table, lambda, stamper)
    }
}

/// Selection with the highest appearance count; earliest in template order
/// on ties.
fn most_shown(selections: &[(Division, String)], table: &AppearanceTable) -> (Division, String) {
    let mut best = &selections[0];
    for s in &selections[1..] {
        if table.get(&s.1) > table.get(&best.1) {
            best = s;
        }
    }
    best.clone()
}
