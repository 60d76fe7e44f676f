//! STYLERANK re-ranking and the global appearance-count table.
//!
//! Each candidate gets a distance rank `R_D` (from kNN) and an appearance
//! rank `R_A` where the most frequently recommended candidate receives the
//! largest number. The selected item minimizes `R_D + lambda * R_A`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::write_atomic;
use crate::error::{Error, Result};
use crate::retrieval::Neighbor;

pub const DEFAULT_LAMBDA: f64 = 1.0;

const HEADER: &str = "# appearance-table v1";

/// Number of generated outfits each product has appeared in.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AppearanceTable {
    counts: BTreeMap<String, u64>,
}

impl AppearanceTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Absent ids count as zero.
    pub fn get(&self, id: &str) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64)> {
        self.counts.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn as_map(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }

    /// Adds one appearance for every id given. Callers pass the selected
    /// items of an outfit, not its anchor.
    pub fn record_appearances<'a>(&mut self, selected: impl IntoIterator<Item = &'a str>) {
        for id in selected {
            *self.counts.entry(id.to_string()).or_insert(0) += 1;
        }
    }

    pub fn reset(&mut self) {
        self.counts.clear();
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = format!("{HEADER} {}\n", self.counts.len());
        for (id, n) in &self.counts {
            if id.is_empty() || id.contains(['\t', '\n', '\r']) {
                return Err(Error::InvalidArgument(format!(
                    "product id {id:?} cannot be stored in the appearance table"
                )));
            }
            s.push_str(&format!("{id}\t{n}\n"));
        }
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let corrupt = |offset: usize, message: String| Error::Corrupt {
            offset: offset as u64,
            message,
        };
        let header_end = text
            .find('\n')
            .ok_or_else(|| corrupt(text.len(), "missing header line".into()))?;
        let expected: usize = text[..header_end]
            .strip_prefix(HEADER)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| corrupt(0, "bad header".into()))?;

        let mut counts = BTreeMap::new();
        let mut offset = header_end + 1;
        while offset < text.len() {
            let line_end = text[offset..]
                .find('\n')
                .map(|i| offset + i)
                .ok_or_else(|| corrupt(offset, "unterminated line".into()))?;
            let line = &text[offset..line_end];
            let (id, n) = line
                .split_once('\t')
                .ok_or_else(|| corrupt(offset, "expected `id<TAB>count`".into()))?;
            let n: u64 = n
                .parse()
                .map_err(|_| corrupt(offset, format!("bad count `{n}`")))?;
            if id.is_empty() || counts.insert(id.to_string(), n).is_some() {
                return Err(corrupt(offset, format!("empty or repeated id `{id}`")));
            }
            offset = line_end + 1;
        }
        if counts.len() != expected {
            return Err(corrupt(
                text.len(),
                format!("header promises {expected} entries, found {}", counts.len()),
            ));
        }
        Ok(Self { counts })
    }

    /// Atomic replace.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_text()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Corrupt {
            offset: e.valid_up_to() as u64,
            message: "invalid UTF-8".into(),
        })?;
        Self::parse(text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub product_id: String,
    pub distance_rank: usize,
    pub appearance_rank: usize,
    pub score: f64,
}

/// Re-ranks distance-ranked `candidates` and returns the selected id plus
/// every candidate's ranks, in distance-rank order.
pub fn stylerank(
    candidates: &[Neighbor],
    table: &AppearanceTable,
    lambda: f64,
) -> Result<(String, Vec<RankedCandidate>)> {
    if candidates.is_empty() {
        return Err(Error::EmptyPool("no candidates to rank".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
    }
    let mut by_rd: Vec<&Neighbor> = candidates.iter().collect();
    by_rd.sort_by(|a, b| a.rank.cmp(&b.rank).then_with(|| a.product_id.cmp(&b.product_id)));
    if by_rd.iter().enumerate().any(|(i, n)| n.rank != i + 1) {
        return Err(Error::InvalidArgument("candidate ranks must be 1..n".into()));
    }

    // appearance order: least frequent first, ties to the better distance rank
    let mut by_count: Vec<usize> = (0..by_rd.len()).collect();
    by_count.sort_by(|&a, &b| {
        let (na, nb) = (by_rd[a], by_rd[b]);
        table
            .get(&na.product_id)
            .cmp(&table.get(&nb.product_id))
            .then(na.rank.cmp(&nb.rank))
            .then_with(|| na.product_id.cmp(&nb.product_id))
    });
    let mut ra = vec![0usize; by_rd.len()];
    for (pos, &i) in by_count.iter().enumerate() {
        ra[i] = pos + 1;
    }

    let ranked: Vec<RankedCandidate> = by_rd
        .iter()
        .zip(&ra)
        .map(|(n, &r_a)| RankedCandidate {
            product_id: n.product_id.clone(),
            distance_rank: n.rank,
            appearance_rank: r_a,
            score: n.rank as f64 + lambda * r_a as f64,
        })
        .collect();
    let best = ranked
        .iter()
        .min_by(|a, b| compare_selection(a, b))
        .expect("non-empty");
    Ok((best.product_id.clone(), ranked))
}

fn compare_selection(a: &RankedCandidate, b: &RankedCandidate) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then(a.distance_rank.cmp(&b.distance_rank))
        .then_with(|| a.product_id.cmp(&b.product_id))
}
