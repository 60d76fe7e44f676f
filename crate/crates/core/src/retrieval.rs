//! Exact nearest-neighbour search over per-pairing candidate pools.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attribution::embedding_matrix;
use crate::catalog::{Catalog, Embedding1024};
use crate::compat::{CompatModel, PairingKey};
use crate::error::{Error, Result};

/// Hard cap on the number of neighbours handed to re-ranking.
pub const MAX_K: usize = 100;

/// Space the anchor and the pool are compared in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySpace {
    /// Outputs of the pairing's compat model.
    #[default]
    Compat,
    /// The raw 1024-d multimodal embedding, for comparison runs.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub product_id: String,
    pub squared_distance: f64,
    /// 1-based.
    pub rank: usize,
}

/// Candidate vectors of the target division of one pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub model: CompatModel,
    pub ids: Vec<String>,
    /// One row per id.
    pub vectors: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnIndex {
    pub space: QuerySpace,
    pools: BTreeMap<PairingKey, Pool>,
}

impl KnnIndex {
    /// Builds a pool for every model in `models`.
    pub fn build(catalog: &Catalog, models: &BTreeMap<PairingKey, CompatModel>, space: QuerySpace) -> Result<Self> {
        let pairings: Vec<PairingKey> = models.keys().copied().collect();
        Self::build_for(catalog, models, &pairings, space)
    }

    /// Builds pools for `pairings` only; each needs a model.
    pub fn build_for(
        catalog: &Catalog,
        models: &BTreeMap<PairingKey, CompatModel>,
        pairings: &[PairingKey],
        space: QuerySpace,
    ) -> Result<Self> {
        let mut pools = BTreeMap::new();
        for &pairing in pairings {
            let model = models
                .get(&pairing)
                .ok_or_else(|| Error::MissingModel(pairing.to_string()))?;
            let members: Vec<_> = catalog.in_division(pairing.target).collect();
            let raw: Vec<Embedding1024> = members.iter().map(|p| p.multimodal()).collect();
            let x = embedding_matrix(raw.iter());
            let vectors = match space {
                QuerySpace::Compat => model.embed_batch(x.view())?,
                QuerySpace::Raw => x,
            };
            pools.insert(
                pairing,
                Pool {
                    model: model.clone(),
                    ids: members.iter().map(|p| p.product_id.clone()).collect(),
                    vectors,
                },
            );
        }
        Ok(Self { space, pools })
    }

    pub fn pool(&self, pairing: PairingKey) -> Option<&Pool> {
        self.pools.get(&pairing)
    }

    pub fn pairings(&self) -> impl Iterator<Item = PairingKey> + '_ {
        self.pools.keys().copied()
    }

    fn pool_or_err(&self, pairing: PairingKey) -> Result<&Pool> {
        self.pools
            .get(&pairing)
            .ok_or_else(|| Error::MissingModel(pairing.to_string()))
    }

    /// Query vector for `anchor` in this index's space.
    pub fn query_vector(&self, pairing: PairingKey, anchor: &Embedding1024) -> Result<Vec<f64>> {
        match self.space {
            QuerySpace::Compat => self.pool_or_err(pairing)?.model.embed(anchor),
            QuerySpace::Raw => Ok(anchor.to_f64()),
        }
    }

    pub fn knn(&self, pairing: PairingKey, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        self.knn_excluding(pairing, query, k, &BTreeSet::new())
    }

    /// Like [`KnnIndex::knn`] with `exclude` removed from the pool first.
    pub fn knn_excluding(
        &self,
        pairing: PairingKey,
        query: &[f64],
        k: usize,
        exclude: &BTreeSet<String>,
    ) -> Result<Vec<Neighbor>> {
        let pool = self.pool_or_err(pairing)?;
        exact_knn(&pool.ids, &pool.vectors, query, k, exclude)
    }
}

/// Exact k smallest squared Euclidean distances, ascending, ties by
/// ascending id. `k` is clamped to `min(k, MAX_K, pool size)`.
pub fn exact_knn(
    ids: &[String],
    vectors: &Array2<f64>,
    query: &[f64],
    k: usize,
    exclude: &BTreeSet<String>,
) -> Result<Vec<Neighbor>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if query.len() != vectors.ncols() && !ids.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: vectors.ncols(),
            got: query.len(),
        });
    }
    let mut scored: Vec<(f64, &str)> = ids
        .iter()
        .zip(vectors.rows())
        .filter(|(id, _)| !exclude.contains(id.as_str()))
        .map(|(id, row)| {
            let d = row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            (d, id.as_str())
        })
        .collect();
    let k = k.min(MAX_K).min(scored.len());
    let order = |a: &(f64, &str), b: &(f64, &str)| -> Ordering { a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)) };
    if k < scored.len() && k > 0 {
        scored.select_nth_unstable_by(k - 1, order);
    }
    scored.truncate(k);
    scored.sort_unstable_by(order);
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(i, (d, id))| Neighbor {
            product_id: id.to_string(),
            squared_distance: d,
            rank: i + 1,
        })
        .collect())
}
