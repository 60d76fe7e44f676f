//! Immutable model snapshots served to requests.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use trendgen_core::attribution::AttributionModel;
use trendgen_core::catalog::{Catalog, Division};
use trendgen_core::compat::{CompatModel, PairingKey};
use trendgen_core::outfit::{default_templates, OutfitTemplate};
use trendgen_core::retrieval::{KnnIndex, QuerySpace};
use trendgen_core::Result;

/// Catalog, models and index that belong together. Never mutated after
/// construction; a new version replaces the old one as a whole.
#[derive(Debug)]
pub struct Registry {
    pub version: u64,
    pub catalog: Arc<Catalog>,
    pub models: BTreeMap<PairingKey, CompatModel>,
    pub attribution: Option<Arc<AttributionModel>>,
    pub index: KnnIndex,
    pub templates: BTreeMap<Division, OutfitTemplate>,
}

impl Registry {
    pub fn build(
        version: u64,
        catalog: Arc<Catalog>,
        models: BTreeMap<PairingKey, CompatModel>,
        attribution: Option<Arc<AttributionModel>>,
        space: QuerySpace,
    ) -> Result<Self> {
        let index = KnnIndex::build(&catalog, &models, space)?;
        Ok(Self {
            version,
            catalog,
            models,
            attribution,
            index,
            templates: default_templates(),
        })
    }

    /// Pairings the anchor's template needs that have no model.
    pub fn missing_pairings(&self, anchor: Division) -> Vec<PairingKey> {
        self.templates
            .get(&anchor)
            .map(|t| t.pairings().filter(|p| !self.models.contains_key(p)).collect())
            .unwrap_or_default()
    }
}

/// Holder for the current snapshot. Readers clone the `Arc` and keep using
/// it for the whole request.
#[derive(Debug, Default)]
pub struct RegistryCell {
    current: RwLock<Option<Arc<Registry>>>,
}

impl RegistryCell {
    pub fn new(initial: Option<Registry>) -> Self {
        Self {
            current: RwLock::new(initial.map(Arc::new)),
        }
    }

    pub fn snapshot(&self) -> Option<Arc<Registry>> {
        self.current.read().expect("registry lock").clone()
    }

    pub fn swap(&self, next: Registry) -> Arc<Registry> {
        let next = Arc::new(next);
        *self.current.write().expect("registry lock") = Some(next.clone());
        next
    }

    pub fn next_version(&self) -> u64 {
        self.snapshot().map_or(1, |r| r.version + 1)
    }
}
