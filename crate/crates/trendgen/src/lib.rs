//! Service and command-line layer over `trendgen-core`: a data directory,
//! an HTTP API and the model registry that ties them together.

pub mod api;
pub mod registry;
pub mod store;

use std::collections::BTreeMap;

use trendgen_core::catalog::{Catalog, OutfitRecord};
use trendgen_core::compat::{co_occurrence, train_pairings, CompatModel, CompatTrainReport, MulticolorRule, PairingKey};
use trendgen_core::nn::TrainConfig;
use trendgen_core::{Error, Result};

pub use api::{router, AppState, ServiceConfig};
pub use registry::{Registry, RegistryCell};
pub use store::Store;

pub type Trained = BTreeMap<PairingKey, (CompatModel, CompatTrainReport)>;

/// Trains `requested` pairings from the approved outfits. With more than
/// one pairing requested, those without any co-occurrence data are skipped
/// and returned; a single requested pairing without data is an error.
pub fn train_selected(
    catalog: &Catalog,
    outfits: &[OutfitRecord],
    requested: &[PairingKey],
    config: &TrainConfig,
    margin: f64,
    negatives_per_pair: usize,
) -> Result<(Trained, Vec<PairingKey>)> {
    let mut with_data = Vec::new();
    let mut skipped = Vec::new();
    for &p in requested {
        let (pairs, _) = co_occurrence(catalog, outfits, p, &[&MulticolorRule])?;
        if pairs.is_empty() && requested.len() > 1 {
            skipped.push(p);
        } else {
            with_data.push(p);
        }
    }
    if with_data.is_empty() {
        return Err(Error::Empty("no approved outfits cover any requested pairing".into()));
    }
    let trained = train_pairings(catalog, outfits, &with_data, config, margin, negatives_per_pair)?;
    Ok((trained, skipped))
}
