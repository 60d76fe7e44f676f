//! On-disk state owned by the single writer: catalog, outfit log,
//! appearance table, trained models and the audit log.
//!
//! Layout of a data directory:
//!
//! ```text
//! catalog.jsonl      product records
//! outfits.jsonl      append-only outfit log (later lines supersede)
//! appearance.tsv     appearance-table snapshot
//! models/*.tgcm      one compatibility model per pairing
//! attribution/       attribute heads
//! audit.log          administrative actions
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use trendgen_core::attribution::AttributionModel;
use trendgen_core::catalog::{
    append_outfits, load_catalog, load_outfits, save_catalog, Catalog, OutfitRecord, OutfitSource, Product, Verdict,
};
use trendgen_core::compat::{CompatModel, PairingKey};
use trendgen_core::outfit::{Outfit, Stamper, SystemClock};
use trendgen_core::stylerank::AppearanceTable;
use trendgen_core::{Error, Result};

const CATALOG_FILE: &str = "catalog.jsonl";
const OUTFITS_FILE: &str = "outfits.jsonl";
const TABLE_FILE: &str = "appearance.tsv";
const MODELS_DIR: &str = "models";
const ATTRIBUTION_DIR: &str = "attribution";
const AUDIT_FILE: &str = "audit.log";

#[derive(Debug, Default)]
pub struct Store {
    dir: Option<PathBuf>,
    catalog: Catalog,
    outfits: Vec<OutfitRecord>,
    by_id: HashMap<String, usize>,
    table: AppearanceTable,
    next_seq: u64,
}

impl Store {
    /// A store that never touches the filesystem.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a data directory. Nothing is kept if any file
    /// fails to load.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        let catalog = match dir.join(CATALOG_FILE) {
            p if p.exists() => load_catalog(&p)?,
            _ => Catalog::new(),
        };
        let outfits = match dir.join(OUTFITS_FILE) {
            p if p.exists() => load_outfits(&p, &catalog)?,
            _ => Vec::new(),
        };
        let table = match dir.join(TABLE_FILE) {
            p if p.exists() => AppearanceTable::load(&p)?,
            _ => AppearanceTable::new(),
        };
        let mut store = Self {
            dir: Some(dir),
            catalog,
            table,
            ..Self::default()
        };
        store.index_outfits(outfits);
        Ok(store)
    }

    fn index_outfits(&mut self, outfits: Vec<OutfitRecord>) {
        for r in outfits {
            self.insert_record(r);
        }
    }

    fn insert_record(&mut self, r: OutfitRecord) {
        if r.source == OutfitSource::Generated {
            self.next_seq = self.next_seq.max(seq_of(&r.outfit_id).map_or(0, |s| s + 1));
        }
        match self.by_id.get(&r.outfit_id) {
            Some(&i) => self.outfits[i] = r,
            None => {
                self.by_id.insert(r.outfit_id.clone(), self.outfits.len());
                self.outfits.push(r);
            }
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn table(&self) -> &AppearanceTable {
        &self.table
    }

    pub fn outfits(&self) -> &[OutfitRecord] {
        &self.outfits
    }

    pub fn outfit(&self, id: &str) -> Option<&OutfitRecord> {
        self.by_id.get(id).map(|&i| &self.outfits[i])
    }

    pub fn approved_outfits(&self) -> Vec<OutfitRecord> {
        self.outfits
            .iter()
            .filter(|r| r.verdict == Verdict::Approved)
            .cloned()
            .collect()
    }

    /// Ids in `products` already present in the catalog or repeated within
    /// the batch, in batch order.
    pub fn duplicates(&self, products: &[Product]) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        products
            .iter()
            .filter(|p| self.catalog.contains(&p.product_id) || !seen.insert(p.product_id.as_str()))
            .map(|p| p.product_id.clone())
            .collect()
    }

    /// Appends products; all or none.
    pub fn ingest(&mut self, products: Vec<Product>) -> Result<usize> {
        let n = products.len();
        let mut next = self.catalog.clone();
        for p in products {
            next.push(p)?;
        }
        if let Some(dir) = &self.dir {
            save_catalog(&next, dir.join(CATALOG_FILE))?;
        }
        self.catalog = next;
        Ok(n)
    }

    /// Adds outfit records (typically expert outfits); all or none.
    pub fn add_outfits(&mut self, records: Vec<OutfitRecord>) -> Result<usize> {
        for r in &records {
            r.validate(&self.catalog)?;
            if self.by_id.contains_key(&r.outfit_id) {
                return Err(Error::InvalidOutfit {
                    outfit_id: r.outfit_id.clone(),
                    message: "outfit id already recorded".into(),
                });
            }
        }
        self.append(records)
    }

    fn append(&mut self, records: Vec<OutfitRecord>) -> Result<usize> {
        if let Some(dir) = &self.dir {
            append_outfits(&records, dir.join(OUTFITS_FILE))?;
        }
        let n = records.len();
        self.index_outfits(records);
        Ok(n)
    }

    /// Stamper continuing the generated-outfit sequence.
    pub fn stamper(&self) -> Stamper<SystemClock> {
        Stamper::new(self.next_seq, SystemClock)
    }

    /// Persists freshly generated outfits as pending together with the
    /// table they produced. The table file is written first so a failure
    /// leaves the in-memory state untouched.
    pub fn commit_generated(&mut self, outfits: &[Outfit], table: AppearanceTable) -> Result<Vec<OutfitRecord>> {
        let records: Vec<OutfitRecord> = outfits.iter().map(Outfit::to_record).collect();
        if let Some(dir) = &self.dir {
            table.save(dir.join(TABLE_FILE))?;
        }
        self.table = table;
        self.append(records.clone())?;
        Ok(records)
    }

    /// Stores an already validated verdict update.
    pub fn record_review(&mut self, updated: OutfitRecord) -> Result<()> {
        self.append(vec![updated]).map(|_| ())
    }

    /// Zeroes the table; returns how many entries were dropped.
    pub fn reset_table(&mut self, actor: &str) -> Result<usize> {
        let dropped = self.table.len();
        if let Some(dir) = &self.dir {
            AppearanceTable::new().save(dir.join(TABLE_FILE))?;
        }
        self.table.reset();
        self.audit(&format!("appearance-reset entries={dropped} by={actor}"))?;
        Ok(dropped)
    }

    pub fn audit(&self, message: &str) -> Result<()> {
        tracing::info!(target: "audit", "{message}");
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(AUDIT_FILE);
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| writeln!(f, "{now}\t{message}"))
            .map_err(|e| io(&path, e))
    }

    pub fn save_models<'a>(&self, models: impl IntoIterator<Item = &'a CompatModel>) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let models_dir = dir.join(MODELS_DIR);
        fs::create_dir_all(&models_dir).map_err(|e| io(&models_dir, e))?;
        for m in models {
            m.save(models_dir.join(model_file_name(m.pairing)))?;
        }
        Ok(())
    }

    pub fn load_models(&self) -> Result<BTreeMap<PairingKey, CompatModel>> {
        let mut out = BTreeMap::new();
        let Some(dir) = &self.dir else { return Ok(out) };
        let models_dir = dir.join(MODELS_DIR);
        let entries = match fs::read_dir(&models_dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(io(&models_dir, e)),
        };
        for entry in entries {
            let path = entry.map_err(|e| io(&models_dir, e))?.path();
            if path.extension().is_some_and(|x| x == "tgcm") {
                let m = CompatModel::load(&path)?;
                out.insert(m.pairing, m);
            }
        }
        Ok(out)
    }

    pub fn attribution_dir(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(ATTRIBUTION_DIR))
    }

    pub fn load_attribution(&self) -> Result<Option<AttributionModel>> {
        let Some(dir) = self.attribution_dir() else { return Ok(None) };
        let model = AttributionModel::load_dir(dir)?;
        Ok((!model.heads.is_empty()).then_some(model))
    }
}

/// `tops-bottoms.tgcm` for Tops→Bottoms.
pub fn model_file_name(pairing: PairingKey) -> String {
    format!("{}.tgcm", pairing.slug().replace(':', "-"))
}

fn seq_of(outfit_id: &str) -> Option<u64> {
    outfit_id.strip_prefix("outfit-")?.parse().ok()
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seq_parsing() {
        assert_eq!(seq_of("outfit-000041"), Some(41));
        assert_eq!(seq_of("expert-00001"), None);
    }

    #[test]
    fn reopen_keeps_state() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(store.catalog().is_empty());
        store.audit("hello").unwrap();
        let text = fs::read_to_string(dir.path().join(AUDIT_FILE)).unwrap();
        assert!(text.ends_with("\thello\n"));
    }
}
