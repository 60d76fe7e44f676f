//! Product catalog: division taxonomy, precomputed embeddings, and the
//! on-disk catalog and outfit record formats.
//!
//! Two catalog encodings are supported:
//!
//! * line-delimited JSON, one product per line (the interchange format);
//! * a compact binary store (`TGEM`) that carries ids, division, the
//!   multicolor flag and both embeddings as little-endian `f32`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_DIM: usize = 512;
pub const MULTIMODAL_DIM: usize = 2 * EMBEDDING_DIM;
pub const MULTICOLOR: &str = "multicolor";

const BINARY_MAGIC: &[u8; 4] = b"TGEM";
const BINARY_VERSION: u16 = 1;

/// Top-level garment taxonomy bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Division {
    Tops,
    Bottoms,
    Footwear,
    Outerwear,
    Accessories,
}

impl Division {
    pub const ALL: [Division; 5] = [
        Division::Tops,
        Division::Bottoms,
        Division::Footwear,
        Division::Outerwear,
        Division::Accessories,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Division::Tops => "Tops",
            Division::Bottoms => "Bottoms",
            Division::Footwear => "Footwear",
            Division::Outerwear => "Outerwear",
            Division::Accessories => "Accessories",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Division> {
        Division::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Division {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Division {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Division::ALL
            .iter()
            .copied()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownDivision(s.to_string()))
    }
}

/// Fixed-length vector of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<const D: usize>(Vec<f32>);

pub type Embedding512 = Embedding<EMBEDDING_DIM>;
pub type Embedding1024 = Embedding<MULTIMODAL_DIM>;

impl<const D: usize> Embedding<D> {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != D {
            return Err(Error::DimensionMismatch {
                expected: D,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "embedding element {i} is not finite"
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; D])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }

    /// Unit L2 norm copy; the zero vector is returned unchanged.
    pub fn l2_normalized(&self) -> Self {
        let norm = self.0.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return self.clone();
        }
        Self(self.0.iter().map(|&v| (v as f64 / norm) as f32).collect())
    }
}

/// Joins the image and text halves into the multimodal representation.
pub fn concat_embedding(image: &Embedding512, text: &Embedding512) -> Embedding1024 {
    let mut values = Vec::with_capacity(MULTIMODAL_DIM);
    values.extend_from_slice(image.as_slice());
    values.extend_from_slice(text.as_slice());
    Embedding(values)
}

/// Inverse of [`concat_embedding`].
pub fn split_embedding(joined: &Embedding1024) -> (Embedding512, Embedding512) {
    let (image, text) = joined.as_slice().split_at(EMBEDDING_DIM);
    (Embedding(image.to_vec()), Embedding(text.to_vec()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub division: Division,
    pub category: String,
    pub color: String,
    pub multicolor: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<BTreeMap<String, String>>,
}

impl AttributeVector {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.multicolor && self.color != MULTICOLOR {
            return Err(format!(
                "multicolor product must use color `{MULTICOLOR}`, found `{}`",
                self.color
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Product {
    pub product_id: String,
    pub attributes: AttributeVector,
    pub title: String,
    pub image_uri: String,
    pub image_embedding: Embedding512,
    pub text_embedding: Embedding512,
}

impl Product {
    pub fn division(&self) -> Division {
        self.attributes.division
    }

    pub fn is_multicolor(&self) -> bool {
        self.attributes.multicolor
    }

    pub fn multimodal(&self) -> Embedding1024 {
        concat_embedding(&self.image_embedding, &self.text_embedding)
    }

    pub fn to_record(&self) -> ProductRecord {
        ProductRecord {
            product_id: self.product_id.clone(),
            division: self.attributes.division.as_str().to_string(),
            category: self.attributes.category.clone(),
            color: self.attributes.color.clone(),
            multicolor: self.attributes.multicolor,
            title: self.title.clone(),
            image_uri: self.image_uri.clone(),
            image_embedding: self.image_embedding.as_slice().to_vec(),
            text_embedding: self.text_embedding.as_slice().to_vec(),
            extra: self.attributes.extra.clone(),
        }
    }
}

/// Wire form of one catalog line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProductRecord {
    pub product_id: String,
    pub division: String,
    pub category: String,
    pub color: String,
    pub multicolor: bool,
    pub title: String,
    pub image_uri: String,
    pub image_embedding: Vec<f32>,
    pub text_embedding: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// L2-normalize each ingested 512-d vector.
    pub l2_normalize: bool,
}

impl ProductRecord {
    /// Validates the record; `line` is used for error reporting (1-based).
    pub fn into_product(self, line: usize, options: LoadOptions) -> Result<Product> {
        let division: Division = self.division.parse()?;
        let image = embedding_field(self.image_embedding, line, "image_embedding")?;
        let text = embedding_field(self.text_embedding, line, "text_embedding")?;
        if self.product_id.is_empty() {
            return Err(Error::Malformed {
                line,
                message: "empty product_id".into(),
            });
        }
        let attributes = AttributeVector {
            division,
            category: self.category,
            color: self.color,
            multicolor: self.multicolor,
            extra: self.extra,
        };
        attributes
            .validate()
            .map_err(|message| Error::Malformed { line, message })?;
        let (image_embedding, text_embedding) = if options.l2_normalize {
            (image.l2_normalized(), text.l2_normalized())
        } else {
            (image, text)
        };
        Ok(Product {
            product_id: self.product_id,
            attributes,
            title: self.title,
            image_uri: self.image_uri,
            image_embedding,
            text_embedding,
        })
    }
}

fn embedding_field(values: Vec<f32>, line: usize, field: &'static str) -> Result<Embedding512> {
    if values.len() != EMBEDDING_DIM {
        return Err(Error::InvalidEmbedding {
            line,
            field,
            problem: format!("has {} elements, expected {EMBEDDING_DIM}", values.len()),
        });
    }
    Embedding::new(values).map_err(|e| Error::InvalidEmbedding {
        line,
        field,
        problem: e.to_string(),
    })
}

/// Immutable-after-load product collection with id lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    products: Vec<Product>,
    by_id: HashMap<String, usize>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_products(products: impl IntoIterator<Item = Product>) -> Result<Self> {
        let mut catalog = Catalog::new();
        for p in products {
            catalog.push(p)?;
        }
        Ok(catalog)
    }

    pub fn push(&mut self, product: Product) -> Result<()> {
        if self.by_id.contains_key(&product.product_id) {
            return Err(Error::DuplicateProduct(product.product_id));
        }
        self.by_id
            .insert(product.product_id.clone(), self.products.len());
        self.products.push(product);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Product> {
        self.by_id.get(id).map(|&i| &self.products[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn products(&self) -> &[Product] {
        &self.products
    }

    pub fn iter(&self) -> impl Iterator<Item = &Product> {
        self.products.iter()
    }

    pub fn in_division(&self, division: Division) -> impl Iterator<Item = &Product> {
        self.products
            .iter()
            .filter(move |p| p.division() == division)
    }

    pub fn division_counts(&self) -> BTreeMap<Division, usize> {
        let mut counts = BTreeMap::new();
        for p in &self.products {
            *counts.entry(p.division()).or_insert(0) += 1;
        }
        counts
    }
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<Catalog> {
    load_catalog_with(path, LoadOptions::default())
}

pub fn load_catalog_with(path: impl AsRef<Path>, options: LoadOptions) -> Result<Catalog> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_catalog(BufReader::new(file), options).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses line-delimited product records. Blank lines are not allowed.
pub fn parse_catalog(reader: impl BufRead, options: LoadOptions) -> Result<Catalog> {
    let mut catalog = Catalog::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<catalog>", e))?;
        let record: ProductRecord =
            serde_json::from_str(&line).map_err(|e| Error::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        catalog.push(record.into_product(line_no, options)?)?;
    }
    Ok(catalog)
}

pub fn catalog_to_jsonl(catalog: &Catalog) -> String {
    let mut out = String::new();
    for p in catalog.iter() {
        out.push_str(&serde_json::to_string(&p.to_record()).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_catalog(catalog: &Catalog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, catalog_to_jsonl(catalog).as_bytes())
}

/// Encodes the compact binary store.
pub fn encode_catalog_binary(catalog: &Catalog) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + catalog.len() * (16 + 8 * EMBEDDING_DIM));
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(catalog.len() as u32).to_le_bytes());
    out.extend_from_slice(&(EMBEDDING_DIM as u32).to_le_bytes());
    for p in catalog.iter() {
        let id = p.product_id.as_bytes();
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        out.push(p.division().code());
        out.push(p.is_multicolor() as u8);
        for v in p
            .image_embedding
            .as_slice()
            .iter()
            .chain(p.text_embedding.as_slice())
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes the binary store. Text attributes that the binary layout does not
/// carry come back empty (`color` is `multicolor` or `unknown`).
pub fn decode_catalog_binary(bytes: &[u8]) -> Result<Catalog> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != BINARY_MAGIC {
        return Err(Error::Corrupt {
            offset: 0,
            message: "bad magic, expected TGEM".into(),
        });
    }
    let version = r.u16()?;
    if version != BINARY_VERSION {
        return Err(r.corrupt(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if dim != EMBEDDING_DIM {
        return Err(r.corrupt(format!("dimension {dim}, expected {EMBEDDING_DIM}")));
    }
    let mut catalog = Catalog::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.corrupt("product id is not UTF-8".into()))?
            .to_string();
        let code = r.u8()?;
        let division =
            Division::from_code(code).ok_or_else(|| r.corrupt(format!("division code {code}")))?;
        let multicolor = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(r.corrupt(format!("multicolor byte {other}"))),
        };
        let image = r.f32_vec(EMBEDDING_DIM)?;
        let text = r.f32_vec(EMBEDDING_DIM)?;
        let at = r.offset;
        let to_emb = |v| {
            Embedding::new(v).map_err(|e| Error::Corrupt {
                offset: at,
                message: e.to_string(),
            })
        };
        let product = Product {
            product_id: id,
            attributes: AttributeVector {
                division,
                category: String::new(),
                color: if multicolor { MULTICOLOR } else { "unknown" }.to_string(),
                multicolor,
                extra: None,
            },
            title: String::new(),
            image_uri: String::new(),
            image_embedding: to_emb(image)?,
            text_embedding: to_emb(text)?,
        };
        catalog.push(product)?;
    }
    if r.offset as usize != bytes.len() {
        return Err(r.corrupt("trailing bytes after last product".into()));
    }
    Ok(catalog)
}

pub fn save_catalog_binary(catalog: &Catalog, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_catalog_binary(catalog))
}

pub fn load_catalog_binary(path: impl AsRef<Path>) -> Result<Catalog> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_catalog_binary(&bytes)
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) offset: u64,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, offset: 0 }
    }

    pub(crate) fn corrupt(&self, message: String) -> Error {
        Error::Corrupt {
            offset: self.offset,
            message,
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let start = self.offset as usize;
        let end = start.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                self.offset = end as u64;
                Ok(&self.bytes[start..end])
            }
            None => Err(self.corrupt(format!(
                "unexpected end of data reading {n} bytes ({} available)",
                self.bytes.len() - start
            ))),
        }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.offset as usize
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.corrupt("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Writes `bytes` to a sibling temp file, syncs it, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp-{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Outfit records

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutfitSource {
    Expert,
    Generated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Approved,
    Rejected,
    Pending,
}

impl FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "approved" => Ok(Verdict::Approved),
            "rejected" => Ok(Verdict::Rejected),
            "pending" => Ok(Verdict::Pending),
            _ => Err(Error::InvalidArgument(format!("unknown verdict `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RejectReason {
    Coherence,
    Variety,
}

/// One line of the outfit file. For generated outfits `item_ids[0]` is the
/// anchor and the remaining ids follow the template order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutfitRecord {
    pub outfit_id: String,
    pub item_ids: Vec<String>,
    pub source: OutfitSource,
    pub verdict: Verdict,
    #[serde(default)]
    pub reason: Option<RejectReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub duplicate: bool,
}

impl OutfitRecord {
    pub fn new(
        outfit_id: impl Into<String>,
        item_ids: Vec<String>,
        source: OutfitSource,
        verdict: Verdict,
    ) -> Self {
        Self {
            outfit_id: outfit_id.into(),
            item_ids,
            source,
            verdict,
            reason: None,
            lambda: None,
            created_at: None,
            reviewer: None,
            duplicate: false,
        }
    }

    /// Checks references and division distinctness against `catalog`.
    pub fn validate(&self, catalog: &Catalog) -> Result<()> {
        if self.item_ids.len() < 2 {
            return Err(Error::InvalidOutfit {
                outfit_id: self.outfit_id.clone(),
                message: format!("needs at least 2 items, has {}", self.item_ids.len()),
            });
        }
        let mut seen = Vec::with_capacity(self.item_ids.len());
        for id in &self.item_ids {
            let product = catalog
                .get(id)
                .ok_or_else(|| Error::UnknownProduct(id.clone()))?;
            let division = product.division();
            if seen.contains(&division) {
                return Err(Error::DuplicateDivision {
                    outfit_id: self.outfit_id.clone(),
                    division,
                });
            }
            seen.push(division);
        }
        Ok(())
    }
}

/// Parses an outfit log. Later lines with a repeated `outfit_id` supersede
/// earlier ones (append-only updates); order of first appearance is kept.
pub fn parse_outfits(reader: impl BufRead) -> Result<Vec<OutfitRecord>> {
    let mut order: Vec<OutfitRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<outfits>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: OutfitRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        match index.get(&record.outfit_id) {
            Some(&slot) => order[slot] = record,
            None => {
                index.insert(record.outfit_id.clone(), order.len());
                order.push(record);
            }
        }
    }
    Ok(order)
}

pub fn load_outfits(path: impl AsRef<Path>, catalog: &Catalog) -> Result<Vec<OutfitRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let records = parse_outfits(BufReader::new(file))?;
    for r in &records {
        r.validate(catalog)?;
    }
    Ok(records)
}

pub fn outfits_to_jsonl(records: &[OutfitRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_outfits(records: &[OutfitRecord], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), outfits_to_jsonl(records).as_bytes())
}

/// Appends records to the outfit log, creating it if needed.
pub fn append_outfits(records: &[OutfitRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(outfits_to_jsonl(records).as_bytes())
        .and_then(|_| f.sync_data())
        .map_err(|e| Error::io(path, e))
}
