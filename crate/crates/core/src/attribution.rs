//! Per-attribute classifier heads over the 1024-d multimodal embedding.
//!
//! Each attribute gets an independent funnel network
//! (`1024 -> 512 -> 256 -> classes`, PReLU, dropout 0.5 after each hidden
//! layer) trained with softmax cross-entropy.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{write_atomic, Catalog, Embedding1024, MULTIMODAL_DIM};
use crate::error::{Error, Result};
use crate::nn::{softmax, ActivationKind, Mlp, Mode, ModelSnapshot, Optimizer, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadArchitecture {
    pub hidden: Vec<usize>,
    pub dropout_prob: f64,
}

impl Default for HeadArchitecture {
    fn default() -> Self {
        Self {
            hidden: vec![512, 256],
            dropout_prob: 0.5,
        }
    }
}

impl HeadArchitecture {
    /// Untrained head network for `classes` outputs.
    pub fn init_net(&self, classes: usize, seed: u64) -> Result<Mlp> {
        let mut dims = vec![MULTIMODAL_DIM];
        dims.extend(&self.hidden);
        dims.push(classes);
        Mlp::init(&dims, ActivationKind::PRelu, ActivationKind::Linear, self.dropout_prob, seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeHead {
    pub attribute_name: String,
    pub class_labels: Vec<String>,
    pub net: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: String,
    pub index: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct HeadTrainReport {
    /// Mean train-mode cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn train_head(
    labeled: &[(Embedding1024, usize)],
    attribute_name: &str,
    labels: Vec<String>,
    config: &TrainConfig,
) -> Result<(AttributeHead, HeadTrainReport)> {
    train_head_with(labeled, attribute_name, labels, config, &HeadArchitecture::default())
}

pub fn train_head_with(
    labeled: &[(Embedding1024, usize)],
    attribute_name: &str,
    labels: Vec<String>,
    config: &TrainConfig,
    arch: &HeadArchitecture,
) -> Result<(AttributeHead, HeadTrainReport)> {
    config.validate()?;
    if labeled.is_empty() {
        return Err(Error::Empty(format!("no labeled examples for `{attribute_name}`")));
    }
    if labels.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "`{attribute_name}` needs at least 2 class labels"
        )));
    }
    if let Some((_, bad)) = labeled.iter().find(|(_, c)| *c >= labels.len()) {
        return Err(Error::InvalidArgument(format!(
            "class index {bad} out of range for {} labels",
            labels.len()
        )));
    }
    let present: BTreeSet<usize> = labeled.iter().map(|(_, c)| *c).collect();
    if present.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "`{attribute_name}` training data contains a single class"
        )));
    }

    let mut net = arch.init_net(labels.len(), config.seed)?;

    let x = embedding_matrix(labeled.iter().map(|(e, _)| e));
    let y: Vec<usize> = labeled.iter().map(|(_, c)| *c).collect();
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(config);
    let mut report = HeadTrainReport::default();
    let mut step = 0u64;

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xb = Mlp::gather_rows(&x, batch);
            let pass = net.forward_batch(xb.view(), Mode::Train { seed: config.seed, step })?;
            step += 1;
            let targets: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let (loss, grad) = cross_entropy(pass.output().view(), &targets);
            total += loss;
            let mut back = net.backward(&pass, grad.view())?;
            back.grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut net, &back.grads);
        }
        report.epoch_losses.push(total / labeled.len() as f64);
    }
    net.quantize_f32();

    Ok((
        AttributeHead {
            attribute_name: attribute_name.to_string(),
            class_labels: labels,
            net,
        },
        report,
    ))
}

/// Summed softmax cross-entropy over the batch and its gradient with
/// respect to the logits.
pub fn cross_entropy(logits: ArrayView2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for ((row, mut g), &t) in logits.rows().into_iter().zip(grad.rows_mut()).zip(targets) {
        let p = softmax(&row.to_vec());
        loss -= p[t].max(1e-300).ln();
        for (gv, pv) in g.iter_mut().zip(&p) {
            *gv = *pv;
        }
        g[t] -= 1.0;
    }
    (loss, grad)
}

pub(crate) fn embedding_matrix<'a>(rows: impl ExactSizeIterator<Item = &'a Embedding1024>) -> Array2<f64> {
    let n = rows.len();
    let mut x = Array2::zeros((n, MULTIMODAL_DIM));
    for (mut dst, e) in x.axis_iter_mut(Axis(0)).zip(rows) {
        for (d, &v) in dst.iter_mut().zip(e.as_slice()) {
            *d = v as f64;
        }
    }
    x
}

impl AttributeHead {
    pub fn predict(&self, x: &Embedding1024) -> Result<Prediction> {
        self.predict_raw(&x.to_f64())
    }

    pub fn predict_raw(&self, x: &[f64]) -> Result<Prediction> {
        let logits = self.net.infer(x)?;
        let probabilities = softmax(&logits);
        let index = argmax(&probabilities);
        Ok(Prediction {
            label: self.class_labels[index].clone(),
            index,
            probabilities,
        })
    }

    /// Writes `<name>.tgnn` and the `<name>.labels.json` sidecar into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        ModelSnapshot::new(self.net.clone(), None).save(dir.join(format!("{}.tgnn", self.attribute_name)))?;
        let sidecar = LabelSidecar {
            attribute_name: self.attribute_name.clone(),
            class_labels: self.class_labels.clone(),
        };
        let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
        write_atomic(&dir.join(format!("{}.labels.json", self.attribute_name)), &json)
    }

    pub fn load(dir: impl AsRef<Path>, attribute_name: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let snap = ModelSnapshot::load(dir.join(format!("{attribute_name}.tgnn")))?;
        let path = dir.join(format!("{attribute_name}.labels.json"));
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: LabelSidecar = serde_json::from_slice(&raw)
            .map_err(|e| Error::Malformed { line: 1, message: e.to_string() })?;
        if sidecar.class_labels.len() != snap.net.out_dim() {
            return Err(Error::DimensionMismatch {
                expected: snap.net.out_dim(),
                got: sidecar.class_labels.len(),
            });
        }
        Ok(Self {
            attribute_name: sidecar.attribute_name,
            class_labels: sidecar.class_labels,
            net: snap.net,
        })
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate() {
        if p > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelSidecar {
    attribute_name: String,
    class_labels: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct AttributionModel {
    pub heads: BTreeMap<String, AttributeHead>,
}

impl AttributionModel {
    pub fn insert(&mut self, head: AttributeHead) -> Result<()> {
        if self.heads.contains_key(&head.attribute_name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate attribute head `{}`",
                head.attribute_name
            )));
        }
        self.heads.insert(head.attribute_name.clone(), head);
        Ok(())
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.heads.values().try_for_each(|h| h.save(dir))
    }

    /// Loads every head with a `<name>.labels.json` sidecar in `dir`. A
    /// missing directory yields an empty model.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut model = Self::default();
        let entries = match fs::read_dir(dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(model),
            Err(e) => return Err(Error::io(dir, e)),
        };
        let mut names = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            if let Some(name) = entry.file_name().to_str().and_then(|n| n.strip_suffix(".labels.json")) {
                names.push(name.to_string());
            }
        }
        names.sort();
        for name in names {
            model.insert(AttributeHead::load(dir, &name)?)?;
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub per_attribute: BTreeMap<String, f64>,
    /// Unweighted mean of the per-attribute accuracies.
    pub macro_average: f64,
}

pub fn evaluate(
    model: &AttributionModel,
    sets: &BTreeMap<String, Vec<(Embedding1024, usize)>>,
) -> Result<EvaluationReport> {
    if sets.is_empty() {
        return Err(Error::Empty("no attributes to evaluate".into()));
    }
    let mut per_attribute = BTreeMap::new();
    for (name, items) in sets {
        let head = model
            .heads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no trained head for `{name}`")))?;
        if items.is_empty() {
            return Err(Error::Empty(format!("empty test set for `{name}`")));
        }
        let mut correct = 0usize;
        for (x, class) in items {
            if head.predict(x)?.index == *class {
                correct += 1;
            }
        }
        per_attribute.insert(name.clone(), correct as f64 / items.len() as f64);
    }
    let macro_average = macro_mean(per_attribute.values().copied());
    Ok(EvaluationReport {
        per_attribute,
        macro_average,
    })
}

fn macro_mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    values.sum::<f64>() / n
}

/// One line of the labeled-data file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub product_id: String,
    pub attribute_name: String,
    pub label: String,
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRecord>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Labeled examples for one attribute, with sorted class labels.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub class_labels: Vec<String>,
    pub examples: Vec<(Embedding1024, usize)>,
}

/// Groups label records by attribute and resolves product embeddings.
pub fn labeled_sets(catalog: &Catalog, records: &[LabelRecord]) -> Result<BTreeMap<String, LabeledSet>> {
    let mut grouped: BTreeMap<&str, Vec<&LabelRecord>> = BTreeMap::new();
    for r in records {
        grouped.entry(&r.attribute_name).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (name, rows) in grouped {
        let class_labels: Vec<String> = rows
            .iter()
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut examples = Vec::with_capacity(rows.len());
        for r in rows {
            let p = catalog
                .get(&r.product_id)
                .ok_or_else(|| Error::UnknownProduct(r.product_id.clone()))?;
            let idx = class_labels.binary_search(&r.label).expect("label collected above");
            examples.push((p.multimodal(), idx));
        }
        out.insert(
            name.to_string(),
            LabeledSet {
                class_labels,
                examples,
            },
        );
    }
    Ok(out)
}
