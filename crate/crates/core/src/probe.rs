//! Linear probe over class-token prototype embeddings, and zero-prototype
//! ablation of the features it reads.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{parse_value, KeyValueConfig};
use crate::data::DatasetDescriptor;
use crate::error::{Error, Result};
use crate::image_ops::ImageTensor;
use crate::model::ProtoModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.001,
            batch_size: 256,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(
                "probe epochs, batch size and learning rate must be positive".into(),
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

impl KeyValueConfig for ProbeConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "probe_epochs" | "epochs" => self.epochs = parse_value(key, value)?,
            "probe_learning_rate" | "learning_rate" | "lr" => {
                self.learning_rate = parse_value(key, value)?
            }
            "probe_batch_size" | "batch_size" => self.batch_size = parse_value(key, value)?,
            "val_fraction" => self.val_fraction = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown probe config key `{key}`"
                )))
            }
        }
        Ok(())
    }
}

/// Labeled images of one dataset, decoded once.
#[derive(Debug, Clone)]
pub struct LabeledImages {
    pub image_ids: Vec<String>,
    pub labels: Vec<String>,
    pub images: Vec<ImageTensor>,
}

impl LabeledImages {
    /// Loads every image that has a label; images without one are skipped
    /// with a warning, more than 10% unlabeled aborts.
    pub fn load(dataset: &DatasetDescriptor) -> Result<Self> {
        let labels = dataset.read_labels()?;
        let entries = dataset.list_images()?;
        let missing = entries
            .iter()
            .filter(|e| !labels.contains_key(&e.image_id))
            .count();
        if missing as f64 > 0.10 * entries.len() as f64 {
            return Err(Error::Data(format!(
                "{missing} of {} images of `{}` have no label",
                entries.len(),
                dataset.dataset_id
            )));
        }
        let mut out = Self {
            image_ids: Vec::new(),
            labels: Vec::new(),
            images: Vec::new(),
        };
        for e in entries {
            let Some(l) = labels.get(&e.image_id) else {
                tracing::warn!(image = %e.image_id, "no label; skipped");
                continue;
            };
            out.images.push(ImageTensor::load(&e.path)?);
            out.image_ids.push(e.image_id);
            out.labels.push(l.clone());
        }
        Ok(out)
    }
}

/// Probe inputs: one feature vector and label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub image_ids: Vec<String>,
    pub labels: Vec<String>,
    pub features: Vec<Vec<f32>>,
    /// Hard class-token prototype per image.
    pub class_prototypes: Vec<usize>,
}

/// Class-token prototype embeddings with `zeroed` rows of the bank
/// replaced by zeros; `reroute` also excludes them from assignment.
pub fn extract_features(
    model: &ProtoModel,
    data: &LabeledImages,
    zeroed: &[usize],
    reroute: bool,
    batch_size: usize,
) -> Result<FeatureSet> {
    for &z in zeroed {
        if z >= model.num_prototypes() {
            return Err(Error::PrototypeOutOfRange {
                id: z,
                k: model.num_prototypes(),
            });
        }
    }
    let mut features = Vec::with_capacity(data.images.len());
    let mut ids = Vec::with_capacity(data.images.len());
    for chunk in data.images.chunks(batch_size.max(1)) {
        let (f, p) = model.class_embeddings(chunk, zeroed, reroute)?;
        features.extend(f);
        ids.extend(p);
    }
    Ok(FeatureSet {
        image_ids: data.image_ids.clone(),
        labels: data.labels.clone(),
        features,
        class_prototypes: ids,
    })
}

/// Train/validation indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Seeded stratified split: each class contributes `round(n·fraction)`
/// (at least one when it has two or more images) to validation.
pub fn stratified_split(labels: &[String], val_fraction: f64, seed: u64) -> Split {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        let mut n_val = (idx.len() as f64 * val_fraction).round() as usize;
        if idx.len() >= 2 {
            n_val = n_val.clamp(1, idx.len() - 1);
        } else {
            n_val = 0;
        }
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Split { train, val }
}

/// Bias-free multinomial logistic regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub classes: Vec<String>,
    /// `classes × features`.
    pub weights: Vec<Vec<f64>>,
}

impl LinearProbe {
    pub fn scores(&self, x: &[f32]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(x).map(|(a, &b)| a * b as f64).sum())
            .collect()
    }

    /// Predicted class index; a tie for the top score predicts nothing and
    /// therefore counts as incorrect.
    pub fn predict(&self, x: &[f32]) -> Option<usize> {
        let s = self.scores(x);
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut winners = s.iter().enumerate().filter(|(_, &v)| v == max);
        let first = winners.next()?.0;
        winners.next().is_none().then_some(first)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub overall_accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
}

impl Evaluation {
    pub fn class(&self, name: &str) -> Option<&ClassAccuracy> {
        self.per_class.iter().find(|c| c.class == name)
    }
}

pub fn evaluate(probe: &LinearProbe, features: &FeatureSet, indices: &[usize]) -> Evaluation {
    let mut per: BTreeMap<&str, (usize, usize)> =
        probe.classes.iter().map(|c| (c.as_str(), (0, 0))).collect();
    let mut correct = 0;
    for &i in indices {
        let truth = &features.labels[i];
        let ok = probe
            .predict(&features.features[i])
            .is_some_and(|p| probe.classes[p] == *truth);
        let e = per.entry(truth.as_str()).or_default();
        e.1 += 1;
        if ok {
            e.0 += 1;
            correct += 1;
        }
    }
    Evaluation {
        overall_accuracy: if indices.is_empty() {
            0.0
        } else {
            correct as f64 / indices.len() as f64
        },
        per_class: per
            .into_iter()
            .filter(|(_, (_, t))| *t > 0)
            .map(|(c, (k, t))| ClassAccuracy {
                class: c.to_string(),
                correct: k,
                total: t,
                accuracy: k as f64 / t as f64,
            })
            .collect(),
    }
}

/// Minibatch SGD on the mean cross-entropy, weights starting at zero.
pub fn train_probe(features: &FeatureSet, split: &Split, cfg: &ProbeConfig) -> Result<LinearProbe> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Data("probe training split is empty".into()));
    }
    let classes: Vec<String> = {
        let mut c: Vec<String> = features.labels.clone();
        c.sort();
        c.dedup();
        c
    };
    if classes.len() < 2 {
        return Err(Error::Data(format!(
            "probe needs at least two classes, found {}",
            classes.len()
        )));
    }
    let class_of: BTreeMap<String, usize> =
        classes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
    let d = features.features.first().map_or(0, |f| f.len());
    let mut probe = LinearProbe {
        weights: vec![vec![0.0; d]; classes.len()],
        classes,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order = split.train.clone();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![vec![0.0; d]; probe.classes.len()];
            for &i in batch {
                let x = &features.features[i];
                let s = probe.scores(x);
                let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let y = class_of[&features.labels[i]];
                for (c, g) in grad.iter_mut().enumerate() {
                    let coef = e[c] / z - if c == y { 1.0 } else { 0.0 };
                    for (gj, &xj) in g.iter_mut().zip(x) {
                        *gj += coef * xj as f64;
                    }
                }
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            for (w, g) in probe.weights.iter_mut().zip(&grad) {
                for (wj, gj) in w.iter_mut().zip(g) {
                    *wj -= scale * gj;
                }
            }
        }
    }
    Ok(probe)
}

/// Result of zeroing one class's dominant prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub class: String,
    pub prototype: usize,
    pub before: f64,
    pub after: f64,
    /// `before − after` for the targeted class.
    pub delta: f64,
    /// Largest absolute accuracy change among classes whose dominant
    /// prototype was left intact.
    pub max_untouched_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub reroute: bool,
    pub entries: Vec<AblationEntry>,
    pub mean_delta: f64,
}

/// Most frequent class-token prototype per class over the given images
/// (ties: lowest id).
pub fn dominant_prototypes(features: &FeatureSet, indices: &[usize]) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<&str, BTreeMap<usize, usize>> = BTreeMap::new();
    for &i in indices {
        *counts
            .entry(features.labels[i].as_str())
            .or_default()
            .entry(features.class_prototypes[i])
            .or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(c, m)| {
            let best = m
                .iter()
                .fold((usize::MAX, 0), |b, (&p, &n)| if n > b.1 { (p, n) } else { b });
            (c.to_string(), best.0)
        })
        .collect()
}

/// For each `(class, prototype)` pair, zeroes that prototype, re-extracts
/// features and re-evaluates the unchanged probe on the validation split.
pub fn zero_prototype_ablation(
    model: &ProtoModel,
    data: &LabeledImages,
    probe: &LinearProbe,
    baseline: &FeatureSet,
    split: &Split,
    class_map: &BTreeMap<String, usize>,
    reroute: bool,
    batch_size: usize,
) -> Result<AblationReport> {
    let before = evaluate(probe, baseline, &split.val);
    let acc = |e: &Evaluation, c: &str| e.class(c).map_or(0.0, |a| a.accuracy);
    let mut entries = Vec::new();
    for (class, &proto) in class_map {
        let feats = extract_features(model, data, &[proto], reroute, batch_size)?;
        let after = evaluate(probe, &feats, &split.val);
        let untouched = before
            .per_class
            .iter()
            .filter(|c| class_map.get(&c.class).is_none_or(|&p| p != proto))
            .map(|c| (c.accuracy - acc(&after, &c.class)).abs())
            .fold(0.0, f64::max);
        let (b, a) = (acc(&before, class), acc(&after, class));
        entries.push(AblationEntry {
            class: class.clone(),
            prototype: proto,
            before: b,
            after: a,
            delta: b - a,
            max_untouched_change: untouched,
        });
    }
    let mean_delta = if entries.is_empty() {
        0.0
    } else {
        entries.iter().map(|e| e.delta).sum::<f64>() / entries.len() as f64
    };
    Ok(AblationReport {
        reroute,
        entries,
        mean_delta,
    })
}

/// Everything `probe` writes to its results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResults {
    pub dataset: DatasetDescriptor,
    pub checkpoint_hash: String,
    pub config: ProbeConfig,
    pub overall_accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationReport>,
    pub split: Split,
    pub probe: LinearProbe,
}
