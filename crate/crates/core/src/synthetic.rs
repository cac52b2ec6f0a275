//! Synthetic image datasets with planted visual concepts, and small
//! hand-built models over them. Used by tests, the acceptance run and the
//! `synth` command.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{self, Normalization, PatchConfig};
use crate::data::{write_labels, DatasetDescriptor};
use crate::error::{Error, Result};
use crate::image_ops::{stack_images, ImageTensor};
use crate::index::ImageRecord;
use crate::model::{HeadConfig, HeadInput, ModelSpec, ProtoModel, BACKBONE_PREFIX, BANK};
use crate::params::Params;
use crate::tensor_util::to_f32_vec;

/// A texture family: oriented sinusoidal grating in two colours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub name: String,
    /// Grating direction in radians.
    pub angle: f32,
    /// Cycles across the image side.
    pub frequency: f32,
    pub foreground: [f32; 3],
    pub background: [f32; 3],
}

const PALETTE: &[[f32; 3]] = &[
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.1],
    [0.8, 0.2, 0.85],
    [0.1, 0.85, 0.9],
];

/// `n` mutually distinct concepts (up to 30): every concept has its own
/// ordered colour pair; orientation (horizontal or vertical stripes) and
/// frequency alternate with the index.
pub fn concepts(n: usize) -> Vec<Concept> {
    let k = PALETTE.len();
    assert!(n <= k * (k - 1), "at most {} distinct concepts", k * (k - 1));
    (0..n)
        .map(|i| {
            let fg = i % k;
            let bg = (fg + 1 + i / k) % k;
            Concept {
                name: format!("c{i:02}"),
                angle: if i % 2 == 0 { 0.0 } else { std::f32::consts::FRAC_PI_2 },
                frequency: if (i / 2) % 2 == 0 { 2.0 } else { 3.0 },
                foreground: PALETTE[fg],
                background: PALETTE[bg],
            }
        })
        .collect()
}

/// One image of a concept: random phase, ±0.05 brightness shift and
/// per-pixel noise with standard deviation `noise`.
pub fn render(concept: &Concept, size: usize, noise: f32, rng: &mut impl Rng) -> ImageTensor {
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let shift: f32 = rng.random_range(-0.05..0.05);
    let normal = Normal::new(0.0f32, noise.max(1e-6)).expect("valid sigma");
    let (s, c) = concept.angle.sin_cos();
    let mut img = ImageTensor::zeros(3, size, size);
    for y in 0..size {
        for x in 0..size {
            let u = (c * x as f32 + s * y as f32) / size as f32;
            let t = 0.5 + 0.5 * (std::f32::consts::TAU * concept.frequency * u + phase).sin();
            for ch in 0..3 {
                let v = t * concept.foreground[ch] + (1.0 - t) * concept.background[ch];
                let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
                *img.at_mut(ch, y, x) = (v + shift + n).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Ground truth of a planted comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedComparison {
    pub datasets: Vec<DatasetDescriptor>,
    /// Concept names only present in each dataset.
    pub specific: BTreeMap<String, Vec<String>>,
    /// Concept names present in every dataset.
    pub shared: Vec<String>,
    /// `dataset → image → concept`.
    pub concept_of: BTreeMap<String, BTreeMap<String, String>>,
}

#[derive(Debug, Clone)]
pub struct PlantedOptions {
    pub dataset_ids: Vec<String>,
    pub images_per_dataset: usize,
    pub specific_per_dataset: usize,
    pub shared: usize,
    pub size: usize,
    pub noise: f32,
    pub seed: u64,
}

impl Default for PlantedOptions {
    fn default() -> Self {
        Self {
            dataset_ids: vec!["A".into(), "B".into()],
            images_per_dataset: 2000,
            specific_per_dataset: 4,
            shared: 4,
            size: 32,
            noise: 0.03,
            seed: 0,
        }
    }
}

/// Writes one directory of PNGs per dataset under `root`, with the concept
/// name as label. Half of each dataset's images show its own concepts, half
/// the shared ones, cycling through concepts evenly.
pub fn write_planted_comparison(root: &Path, opts: &PlantedOptions) -> Result<PlantedComparison> {
    let nd = opts.dataset_ids.len();
    let all = concepts(nd * opts.specific_per_dataset + opts.shared);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let shared: Vec<&Concept> = all[nd * opts.specific_per_dataset..].iter().collect();
    let mut out = PlantedComparison {
        datasets: Vec::new(),
        specific: BTreeMap::new(),
        shared: shared.iter().map(|c| c.name.clone()).collect(),
        concept_of: BTreeMap::new(),
    };
    for (di, id) in opts.dataset_ids.iter().enumerate() {
        let own: Vec<&Concept> = all
            [di * opts.specific_per_dataset..(di + 1) * opts.specific_per_dataset]
            .iter()
            .collect();
        let dir = root.join(id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut labels = BTreeMap::new();
        for i in 0..opts.images_per_dataset {
            let pool = if i % 2 == 0 && !own.is_empty() || shared.is_empty() {
                &own
            } else {
                &shared
            };
            let concept = pool[(i / 2) % pool.len()];
            let image_id = format!("{id}_{i:05}");
            let img = render(concept, opts.size, opts.noise, &mut rng);
            let path = dir.join(format!("{image_id}.png"));
            img.to_rgb8().save(&path)?;
            labels.insert(image_id, concept.name.clone());
        }
        write_labels(&dir.join(crate::data::LABELS_FILE), &labels)?;
        out.specific
            .insert(id.clone(), own.iter().map(|c| c.name.clone()).collect());
        out.concept_of.insert(id.clone(), labels);
        out.datasets.push(DatasetDescriptor::new(id, &dir)?);
    }
    Ok(out)
}

/// Majority class-token prototype of every planted concept and the share
/// of the concept's images assigned to it.
pub fn concept_purity(
    records: &[ImageRecord],
    concept_of: &BTreeMap<String, BTreeMap<String, String>>,
) -> BTreeMap<String, (usize, f64)> {
    let mut counts: BTreeMap<&str, BTreeMap<usize, usize>> = BTreeMap::new();
    for r in records {
        if let Some(c) = concept_of.get(&r.dataset_id).and_then(|m| m.get(&r.image_id)) {
            *counts.entry(c).or_default().entry(r.class_prototype).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .map(|(c, m)| {
            let total: usize = m.values().sum();
            let (p, n) = m
                .iter()
                .fold((0, 0), |b, (&p, &n)| if n > b.1 { (p, n) } else { b });
            (c.to_string(), (p, n as f64 / total as f64))
        })
        .collect()
}

/// A ViT whose blocks average the token stream: zero query/key weights
/// give uniform attention, identity value/output maps pass the average
/// through, and the MLP is switched off. The class token therefore
/// summarizes the whole image.
pub fn pooling_backbone(cfg: &PatchConfig, seed: u64) -> Result<Params> {
    let mut params = backbone::init_params(cfg, seed)?;
    let d = cfg.embed_dim;
    let dev = candle_core::Device::Cpu;
    let eye = candle_core::Tensor::eye(d, candle_core::DType::F32, &dev)?;
    let zeros = candle_core::Tensor::zeros((d, d), candle_core::DType::F32, &dev)?;
    for i in 0..cfg.depth {
        let b = format!("blocks.{i}.");
        let qkv = candle_core::Tensor::cat(&[&zeros, &zeros, &eye], 0)?;
        params.insert(format!("{b}attn.qkv.weight"), qkv);
        params.insert(format!("{b}attn.proj.weight"), eye.clone());
        let fc2 = params.get(&format!("{b}mlp.fc2.weight"))?.zeros_like()?;
        params.insert(format!("{b}mlp.fc2.weight"), fc2);
    }
    Ok(params)
}

/// Channel of the final norm that is pinned to one, acting as a bias input.
const BIAS_CHANNEL: usize = 0;
/// Channel pinned to zero, used to pad bank rows to a common norm.
const PAD_CHANNEL: usize = 1;

/// Inference model over a pooling backbone whose first prototypes are the
/// class-token centroids of the given exemplar sets (one set per class),
/// arranged so that hard
/// assignment is exact nearest-centroid and all class prototypes share one
/// norm. The remaining prototypes are random distractors with a large
/// negative bias, so they are never selected.
///
/// The backbone's final norm emits a constant one on one channel and a
/// constant zero on another: a bank row `[-|c|²/2, pad, c]` then scores a
/// token `z` as `c·z − |c|²/2`, whose argmax is the nearest centroid, and the
/// pad entry equalizes row norms without changing any logit.
pub fn planted_class_model(
    cfg: &PatchConfig,
    exemplars: &[Vec<ImageTensor>],
    k: usize,
    seed: u64,
) -> Result<ProtoModel> {
    if exemplars.len() > k {
        return Err(Error::InvalidArgument(format!(
            "{} classes do not fit in {k} prototypes",
            exemplars.len()
        )));
    }
    if exemplars.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("every class needs at least one exemplar".into()));
    }
    let d = cfg.embed_dim;
    if d < 3 {
        return Err(Error::InvalidArgument(format!(
            "planted class model needs an embedding of at least 3 channels, got {d}"
        )));
    }
    let normalization = Normalization::centered();
    let mut backbone = pooling_backbone(cfg, seed)?;
    let mut weight = to_f32_vec(backbone.get("norm.weight")?)?;
    let mut bias = to_f32_vec(backbone.get("norm.bias")?)?;
    weight[BIAS_CHANNEL] = 0.0;
    bias[BIAS_CHANNEL] = 1.0;
    weight[PAD_CHANNEL] = 0.0;
    bias[PAD_CHANNEL] = 0.0;
    let dev = candle_core::Device::Cpu;
    backbone.insert("norm.weight", candle_core::Tensor::from_vec(weight, d, &dev)?);
    backbone.insert("norm.bias", candle_core::Tensor::from_vec(bias, d, &dev)?);
    let mut params = Params::new();
    params.extend_prefixed(BACKBONE_PREFIX, &backbone);

    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(k);
    for set in exemplars {
        let prepared: Vec<ImageTensor> = set
            .iter()
            .map(|t| {
                t.resize(cfg.image_height, cfg.image_width)
                    .normalized(&normalization.mean, &normalization.std)
            })
            .collect();
        let tokens = backbone::vit_forward(&backbone, cfg, &stack_images(&prepared)?)?;
        let mut row = to_f32_vec(&tokens.narrow(1, 0, 1)?.squeeze(1)?.mean(0)?)?;
        row[PAD_CHANNEL] = 0.0;
        let sq: f32 = row.iter().skip(2).map(|v| v * v).sum();
        row[BIAS_CHANNEL] = -0.5 * sq;
        rows.push(row);
    }
    if !rows.is_empty() {
        let norm2 = |r: &[f32]| r.iter().map(|v| v * v).sum::<f32>();
        let target = rows.iter().map(|r| norm2(r)).fold(0.0, f32::max);
        for row in &mut rows {
            row[PAD_CHANNEL] = (target - norm2(row)).max(0.0).sqrt();
        }
    }
    let floor = rows
        .iter()
        .map(|r| r[BIAS_CHANNEL])
        .fold(0.0f32, f32::min);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0a7);
    let normal = Normal::new(0.0f32, 0.01).expect("valid sigma");
    while rows.len() < k {
        let mut row: Vec<f32> = (0..d).map(|_| normal.sample(&mut rng)).collect();
        row[BIAS_CHANNEL] = 4.0 * floor - 1e3;
        rows.push(row);
    }
    params.insert(
        BANK,
        candle_core::Tensor::from_vec(rows.concat(), (k, d), &candle_core::Device::Cpu)?,
    );
    Ok(ProtoModel {
        spec: ModelSpec {
            patch: cfg.clone(),
            normalization,
            num_prototypes: k,
            head: HeadConfig {
                hidden_dim: 32,
                bottleneck_dim: 16,
                output_dim: 32,
            },
            head_input: HeadInput::Class,
        },
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concepts_are_distinct() {
        let c = concepts(12);
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                assert_ne!(
                    (c[i].angle.to_bits(), c[i].frequency.to_bits(), c[i].foreground.map(f32::to_bits), c[i].background.map(f32::to_bits)),
                    (c[j].angle.to_bits(), c[j].frequency.to_bits(), c[j].foreground.map(f32::to_bits), c[j].background.map(f32::to_bits)),
                );
            }
        }
    }

    #[test]
    fn planted_class_model_assigns_nearest_template() {
        let (cfg, _) = backbone::architecture("toy-vit-s8-d16-l1-h2-i32").unwrap();
        let cs = concepts(5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let exemplars: Vec<Vec<_>> = cs
            .iter()
            .map(|c| (0..8).map(|_| render(c, 32, 0.0, &mut rng)).collect())
            .collect();
        let model = planted_class_model(&cfg, &exemplars, 8, 1).unwrap();
        let rows = model.bank().unwrap().rows().unwrap();
        let norm = |r: &Vec<f32>| r.iter().map(|v| v * v).sum::<f32>().sqrt();
        for r in &rows[1..5] {
            assert!((norm(r) - norm(&rows[0])).abs() < 1e-3 * norm(&rows[0]));
        }
        let fresh: Vec<_> = cs.iter().map(|c| render(c, 32, 0.03, &mut rng)).collect();
        let (_, picked) = model.class_embeddings(&fresh, &[], false).unwrap();
        assert_eq!(picked, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn render_is_seeded() {
        let c = &concepts(1)[0];
        let a = render(c, 16, 0.03, &mut ChaCha8Rng::seed_from_u64(1));
        let b = render(c, 16, 0.03, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
