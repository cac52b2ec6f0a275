//! A small, fully deterministic set of service artifacts (checkpoint,
//! index, report and images) for contract tests. The index records are
//! drawn from an integer-seeded generator rather than from the model, so
//! every statistic is exact; only attention overlays run the network.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use protosim_core::analytics::{compare_report, write_report, SpecificityOptions};
use protosim_core::backbone::load_pretrained;
use protosim_core::checkpoint::{file_hash, Checkpoint, RngState};
use protosim_core::data::{write_labels, DatasetDescriptor, LABELS_FILE};
use protosim_core::image_ops::ImageTensor;
use protosim_core::index::{
    records_file_name, ImageRecord, IndexManifest, IndexStore, IndexedDataset, INDEX_FORMAT,
};
use protosim_core::model::{init_params, HeadInput, ModelSpec, BANK};
use protosim_core::params::Params;
use protosim_core::protosim::PrototypeBank;
use protosim_core::training::{TrainConfig, CHECKPOINT_FILE};
use protosim_core::Result;

use crate::{AppState, ServeConfig};

pub const BACKBONE: &str = "toy-vit-s8-d16-l1-h2-i16,seed=7";
pub const NUM_PROTOTYPES: usize = 6;
pub const IMAGES_PER_DATASET: usize = 24;
pub const DATASETS: [&str; 2] = ["A", "B"];

/// `(name, request path)` pairs covered by the golden contract.
pub const GOLDEN_REQUESTS: &[(&str, &str)] = &[
    ("manifest", "/api/manifest"),
    ("prototypes", "/api/prototypes"),
    ("prototypes_threshold", "/api/prototypes?threshold=0.7"),
    ("prototypes_label_shared", "/api/prototypes?label=shared"),
    ("prototypes_label_specific", "/api/prototypes?label=specific-to:A"),
    ("prototypes_patch_tokens", "/api/prototypes?token_kind=patch&min_occurrences=5"),
    ("prototypes_sorted_paged", "/api/prototypes?sort=occurrences&offset=1&limit=3"),
    ("prototypes_by_specificity", "/api/prototypes?sort=specificity"),
    ("prototypes_bad_threshold", "/api/prototypes?threshold=1.5"),
    ("prototypes_bad_sort", "/api/prototypes?sort=colour"),
    ("prototype_0", "/api/prototypes/0"),
    ("prototype_out_of_range", "/api/prototypes/99"),
    ("prototype_bad_id", "/api/prototypes/first"),
    ("examples_0", "/api/prototypes/0/examples?k=5"),
    ("examples_4_affinity", "/api/prototypes/4/examples?dataset=B&rank=affinity&k=4"),
    ("examples_class_tokens", "/api/prototypes/2/examples?token_kind=class"),
    ("examples_unknown_dataset", "/api/prototypes/0/examples?dataset=Z"),
    ("attention_0_a000", "/api/prototypes/0/attention/A_000?dataset=A"),
    ("attention_3_b005", "/api/prototypes/3/attention/B_005"),
    ("attention_unknown_image", "/api/prototypes/0/attention/Q_999"),
    ("image_a000", "/api/images/A/A_000"),
    ("image_unknown", "/api/images/A/B_000"),
    ("report", "/api/report"),
    ("unknown_endpoint", "/api/nothing-here"),
];

/// Directory of the checked-in golden responses.
pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

/// Stable text form of a response for golden comparison: status, content
/// type, then the pretty-printed JSON body or, for binary bodies, their
/// digest and length.
pub fn golden_text(status: u16, content_type: &str, body: &[u8]) -> String {
    let rendered = match serde_json::from_slice::<serde_json::Value>(body) {
        Ok(v) if content_type.starts_with("application/json") => {
            serde_json::to_string_pretty(&v).expect("JSON value serializes")
        }
        _ => format!(
            "sha256 {}\nbytes {}",
            hex::encode(Sha256::digest(body)),
            body.len()
        ),
    };
    format!("status {status}\ncontent-type {content_type}\n\n{rendered}\n")
}

/// Paths of a written fixture.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub root: PathBuf,
    pub checkpoint: PathBuf,
    pub index_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Fixture {
    pub fn serve_config(&self, cache_dir: &Path) -> ServeConfig {
        ServeConfig {
            index_dir: self.index_dir.clone(),
            checkpoint: self.checkpoint.clone(),
            report: self.report_dir.clone(),
            cache_dir: Some(cache_dir.to_path_buf()),
        }
    }
}

/// Prototype rows with small dyadic entries: rows 0–3 are orthogonal
/// pairs of ones, row 4 overlaps rows 0 and 1, row 5 is zero.
pub fn bank_rows(d: usize) -> Vec<Vec<f32>> {
    (0..NUM_PROTOTYPES)
        .map(|p| {
            let mut row = vec![0.0f32; d];
            match p {
                0..=3 => {
                    row[2 * p] = 1.0;
                    row[2 * p + 1] = 1.0;
                }
                4 => {
                    row[0] = 0.5;
                    row[2] = 0.5;
                    row[8] = -0.25;
                }
                _ => {}
            }
            row
        })
        .collect()
}

fn write_checkpoint(path: &Path) -> Result<Checkpoint> {
    let backbone = load_pretrained(BACKBONE)?;
    let config = TrainConfig {
        batch_size: 8,
        epochs: 1,
        soft_epochs: 1,
        num_prototypes: NUM_PROTOTYPES,
        local_crops: 2,
        head_hidden_dim: 16,
        head_bottleneck_dim: 8,
        head_output_dim: 16,
        head_input: HeadInput::Class,
        backbone: BACKBONE.to_string(),
        ..TrainConfig::default()
    };
    let spec = ModelSpec {
        patch: backbone.config.clone(),
        normalization: backbone.normalization.clone(),
        num_prototypes: NUM_PROTOTYPES,
        head: config.head_config(),
        head_input: config.head_input,
    };
    let mut student = init_params(&backbone, NUM_PROTOTYPES, &spec.head, 11)?;
    let bank = PrototypeBank::from_rows(&bank_rows(backbone.config.embed_dim))?;
    student.insert(BANK, bank.weights().clone());
    let teacher: Params = student
        .iter()
        .filter(|(k, _)| !k.starts_with(protosim_core::model::BACKBONE_PREFIX))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let ckpt = Checkpoint {
        center: Tensor::zeros((1, config.head_output_dim), DType::F32, &Device::Cpu)?,
        config,
        spec,
        backbone_descriptor: backbone.descriptor.clone(),
        student,
        teacher,
        epoch: 1,
        rng: RngState::capture(&ChaCha8Rng::seed_from_u64(0)),
    };
    ckpt.save(path)?;
    Ok(ckpt)
}

/// Prototype usage per dataset: A prefers 0 and 1, B prefers 2 and 3, both
/// use 4, and 5 never occurs.
fn draw_prototype(dataset: usize, rng: &mut ChaCha8Rng) -> usize {
    let r = rng.random_range(0..10u32);
    match (dataset, r) {
        (_, 0..=2) => 4,
        (0, 3..=6) => 0,
        (0, _) => 1,
        (_, 3..=6) => 2,
        (_, _) => 3,
    }
}

fn records(num_patches: usize) -> Vec<ImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    for (di, d) in DATASETS.iter().enumerate() {
        for i in 0..IMAGES_PER_DATASET {
            let class_prototype = draw_prototype(di, &mut rng);
            let patch_prototypes: Vec<usize> =
                (0..num_patches).map(|_| draw_prototype(di, &mut rng)).collect();
            let mut seen: BTreeMap<usize, f32> = BTreeMap::new();
            for (j, &p) in std::iter::once(&class_prototype).chain(&patch_prototypes).enumerate() {
                let a = 0.25 * ((i + j) % 8) as f32 + p as f32;
                let e = seen.entry(p).or_insert(f32::NEG_INFINITY);
                *e = e.max(a);
            }
            let mut top: Vec<(usize, f32)> = seen.into_iter().collect();
            top.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            out.push(ImageRecord {
                image_id: format!("{d}_{i:03}"),
                dataset_id: d.to_string(),
                class_prototype,
                patch_prototypes,
                top_affinities: top,
            });
        }
    }
    out
}

fn write_images(root: &Path, size: usize) -> Result<Vec<DatasetDescriptor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut out = Vec::new();
    for d in DATASETS {
        let dir = root.join("images").join(d);
        std::fs::create_dir_all(&dir).map_err(|e| protosim_core::Error::io(&dir, e))?;
        let mut labels = BTreeMap::new();
        for i in 0..IMAGES_PER_DATASET {
            let mut img = ImageTensor::zeros(3, size, size);
            for v in img.data.iter_mut() {
                *v = rng.random_range(0..=255u32) as f32 / 255.0;
            }
            let id = format!("{d}_{i:03}");
            img.to_rgb8().save(dir.join(format!("{id}.png")))?;
            labels.insert(id, format!("class{}", i % 3));
        }
        write_labels(&dir.join(LABELS_FILE), &labels)?;
        out.push(DatasetDescriptor::new(d, &dir)?);
    }
    Ok(out)
}

/// Writes the fixture under `root` and returns its paths.
pub fn build_fixture(root: &Path) -> Result<Fixture> {
    let checkpoint = root.join(CHECKPOINT_FILE);
    let ckpt = write_checkpoint(&checkpoint)?;
    let patch = &ckpt.spec.patch;
    let descriptors = write_images(root, patch.image_height)?;
    let records = records(patch.num_patches());
    let manifest = IndexManifest {
        format: INDEX_FORMAT.to_string(),
        num_prototypes: NUM_PROTOTYPES,
        num_patches: patch.num_patches(),
        grid: patch.grid(),
        checkpoint: PathBuf::from(CHECKPOINT_FILE),
        checkpoint_hash: file_hash(&checkpoint)?,
        datasets: descriptors
            .into_iter()
            .map(|descriptor| IndexedDataset {
                images: IMAGES_PER_DATASET,
                skipped: 0,
                records_file: records_file_name(&descriptor.dataset_id),
                descriptor,
            })
            .collect(),
    };
    let index_dir = root.join("index");
    let store = IndexStore::save(&index_dir, &manifest, &records)?;
    let report_dir = root.join("report");
    let report = compare_report(&store, &ckpt.model()?.bank()?, &SpecificityOptions::default(), 5)?;
    write_report(&report, &store, &report_dir)?;
    Ok(Fixture {
        root: root.to_path_buf(),
        checkpoint,
        index_dir,
        report_dir,
    })
}

/// A server on an ephemeral loopback port.
pub struct TestServer {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    handle: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl TestServer {
    pub async fn start(state: Arc<AppState>) -> std::io::Result<Self> {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let handle = tokio::spawn(crate::serve(listener, state, None, async {
            let _ = rx.await;
        }));
        Ok(Self {
            addr,
            shutdown: Some(tx),
            handle,
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Graceful shutdown; waits for the server task.
    pub async fn stop(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        (&mut self.handle)
            .await
            .map_err(|e| std::io::Error::other(e.to_string()))?
    }
}
