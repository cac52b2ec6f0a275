//! Assignment index: the noise-free hard prototype of every token of every
//! image, plus per-prototype postings for occurrence queries.
//!
//! On disk an index directory holds `manifest.json`, one JSON-lines record
//! file per dataset, and a binary postings cache that is rebuilt from the
//! records whenever it is missing or stale.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::write_atomic;
use crate::data::DatasetDescriptor;
use crate::error::{Error, Result};
use crate::image_ops::ImageTensor;
use crate::model::ProtoModel;

pub const INDEX_FORMAT: &str = "protosim-index-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const POSTINGS_FILE: &str = "postings.bin";
const POSTINGS_MAGIC: &[u8; 4] = b"PSIX";
const POSTINGS_VERSION: u32 = 1;
/// Fraction of unreadable images above which indexing a dataset aborts.
pub const MAX_SKIPPED_FRACTION: f64 = 0.10;
/// Strongest prototypes kept per image, by their best logit.
const TOP_AFFINITIES: usize = 8;

/// Hard assignment of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub dataset_id: String,
    pub class_prototype: usize,
    /// Row-major over the patch grid.
    pub patch_prototypes: Vec<usize>,
    /// `(prototype, best logit over the image's tokens)`, strongest first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub top_affinities: Vec<(usize, f32)>,
}

impl ImageRecord {
    /// Builds a record from a per-token prototype list (class token first)
    /// and the matching logits.
    pub fn from_assignment(
        dataset_id: &str,
        image_id: &str,
        prototypes: &[usize],
        logits: &[f32],
    ) -> Result<Self> {
        let (&class_prototype, patches) = prototypes
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("assignment without tokens".into()))?;
        let mut best: BTreeMap<usize, f32> = BTreeMap::new();
        for (&p, &l) in prototypes.iter().zip(logits) {
            let e = best.entry(p).or_insert(f32::NEG_INFINITY);
            if l > *e {
                *e = l;
            }
        }
        let mut top: Vec<(usize, f32)> = best.into_iter().collect();
        top.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        top.truncate(TOP_AFFINITIES);
        Ok(Self {
            image_id: image_id.to_string(),
            dataset_id: dataset_id.to_string(),
            class_prototype,
            patch_prototypes: patches.to_vec(),
            top_affinities: top,
        })
    }
}

/// Which tokens a query or statistic counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Class,
    Patch,
    #[default]
    Any,
}

impl std::str::FromStr for TokenKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class" => Ok(Self::Class),
            "patch" => Ok(Self::Patch),
            "any" => Ok(Self::Any),
            _ => Err(Error::InvalidArgument(format!(
                "token kind must be class, patch or any, got `{s}`"
            ))),
        }
    }
}

impl std::fmt::Display for TokenKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Class => "class",
            Self::Patch => "patch",
            Self::Any => "any",
        })
    }
}

/// Occurrence ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rank {
    #[default]
    Count,
    Affinity,
}

impl std::str::FromStr for Rank {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "count" => Ok(Self::Count),
            "affinity" => Ok(Self::Affinity),
            _ => Err(Error::InvalidArgument(format!(
                "rank must be count or affinity, got `{s}`"
            ))),
        }
    }
}

/// One image's use of one prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posting {
    pub dataset_id: String,
    pub image_id: String,
    pub class_token: bool,
    /// Patch positions (row-major, 0-based) assigned to the prototype.
    pub patch_positions: Vec<usize>,
    /// Best logit of the prototype in the image when it was recorded.
    pub affinity: Option<f32>,
}

impl Posting {
    pub fn count(&self, kind: TokenKind) -> usize {
        match kind {
            TokenKind::Class => self.class_token as usize,
            TokenKind::Patch => self.patch_positions.len(),
            TokenKind::Any => self.class_token as usize + self.patch_positions.len(),
        }
    }
}

/// Query result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occurrence {
    pub image_id: String,
    pub dataset_id: String,
    pub count: usize,
    pub class_token: bool,
    pub patch_positions: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub affinity: Option<f32>,
}

/// Class and patch token counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub class: u64,
    pub patch: u64,
}

impl TokenCounts {
    pub fn get(&self, kind: TokenKind) -> u64 {
        match kind {
            TokenKind::Class => self.class,
            TokenKind::Patch => self.patch,
            TokenKind::Any => self.class + self.patch,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeIndex {
    k: usize,
    num_patches: usize,
    /// Dataset ids in first-seen order.
    datasets: Vec<String>,
    images: BTreeMap<String, usize>,
    postings: Vec<Vec<Posting>>,
}

impl PrototypeIndex {
    pub fn new(k: usize, num_patches: usize) -> Self {
        Self {
            k,
            num_patches,
            datasets: Vec::new(),
            images: BTreeMap::new(),
            postings: vec![Vec::new(); k],
        }
    }

    /// Indexes records; duplicate `(dataset, image)` pairs are an error.
    pub fn build(k: usize, num_patches: usize, records: &[ImageRecord]) -> Result<Self> {
        let mut idx = Self::new(k, num_patches);
        let mut seen = BTreeSet::new();
        for r in records {
            idx.check_record(r)?;
            if !seen.insert((r.dataset_id.as_str(), r.image_id.as_str())) {
                return Err(duplicate(r));
            }
            idx.add_unchecked(r);
        }
        idx.sort_postings();
        Ok(idx)
    }

    fn check_record(&self, r: &ImageRecord) -> Result<()> {
        if r.patch_prototypes.len() != self.num_patches {
            return Err(Error::mismatch(
                "index record",
                format!("{} patch tokens", r.patch_prototypes.len()),
                format!("{} patches", self.num_patches),
            ));
        }
        for &p in std::iter::once(&r.class_prototype).chain(&r.patch_prototypes) {
            if p >= self.k {
                return Err(Error::PrototypeOutOfRange { id: p, k: self.k });
            }
        }
        Ok(())
    }

    fn add_unchecked(&mut self, r: &ImageRecord) {
        if !self.datasets.contains(&r.dataset_id) {
            self.datasets.push(r.dataset_id.clone());
        }
        *self.images.entry(r.dataset_id.clone()).or_default() += 1;
        let mut per: BTreeMap<usize, (bool, Vec<usize>)> = BTreeMap::new();
        per.entry(r.class_prototype).or_default().0 = true;
        for (pos, &p) in r.patch_prototypes.iter().enumerate() {
            per.entry(p).or_default().1.push(pos);
        }
        let aff: BTreeMap<usize, f32> = r.top_affinities.iter().copied().collect();
        for (p, (class_token, patch_positions)) in per {
            self.postings[p].push(Posting {
                dataset_id: r.dataset_id.clone(),
                image_id: r.image_id.clone(),
                class_token,
                patch_positions,
                affinity: aff.get(&p).copied(),
            });
        }
    }

    fn sort_postings(&mut self) {
        for list in &mut self.postings {
            list.sort_by(|a, b| {
                a.dataset_id
                    .cmp(&b.dataset_id)
                    .then_with(|| a.image_id.cmp(&b.image_id))
            });
        }
    }

    /// Union of two indexes over disjoint images.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.k != other.k || self.num_patches != other.num_patches {
            return Err(Error::mismatch(
                "index merge",
                format!("K={} N={}", self.k, self.num_patches),
                format!("K={} N={}", other.k, other.num_patches),
            ));
        }
        let mut out = self.clone();
        let mine: BTreeSet<(&str, &str)> = self
            .postings
            .iter()
            .flatten()
            .map(|p| (p.dataset_id.as_str(), p.image_id.as_str()))
            .collect();
        for list in &other.postings {
            for p in list {
                if mine.contains(&(p.dataset_id.as_str(), p.image_id.as_str())) {
                    return Err(Error::Data(format!(
                        "image `{}` of dataset `{}` indexed twice",
                        p.image_id, p.dataset_id
                    )));
                }
            }
        }
        for d in &other.datasets {
            if !out.datasets.contains(d) {
                out.datasets.push(d.clone());
            }
        }
        for (d, n) in &other.images {
            *out.images.entry(d.clone()).or_default() += n;
        }
        for (p, list) in other.postings.iter().enumerate() {
            out.postings[p].extend(list.iter().cloned());
        }
        out.sort_postings();
        Ok(out)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    pub fn datasets(&self) -> &[String] {
        &self.datasets
    }

    pub fn image_count(&self, dataset_id: &str) -> usize {
        self.images.get(dataset_id).copied().unwrap_or(0)
    }

    pub fn total_images(&self) -> usize {
        self.images.values().sum()
    }

    pub fn postings(&self, prototype: usize) -> Result<&[Posting]> {
        self.postings
            .get(prototype)
            .map(|v| v.as_slice())
            .ok_or(Error::PrototypeOutOfRange {
                id: prototype,
                k: self.k,
            })
    }

    /// Token counts of a prototype per dataset, in `datasets()` order.
    pub fn counts(&self, prototype: usize) -> Result<Vec<(String, TokenCounts)>> {
        let mut out: Vec<(String, TokenCounts)> = self
            .datasets
            .iter()
            .map(|d| (d.clone(), TokenCounts::default()))
            .collect();
        for p in self.postings(prototype)? {
            let slot = out
                .iter_mut()
                .find(|(d, _)| *d == p.dataset_id)
                .expect("posting dataset is registered");
            slot.1.class += p.class_token as u64;
            slot.1.patch += p.patch_positions.len() as u64;
        }
        Ok(out)
    }

    pub fn total_counts(&self, prototype: usize) -> Result<TokenCounts> {
        let mut t = TokenCounts::default();
        for (_, c) in self.counts(prototype)? {
            t.class += c.class;
            t.patch += c.patch;
        }
        Ok(t)
    }

    /// Images using a prototype, optionally within one dataset and token
    /// kind, ordered by count (descending, ties by image id) or affinity.
    pub fn query_occurrences(
        &self,
        prototype: usize,
        dataset: Option<&str>,
        kind: TokenKind,
        rank: Rank,
    ) -> Result<Vec<Occurrence>> {
        let mut out: Vec<Occurrence> = self
            .postings(prototype)?
            .iter()
            .filter(|p| dataset.is_none_or(|d| d == p.dataset_id))
            .filter(|p| p.count(kind) > 0)
            .map(|p| Occurrence {
                image_id: p.image_id.clone(),
                dataset_id: p.dataset_id.clone(),
                count: p.count(kind),
                class_token: p.class_token,
                patch_positions: p.patch_positions.clone(),
                affinity: p.affinity,
            })
            .collect();
        let ids = |a: &Occurrence, b: &Occurrence| {
            a.image_id
                .cmp(&b.image_id)
                .then_with(|| a.dataset_id.cmp(&b.dataset_id))
        };
        match rank {
            Rank::Count => out.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| ids(a, b))),
            Rank::Affinity => out.sort_by(|a, b| {
                let (x, y) = (
                    a.affinity.unwrap_or(f32::NEG_INFINITY),
                    b.affinity.unwrap_or(f32::NEG_INFINITY),
                );
                y.total_cmp(&x)
                    .then_with(|| b.count.cmp(&a.count))
                    .then_with(|| ids(a, b))
            }),
        }
        Ok(out)
    }
}

fn duplicate(r: &ImageRecord) -> Error {
    Error::Data(format!(
        "image `{}` of dataset `{}` indexed twice",
        r.image_id, r.dataset_id
    ))
}

/// Outcome of indexing one dataset.
#[derive(Debug, Clone, Default)]
pub struct DatasetRun {
    pub records: Vec<ImageRecord>,
    /// `(image_id, reason)` for unreadable images.
    pub skipped: Vec<(String, String)>,
}

/// Assigns every image of a dataset with the noise-free model. Unreadable
/// images are skipped with a warning; more than 10% unreadable aborts.
/// `progress(done, total)` is called after every batch.
pub fn index_dataset(
    model: &ProtoModel,
    dataset: &DatasetDescriptor,
    batch_size: usize,
    mut progress: impl FnMut(usize, usize),
) -> Result<DatasetRun> {
    let entries = dataset.list_images()?;
    let total = entries.len();
    let batch_size = batch_size.max(1);
    let mut run = DatasetRun::default();
    let mut done = 0;
    for chunk in entries.chunks(batch_size) {
        let loaded: Vec<_> = chunk
            .par_iter()
            .map(|e| (e, ImageTensor::load(&e.path)))
            .collect();
        let mut ok = Vec::with_capacity(loaded.len());
        for (e, img) in loaded {
            match img {
                Ok(img) => ok.push((e, img)),
                Err(err) => {
                    tracing::warn!(image = %e.path.display(), "skipping unreadable image: {err}");
                    run.skipped.push((e.image_id.clone(), err.to_string()));
                }
            }
        }
        if run.skipped.len() as f64 > MAX_SKIPPED_FRACTION * total as f64 {
            return Err(Error::Data(format!(
                "dataset `{}`: {} of {} images unreadable (limit {:.0}%)",
                dataset.dataset_id,
                run.skipped.len(),
                total,
                MAX_SKIPPED_FRACTION * 100.0
            )));
        }
        if !ok.is_empty() {
            let images: Vec<ImageTensor> = ok.iter().map(|(_, i)| i.clone()).collect();
            for ((e, _), a) in ok.iter().zip(model.assign(&images)?) {
                run.records.push(ImageRecord::from_assignment(
                    &dataset.dataset_id,
                    &e.image_id,
                    &a.prototypes,
                    &a.logits,
                )?);
            }
        }
        done += chunk.len();
        progress(done, total);
    }
    Ok(run)
}

/// Per-dataset entry of the index manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedDataset {
    #[serde(flatten)]
    pub descriptor: DatasetDescriptor,
    pub images: usize,
    pub skipped: usize,
    pub records_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format: String,
    pub num_prototypes: usize,
    pub num_patches: usize,
    pub grid: (usize, usize),
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub datasets: Vec<IndexedDataset>,
}

impl IndexManifest {
    pub fn dataset(&self, id: &str) -> Option<&IndexedDataset> {
        self.datasets.iter().find(|d| d.descriptor.dataset_id == id)
    }
}

/// A loaded index directory.
#[derive(Debug, Clone)]
pub struct IndexStore {
    pub dir: PathBuf,
    pub manifest: IndexManifest,
    pub records: Vec<ImageRecord>,
    pub index: PrototypeIndex,
}

pub fn records_file_name(dataset_id: &str) -> String {
    format!("records-{dataset_id}.jsonl")
}

fn records_bytes(records: &[ImageRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

impl IndexStore {
    /// Writes manifest, record files and postings cache.
    pub fn save(
        dir: &Path,
        manifest: &IndexManifest,
        records: &[ImageRecord],
    ) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for d in &manifest.datasets {
            let rs: Vec<ImageRecord> = records
                .iter()
                .filter(|r| r.dataset_id == d.descriptor.dataset_id)
                .cloned()
                .collect();
            write_atomic(&dir.join(&d.records_file), &records_bytes(&rs)?)?;
        }
        let index = PrototypeIndex::build(manifest.num_prototypes, manifest.num_patches, records)?;
        let mut text = serde_json::to_string_pretty(manifest)?;
        text.push('\n');
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
        let store = Self {
            dir: dir.to_path_buf(),
            manifest: manifest.clone(),
            records: records.to_vec(),
            index,
        };
        store.write_cache()?;
        Ok(store)
    }

    /// Loads an index directory. A missing or stale postings cache is
    /// rebuilt from the records, and written back when `write_cache`.
    pub fn load(dir: &Path, write_cache: bool) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: IndexManifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.format != INDEX_FORMAT {
            return Err(Error::format(
                &mpath,
                format!("expected format {INDEX_FORMAT}, found {}", manifest.format),
            ));
        }
        let mut records = Vec::new();
        let mut digest = Sha256::new();
        for d in &manifest.datasets {
            let p = dir.join(&d.records_file);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            digest.update(&bytes);
            for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                let r: ImageRecord = serde_json::from_slice(line)
                    .map_err(|e| Error::format(&p, format!("line {}: {e}", i + 1)))?;
                records.push(r);
            }
        }
        let digest: [u8; 32] = digest.finalize().into();
        let cache = dir.join(POSTINGS_FILE);
        let cached = std::fs::read(&cache)
            .ok()
            .and_then(|b| decode_postings(&b, &digest).ok());
        let index = match cached {
            Some(idx) if idx.k == manifest.num_prototypes && idx.num_patches == manifest.num_patches => idx,
            _ => {
                tracing::info!(dir = %dir.display(), "rebuilding postings cache");
                let idx =
                    PrototypeIndex::build(manifest.num_prototypes, manifest.num_patches, &records)?;
                if write_cache {
                    write_atomic(&cache, &encode_postings(&idx, &digest))?;
                }
                idx
            }
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            records,
            index,
        })
    }

    fn write_cache(&self) -> Result<()> {
        let mut digest = Sha256::new();
        for d in &self.manifest.datasets {
            let p = self.dir.join(&d.records_file);
            digest.update(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
        }
        let digest: [u8; 32] = digest.finalize().into();
        write_atomic(
            &self.dir.join(POSTINGS_FILE),
            &encode_postings(&self.index, &digest),
        )
    }

    pub fn record(&self, dataset_id: &str, image_id: &str) -> Option<&ImageRecord> {
        self.records
            .iter()
            .find(|r| r.dataset_id == dataset_id && r.image_id == image_id)
    }

    pub fn dataset_records(&self, dataset_id: &str) -> Vec<&ImageRecord> {
        self.records
            .iter()
            .filter(|r| r.dataset_id == dataset_id)
            .collect()
    }

    /// Path of an indexed image file, resolved through the dataset root.
    pub fn image_path(&self, dataset_id: &str, image_id: &str) -> Result<PathBuf> {
        let d = self
            .manifest
            .dataset(dataset_id)
            .ok_or_else(|| Error::Data(format!("unknown dataset `{dataset_id}`")))?;
        if self.record(dataset_id, image_id).is_none() {
            return Err(Error::Data(format!(
                "image `{image_id}` is not indexed in dataset `{dataset_id}`"
            )));
        }
        d.descriptor
            .list_images()?
            .into_iter()
            .find(|e| e.image_id == image_id)
            .map(|e| e.path)
            .ok_or_else(|| Error::Data(format!("image file for `{image_id}` is gone")))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LittleEndian>(s.len() as u32).unwrap();
    out.extend_from_slice(s.as_bytes());
}

fn get_str(cur: &mut Cursor<&[u8]>) -> std::io::Result<String> {
    let n = cur.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0; n];
    cur.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn encode_postings(idx: &PrototypeIndex, digest: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(POSTINGS_MAGIC);
    let w = &mut out;
    w.write_u32::<LittleEndian>(POSTINGS_VERSION).unwrap();
    w.write_all(digest).unwrap();
    w.write_u32::<LittleEndian>(idx.k as u32).unwrap();
    w.write_u32::<LittleEndian>(idx.num_patches as u32).unwrap();
    w.write_u32::<LittleEndian>(idx.datasets.len() as u32).unwrap();
    for d in &idx.datasets {
        put_str(w, d);
        w.write_u64::<LittleEndian>(idx.image_count(d) as u64).unwrap();
    }
    for list in &idx.postings {
        w.write_u32::<LittleEndian>(list.len() as u32).unwrap();
        for p in list {
            let di = idx.datasets.iter().position(|d| *d == p.dataset_id).unwrap();
            w.write_u32::<LittleEndian>(di as u32).unwrap();
            put_str(w, &p.image_id);
            w.write_u8(p.class_token as u8).unwrap();
            w.write_f32::<LittleEndian>(p.affinity.unwrap_or(f32::NAN)).unwrap();
            w.write_u32::<LittleEndian>(p.patch_positions.len() as u32).unwrap();
            for &q in &p.patch_positions {
                w.write_u32::<LittleEndian>(q as u32).unwrap();
            }
        }
    }
    out
}

fn decode_postings(bytes: &[u8], digest: &[u8; 32]) -> std::io::Result<PrototypeIndex> {
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)?;
    if &magic != POSTINGS_MAGIC || cur.read_u32::<LittleEndian>()? != POSTINGS_VERSION {
        return Err(bad("not a postings cache"));
    }
    let mut stored = [0u8; 32];
    cur.read_exact(&mut stored)?;
    if &stored != digest {
        return Err(bad("stale postings cache"));
    }
    let k = cur.read_u32::<LittleEndian>()? as usize;
    let num_patches = cur.read_u32::<LittleEndian>()? as usize;
    let nd = cur.read_u32::<LittleEndian>()? as usize;
    let mut idx = PrototypeIndex::new(k, num_patches);
    for _ in 0..nd {
        let d = get_str(&mut cur)?;
        let n = cur.read_u64::<LittleEndian>()? as usize;
        idx.images.insert(d.clone(), n);
        idx.datasets.push(d);
    }
    for p in 0..k {
        let n = cur.read_u32::<LittleEndian>()? as usize;
        let mut list = Vec::with_capacity(n);
        for _ in 0..n {
            let di = cur.read_u32::<LittleEndian>()? as usize;
            let dataset_id = idx.datasets.get(di).ok_or_else(|| bad("bad dataset"))?.clone();
            let image_id = get_str(&mut cur)?;
            let class_token = cur.read_u8()? != 0;
            let a = cur.read_f32::<LittleEndian>()?;
            let np = cur.read_u32::<LittleEndian>()? as usize;
            let mut patch_positions = Vec::with_capacity(np);
            for _ in 0..np {
                patch_positions.push(cur.read_u32::<LittleEndian>()? as usize);
            }
            list.push(Posting {
                dataset_id,
                image_id,
                class_token,
                patch_positions,
                affinity: (!a.is_nan()).then_some(a),
            });
        }
        idx.postings[p] = list;
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(idx)
}
