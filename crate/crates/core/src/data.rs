//! Dataset descriptors, image discovery and label files.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_ops::ImageTensor;

pub const LABELS_FILE: &str = "labels.csv";
const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "gif", "webp"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub dataset_id: String,
    pub name: String,
    pub root: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

/// One discovered image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageEntry {
    pub image_id: String,
    pub dataset_id: String,
    pub path: PathBuf,
}

impl DatasetDescriptor {
    /// Parses `id=path`; a `labels.csv` inside the root is picked up.
    pub fn parse(spec: &str) -> Result<Self> {
        let (id, root) = spec.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("dataset must be given as ID=PATH, got `{spec}`"))
        })?;
        Self::new(id, root)
    }

    pub fn new(id: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let id = id.trim();
        if id.is_empty() || id.contains(['/', '?', '&', '#', ' ']) {
            return Err(Error::InvalidArgument(format!("invalid dataset id `{id}`")));
        }
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::Data(format!(
                "dataset `{id}`: root {} is not a readable directory",
                root.display()
            )));
        }
        let labels = root.join(LABELS_FILE);
        Ok(Self {
            dataset_id: id.to_string(),
            name: id.to_string(),
            labels: labels.is_file().then_some(labels),
            root,
        })
    }

    /// Image files directly under the root, sorted by id. The image id is
    /// the file stem.
    pub fn list_images(&self) -> Result<Vec<ImageEntry>> {
        let rd = std::fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let mut out = Vec::new();
        for entry in rd {
            let path = entry.map_err(|e| Error::io(&self.root, e))?.path();
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| e.to_ascii_lowercase());
            if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            out.push(ImageEntry {
                image_id: stem.to_string(),
                dataset_id: self.dataset_id.clone(),
                path,
            });
        }
        out.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        if let Some(w) = out.windows(2).find(|w| w[0].image_id == w[1].image_id) {
            return Err(Error::Data(format!(
                "dataset `{}`: duplicate image id `{}`",
                self.dataset_id, w[0].image_id
            )));
        }
        Ok(out)
    }

    pub fn read_labels(&self) -> Result<BTreeMap<String, String>> {
        match &self.labels {
            Some(p) => read_labels(p),
            None => Err(Error::Data(format!(
                "dataset `{}` has no label file",
                self.dataset_id
            ))),
        }
    }
}

/// Checks ids are unique across a comparison.
pub fn check_unique_ids(datasets: &[DatasetDescriptor]) -> Result<()> {
    let mut seen = HashSet::new();
    for d in datasets {
        if !seen.insert(&d.dataset_id) {
            return Err(Error::InvalidArgument(format!(
                "dataset id `{}` given twice",
                d.dataset_id
            )));
        }
    }
    Ok(())
}

/// `image_id,label` lines; a first line of `image_id,label` is a header.
pub fn read_labels(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (lineno == 0 && line == "image_id,label") {
            continue;
        }
        let (id, label) = line.split_once(',').ok_or_else(|| {
            Error::format(path, format!("line {}: expected `image_id,label`", lineno + 1))
        })?;
        out.insert(id.trim().to_string(), label.trim().to_string());
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &BTreeMap<String, String>) -> Result<()> {
    let mut text = String::from("image_id,label\n");
    for (id, label) in labels {
        text.push_str(&format!("{id},{label}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Images kept in memory when the total pixel budget allows, otherwise
/// decoded from disk on every access.
pub struct ImageSource {
    entries: Vec<ImageEntry>,
    cache: Option<Vec<ImageTensor>>,
}

/// Float budget above which images are decoded lazily.
const CACHE_LIMIT_FLOATS: usize = 128 * 1024 * 1024 / 4;

impl ImageSource {
    pub fn new(entries: Vec<ImageEntry>) -> Result<Self> {
        let mut cache = Vec::with_capacity(entries.len());
        let mut total = 0usize;
        for e in &entries {
            let img = ImageTensor::load(&e.path)?;
            total += img.data.len();
            if total > CACHE_LIMIT_FLOATS {
                return Ok(Self {
                    entries,
                    cache: None,
                });
            }
            cache.push(img);
        }
        Ok(Self {
            entries,
            cache: Some(cache),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, i: usize) -> &ImageEntry {
        &self.entries[i]
    }

    pub fn get(&self, i: usize) -> Result<ImageTensor> {
        match &self.cache {
            Some(c) => Ok(c[i].clone()),
            None => ImageTensor::load(&self.entries[i].path),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_list() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.png", "a.png", "notes.txt"] {
            let img = image::RgbImage::new(4, 4);
            if name.ends_with(".png") {
                img.save(dir.path().join(name)).unwrap();
            } else {
                std::fs::write(dir.path().join(name), "x").unwrap();
            }
        }
        let d = DatasetDescriptor::parse(&format!("A={}", dir.path().display())).unwrap();
        assert_eq!(d.dataset_id, "A");
        assert!(d.labels.is_none());
        let ids: Vec<_> = d.list_images().unwrap().into_iter().map(|e| e.image_id).collect();
        assert_eq!(ids, vec!["a", "b"]);
        assert!(DatasetDescriptor::parse("nopath").is_err());
        assert!(DatasetDescriptor::parse("A=/definitely/not/here").is_err());
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut labels = BTreeMap::new();
        labels.insert("img1".to_string(), "cat".to_string());
        labels.insert("img2".to_string(), "dog".to_string());
        let p = dir.path().join(LABELS_FILE);
        write_labels(&p, &labels).unwrap();
        assert_eq!(read_labels(&p).unwrap(), labels);
        let d = DatasetDescriptor::new("X", dir.path()).unwrap();
        assert_eq!(d.read_labels().unwrap(), labels);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = DatasetDescriptor::new("A", dir.path()).unwrap();
        assert!(check_unique_ids(&[a.clone(), a]).is_err());
    }
}
