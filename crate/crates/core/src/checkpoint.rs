//! Single-file training checkpoints (`protosim-ckpt-v1`): a safetensors
//! archive whose header metadata carries the format tag, the config echo,
//! the model spec, the epoch and the RNG state.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, ProtoModel, BANK};
use crate::params::Params;
use crate::training::{TrainConfig, CHECKPOINT_FILE};

pub const CHECKPOINT_FORMAT: &str = "protosim-ckpt-v1";
const STUDENT: &str = "student.";
const TEACHER: &str = "teacher.";
const CENTER: &str = "teacher_center";
const META_KEY: &str = "protosim";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: TrainConfig,
    spec: ModelSpec,
    backbone: String,
    epoch: usize,
    rng: RngState,
}

/// Position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed)
            .map_err(|e| Error::InvalidArgument(format!("bad rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::InvalidArgument("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(
            self.word_pos
                .parse()
                .map_err(|_| Error::InvalidArgument("bad rng word position".into()))?,
        );
        Ok(rng)
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub spec: ModelSpec,
    pub backbone_descriptor: String,
    /// Complete student parameter set, backbone included.
    pub student: Params,
    /// Teacher copies of the trainable parameters.
    pub teacher: Params,
    pub center: Tensor,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
}

impl Checkpoint {
    /// Writes to a temporary file next to `path`, then renames over it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (k, v) in self.student.iter() {
            tensors.push((format!("{STUDENT}{k}"), v.contiguous()?));
        }
        for (k, v) in self.teacher.iter() {
            tensors.push((format!("{TEACHER}{k}"), v.contiguous()?));
        }
        tensors.push((CENTER.to_string(), self.center.contiguous()?));
        // One metadata entry keeps the header byte-deterministic.
        let header = Header {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            spec: self.spec.clone(),
            backbone: self.backbone_descriptor.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
        };
        let mut meta = HashMap::new();
        meta.insert(META_KEY.to_string(), serde_json::to_string(&header)?);
        let bytes = safetensors::serialize(tensors, Some(meta))
            .map_err(|e| Error::format(path, e.to_string()))?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = resolve(path);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        let text = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::format(&path, "missing checkpoint metadata"))?;
        let header: Header = serde_json::from_str(text)
            .map_err(|e| Error::format(&path, format!("bad checkpoint metadata: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::format(
                &path,
                format!("expected format {CHECKPOINT_FORMAT}, found {}", header.format),
            ));
        }
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        let mut student = Params::new();
        let mut teacher = Params::new();
        let mut center = None;
        for (k, v) in tensors {
            if let Some(n) = k.strip_prefix(STUDENT) {
                student.insert(n, v);
            } else if let Some(n) = k.strip_prefix(TEACHER) {
                teacher.insert(n, v);
            } else if k == CENTER {
                center = Some(v);
            }
        }
        Ok(Self {
            config: header.config,
            spec: header.spec,
            backbone_descriptor: header.backbone,
            student,
            teacher,
            center: center.ok_or_else(|| Error::format(&path, "missing teacher center"))?,
            epoch: header.epoch,
            rng: header.rng,
        })
    }

    /// Inference model over the student weights.
    pub fn model(&self) -> Result<ProtoModel> {
        let model = ProtoModel {
            spec: self.spec.clone(),
            params: self.student.clone(),
        };
        let bank = model.bank()?;
        if bank.k() != self.spec.num_prototypes {
            return Err(Error::Data(format!(
                "checkpoint bank has {} rows, spec declares {}",
                bank.k(),
                self.spec.num_prototypes
            )));
        }
        let _ = self.student.get(BANK)?;
        Ok(model)
    }
}

/// A directory argument resolves to the checkpoint file inside it.
pub fn resolve(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let path = resolve(path);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Write-temp-then-rename in the destination directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
