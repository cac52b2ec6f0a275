use candle_core::{DType, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn to_f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

pub fn ensure_finite(t: &Tensor, stage: &str) -> Result<()> {
    if to_f64_vec(t)?.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            stage: stage.to_string(),
        })
    }
}

/// Feeds a tensor's shape, dtype and raw little-endian values into a hasher.
pub fn hash_tensor(hasher: &mut Sha256, t: &Tensor) -> Result<()> {
    hasher.update(format!("{:?}{:?}", t.dims(), t.dtype()).as_bytes());
    match t.dtype() {
        DType::F64 => {
            for v in to_f64_vec(t)? {
                hasher.update(v.to_le_bytes());
            }
        }
        _ => {
            for v in to_f32_vec(t)? {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    Ok(())
}
