//! The ProtoSim layer: tokens attend over a bank of learnable prototypes and
//! are replaced by (a mixture of, or exactly one of) those prototypes.
//!
//! Matrix conventions follow the layer's definition: the bank is `K×D`, a
//! token batch is `(N+1)×D` with the class token at row 0, and assignments are
//! `K×(N+1)` with one column per token. Batched training code works on the
//! transposed `(..., T, K)` layout instead, where the prototype axis is last;
//! the `*_last_dim` helpers operate on that layout.

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, D};
use rand::Rng;
use rand_distr::{Distribution, Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_util::{ensure_finite, to_f64_vec};

/// Gumbel-softmax temperature. Fixed; not a tuning surface.
pub const TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignMode {
    Soft,
    Hard,
}

impl std::fmt::Display for AssignMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AssignMode::Soft => f.write_str("soft"),
            AssignMode::Hard => f.write_str("hard"),
        }
    }
}

/// Whether Gumbel noise is added to the logits before assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noise {
    Sampled,
    Off,
}

/// `K×D` matrix of prototype vectors.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    weights: Tensor,
}

impl PrototypeBank {
    pub fn new(weights: Tensor) -> Result<Self> {
        let (k, d) = weights.dims2().map_err(|_| {
            Error::InvalidArgument(format!(
                "prototype bank must be a matrix, got shape {:?}",
                weights.dims()
            ))
        })?;
        if k < 2 || d < 1 {
            return Err(Error::InvalidArgument(format!(
                "prototype bank needs K >= 2 and D >= 1, got K={k}, D={d}"
            )));
        }
        ensure_finite(&weights, "prototype bank")?;
        Ok(Self { weights })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidArgument("ragged prototype rows".into()));
        }
        let flat: Vec<f32> = rows.iter().flatten().copied().collect();
        Self::new(Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu)?)
    }

    /// Unit-variance normal entries scaled by `1/sqrt(D)`, so initial logits
    /// against layer-normed tokens are O(1).
    pub fn random(k: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let scale = 1.0 / (d as f64).sqrt();
        let data: Vec<f32> = (0..k * d)
            .map(|_| {
                let x: f64 = StandardNormal.sample(rng);
                (x * scale) as f32
            })
            .collect();
        Self::new(Tensor::from_vec(data, (k, d), &Device::Cpu)?)
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn k(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn d(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn rows(&self) -> Result<Vec<Vec<f32>>> {
        Ok(self.weights.to_dtype(DType::F32)?.to_vec2::<f32>()?)
    }

    /// Copy of the bank with the given rows replaced by zero vectors.
    pub fn with_zeroed_rows(&self, ids: &[usize]) -> Result<Self> {
        let k = self.k();
        if let Some(&bad) = ids.iter().find(|&&id| id >= k) {
            return Err(Error::PrototypeOutOfRange { id: bad, k });
        }
        let mask: Vec<f32> = (0..k)
            .map(|i| if ids.contains(&i) { 0.0 } else { 1.0 })
            .collect();
        let mask = Tensor::from_vec(mask, (k, 1), self.weights.device())?
            .to_dtype(self.weights.dtype())?;
        Ok(Self {
            weights: self.weights.broadcast_mul(&mask)?,
        })
    }
}

/// `(N+1)×D` token embeddings, class token first.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    tokens: Tensor,
}

impl TokenBatch {
    pub fn new(tokens: Tensor) -> Result<Self> {
        let (t, _) = tokens.dims2().map_err(|_| {
            Error::InvalidArgument(format!(
                "token batch must be a matrix, got shape {:?}",
                tokens.dims()
            ))
        })?;
        if t == 0 {
            return Err(Error::InvalidArgument("token batch has no tokens".into()));
        }
        ensure_finite(&tokens, "token batch")?;
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    /// Number of patch tokens (excludes the class token).
    pub fn n(&self) -> usize {
        self.tokens.dims()[0] - 1
    }

    pub fn d(&self) -> usize {
        self.tokens.dims()[1]
    }
}

/// `K×(N+1)` assignment of prototypes to tokens.
#[derive(Debug, Clone)]
pub struct AssignmentMatrix {
    a: Tensor,
    mode: AssignMode,
}

impl AssignmentMatrix {
    pub fn tensor(&self) -> &Tensor {
        &self.a
    }

    pub fn mode(&self) -> AssignMode {
        self.mode
    }

    /// Index of the largest entry in each column (ties to the lowest index).
    pub fn argmax_per_token(&self) -> Result<Vec<usize>> {
        let cols = self.a.t()?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        Ok(cols.iter().map(|c| argmax_lowest(c)).collect())
    }
}

/// `(N+1)×D` tokens after substitution by prototypes.
#[derive(Debug, Clone)]
pub struct PrototypeEmbeddings {
    z_hat: Tensor,
}

impl PrototypeEmbeddings {
    pub fn tensor(&self) -> &Tensor {
        &self.z_hat
    }
}

/// Dot-product affinities `bank · tokensᵀ`, shape `K×(N+1)`.
pub fn compute_logits(bank: &PrototypeBank, batch: &TokenBatch) -> Result<Tensor> {
    if bank.d() != batch.d() {
        return Err(Error::mismatch(
            "compute_logits",
            format!("bank D={}", bank.d()),
            format!("token D={}", batch.d()),
        ));
    }
    let tokens = batch.tokens.to_dtype(bank.weights.dtype())?;
    Ok(bank.weights.matmul(&tokens.t()?)?)
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Standard Gumbel(0, 1) noise of shape `rows×cols`.
pub fn sample_gumbel(rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "gumbel noise shape must be non-empty, got {rows}x{cols}"
        )));
    }
    gumbel_tensor(&[rows, cols], DType::F64, rng)
}

/// Gumbel noise of arbitrary shape in the requested dtype.
pub fn gumbel_tensor(shape: &[usize], dtype: DType, rng: &mut impl Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            gumbel_from_uniform(u)
        })
        .collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Softmax over the last axis with per-row max subtraction.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Assignment over the last (prototype) axis. Soft mode is a plain softmax;
/// hard mode is a one-hot at the argmax whose gradient is the softmax's
/// (straight-through).
pub fn assign_last_dim(logits: &Tensor, mode: AssignMode) -> Result<Tensor> {
    let scaled = if TEMPERATURE == 1.0 {
        logits.clone()
    } else {
        (logits / TEMPERATURE)?
    };
    match mode {
        AssignMode::Soft => softmax_last_dim(&scaled),
        AssignMode::Hard => Ok(scaled.contiguous()?.apply_op1(StraightThroughArgmax)?),
    }
}

fn noisy_columns(logits: &Tensor, noise: Option<&Tensor>) -> Result<Tensor> {
    ensure_finite(logits, "logits")?;
    match noise {
        None => Ok(logits.clone()),
        Some(g) => {
            if g.dims() != logits.dims() {
                return Err(Error::mismatch(
                    "assign",
                    format!("logits {:?}", logits.dims()),
                    format!("noise {:?}", g.dims()),
                ));
            }
            Ok((logits + g.to_dtype(logits.dtype())?)?)
        }
    }
}

/// Columnwise (gumbel-)softmax of `K×(N+1)` logits.
pub fn soft_assign(logits: &Tensor, noise: Option<&Tensor>) -> Result<AssignmentMatrix> {
    let x = noisy_columns(logits, noise)?;
    let a = assign_last_dim(&x.t()?, AssignMode::Soft)?.t()?;
    Ok(AssignmentMatrix {
        a,
        mode: AssignMode::Soft,
    })
}

/// Columnwise one-hot at `argmax(logits + noise)`, differentiable through
/// the soft relaxation at the same point.
pub fn hard_assign(logits: &Tensor, noise: Option<&Tensor>) -> Result<AssignmentMatrix> {
    let x = noisy_columns(logits, noise)?;
    let a = assign_last_dim(&x.t()?, AssignMode::Hard)?.t()?;
    Ok(AssignmentMatrix {
        a,
        mode: AssignMode::Hard,
    })
}

/// `aᵀ · bank`: each token becomes its prototype mixture (or exact prototype
/// in hard mode).
pub fn project(a: &AssignmentMatrix, bank: &PrototypeBank) -> Result<PrototypeEmbeddings> {
    let (k, _) = a.a.dims2()?;
    if k != bank.k() {
        return Err(Error::mismatch(
            "project",
            format!("assignment K={k}"),
            format!("bank K={}", bank.k()),
        ));
    }
    let at = a.a.to_dtype(bank.weights.dtype())?.t()?;
    Ok(PrototypeEmbeddings {
        z_hat: at.matmul(&bank.weights)?,
    })
}

/// Logits, assignment and projection for one token batch.
pub fn forward(
    batch: &TokenBatch,
    bank: &PrototypeBank,
    mode: AssignMode,
    noise: Noise,
    rng: &mut impl Rng,
) -> Result<(PrototypeEmbeddings, AssignmentMatrix)> {
    let logits = compute_logits(bank, batch)?;
    let g = match noise {
        Noise::Sampled => {
            let (k, t) = logits.dims2()?;
            Some(gumbel_tensor(&[k, t], logits.dtype(), rng)?)
        }
        Noise::Off => None,
    };
    let a = match mode {
        AssignMode::Soft => soft_assign(&logits, g.as_ref())?,
        AssignMode::Hard => hard_assign(&logits, g.as_ref())?,
    };
    let z_hat = project(&a, bank)?;
    Ok((z_hat, a))
}

pub(crate) fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Argmax over the last axis of a `(rows, K)` tensor, ties to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let k = *logits.dims().last().unwrap_or(&0);
    if k == 0 {
        return Ok(Vec::new());
    }
    let flat = to_f64_vec(logits)?;
    Ok(flat.chunks(k).map(argmax_lowest).collect())
}

/// One-hot forward at the argmax of the last axis; backward is the softmax
/// Jacobian-vector product evaluated at the same input.
struct StraightThroughArgmax;

fn one_hot_rows<T: Copy + PartialOrd>(src: &[T], k: usize, zero: T, one: T) -> Vec<T> {
    let mut out = vec![zero; src.len()];
    for (row, dst) in src.chunks(k).zip(out.chunks_mut(k)) {
        let mut best = 0;
        for i in 1..k {
            if row[i] > row[best] {
                best = i;
            }
        }
        dst[best] = one;
    }
    out
}

impl CustomOp1 for StraightThroughArgmax {
    fn name(&self) -> &'static str {
        "straight-through-argmax"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let k = *layout.shape().dims().last().unwrap_or(&0);
        if k == 0 {
            candle_core::bail!("straight-through-argmax over an empty axis");
        }
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("non-contiguous input".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(one_hot_rows(&v[start..end], k, 0.0, 1.0)),
            CpuStorage::F64(v) => CpuStorage::F64(one_hot_rows(&v[start..end], k, 0.0, 1.0)),
            _ => candle_core::bail!("straight-through-argmax supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let x = arg.detach();
        let max = x.max_keepdim(D::Minus1)?;
        let e = x.broadcast_sub(&max)?.exp()?;
        let s = e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?;
        let dot = (grad_res * &s)?.sum_keepdim(D::Minus1)?;
        let g = (s * grad_res.broadcast_sub(&dot)?)?;
        Ok(Some(g))
    }
}
