//! The full network: backbone → ProtoSim → projection head, over a single
//! named parameter set (`backbone.*`, `protosim.prototypes`, `head.*`).

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{linear, vit_forward, BackboneHandle, Normalization, PatchConfig};
use crate::error::{Error, Result};
use crate::image_ops::{stack_images, ImageTensor};
use crate::params::Params;
use crate::protosim::{argmax_rows, assign_last_dim, softmax_last_dim, AssignMode, PrototypeBank};
use crate::tensor_util::{ensure_finite, to_f32_vec};

pub const BANK: &str = "protosim.prototypes";
pub const BACKBONE_PREFIX: &str = "backbone.";
pub const HEAD_PREFIX: &str = "head.";

/// What feeds the projection head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadInput {
    /// Class-token prototype embedding only.
    Class,
    /// Class-token prototype embedding plus the mean patch-token prototype
    /// embedding, so spatial prototypes also receive gradient.
    ClassPlusMeanPatch,
}

impl std::str::FromStr for HeadInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class" => Ok(HeadInput::Class),
            "class-plus-mean-patch" => Ok(HeadInput::ClassPlusMeanPatch),
            _ => Err(Error::InvalidArgument(format!("unknown head input `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub output_dim: usize,
}

/// Static shape information for a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub patch: PatchConfig,
    pub normalization: Normalization,
    pub num_prototypes: usize,
    pub head: HeadConfig,
    pub head_input: HeadInput,
}

pub struct ForwardOutput {
    /// `B×T×D` backbone tokens.
    pub tokens: Tensor,
    /// `B×T×K` prototype logits (before noise).
    pub logits: Tensor,
    /// `B×T×K` assignment.
    pub assignment: Tensor,
    /// `B×T×D` prototype embeddings.
    pub z_hat: Tensor,
    /// `B×O` head output before temperature.
    pub head: Tensor,
}

fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let v: f64 = dist.sample(rng);
            v.clamp(-2.0 * std, 2.0 * std) as f32
        })
        .collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
}

/// Three-layer GELU MLP, L2 normalization, then a weight-normalized output
/// layer.
pub fn init_head(input_dim: usize, cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> Result<Params> {
    let mut p = Params::new();
    let dims = [input_dim, cfg.hidden_dim, cfg.hidden_dim, cfg.bottleneck_dim];
    for i in 0..3 {
        p.insert(format!("mlp.{i}.weight"), normal(&[dims[i + 1], dims[i]], 0.02, rng)?);
        p.insert(
            format!("mlp.{i}.bias"),
            Tensor::zeros(dims[i + 1], DType::F32, &Device::Cpu)?,
        );
    }
    p.insert(
        "last_layer.weight",
        normal(&[cfg.output_dim, cfg.bottleneck_dim], 1.0, rng)?,
    );
    Ok(p)
}

pub fn head_forward(params: &Params, x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for i in 0..3 {
        h = linear(
            &h,
            params.get(&format!("{HEAD_PREFIX}mlp.{i}.weight"))?,
            Some(params.get(&format!("{HEAD_PREFIX}mlp.{i}.bias"))?),
        )?;
        if i < 2 {
            h = h.gelu_erf()?;
        }
    }
    let h = l2_normalize(&h)?;
    let w = l2_normalize(params.get(&format!("{HEAD_PREFIX}last_layer.weight"))?)?;
    linear(&h, &w, None)
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Builds a fresh parameter set around an existing backbone.
pub fn init_params(
    backbone: &BackboneHandle,
    num_prototypes: usize,
    head: &HeadConfig,
    seed: u64,
) -> Result<Params> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = backbone.config.embed_dim;
    let bank = PrototypeBank::random(num_prototypes, d, &mut rng)?;
    let mut params = Params::new();
    params.extend_prefixed(BACKBONE_PREFIX, &backbone.params);
    params.insert(BANK, bank.weights().clone());
    params.extend_prefixed(HEAD_PREFIX, &init_head(d, head, &mut rng)?);
    Ok(params)
}

/// Forward pass. `noise`, when present, has the logits' `B×T×K` shape.
/// `check` verifies finiteness stage by stage.
pub fn model_forward(
    params: &Params,
    spec: &ModelSpec,
    images: &Tensor,
    mode: AssignMode,
    noise: Option<&Tensor>,
    check: bool,
) -> Result<ForwardOutput> {
    let backbone = params.with_prefix(BACKBONE_PREFIX);
    let tokens = vit_forward(&backbone, &spec.patch, images)?;
    if check {
        ensure_finite(&tokens, "backbone")?;
    }
    let bank = params.get(BANK)?;
    let (b, t, d) = tokens.dims3()?;
    let logits = tokens
        .reshape((b * t, d))?
        .matmul(&bank.t()?)?
        .reshape((b, t, spec.num_prototypes))?;
    if check {
        ensure_finite(&logits, "protosim logits")?;
    }
    let x = match noise {
        Some(g) => (&logits + g)?,
        None => logits.clone(),
    };
    let assignment = assign_last_dim(&x, mode)?;
    let z_hat = assignment
        .reshape((b * t, spec.num_prototypes))?
        .matmul(bank)?
        .reshape((b, t, d))?;
    let class = z_hat.narrow(1, 0, 1)?.squeeze(1)?;
    let head_in = match spec.head_input {
        HeadInput::Class => class,
        HeadInput::ClassPlusMeanPatch => (class + z_hat.narrow(1, 1, t - 1)?.mean(1)?)?,
    };
    let head = head_forward(params, &head_in)?;
    if check {
        ensure_finite(&head, "projection head")?;
    }
    Ok(ForwardOutput {
        tokens,
        logits,
        assignment,
        z_hat,
        head,
    })
}

/// Noise-free hard assignment of every token of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenAssignment {
    /// Prototype per token, class token first.
    pub prototypes: Vec<usize>,
    /// Logit of the assigned prototype per token.
    pub logits: Vec<f32>,
}

/// A trained model for inference: frozen weights, noise-free assignment.
#[derive(Debug, Clone)]
pub struct ProtoModel {
    pub spec: ModelSpec,
    pub params: Params,
}

impl ProtoModel {
    pub fn bank(&self) -> Result<PrototypeBank> {
        PrototypeBank::new(self.params.get(BANK)?.clone())
    }

    pub fn num_prototypes(&self) -> usize {
        self.spec.num_prototypes
    }

    pub fn num_patches(&self) -> usize {
        self.spec.patch.num_patches()
    }

    /// Resizes to the native input size and normalizes.
    pub fn prepare(&self, images: &[ImageTensor]) -> Result<Tensor> {
        let p = &self.spec.patch;
        let n = &self.spec.normalization;
        let prepared: Vec<ImageTensor> = images
            .iter()
            .map(|img| {
                img.resize(p.image_height, p.image_width)
                    .normalized(&n.mean, &n.std)
            })
            .collect();
        stack_images(&prepared)
    }

    /// `B×T×K` noise-free logits.
    pub fn logits(&self, images: &[ImageTensor]) -> Result<Tensor> {
        let x = self.prepare(images)?;
        let backbone = self.params.with_prefix(BACKBONE_PREFIX);
        let tokens = vit_forward(&backbone, &self.spec.patch, &x)?;
        let (b, t, d) = tokens.dims3()?;
        let logits = tokens
            .reshape((b * t, d))?
            .matmul(&self.params.get(BANK)?.t()?)?
            .reshape((b, t, self.spec.num_prototypes))?;
        ensure_finite(&logits, "protosim logits")?;
        Ok(logits)
    }

    pub fn assign(&self, images: &[ImageTensor]) -> Result<Vec<TokenAssignment>> {
        let logits = self.logits(images)?;
        let (b, t, k) = logits.dims3()?;
        let flat = to_f32_vec(&logits)?;
        let winners = argmax_rows(&logits.reshape((b * t, k))?)?;
        Ok((0..b)
            .map(|i| {
                let protos = winners[i * t..(i + 1) * t].to_vec();
                let vals = protos
                    .iter()
                    .enumerate()
                    .map(|(tok, &p)| flat[(i * t + tok) * k + p])
                    .collect();
                TokenAssignment {
                    prototypes: protos,
                    logits: vals,
                }
            })
            .collect())
    }

    /// `T×K` noise-free soft assignment probabilities for one image.
    pub fn soft_probabilities(&self, image: &ImageTensor) -> Result<Vec<Vec<f32>>> {
        let logits = self.logits(std::slice::from_ref(image))?.squeeze(0)?;
        Ok(softmax_last_dim(&logits)?.to_vec2::<f32>()?)
    }

    /// Hard-assigned class-token prototype embedding per image, with the
    /// given prototype rows zeroed at projection time. With `reroute`, zeroed
    /// prototypes are also excluded from the assignment itself.
    pub fn class_embeddings(
        &self,
        images: &[ImageTensor],
        zeroed: &[usize],
        reroute: bool,
    ) -> Result<(Vec<Vec<f32>>, Vec<usize>)> {
        let bank = self.bank()?;
        let rows = bank.with_zeroed_rows(zeroed)?.rows()?;
        let logits = self.logits(images)?;
        let class_logits = logits.narrow(1, 0, 1)?.squeeze(1)?.to_dtype(DType::F64)?;
        let mut cols = class_logits.to_vec2::<f64>()?;
        if reroute {
            for row in cols.iter_mut() {
                for &z in zeroed {
                    row[z] = f64::NEG_INFINITY;
                }
            }
        }
        let ids: Vec<usize> = cols.iter().map(|c| crate::protosim::argmax_lowest(c)).collect();
        Ok((ids.iter().map(|&i| rows[i].clone()).collect(), ids))
    }
}
