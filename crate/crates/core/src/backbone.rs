//! Vision-transformer token extractor.
//!
//! Parameter names follow the timm ViT layout (`patch_embed.proj.weight`,
//! `blocks.{i}.attn.qkv.weight`, ...), so standard serialized weights for the
//! named architecture load without renaming.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_ops::{stack_images, ImageTensor};
use crate::params::Params;
use crate::protosim::{softmax_last_dim, TokenBatch};

const LN_EPS: f64 = 1e-6;
const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height % p != 0 || self.image_width % p != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} not divisible by patch size {p}",
                self.image_height, self.image_width
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_height / self.patch_size,
            self.image_width / self.patch_size,
        )
    }

    /// Patch-token count `N`.
    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }
}

/// Per-channel pixel normalization expected by a set of weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn centered() -> Self {
        Self {
            mean: vec![0.5; 3],
            std: vec![0.5; 3],
        }
    }

    pub fn imagenet() -> Self {
        Self {
            mean: IMAGENET_MEAN.to_vec(),
            std: IMAGENET_STD.to_vec(),
        }
    }
}

/// Parsed `name[:path][,seed=INT]` weight descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDescriptor {
    pub name: String,
    pub path: Option<PathBuf>,
    pub seed: u64,
}

impl std::str::FromStr for WeightDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(',');
        let head = parts.next().unwrap_or_default().trim();
        let (name, path) = match head.split_once(':') {
            Some((n, p)) if !p.is_empty() => (n, Some(PathBuf::from(p))),
            Some((n, _)) => (n, None),
            None => (head, None),
        };
        if name.is_empty() {
            return Err(Error::InvalidArgument(format!("empty weight descriptor `{s}`")));
        }
        let mut seed = 0;
        for opt in parts {
            match opt.trim().split_once('=') {
                Some(("seed", v)) => {
                    seed = v.trim().parse().map_err(|_| {
                        Error::InvalidArgument(format!("bad seed `{v}` in descriptor `{s}`"))
                    })?
                }
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown descriptor option `{opt}` in `{s}`"
                    )))
                }
            }
        }
        Ok(Self {
            name: name.to_string(),
            path,
            seed,
        })
    }
}

impl std::fmt::Display for WeightDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name)?;
        if let Some(p) = &self.path {
            write!(f, ":{}", p.display())?;
        }
        write!(f, ",seed={}", self.seed)
    }
}

/// Architecture and pixel convention for a named backbone.
///
/// `toy-vit-s{P}-d{D}[-l{depth}][-h{heads}][-i{size}]` builds a small ViT
/// (defaults: depth 4, 4 heads, 32px input). `deit-s` is DeiT-Small/16 at
/// 224px and requires a weight file.
pub fn architecture(name: &str) -> Result<(PatchConfig, Normalization)> {
    if name == "deit-s" {
        return Ok((
            PatchConfig {
                image_height: 224,
                image_width: 224,
                channels: 3,
                patch_size: 16,
                embed_dim: 384,
                depth: 12,
                heads: 6,
                mlp_ratio: 4,
            },
            Normalization::imagenet(),
        ));
    }
    let rest = name.strip_prefix("toy-vit").ok_or_else(|| {
        Error::InvalidArgument(format!("unknown backbone architecture `{name}`"))
    })?;
    let mut cfg = PatchConfig {
        image_height: 32,
        image_width: 32,
        channels: 3,
        patch_size: 8,
        embed_dim: 64,
        depth: 4,
        heads: 4,
        mlp_ratio: 4,
    };
    for seg in rest.split('-').filter(|s| !s.is_empty()) {
        let (key, val) = seg.split_at(1);
        let v: usize = val
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad segment `{seg}` in `{name}`")))?;
        match key {
            "s" => cfg.patch_size = v,
            "d" => cfg.embed_dim = v,
            "l" => cfg.depth = v,
            "h" => cfg.heads = v,
            "i" => {
                cfg.image_height = v;
                cfg.image_width = v;
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "bad segment `{seg}` in `{name}`"
                )))
            }
        }
    }
    cfg.validate()?;
    Ok((cfg, Normalization::centered()))
}

/// A loaded backbone with its configuration and parameters.
#[derive(Debug, Clone)]
pub struct BackboneHandle {
    pub descriptor: String,
    pub config: PatchConfig,
    pub normalization: Normalization,
    pub params: Params,
    pub frozen: bool,
}

impl BackboneHandle {
    pub fn from_parts(
        descriptor: String,
        config: PatchConfig,
        normalization: Normalization,
        params: Params,
    ) -> Result<Self> {
        config.validate()?;
        check_shapes(&config, &params)?;
        Ok(Self {
            descriptor,
            config,
            normalization,
            params,
            frozen: true,
        })
    }

    /// Tokens for a single image; `(N+1)×D`, class token first.
    pub fn encode(&self, image: &ImageTensor) -> Result<TokenBatch> {
        let batch = self.encode_batch(std::slice::from_ref(image))?;
        TokenBatch::new(batch.squeeze(0)?)
    }

    /// Tokens for a batch of equally sized images; `B×(N+1)×D`.
    pub fn encode_batch(&self, images: &[ImageTensor]) -> Result<Tensor> {
        let x = self.prepare(images)?;
        vit_forward(&self.params, &self.config, &x)
    }

    /// Normalizes and stacks images, checking their shape.
    pub fn prepare(&self, images: &[ImageTensor]) -> Result<Tensor> {
        let cfg = &self.config;
        let mut normed = Vec::with_capacity(images.len());
        for img in images {
            if (img.channels, img.height, img.width)
                != (cfg.channels, cfg.image_height, cfg.image_width)
            {
                return Err(Error::mismatch(
                    "encode",
                    format!(
                        "backbone input {}x{}x{}",
                        cfg.image_height, cfg.image_width, cfg.channels
                    ),
                    format!("image {}x{}x{}", img.height, img.width, img.channels),
                ));
            }
            let n = img.normalized(&self.normalization.mean, &self.normalization.std);
            if n.data.iter().any(|v| !(-10.0..=10.0).contains(v)) {
                tracing::warn!("pixel values outside [-10, 10] after normalization");
            }
            normed.push(n);
        }
        stack_images(&normed)
    }

    pub fn parameter_hash(&self) -> Result<String> {
        self.params.hash_hex()
    }
}

/// Resolves a weight descriptor into a frozen backbone. Toy architectures
/// without a path are initialized deterministically from the seed.
pub fn load_pretrained(descriptor: &str) -> Result<BackboneHandle> {
    let desc: WeightDescriptor = descriptor.parse()?;
    let (config, normalization) = architecture(&desc.name)?;
    let params = match &desc.path {
        Some(path) => load_weight_file(path)?,
        None if desc.name.starts_with("toy-vit") => init_params(&config, desc.seed)?,
        None => {
            return Err(Error::InvalidArgument(format!(
                "backbone `{}` needs a weight file (`{}:PATH`)",
                desc.name, desc.name
            )))
        }
    };
    BackboneHandle::from_parts(desc.to_string(), config, normalization, params)
}

fn load_weight_file(path: &Path) -> Result<Params> {
    if !path.is_file() {
        return Err(Error::format(path, "weight file not found"));
    }
    let tensors = candle_core::safetensors::load(path, &Device::Cpu)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut params = Params::new();
    for (name, t) in tensors {
        let name = name.strip_prefix("backbone.").unwrap_or(&name).to_string();
        params.insert(name, t.to_dtype(DType::F32)?);
    }
    Ok(params)
}

fn expect_shape(params: &Params, name: &str, want: &[usize]) -> Result<()> {
    let got = params.get(name)?.dims();
    if got != want {
        return Err(Error::mismatch(
            "backbone weights",
            format!("{name} declared {want:?}"),
            format!("loaded {got:?}"),
        ));
    }
    Ok(())
}

fn check_shapes(cfg: &PatchConfig, params: &Params) -> Result<()> {
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let hidden = d * cfg.mlp_ratio;
    expect_shape(params, "cls_token", &[1, 1, d])?;
    expect_shape(params, "pos_embed", &[1, cfg.num_tokens(), d])?;
    expect_shape(params, "patch_embed.proj.weight", &[d, cfg.channels, p, p])?;
    expect_shape(params, "patch_embed.proj.bias", &[d])?;
    for i in 0..cfg.depth {
        let b = format!("blocks.{i}.");
        for ln in ["norm1", "norm2"] {
            expect_shape(params, &format!("{b}{ln}.weight"), &[d])?;
            expect_shape(params, &format!("{b}{ln}.bias"), &[d])?;
        }
        expect_shape(params, &format!("{b}attn.qkv.weight"), &[3 * d, d])?;
        expect_shape(params, &format!("{b}attn.qkv.bias"), &[3 * d])?;
        expect_shape(params, &format!("{b}attn.proj.weight"), &[d, d])?;
        expect_shape(params, &format!("{b}attn.proj.bias"), &[d])?;
        expect_shape(params, &format!("{b}mlp.fc1.weight"), &[hidden, d])?;
        expect_shape(params, &format!("{b}mlp.fc1.bias"), &[hidden])?;
        expect_shape(params, &format!("{b}mlp.fc2.weight"), &[d, hidden])?;
        expect_shape(params, &format!("{b}mlp.fc2.bias"), &[d])?;
    }
    expect_shape(params, "norm.weight", &[d])?;
    expect_shape(params, "norm.bias", &[d])?;
    Ok(())
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
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

fn filled(shape: &[usize], v: f32) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Ok(Tensor::from_vec(vec![v; n], shape, &Device::Cpu)?)
}

/// Deterministic ViT initialization (clipped normal, std 0.02; unit/zero
/// layer norms; zero biases).
pub fn init_params(cfg: &PatchConfig, seed: u64) -> Result<Params> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let hidden = d * cfg.mlp_ratio;
    let std = 0.02;
    let mut params = Params::new();
    params.insert("cls_token", normal_tensor(&[1, 1, d], std, &mut rng)?);
    params.insert("pos_embed", normal_tensor(&[1, cfg.num_tokens(), d], std, &mut rng)?);
    let fan_in = (cfg.channels * p * p) as f64;
    params.insert(
        "patch_embed.proj.weight",
        normal_tensor(&[d, cfg.channels, p, p], 1.0 / fan_in.sqrt(), &mut rng)?,
    );
    params.insert("patch_embed.proj.bias", filled(&[d], 0.0)?);
    for i in 0..cfg.depth {
        let b = format!("blocks.{i}.");
        for ln in ["norm1", "norm2"] {
            params.insert(format!("{b}{ln}.weight"), filled(&[d], 1.0)?);
            params.insert(format!("{b}{ln}.bias"), filled(&[d], 0.0)?);
        }
        params.insert(format!("{b}attn.qkv.weight"), normal_tensor(&[3 * d, d], std, &mut rng)?);
        params.insert(format!("{b}attn.qkv.bias"), filled(&[3 * d], 0.0)?);
        params.insert(format!("{b}attn.proj.weight"), normal_tensor(&[d, d], std, &mut rng)?);
        params.insert(format!("{b}attn.proj.bias"), filled(&[d], 0.0)?);
        params.insert(format!("{b}mlp.fc1.weight"), normal_tensor(&[hidden, d], std, &mut rng)?);
        params.insert(format!("{b}mlp.fc1.bias"), filled(&[hidden], 0.0)?);
        params.insert(format!("{b}mlp.fc2.weight"), normal_tensor(&[d, hidden], std, &mut rng)?);
        params.insert(format!("{b}mlp.fc2.bias"), filled(&[d], 0.0)?);
    }
    params.insert("norm.weight", filled(&[d], 1.0)?);
    params.insert("norm.bias", filled(&[d], 0.0)?);
    Ok(params)
}

/// `x·Wᵀ + b` over the last axis of an arbitrary-rank input.
pub(crate) fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (rows, inner) = (dims[..dims.len() - 1].iter().product::<usize>(), dims[dims.len() - 1]);
    let flat = x.reshape((rows, inner))?;
    let mut y = flat.matmul(&w.t()?)?;
    if let Some(b) = b {
        y = y.broadcast_add(b)?;
    }
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = w.dims()[0];
    Ok(y.reshape(out_dims)?)
}

pub(crate) fn layer_norm(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let xn = xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    Ok(xn.broadcast_mul(w)?.broadcast_add(b)?)
}

/// Patch embedding followed by class token and positional embedding;
/// `B×(N+1)×D` before any transformer block.
pub fn embed(params: &Params, cfg: &PatchConfig, images: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    if (c, h, w) != (cfg.channels, cfg.image_height, cfg.image_width) {
        return Err(Error::mismatch(
            "embed",
            format!("{}x{}x{}", cfg.channels, cfg.image_height, cfg.image_width),
            format!("{c}x{h}x{w}"),
        ));
    }
    let p = cfg.patch_size;
    let (gh, gw) = cfg.grid();
    let d = cfg.embed_dim;
    let patches = images
        .reshape(&[b, c, gh, p, gw, p][..])?
        .permute([0, 2, 4, 1, 3, 5])?
        .contiguous()?
        .reshape((b, gh * gw, c * p * p))?;
    let proj_w = params.get("patch_embed.proj.weight")?.reshape((d, c * p * p))?;
    let tokens = linear(&patches, &proj_w, Some(params.get("patch_embed.proj.bias")?))?;
    let cls = params.get("cls_token")?.broadcast_as((b, 1, d))?;
    let x = Tensor::cat(&[&cls, &tokens], 1)?;
    Ok(x.broadcast_add(params.get("pos_embed")?)?)
}

fn attention(params: &Params, prefix: &str, cfg: &PatchConfig, x: &Tensor) -> Result<Tensor> {
    let (b, t, d) = x.dims3()?;
    let heads = cfg.heads;
    let hd = d / heads;
    let qkv = linear(
        x,
        params.get(&format!("{prefix}qkv.weight"))?,
        Some(params.get(&format!("{prefix}qkv.bias"))?),
    )?
    .reshape(&[b, t, 3, heads, hd][..])?
    .permute([2, 0, 3, 1, 4])?;
    let q = qkv.get(0)?.contiguous()?;
    let k = qkv.get(1)?.contiguous()?;
    let v = qkv.get(2)?.contiguous()?;
    let scale = 1.0 / (hd as f64).sqrt();
    let att = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
    let att = softmax_last_dim(&att)?;
    let out = att
        .matmul(&v)?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, t, d))?;
    linear(
        &out,
        params.get(&format!("{prefix}proj.weight"))?,
        Some(params.get(&format!("{prefix}proj.bias"))?),
    )
}

/// Full ViT forward; `images` are already normalized, `B×C×H×W`.
pub fn vit_forward(params: &Params, cfg: &PatchConfig, images: &Tensor) -> Result<Tensor> {
    let mut x = embed(params, cfg, images)?;
    for i in 0..cfg.depth {
        let b = format!("blocks.{i}.");
        let h = layer_norm(
            &x,
            params.get(&format!("{b}norm1.weight"))?,
            params.get(&format!("{b}norm1.bias"))?,
        )?;
        x = (x + attention(params, &format!("{b}attn."), cfg, &h)?)?;
        let h = layer_norm(
            &x,
            params.get(&format!("{b}norm2.weight"))?,
            params.get(&format!("{b}norm2.bias"))?,
        )?;
        let h = linear(
            &h,
            params.get(&format!("{b}mlp.fc1.weight"))?,
            Some(params.get(&format!("{b}mlp.fc1.bias"))?),
        )?
        .gelu_erf()?;
        let h = linear(
            &h,
            params.get(&format!("{b}mlp.fc2.weight"))?,
            Some(params.get(&format!("{b}mlp.fc2.bias"))?),
        )?;
        x = (x + h)?;
    }
    layer_norm(&x, params.get("norm.weight")?, params.get("norm.bias")?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> BackboneHandle {
        load_pretrained("toy-vit-s8-d64,seed=7").unwrap()
    }

    fn noise_image(seed: u64) -> ImageTensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = ImageTensor::zeros(3, 32, 32);
        img.data.iter_mut().for_each(|v| *v = rng.random());
        img
    }

    #[test]
    fn descriptor_parsing() {
        let d: WeightDescriptor = "toy-vit-s8-d64,seed=7".parse().unwrap();
        assert_eq!(d.name, "toy-vit-s8-d64");
        assert_eq!(d.seed, 7);
        assert!(d.path.is_none());
        let d: WeightDescriptor = "deit-s:/w/deit.safetensors".parse().unwrap();
        assert_eq!(d.path.as_deref(), Some(Path::new("/w/deit.safetensors")));
        assert!("toy-vit,seed=x".parse::<WeightDescriptor>().is_err());
        assert!("toy-vit,depth=3".parse::<WeightDescriptor>().is_err());
    }

    #[test]
    fn token_count_law() {
        let (cfg, _) = architecture("deit-s").unwrap();
        assert_eq!(cfg.num_tokens(), 197);
        assert_eq!(cfg.embed_dim, 384);
        assert_eq!(cfg.patch_size, 16);
        let h = toy();
        assert_eq!(h.config.num_tokens(), 17);
        let tokens = h.encode(&noise_image(1)).unwrap();
        assert_eq!(tokens.tokens().dims(), &[17, 64]);
        assert_eq!(tokens.n(), 16);
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = load_pretrained("toy-vit-s8-d64,seed=7").unwrap();
        let b = load_pretrained("toy-vit-s8-d64,seed=7").unwrap();
        let c = load_pretrained("toy-vit-s8-d64,seed=8").unwrap();
        assert_eq!(a.parameter_hash().unwrap(), b.parameter_hash().unwrap());
        assert_ne!(a.parameter_hash().unwrap(), c.parameter_hash().unwrap());
        assert!(a.frozen);
    }

    #[test]
    fn encode_is_deterministic() {
        let h = toy();
        let img = noise_image(3);
        let a = h.encode(&img).unwrap().tokens().to_vec2::<f32>().unwrap();
        let b = h.encode(&img).unwrap().tokens().to_vec2::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let h = toy();
        let img = ImageTensor::zeros(3, 16, 32);
        assert!(matches!(h.encode(&img), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn missing_weights_fail_cleanly() {
        let err = load_pretrained("deit-s:/nonexistent/deit.safetensors").unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(load_pretrained("deit-s").is_err());
        assert!(load_pretrained("resnet50").is_err());
    }

    #[test]
    fn weight_file_round_trip_and_shape_check() {
        let dir = tempfile::tempdir().unwrap();
        let h = toy();
        let path = dir.path().join("w.safetensors");
        let map: std::collections::HashMap<String, Tensor> =
            h.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        candle_core::safetensors::save(&map, &path).unwrap();
        let desc = format!("toy-vit-s8-d64:{}", path.display());
        let loaded = load_pretrained(&desc).unwrap();
        assert_eq!(loaded.parameter_hash().unwrap(), h.parameter_hash().unwrap());

        // Declared D=32 against stored D=64 weights.
        let bad = format!("toy-vit-s8-d32:{}", path.display());
        assert!(matches!(
            load_pretrained(&bad),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn embedding_is_patch_local() {
        let h = toy();
        let img = noise_image(5);
        let mut edited = img.clone();
        // Patch (row 1, col 2) covers y in 8..16, x in 16..24.
        for c in 0..3 {
            for y in 8..16 {
                for x in 16..24 {
                    *edited.at_mut(c, y, x) = 1.0 - img.at(c, y, x);
                }
            }
        }
        let a = embed(&h.params, &h.config, &h.prepare(&[img]).unwrap()).unwrap();
        let b = embed(&h.params, &h.config, &h.prepare(&[edited]).unwrap()).unwrap();
        let a = a.squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        let b = b.squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        let changed: Vec<usize> = (0..a.len()).filter(|&t| a[t] != b[t]).collect();
        // Token 0 is the class token; patch (1, 2) is token 1 + 1*4 + 2.
        assert_eq!(changed, vec![7]);
    }
}
