//! Frozen ViT structural encoder.
//!
//! Each slice of a window is encoded independently. Outputs of the configured
//! tap blocks are kept: the last tap (the final block) is the main token
//! tensor, earlier taps form the skip set. Only patch tokens are returned.
//!
//! Weight files are safetensors with the usual ViT naming:
//!
//! | name | shape |
//! |------|-------|
//! | `patch_embed.proj.weight` / `.bias` | `(D, 3, p, p)` / `(D)` |
//! | `cls_token` | `(1, 1, D)` |
//! | `storage_tokens` or `register_tokens` (optional) | `(1, R, D)` |
//! | `pos_embed` (learned positions) | `(1, 1 + P, D)` |
//! | `rope_embed.periods` (rotary positions, used when `pos_embed` is absent) | `(D / heads / 4)` |
//! | `blocks.{i}.norm1`, `.norm2` `.weight` / `.bias` | `(D)` |
//! | `blocks.{i}.attn.qkv.weight` / `.bias` | `(3D, D)` / `(3D)` |
//! | `blocks.{i}.attn.proj.weight` / `.bias` | `(D, D)` / `(D)` |
//! | `blocks.{i}.ls1.gamma`, `.ls2.gamma` (optional layer scale) | `(D)` |
//! | `blocks.{i}.mlp.fc1.weight` / `.bias` | `(4D, D)` / `(4D)` |
//! | `blocks.{i}.mlp.fc2.weight` / `.bias` | `(D, 4D)` / `(D)` |
//! | `norm.weight` / `.bias` | `(D)` |
//!
//! Block indices in files are 0-based; tap indices are 1-based block outputs.
//! Any other entries (mask tokens, bias masks) are ignored.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    BlockShape, Conv2d, ForwardCtx, Init, LayerNorm, ParamBuilder, Rope, TransformerBlock,
};
use crate::slicing::{SliceWindow, CHANNELS};

/// Per-channel statistics of the pretrained backbone's input pipeline.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Positional {
    Learned,
    Rope { base: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputNorm {
    Identity,
    Imagenet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsSource {
    Pretrained(PathBuf),
    Seeded(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 1-based block outputs to keep; the last one must be `depth`.
    pub tap_layers: Vec<usize>,
    pub storage_tokens: usize,
    pub positional: Positional,
    pub layer_scale: Option<f64>,
    pub ln_eps: f64,
    pub input_norm: InputNorm,
    /// Apply the final norm to every tap, not only the last block.
    pub norm_taps: bool,
    pub weights: WeightsSource,
}

impl EncoderConfig {
    /// Small seeded ViT used wherever pretrained weights are not needed.
    pub fn tiny(seed: u64) -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            depth: 4,
            dim: 32,
            heads: 2,
            mlp_ratio: 4,
            tap_layers: vec![1, 2, 3, 4],
            storage_tokens: 0,
            positional: Positional::Learned,
            layer_scale: None,
            ln_eps: 1e-6,
            input_norm: InputNorm::Identity,
            norm_taps: true,
            weights: WeightsSource::Seeded(seed),
        }
    }

    /// ViT-B/16 layout with rotary positions and four storage tokens.
    pub fn vit_b16(weights: impl Into<PathBuf>) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            depth: 12,
            dim: 768,
            heads: 12,
            mlp_ratio: 4,
            tap_layers: vec![3, 6, 9, 12],
            storage_tokens: 4,
            positional: Positional::Rope { base: 100.0 },
            layer_scale: Some(1e-5),
            ln_eps: 1e-5,
            input_norm: InputNorm::Imagenet,
            norm_taps: true,
            weights: WeightsSource::Pretrained(weights.into()),
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn final_layer(&self) -> usize {
        *self.tap_layers.last().unwrap_or(&self.depth)
    }

    /// Taps other than the final block, in increasing order.
    pub fn skip_layers(&self) -> Vec<usize> {
        let last = self.final_layer();
        self.tap_layers.iter().copied().filter(|&l| l != last).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.tap_layers.is_empty()
            || self.tap_layers.windows(2).any(|w| w[0] >= w[1])
            || self.tap_layers[0] == 0
            || self.final_layer() != self.depth
        {
            return bad(format!(
                "tap layers {:?} must be strictly increasing in [1, {}] and end at {}",
                self.tap_layers, self.depth, self.depth
            ));
        }
        if let Positional::Rope { .. } = self.positional {
            if (self.dim / self.heads) % 4 != 0 {
                return bad("rotary positions need a head dim divisible by 4".into());
            }
        }
        Ok(())
    }
}

/// Encoder output for one window: `(K, P, D)`.
#[derive(Debug, Clone)]
pub struct TokenTensor(pub Tensor);

/// Intermediate taps keyed by 1-based block index, each `(K, P, D)` (or
/// batched `(B, K, P, D)` inside the model).
#[derive(Debug, Clone, Default)]
pub struct SkipSet(pub BTreeMap<usize, Tensor>);

impl SkipSet {
    pub fn layers(&self) -> Vec<usize> {
        self.0.keys().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }
}

pub struct Encoder {
    cfg: EncoderConfig,
    patch_embed: Conv2d,
    cls_token: Tensor,
    storage_tokens: Option<Tensor>,
    pos_embed: Option<Tensor>,
    rope: Option<Rope>,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    params: BTreeMap<String, Tensor>,
    recorded_digest: String,
}

impl std::fmt::Debug for Encoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Encoder")
            .field("cfg", &self.cfg)
            .field("digest", &self.recorded_digest)
            .finish()
    }
}

impl Encoder {
    /// Builds from `cfg.weights`: seeded weights, or the pretrained file.
    pub fn from_config(cfg: &EncoderConfig, dtype: DType, device: &Device) -> Result<Self> {
        match &cfg.weights {
            WeightsSource::Seeded(seed) => {
                cfg.validate()?;
                let pb = ParamBuilder::seeded(*seed, dtype, device, false);
                Self::build(cfg.clone(), &pb)
            }
            WeightsSource::Pretrained(path) => Self::load_pretrained(path, cfg, dtype, device),
        }
    }

    /// Loads a weight file. Positional scheme, storage tokens and layer scale
    /// follow what the file contains.
    pub fn load_pretrained(
        path: impl AsRef<Path>,
        cfg: &EncoderConfig,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut tensors: HashMap<String, Tensor> =
            candle_core::safetensors::load_buffer(&bytes, device)?;
        if !tensors.contains_key("storage_tokens") {
            if let Some(t) = tensors.remove("register_tokens") {
                tensors.insert("storage_tokens".into(), t);
            }
        }
        let mut cfg = cfg.clone();
        cfg.weights = WeightsSource::Pretrained(path.to_path_buf());
        cfg.storage_tokens = match tensors.get("storage_tokens") {
            Some(t) => t.dim(1)?,
            None => 0,
        };
        if tensors.contains_key("pos_embed") {
            cfg.positional = Positional::Learned;
        } else if !matches!(cfg.positional, Positional::Rope { .. }) {
            cfg.positional = Positional::Rope { base: 100.0 };
        }
        if tensors.contains_key("blocks.0.ls1.gamma") {
            cfg.layer_scale.get_or_insert(1e-5);
        } else {
            cfg.layer_scale = None;
        }
        cfg.validate()?;
        let pb = ParamBuilder::from_tensors(tensors, dtype, device);
        Self::build(cfg, &pb)
    }

    fn build(cfg: EncoderConfig, pb: &ParamBuilder) -> Result<Self> {
        let d = cfg.dim;
        let p = cfg.patch_size;
        let patch_std = 1.0 / ((CHANNELS * p * p) as f64).sqrt();
        let patch_embed = Conv2d::new(
            &pb.pp("patch_embed.proj"),
            CHANNELS,
            d,
            p,
            0,
            p,
            Init::Normal { std: patch_std },
            Some(Init::Zeros),
        )?;
        let cls_token = pb.get("cls_token", &[1, 1, d], Init::Normal { std: 0.1 })?;
        let storage_tokens = if cfg.storage_tokens > 0 {
            Some(pb.get(
                "storage_tokens",
                &[1, cfg.storage_tokens, d],
                Init::Normal { std: 0.1 },
            )?)
        } else {
            None
        };
        let grid = cfg.grid();
        let patches = cfg.num_patches();
        let head_dim = d / cfg.heads;
        let (pos_embed, rope) = match &cfg.positional {
            Positional::Learned => (
                Some(pb.get("pos_embed", &[1, 1 + patches, d], Init::Normal { std: 0.1 })?),
                None,
            ),
            Positional::Rope { base } => {
                let periods = match pb.peek("rope_embed.periods") {
                    Some(t) => {
                        if t.dims() != [head_dim / 4] {
                            return Err(Error::ParamShape {
                                name: "rope_embed.periods".into(),
                                expected: vec![head_dim / 4],
                                found: t.dims().to_vec(),
                            });
                        }
                        t.to_dtype(DType::F64)?.to_vec1::<f64>()?
                    }
                    None => rope_periods(*base, head_dim),
                };
                let rope = rope_tables(&periods, grid, head_dim, 1 + cfg.storage_tokens, pb)?;
                (None, Some(rope))
            }
        };
        let shape = BlockShape {
            dim: d,
            heads: cfg.heads,
            mlp_ratio: cfg.mlp_ratio,
            eps: cfg.ln_eps,
            layer_scale: cfg.layer_scale,
            dropout: 0.0,
            init_std: 1.0 / (d as f64).sqrt(),
        };
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(&pb.pp(format!("blocks.{i}")), shape))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&pb.pp("norm"), d, cfg.ln_eps)?;
        let params = pb.finish().tensors;
        let recorded_digest = crate::nn::digest_tensors(&params)?;
        Ok(Self {
            cfg,
            patch_embed,
            cls_token,
            storage_tokens,
            pos_embed,
            rope,
            blocks,
            norm,
            params,
            recorded_digest,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.cls_token.dtype()
    }

    pub fn device(&self) -> &Device {
        self.cls_token.device()
    }

    pub fn parameters(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    /// Digest of the current parameter values.
    pub fn digest(&self) -> Result<String> {
        crate::nn::digest_tensors(&self.params)
    }

    /// Digest taken when the weights were loaded.
    pub fn recorded_digest(&self) -> &str {
        &self.recorded_digest
    }

    pub fn verify_frozen(&self) -> Result<bool> {
        Ok(self.digest()? == self.recorded_digest)
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        safetensors::serialize_to_file(self.params.iter(), None, path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Channel standardisation of `(N, 3, S, S)` images in `[0, 1]`.
    pub fn preprocess(&self, x: &Tensor) -> Result<Tensor> {
        match self.cfg.input_norm {
            InputNorm::Identity => Ok(x.clone()),
            InputNorm::Imagenet => {
                let dev = x.device();
                let mean = Tensor::new(&IMAGENET_MEAN, dev)?
                    .to_dtype(x.dtype())?
                    .reshape((1, 3, 1, 1))?;
                let std = Tensor::new(&IMAGENET_STD, dev)?
                    .to_dtype(x.dtype())?
                    .reshape((1, 3, 1, 1))?;
                Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
            }
        }
    }

    /// Runs already-preprocessed `(N, 3, S, S)` images through the blocks and
    /// returns the patch tokens `(N, P, D)` at each requested 1-based block.
    pub fn forward_taps(&self, x: &Tensor, layers: &[usize]) -> Result<BTreeMap<usize, Tensor>> {
        let (n, c, h, w) = x.dims4()?;
        let s = self.cfg.image_size;
        if c != CHANNELS || h != s || w != s {
            return Err(Error::Shape(format!(
                "encoder expects (N, {CHANNELS}, {s}, {s}), got {:?}",
                x.dims()
            )));
        }
        let deepest = layers.iter().copied().max().unwrap_or(0);
        if deepest > self.cfg.depth || layers.contains(&0) {
            return Err(Error::Config(format!(
                "tap layers {layers:?} outside encoder depth {}",
                self.cfg.depth
            )));
        }
        let d = self.cfg.dim;
        let patches = self.cfg.num_patches();
        let x = x.to_dtype(self.dtype())?;
        let tokens = self
            .patch_embed
            .forward(&x)?
            .flatten_from(2)?
            .transpose(1, 2)?
            .contiguous()?;
        let cls = self.cls_token.broadcast_as((n, 1, d))?;
        let mut x = match &self.pos_embed {
            Some(pos) => Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(pos)?,
            None => Tensor::cat(&[&cls, &tokens], 1)?,
        };
        if let Some(storage) = &self.storage_tokens {
            let storage = storage.broadcast_as((n, self.cfg.storage_tokens, d))?;
            let rest = x.narrow(1, 1, patches)?;
            x = Tensor::cat(&[&x.narrow(1, 0, 1)?, &storage, &rest], 1)?;
        }
        let prefix = 1 + self.cfg.storage_tokens;
        let ctx = ForwardCtx::eval();
        let mut out = BTreeMap::new();
        for (i, block) in self.blocks.iter().enumerate().take(deepest) {
            x = block.forward(&x, self.rope.as_ref(), &ctx)?;
            let layer = i + 1;
            if layers.contains(&layer) {
                let feats = if self.cfg.norm_taps || layer == self.cfg.depth {
                    self.norm.forward(&x)?
                } else {
                    x.clone()
                };
                out.insert(layer, feats.narrow(1, prefix, patches)?);
            }
        }
        Ok(out)
    }

    /// Preprocesses `(N, 3, S, S)` slices and returns every configured tap,
    /// detached from any graph.
    pub fn encode_images(&self, x: &Tensor) -> Result<BTreeMap<usize, Tensor>> {
        let x = self.preprocess(&x.detach())?;
        let taps = self.forward_taps(&x, &self.cfg.tap_layers)?;
        taps.into_iter()
            .map(|(l, t)| Ok((l, t.detach())))
            .collect()
    }

    pub fn encode_window(&self, w: &SliceWindow) -> Result<(TokenTensor, SkipSet)> {
        let (k, c, s, s2) = w.slices.dim();
        let size = self.cfg.image_size;
        if c != CHANNELS || s != size || s2 != size {
            return Err(Error::Shape(format!(
                "window slices are {:?}, encoder expects (K, {CHANNELS}, {size}, {size})",
                w.slices.dim()
            )));
        }
        let data = w.slices.as_standard_layout();
        let x = Tensor::from_slice(
            data.as_slice().expect("standard layout"),
            (k, c, s, s2),
            self.device(),
        )?;
        let mut taps = self.encode_images(&x)?;
        let main = taps
            .remove(&self.cfg.final_layer())
            .expect("final tap is always computed");
        Ok((TokenTensor(main), SkipSet(taps)))
    }
}

/// Input standardisation applied to a window, mirroring [`Encoder::preprocess`].
pub fn preprocess_for_encoder(w: &SliceWindow, norm: InputNorm) -> SliceWindow {
    let mut out = w.clone();
    if norm == InputNorm::Imagenet {
        for (c, (m, s)) in IMAGENET_MEAN.iter().zip(IMAGENET_STD.iter()).enumerate() {
            out.slices
                .slice_mut(ndarray::s![.., c, .., ..])
                .mapv_inplace(|x| ((x as f64 - m) / s) as f32);
        }
    }
    out
}

fn rope_periods(base: f64, head_dim: usize) -> Vec<f64> {
    let quarter = head_dim / 4;
    let half = (head_dim / 2) as f64;
    (0..quarter)
        .map(|i| base.powf(2.0 * i as f64 / half))
        .collect()
}

/// Sin/cos tables `(P, head_dim)` for a `grid × grid` patch layout with
/// coordinates normalised to `[-1, 1]` per axis.
fn rope_tables(
    periods: &[f64],
    grid: usize,
    head_dim: usize,
    prefix: usize,
    pb: &ParamBuilder,
) -> Result<Rope> {
    let coord = |i: usize| 2.0 * ((i as f64 + 0.5) / grid as f64) - 1.0;
    let mut angles = Vec::with_capacity(grid * grid * head_dim);
    for r in 0..grid {
        for c in 0..grid {
            let mut row = Vec::with_capacity(head_dim / 2);
            for axis_coord in [coord(r), coord(c)] {
                for p in periods {
                    row.push(2.0 * std::f64::consts::PI * axis_coord / p);
                }
            }
            angles.extend_from_slice(&row);
            angles.extend_from_slice(&row);
        }
    }
    let dev = pb.device();
    let dtype = pb.dtype();
    let sin: Vec<f64> = angles.iter().map(|a| a.sin()).collect();
    let cos: Vec<f64> = angles.iter().map(|a| a.cos()).collect();
    let shape = (grid * grid, head_dim);
    Ok(Rope {
        sin: Tensor::from_vec(sin, shape, &dev)?.to_dtype(dtype)?,
        cos: Tensor::from_vec(cos, shape, &dev)?.to_dtype(dtype)?,
        prefix,
    })
}
