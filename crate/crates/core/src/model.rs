//! The full network: frozen encoder, slice fusion, decoder, and the
//! per-slice feature cache used for training and whole-volume inference.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::Subject;
use crate::decoder::{collapse_window, Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig, SkipSet, TokenTensor};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, SkipFusion, SliceFusion};
use crate::losses::LossSet;
use crate::metrics::VolumePredictor;
use crate::nn::{ForwardCtx, ParamBuilder, Params};
use crate::slicing::{assemble_volume, resample_slice, restore_output, SliceWindow, ValidMask, CHANNELS};
use crate::volume_io::Volume3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Tiny,
    VitB16,
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "tiny" => Ok(Backbone::Tiny),
            "vit_b16" | "vitb16" => Ok(Backbone::VitB16),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
    /// Pretrained encoder weights; required for `vit_b16`.
    pub weights: Option<PathBuf>,
    /// Seed of the tiny encoder's random weights.
    pub encoder_seed: u64,
    pub fusion_heads: usize,
    pub fusion_layers: usize,
    pub dropout: f64,
    pub slice_pos_embedding: bool,
    pub decoder_base_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::VitB16,
            weights: None,
            encoder_seed: 0,
            fusion_heads: 4,
            fusion_layers: 2,
            dropout: 0.1,
            slice_pos_embedding: true,
            decoder_base_channels: 512,
        }
    }
}

impl ModelConfig {
    /// Desk-scale model around the seeded tiny encoder.
    pub fn tiny() -> Self {
        Self {
            backbone: Backbone::Tiny,
            decoder_base_channels: 64,
            ..Self::default()
        }
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        match self.backbone {
            Backbone::Tiny => Ok(EncoderConfig::tiny(self.encoder_seed)),
            Backbone::VitB16 => {
                let path = self.weights.clone().ok_or_else(|| {
                    Error::Config("the vit_b16 backbone needs a weights file".into())
                })?;
                Ok(EncoderConfig::vit_b16(path))
            }
        }
    }

    pub fn load_encoder(&self, device: &Device) -> Result<Encoder> {
        let cfg = self.encoder_config()?;
        match self.backbone {
            Backbone::Tiny => Encoder::from_config(&cfg, DType::F32, device),
            Backbone::VitB16 => {
                let path = self.weights.clone().expect("checked by encoder_config");
                Encoder::load_pretrained(&path, &cfg, DType::F32, device)
            }
        }
    }

    /// Encoder taps compared by the perceptual loss: the two shallowest.
    pub fn perceptual_layers(&self, encoder: &EncoderConfig) -> Vec<usize> {
        encoder.tap_layers.iter().copied().take(2).collect()
    }
}

/// Architectural and loss switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub slice_attention: bool,
    pub skip_connections: bool,
    pub loss_set: LossSet,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            slice_attention: true,
            skip_connections: true,
            loss_set: LossSet::Full,
        }
    }
}

impl Ablation {
    pub fn tag(&self) -> String {
        format!(
            "sa={},sc={},loss={:?}",
            if self.slice_attention { "on" } else { "off" },
            if self.skip_connections { "on" } else { "off" },
            self.loss_set
        )
    }
}

/// Which parts of the network a configuration instantiates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Wiring {
    pub fuse: bool,
    /// Skip levels routed to the decoder; empty when skips are off.
    pub skip_layers: Vec<usize>,
}

pub fn apply_ablation(ablation: &Ablation, encoder: &EncoderConfig) -> Wiring {
    Wiring {
        fuse: ablation.slice_attention,
        skip_layers: if ablation.skip_connections {
            encoder.skip_layers()
        } else {
            Vec::new()
        },
    }
}

/// Encoder taps for a stack of slices: each entry is `(rows, P, D)`. The last
/// row holds the features of an all-zero slice and serves as padding.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub taps: BTreeMap<usize, Tensor>,
    /// Row offset of each volume's first slice.
    pub offsets: Vec<usize>,
    pub depths: Vec<usize>,
    pub pad_row: usize,
}

impl FeatureCache {
    /// Row indices of the `k`-window centred on slice `z` of volume `v`.
    pub fn window_rows(&self, v: usize, z: usize, k: usize) -> Vec<u32> {
        let half = (k / 2) as isize;
        let depth = self.depths[v] as isize;
        (0..k as isize)
            .map(|i| {
                let src = z as isize - half + i;
                if src < 0 || src >= depth {
                    self.pad_row as u32
                } else {
                    (self.offsets[v] + src as usize) as u32
                }
            })
            .collect()
    }

    /// Gathers `(N, K, P, D)` windows for `(volume, z)` pairs at every tap.
    pub fn gather(&self, items: &[(usize, usize)], k: usize) -> Result<BTreeMap<usize, Tensor>> {
        let rows: Vec<u32> = items
            .iter()
            .flat_map(|&(v, z)| self.window_rows(v, z, k))
            .collect();
        let device = self.taps.values().next().map(|t| t.device().clone()).unwrap_or(Device::Cpu);
        let idx = Tensor::new(rows.as_slice(), &device)?;
        self.taps
            .iter()
            .map(|(&l, t)| {
                let (_, p, d) = t.dims3()?;
                Ok((l, t.index_select(&idx, 0)?.reshape((items.len(), k, p, d))?))
            })
            .collect()
    }
}

/// `(Z, 3, S, S)` stack of a volume's axial slices resampled to `size`.
pub fn slice_stack(v: &Volume3D, size: usize, device: &Device) -> Result<Tensor> {
    let depth = v.depth();
    let mut data = Vec::with_capacity(depth * CHANNELS * size * size);
    for z in 0..depth {
        let s = resample_slice(v.data.index_axis(Axis(2), z), size);
        for _ in 0..CHANNELS {
            data.extend(s.iter().copied());
        }
    }
    Ok(Tensor::from_vec(data, (depth, CHANNELS, size, size), device)?)
}

/// `(Z, 1, S, S)` model-resolution targets.
pub fn target_stack(v: &Volume3D, size: usize, device: &Device) -> Result<Tensor> {
    let depth = v.depth();
    let mut data = Vec::with_capacity(depth * size * size);
    for z in 0..depth {
        data.extend(resample_slice(v.data.index_axis(Axis(2), z), size).iter().copied());
    }
    Ok(Tensor::from_vec(data, (depth, 1, size, size), device)?)
}

const ENCODE_CHUNK: usize = 16;

pub fn build_feature_cache(encoder: &Encoder, volumes: &[&Volume3D]) -> Result<FeatureCache> {
    let size = encoder.config().image_size;
    let device = encoder.device().clone();
    let mut per_layer: BTreeMap<usize, Vec<Tensor>> = BTreeMap::new();
    let mut offsets = Vec::with_capacity(volumes.len());
    let mut depths = Vec::with_capacity(volumes.len());
    let mut row = 0;
    let mut push = |x: Tensor| -> Result<()> {
        for (l, t) in encoder.encode_images(&x)? {
            per_layer.entry(l).or_default().push(t);
        }
        Ok(())
    };
    for v in volumes {
        offsets.push(row);
        depths.push(v.depth());
        row += v.depth();
        let stack = slice_stack(v, size, &device)?;
        let mut start = 0;
        while start < v.depth() {
            let len = ENCODE_CHUNK.min(v.depth() - start);
            push(stack.narrow(0, start, len)?)?;
            start += len;
        }
    }
    push(Tensor::zeros((1, CHANNELS, size, size), DType::F32, &device)?)?;
    let taps = per_layer
        .into_iter()
        .map(|(l, ts)| Ok((l, Tensor::cat(&ts, 0)?)))
        .collect::<Result<_>>()?;
    Ok(FeatureCache {
        taps,
        offsets,
        depths,
        pad_row: row,
    })
}

/// Encoder plus trainable fusion and decoder.
pub struct BoldNet {
    encoder: Encoder,
    wiring: Wiring,
    window: usize,
    fusion: Option<SliceFusion>,
    skip_fusion: SkipFusion,
    decoder: Decoder,
    params: Params,
}

pub const PREDICT_CHUNK: usize = 16;

impl BoldNet {
    /// Builds the trainable parts from `seed`. The encoder's tensors are plain
    /// constants and never appear among the trainable vars.
    pub fn new(
        encoder: Encoder,
        model: &ModelConfig,
        ablation: &Ablation,
        window: usize,
        seed: u64,
    ) -> Result<Self> {
        if window % 2 == 0 {
            return Err(Error::Config(format!("slice window must be odd, got {window}")));
        }
        let ecfg = encoder.config().clone();
        let wiring = apply_ablation(ablation, &ecfg);
        let pb = ParamBuilder::seeded(seed, encoder.dtype(), encoder.device(), true);
        let fcfg = FusionConfig {
            heads: model.fusion_heads,
            layers: model.fusion_layers,
            dropout: model.dropout,
            use_slice_pos_embedding: model.slice_pos_embedding,
            ..FusionConfig::new(ecfg.dim, window)
        };
        let (fusion, skip_fusion) = if wiring.fuse {
            let fp = pb.pp("fusion");
            (
                Some(SliceFusion::new(&fp.pp("main"), &fcfg)?),
                SkipFusion::new(&fp, &wiring.skip_layers, &fcfg)?,
            )
        } else {
            (None, SkipFusion::default())
        };
        let dcfg = DecoderConfig::standard(
            ecfg.dim,
            ecfg.grid(),
            ecfg.image_size,
            model.decoder_base_channels,
            &wiring.skip_layers,
        )?;
        let decoder = Decoder::new(&pb.pp("decoder"), &dcfg)?;
        let params = pb.finish();
        if let Some(name) = params.vars.keys().find(|k| encoder.parameters().contains_key(*k)) {
            return Err(Error::Config(format!(
                "trainable parameter `{name}` collides with an encoder parameter"
            )));
        }
        Ok(Self {
            encoder,
            wiring,
            window,
            fusion,
            skip_fusion,
            decoder,
            params,
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn wiring(&self) -> &Wiring {
        &self.wiring
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn image_size(&self) -> usize {
        self.encoder.config().image_size
    }

    pub fn trainable(&self) -> &Params {
        &self.params
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn fusion(&self) -> Option<&SliceFusion> {
        self.fusion.as_ref()
    }

    /// Overwrites trainable parameters from a name → tensor map.
    pub fn load_trainable(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.params.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if t.dims() != var.dims() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: var.dims().to_vec(),
                    found: t.dims().to_vec(),
                });
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !self.params.vars.contains_key(*k)) {
            return Err(Error::Checkpoint(format!(
                "checkpoint parameter `{extra}` does not exist in this model"
            )));
        }
        Ok(())
    }

    /// Main-branch fusion; the identity when slice attention is off.
    pub fn fuse(&self, tokens: &TokenTensor, ctx: &ForwardCtx) -> Result<TokenTensor> {
        match &self.fusion {
            Some(f) => f.fuse(tokens, ctx),
            None => Ok(tokens.clone()),
        }
    }

    /// Skip levels selected by the wiring, fused when slice attention is on.
    pub fn route_skips(&self, skips: &SkipSet, ctx: &ForwardCtx) -> Result<SkipSet> {
        let selected = SkipSet(
            self.wiring
                .skip_layers
                .iter()
                .map(|l| {
                    skips
                        .0
                        .get(l)
                        .cloned()
                        .map(|t| (*l, t))
                        .ok_or_else(|| Error::Shape(format!("encoder output lacks skip layer {l}")))
                })
                .collect::<Result<_>>()?,
        );
        if self.wiring.fuse {
            self.skip_fusion.fuse_skips(&selected, ctx)
        } else {
            Ok(selected)
        }
    }

    /// Batched forward over gathered taps `(N, K, P, D)` → `(N, 1, S, S)`.
    pub fn forward_taps(&self, taps: &BTreeMap<usize, Tensor>, ctx: &ForwardCtx) -> Result<Tensor> {
        let final_layer = self.encoder.config().final_layer();
        let main = taps
            .get(&final_layer)
            .ok_or_else(|| Error::Shape(format!("missing final tap {final_layer}")))?;
        let main = match &self.fusion {
            Some(f) => f.forward(main, ctx)?,
            None => main.clone(),
        };
        let mut skips = BTreeMap::new();
        for &l in &self.wiring.skip_layers {
            let t = taps
                .get(&l)
                .ok_or_else(|| Error::Shape(format!("missing skip tap {l}")))?;
            let t = match self.skip_fusion.layer(l) {
                Some(f) if self.wiring.fuse => f.forward(t, ctx)?,
                _ => t.clone(),
            };
            skips.insert(l, collapse_window(&t)?);
        }
        self.decoder.decode(&collapse_window(&main)?, &SkipSet(skips))
    }

    /// Single-window path: encode, fuse, decode the centre slice → `(S, S)`.
    pub fn predict_window(&self, w: &SliceWindow, ctx: &ForwardCtx) -> Result<Array2<f32>> {
        let (main, skips) = self.encoder.encode_window(w)?;
        let fused = self.fuse(&main, ctx)?;
        let skips = self.route_skips(&skips, ctx)?;
        let collapsed = SkipSet(
            skips
                .0
                .iter()
                .map(|(&l, t)| Ok((l, collapse_window(t)?.unsqueeze(0)?)))
                .collect::<Result<_>>()?,
        );
        let out = self
            .decoder
            .decode(&collapse_window(&fused.0)?.unsqueeze(0)?, &collapsed)?;
        tensor_to_slice(&out.squeeze(0)?.squeeze(0)?)
    }

    /// Whole-volume inference at the volume's own in-plane resolution.
    pub fn predict(&self, t1: &Volume3D) -> Result<Volume3D> {
        let cache = build_feature_cache(&self.encoder, &[t1])?;
        self.predict_cached(&cache, 0, t1)
    }

    /// Inference for volume `v` of a prebuilt cache; `reference` supplies the
    /// output grid and metadata.
    pub fn predict_cached(&self, cache: &FeatureCache, v: usize, reference: &Volume3D) -> Result<Volume3D> {
        let (h, w, depth) = reference.shape();
        if cache.depths.get(v) != Some(&depth) {
            return Err(Error::Shape(format!(
                "cache entry {v} does not match a volume of depth {depth}"
            )));
        }
        let ctx = ForwardCtx::eval();
        let mask = ValidMask::all_valid(self.window, self.image_size(), (h, w));
        let mut slices = Vec::with_capacity(depth);
        let mut start = 0;
        while start < depth {
            let len = PREDICT_CHUNK.min(depth - start);
            let items: Vec<(usize, usize)> = (start..start + len).map(|z| (v, z)).collect();
            let out = self.forward_taps(&cache.gather(&items, self.window)?, &ctx)?;
            for i in 0..len {
                let pred = tensor_to_slice(&out.get(i)?.squeeze(0)?)?;
                slices.push(restore_output(pred.view(), &mask));
            }
            start += len;
        }
        assemble_volume(&slices, reference)
    }

    /// Predictions for every subject, with errors tagged by subject.
    pub fn predict_subjects(&self, subjects: &[Subject]) -> Result<Vec<Volume3D>> {
        subjects
            .iter()
            .map(|s| self.predict(&s.t1).map_err(|e| e.for_subject(&s.id)))
            .collect()
    }
}

impl VolumePredictor for BoldNet {
    fn predict_volume(&self, t1: &Volume3D) -> Result<Volume3D> {
        self.predict(t1)
    }
}

fn tensor_to_slice(t: &Tensor) -> Result<Array2<f32>> {
    let (h, w) = t.dims2()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array2::from_shape_vec((h, w), v).expect("length matches shape"))
}
