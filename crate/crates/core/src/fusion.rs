//! Slice-wise attention fusion.
//!
//! At every patch location the `K` token vectors of a window attend to each
//! other; patch locations never interact. Each skip level has its own stack.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoder::{SkipSet, TokenTensor};
use crate::error::{Error, Result};
use crate::nn::{BlockShape, ForwardCtx, Init, ParamBuilder, TransformerBlock};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub use_slice_pos_embedding: bool,
    /// Window length `K`; sizes the slice-position embedding.
    pub slices: usize,
    pub mlp_ratio: usize,
}

impl FusionConfig {
    pub fn new(dim: usize, slices: usize) -> Self {
        Self {
            dim,
            heads: 4,
            layers: 2,
            dropout: 0.1,
            use_slice_pos_embedding: true,
            slices,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "fusion dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SliceFusion {
    cfg: FusionConfig,
    pos_embed: Option<Tensor>,
    blocks: Vec<TransformerBlock>,
}

impl SliceFusion {
    pub fn new(pb: &ParamBuilder, cfg: &FusionConfig) -> Result<Self> {
        cfg.validate()?;
        let pos_embed = if cfg.use_slice_pos_embedding {
            Some(pb.get(
                "slice_pos_embed",
                &[cfg.slices, cfg.dim],
                Init::Normal { std: 0.02 },
            )?)
        } else {
            None
        };
        let shape = BlockShape {
            dim: cfg.dim,
            heads: cfg.heads,
            mlp_ratio: cfg.mlp_ratio,
            eps: 1e-5,
            layer_scale: None,
            dropout: cfg.dropout,
            init_std: 0.02,
        };
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(&pb.pp(format!("blocks.{i}")), shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            pos_embed,
            blocks,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    /// `x` is `(N, K, P, D)`; returns the same shape.
    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let (n, k, p, d) = x.dims4()?;
        if d != self.cfg.dim {
            return Err(Error::Shape(format!(
                "fusion expects token dim {}, got {d}",
                self.cfg.dim
            )));
        }
        let mut seq = x
            .permute((0, 2, 1, 3))?
            .contiguous()?
            .reshape((n * p, k, d))?;
        if let Some(pos) = &self.pos_embed {
            if k != self.cfg.slices {
                return Err(Error::Shape(format!(
                    "slice-position embedding sized for K={}, got K={k}",
                    self.cfg.slices
                )));
            }
            seq = seq.broadcast_add(pos)?;
        }
        for block in &self.blocks {
            seq = block.forward(&seq, None, ctx)?;
        }
        Ok(seq
            .reshape((n, p, k, d))?
            .permute((0, 2, 1, 3))?
            .contiguous()?)
    }

    /// Single-window form over a `(K, P, D)` token tensor.
    pub fn fuse(&self, tokens: &TokenTensor, ctx: &ForwardCtx) -> Result<TokenTensor> {
        let x = tokens.0.unsqueeze(0)?;
        Ok(TokenTensor(self.forward(&x, ctx)?.squeeze(0)?))
    }
}

/// One independently parameterised fusion stack per skip level.
#[derive(Debug, Clone, Default)]
pub struct SkipFusion {
    by_layer: BTreeMap<usize, SliceFusion>,
}

impl SkipFusion {
    pub fn new(pb: &ParamBuilder, layers: &[usize], cfg: &FusionConfig) -> Result<Self> {
        let by_layer = layers
            .iter()
            .map(|&l| Ok((l, SliceFusion::new(&pb.pp(format!("skip{l}")), cfg)?)))
            .collect::<Result<_>>()?;
        Ok(Self { by_layer })
    }

    pub fn layer(&self, l: usize) -> Option<&SliceFusion> {
        self.by_layer.get(&l)
    }

    /// Fuses every tensor in `skips` with the stack of its level.
    pub fn fuse_skips(&self, skips: &SkipSet, ctx: &ForwardCtx) -> Result<SkipSet> {
        let mut out = BTreeMap::new();
        for (&l, t) in &skips.0 {
            let stack = self
                .by_layer
                .get(&l)
                .ok_or_else(|| Error::Shape(format!("no fusion stack for skip layer {l}")))?;
            let fused = match t.rank() {
                3 => stack.fuse(&TokenTensor(t.clone()), ctx)?.0,
                _ => stack.forward(t, ctx)?,
            };
            out.insert(l, fused);
        }
        Ok(SkipSet(out))
    }
}
