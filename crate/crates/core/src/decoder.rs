//! Multi-scale generation decoder.
//!
//! The centre-slice tokens of the fused main branch are laid out on the patch
//! grid, then each stage upsamples bilinearly, optionally concatenates a
//! bilinearly resized skip map, and refines with conv 3×3 → GroupNorm → GELU.
//! A final conv 3×3 produces the single-channel slice.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoder::SkipSet;
use crate::error::{Error, Result};
use crate::nn::{group_count, resize_bilinear, Conv2d, GroupNorm, Init, ParamBuilder};

pub const MAX_NORM_GROUPS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub resolution: usize,
    pub skip_layer: Option<usize>,
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Token dimension `D` of the main branch and skips.
    pub in_dim: usize,
    /// Patch-grid side `g`.
    pub grid: usize,
    pub out_size: usize,
    pub stages: Vec<StageSpec>,
}

impl DecoderConfig {
    /// Doubling stages from `grid` to `out_size`; skips are assigned deepest
    /// first and channels halve from `base_channels`.
    pub fn standard(
        in_dim: usize,
        grid: usize,
        out_size: usize,
        base_channels: usize,
        skip_layers: &[usize],
    ) -> Result<Self> {
        if grid == 0 || out_size % grid != 0 || !(out_size / grid).is_power_of_two() {
            return Err(Error::Config(format!(
                "output size {out_size} is not reachable from grid {grid} by doubling"
            )));
        }
        let n = (out_size / grid).trailing_zeros() as usize;
        let mut skips: Vec<usize> = skip_layers.to_vec();
        skips.sort_unstable_by(|a, b| b.cmp(a));
        if skips.len() > n {
            return Err(Error::Config(format!(
                "{} skip layers but only {n} decoder stages",
                skips.len()
            )));
        }
        let stages = (0..n)
            .map(|i| StageSpec {
                resolution: grid << (i + 1),
                skip_layer: skips.get(i).copied(),
                out_channels: (base_channels >> i).max(1),
            })
            .collect();
        Ok(Self {
            in_dim,
            grid,
            out_size,
            stages,
        })
    }

    pub fn without_skips(mut self) -> Self {
        for s in &mut self.stages {
            s.skip_layer = None;
        }
        self
    }

    pub fn skip_layers(&self) -> Vec<usize> {
        self.stages.iter().filter_map(|s| s.skip_layer).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = self.grid;
        for s in &self.stages {
            if s.resolution <= prev {
                return Err(Error::Config(format!(
                    "stage resolution {} does not increase past {prev}",
                    s.resolution
                )));
            }
            prev = s.resolution;
        }
        if prev != self.out_size {
            return Err(Error::Config(format!(
                "stages end at {prev}, expected {}",
                self.out_size
            )));
        }
        let mut seen = self.skip_layers();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("a skip layer feeds more than one stage".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Stage {
    spec: StageSpec,
    conv: Conv2d,
    norm: GroupNorm,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: DecoderConfig,
    stages: Vec<Stage>,
    head: Conv2d,
}

/// Centre-slice row of a `(K, P, D)` or `(N, K, P, D)` token tensor.
pub fn collapse_window(tokens: &Tensor) -> Result<Tensor> {
    let k_axis = tokens.rank().checked_sub(3).ok_or_else(|| {
        Error::Shape(format!("expected (.., K, P, D), got {:?}", tokens.dims()))
    })?;
    let k = tokens.dim(k_axis)?;
    if k % 2 == 0 {
        return Err(Error::Shape(format!("window length {k} is even")));
    }
    Ok(tokens.narrow(k_axis, k / 2, 1)?.squeeze(k_axis)?)
}

impl Decoder {
    pub fn new(pb: &ParamBuilder, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        let mut channels = cfg.in_dim;
        for (i, spec) in cfg.stages.iter().enumerate() {
            let in_ch = channels + if spec.skip_layer.is_some() { cfg.in_dim } else { 0 };
            let sp = pb.pp(format!("stages.{i}"));
            let conv = Conv2d::new(
                &sp.pp("conv"),
                in_ch,
                spec.out_channels,
                3,
                1,
                1,
                Init::Normal {
                    std: (2.0 / (in_ch * 9) as f64).sqrt(),
                },
                Some(Init::Zeros),
            )?;
            let norm = GroupNorm::new(
                &sp.pp("norm"),
                spec.out_channels,
                group_count(spec.out_channels, MAX_NORM_GROUPS),
                1e-5,
            )?;
            stages.push(Stage {
                spec: spec.clone(),
                conv,
                norm,
            });
            channels = spec.out_channels;
        }
        let head = Conv2d::new(
            &pb.pp("head"),
            channels,
            1,
            3,
            1,
            1,
            Init::Normal {
                std: (1.0 / (channels * 9) as f64).sqrt(),
            },
            Some(Init::Zeros),
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            head,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    fn to_grid(&self, tokens: &Tensor) -> Result<Tensor> {
        let (n, p, d) = tokens.dims3()?;
        let g = self.cfg.grid;
        if p != g * g || d != self.cfg.in_dim {
            return Err(Error::Shape(format!(
                "tokens {:?} do not fit a {g}×{g} grid of dim {}",
                tokens.dims(),
                self.cfg.in_dim
            )));
        }
        Ok(tokens.transpose(1, 2)?.contiguous()?.reshape((n, d, g, g))?)
    }

    /// `main` is `(N, P, D)`; each skip is `(N, P, D)`. Returns `(N, 1, S, S)`.
    pub fn decode(&self, main: &Tensor, skips: &SkipSet) -> Result<Tensor> {
        let mut x = self.to_grid(main)?;
        for stage in &self.stages {
            let r = stage.spec.resolution;
            let up = resize_bilinear(&x, r, r)?;
            let input = match stage.spec.skip_layer {
                Some(l) => {
                    let skip = skips.0.get(&l).ok_or_else(|| {
                        Error::Shape(format!("decoder stage at {r} needs skip layer {l}"))
                    })?;
                    let skip = resize_bilinear(&self.to_grid(skip)?, r, r)?;
                    Tensor::cat(&[&up, &skip], 1)?
                }
                None => up,
            };
            x = stage
                .norm
                .forward(&stage.conv.forward(&input)?)?
                .gelu_erf()?;
        }
        self.head.forward(&x)
    }
}
