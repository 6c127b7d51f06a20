//! Parameter construction and the small set of differentiable layers shared by
//! the encoder, the slice-attention fuser and the decoder.
//!
//! Layers hold plain [`Tensor`]s. Trainable parameters are created as [`Var`]s
//! and the layer keeps a handle to the same storage, so optimizer updates made
//! through the var are visible to the layer and gradients are looked up by the
//! var's id.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal { std: f64 },
}

enum Source {
    Seeded { rng: ChaCha8Rng, trainable: bool },
    Loaded(HashMap<String, Tensor>),
}

struct BuilderState {
    source: Source,
    dtype: DType,
    device: Device,
    tensors: BTreeMap<String, Tensor>,
    vars: BTreeMap<String, Var>,
}

/// Hands out named parameters, either freshly initialised from a seeded RNG or
/// taken from a loaded weight map. Names are dot-separated paths.
#[derive(Clone)]
pub struct ParamBuilder {
    state: Rc<RefCell<BuilderState>>,
    prefix: String,
}

/// Every tensor a builder handed out, plus the vars among them.
#[derive(Debug, Clone, Default)]
pub struct Params {
    pub tensors: BTreeMap<String, Tensor>,
    pub vars: BTreeMap<String, Var>,
}

impl Params {
    pub fn digest(&self) -> Result<String> {
        digest_tensors(&self.tensors)
    }

    pub fn merge(&mut self, other: Params) {
        self.tensors.extend(other.tensors);
        self.vars.extend(other.vars);
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.elem_count()).sum()
    }
}

impl ParamBuilder {
    fn with_source(source: Source, dtype: DType, device: &Device) -> Self {
        Self {
            state: Rc::new(RefCell::new(BuilderState {
                source,
                dtype,
                device: device.clone(),
                tensors: BTreeMap::new(),
                vars: BTreeMap::new(),
            })),
            prefix: String::new(),
        }
    }

    /// Seeded initialisation. `trainable` decides whether parameters are vars.
    pub fn seeded(seed: u64, dtype: DType, device: &Device, trainable: bool) -> Self {
        Self::with_source(
            Source::Seeded {
                rng: ChaCha8Rng::seed_from_u64(seed),
                trainable,
            },
            dtype,
            device,
        )
    }

    /// Frozen parameters taken from a name → tensor map.
    pub fn from_tensors(tensors: HashMap<String, Tensor>, dtype: DType, device: &Device) -> Self {
        Self::with_source(Source::Loaded(tensors), dtype, device)
    }

    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        Self {
            state: self.state.clone(),
            prefix: self.path(name.as_ref()),
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn dtype(&self) -> DType {
        self.state.borrow().dtype
    }

    pub fn device(&self) -> Device {
        self.state.borrow().device.clone()
    }

    /// Whether a loaded map has `name`; seeded builders report true.
    pub fn contains(&self, name: &str) -> bool {
        match &self.state.borrow().source {
            Source::Seeded { .. } => true,
            Source::Loaded(map) => map.contains_key(&self.path(name)),
        }
    }

    /// Raw access to a loaded tensor without registering it.
    pub fn peek(&self, name: &str) -> Option<Tensor> {
        match &self.state.borrow().source {
            Source::Seeded { .. } => None,
            Source::Loaded(map) => map.get(&self.path(name)).cloned(),
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.path(name);
        let mut guard = self.state.borrow_mut();
        let st = &mut *guard;
        let (dtype, device) = (st.dtype, st.device.clone());
        let tensor = match &mut st.source {
            Source::Seeded { rng, trainable } => {
                let n: usize = shape.iter().product();
                let values: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Const(c) => vec![c; n],
                    Init::Normal { std } => {
                        let normal = Normal::new(0.0, std)
                            .map_err(|e| Error::Config(format!("{full}: {e}")))?;
                        (0..n).map(|_| normal.sample(rng)).collect()
                    }
                };
                let t = Tensor::from_vec(values, shape, &device)?.to_dtype(dtype)?;
                if *trainable {
                    let var = Var::from_tensor(&t)?;
                    let t = var.as_tensor().clone();
                    st.vars.insert(full.clone(), var);
                    t
                } else {
                    t
                }
            }
            Source::Loaded(map) => {
                let t = map
                    .get(&full)
                    .ok_or_else(|| Error::MissingParam(full.clone()))?;
                if t.dims() != shape {
                    return Err(Error::ParamShape {
                        name: full,
                        expected: shape.to_vec(),
                        found: t.dims().to_vec(),
                    });
                }
                t.to_dtype(dtype)?.to_device(&device)?
            }
        };
        st.tensors.insert(full, tensor.clone());
        Ok(tensor)
    }

    /// Takes everything created so far out of the builder.
    pub fn finish(&self) -> Params {
        let mut st = self.state.borrow_mut();
        Params {
            tensors: std::mem::take(&mut st.tensors),
            vars: std::mem::take(&mut st.vars),
        }
    }
}

/// SHA-256 over names, shapes, dtypes and raw values, in name order.
pub fn digest_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        hasher.update(t.dtype().as_str().as_bytes());
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F64 => {
                for v in flat.to_vec1::<f64>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
            _ => {
                for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Train/eval switch plus the RNG that drives dropout.
pub struct ForwardCtx {
    training: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            training: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            training: true,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }
}

/// Inverted dropout; identity in eval mode or for `p == 0`.
pub fn dropout(x: &Tensor, p: f64, ctx: &ForwardCtx) -> Result<Tensor> {
    if !ctx.training || p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let n = x.elem_count();
    let mut rng = ctx.rng.borrow_mut();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize, bias: bool, std: f64) -> Result<Self> {
        let weight = pb.get("weight", &[out_dim, in_dim], Init::Normal { std })?;
        let bias = if bias {
            Some(pb.get("bias", &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| Error::Shape("linear on scalar".into()))?;
        let rows = x.elem_count() / in_dim.max(1);
        let out_dim = self.weight.dim(0)?;
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            weight: pb.get("weight", &[dim], Init::Ones)?,
            bias: pb.get("bias", &[dim], Init::Zeros)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Largest divisor of `channels` not exceeding `max_groups`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels).max(1))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(pb: &ParamBuilder, channels: usize, groups: usize, eps: f64) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split into {groups} groups"
            )));
        }
        Ok(Self {
            weight: pb.get("weight", &[channels], Init::Ones)?,
            bias: pb.get("bias", &[channels], Init::Zeros)?,
            groups,
            eps,
        })
    }

    /// `x` is `(N, C, H, W)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let grouped = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = grouped.mean_keepdim(D::Minus1)?;
        let centered = grouped.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .reshape((n, c, h, w))?;
        let weight = self.weight.reshape((1, c, 1, 1))?;
        let bias = self.bias.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&weight)?.broadcast_add(&bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub padding: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &ParamBuilder,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        stride: usize,
        weight_init: Init,
        bias_init: Option<Init>,
    ) -> Result<Self> {
        let weight = pb.get(
            "weight",
            &[out_channels, in_channels, kernel, kernel],
            weight_init,
        )?;
        let bias = match bias_init {
            Some(init) => Some(pb.get("bias", &[out_channels], init)?),
            None => None,
        };
        Ok(Self {
            weight,
            bias,
            padding,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.contiguous()?.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }
}

/// Rotary position tables for patch tokens; `prefix` leading tokens are left unrotated.
#[derive(Debug, Clone)]
pub struct Rope {
    pub sin: Tensor,
    pub cos: Tensor,
    pub prefix: usize,
}

impl Rope {
    fn rotate(&self, x: &Tensor) -> Result<Tensor> {
        let tokens = x.dim(2)?;
        let head_dim = x.dim(3)?;
        let patches = tokens - self.prefix;
        let head = x.narrow(2, 0, self.prefix)?;
        let body = x.narrow(2, self.prefix, patches)?;
        let half = head_dim / 2;
        let x1 = body.narrow(3, 0, half)?;
        let x2 = body.narrow(3, half, half)?;
        let rotated = Tensor::cat(&[&x2.neg()?, &x1], 3)?;
        let body = (body.broadcast_mul(&self.cos)? + rotated.broadcast_mul(&self.sin)?)?;
        Ok(Tensor::cat(&[&head, &body], 2)?)
    }
}

#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize, std: f64) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "dimension {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::new(&pb.pp("qkv"), dim, 3 * dim, true, std)?,
            proj: Linear::new(&pb.pp("proj"), dim, dim, true, std)?,
            heads,
        })
    }

    /// `x` is `(M, T, D)`; attention runs over the `T` axis of each of the `M` sequences.
    pub fn forward(&self, x: &Tensor, rope: Option<&Rope>) -> Result<Tensor> {
        let (m, t, d) = x.dims3()?;
        let head_dim = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((m, t, 3, self.heads, head_dim))?
            .permute((2, 0, 3, 1, 4))?;
        let mut q = qkv.get(0)?.contiguous()?;
        let mut k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        if let Some(rope) = rope {
            q = rope.rotate(&q)?;
            k = rope.rotate(&k)?;
        }
        let scale = 1.0 / (head_dim as f64).sqrt();
        let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let weights = softmax_last(&scores)?;
        let out = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((m, t, d))?;
        self.proj.forward(&out)
    }
}

/// Pre-norm transformer block: attention and a GELU feed-forward, each
/// wrapped in a residual with optional layer scale.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub ls1: Option<Tensor>,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub ls2: Option<Tensor>,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockShape {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub eps: f64,
    pub layer_scale: Option<f64>,
    pub dropout: f64,
    pub init_std: f64,
}

impl TransformerBlock {
    pub fn new(pb: &ParamBuilder, shape: BlockShape) -> Result<Self> {
        let hidden = shape.dim * shape.mlp_ratio;
        let ls = |name: &str| -> Result<Option<Tensor>> {
            shape
                .layer_scale
                .map(|init| pb.pp(name).get("gamma", &[shape.dim], Init::Const(init)))
                .transpose()
        };
        Ok(Self {
            norm1: LayerNorm::new(&pb.pp("norm1"), shape.dim, shape.eps)?,
            attn: SelfAttention::new(&pb.pp("attn"), shape.dim, shape.heads, shape.init_std)?,
            ls1: ls("ls1")?,
            norm2: LayerNorm::new(&pb.pp("norm2"), shape.dim, shape.eps)?,
            fc1: Linear::new(&pb.pp("mlp.fc1"), shape.dim, hidden, true, shape.init_std)?,
            fc2: Linear::new(&pb.pp("mlp.fc2"), hidden, shape.dim, true, shape.init_std)?,
            ls2: ls("ls2")?,
            dropout: shape.dropout,
        })
    }

    pub fn forward(&self, x: &Tensor, rope: Option<&Rope>, ctx: &ForwardCtx) -> Result<Tensor> {
        let mut h = self.attn.forward(&self.norm1.forward(x)?, rope)?;
        if let Some(g) = &self.ls1 {
            h = h.broadcast_mul(g)?;
        }
        let x = (x + dropout(&h, self.dropout, ctx)?)?;
        let mut h = self
            .fc2
            .forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?)?;
        if let Some(g) = &self.ls2 {
            h = h.broadcast_mul(g)?;
        }
        Ok((&x + dropout(&h, self.dropout, ctx)?)?)
    }
}

/// Differentiable bilinear resize of `(N, C, h, w)` to `(N, C, out_h, out_w)`,
/// with the same sampling convention as [`crate::slicing::resize_bilinear`].
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ry = Tensor::from_vec(crate::slicing::interpolation_matrix(h, out_h), (out_h, h), dev)?
        .to_dtype(x.dtype())?;
    let rx_t = Tensor::from_vec(crate::slicing::interpolation_matrix(w, out_w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    let cols = x.contiguous()?.broadcast_matmul(&rx_t)?;
    Ok(ry.broadcast_matmul(&cols)?)
}
