//! Configuration, subject split, the optimisation loop and checkpoints.
//!
//! An epoch visits every `(subject, z)` pair of the training split once in a
//! seeded random order, in batches of `batch_size` windows. The learning rate
//! follows the cosine schedule per epoch. Encoder features are computed once
//! per slice up front since the encoder is frozen.
//!
//! Checkpoints are safetensors files holding `param.*`, `adam.m.*` and
//! `adam.v.*` tensors, with run state in the metadata. The config digest
//! ignores `max_epochs` and `max_steps` so a run can be extended on resume.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Subject;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::losses::{max_scales, total_loss, LossReport, LossWeights, PerceptualTerm};
use crate::metrics::{ms_ssim_metric, psnr, EvalOptions, Psnr};
use crate::model::{build_feature_cache, target_stack, Ablation, BoldNet, FeatureCache, ModelConfig};
use crate::nn::ForwardCtx;
use crate::optim::{cosine_lr, AdamState, AdamW, AdamWConfig};
use crate::volume_io::DEFAULT_DISCARD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub min_lr: f64,
    pub max_epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub train_fraction: f64,
    pub slice_window: usize,
    pub seed: u64,
    /// Leading BOLD frames dropped before averaging.
    pub discard: usize,
    /// Stops after this many optimizer steps in total.
    pub max_steps: Option<usize>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-4,
            min_lr: 1e-6,
            max_epochs: 100,
            batch_size: 32,
            train_fraction: 0.8,
            slice_window: 5,
            seed: 0,
            discard: DEFAULT_DISCARD,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub training: TrainingSection,
    pub loss: LossWeights,
    pub ablation: Ablation,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// Default hyperparameters around the tiny seeded encoder.
    pub fn tiny() -> Self {
        Self {
            model: ModelConfig::tiny(),
            ..Self::default()
        }
    }

    /// Named starting points: `default` (ViT-B/16) and `tiny`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" | "vit_b16" => Ok(Self::default()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Applies `section.key=value`; the value is read as TOML, falling back to
    /// a plain string.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
        let (section, field) = key
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override key `{key}` is not section.key")))?;
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let table = root
            .get_mut(section)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| Error::Config(format!("unknown config section `{section}`")))?;
        table.insert(field.to_string(), value);
        let next: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{spec}`: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        let bad = |m: String| Err(Error::Config(m));
        if !(t.train_fraction > 0.0 && t.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0, 1)", t.train_fraction));
        }
        if t.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if t.slice_window % 2 == 0 {
            return bad(format!("slice_window must be odd, got {}", t.slice_window));
        }
        if t.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(t.lr > 0.0) || t.min_lr < 0.0 || t.min_lr > t.lr || t.weight_decay < 0.0 {
            return bad(format!(
                "invalid learning rates lr={} min_lr={} weight_decay={}",
                t.lr, t.min_lr, t.weight_decay
            ));
        }
        self.effective_loss_weights().validate()
    }

    /// Loss weights after the ablation's loss subset is applied.
    pub fn effective_loss_weights(&self) -> LossWeights {
        self.ablation.loss_set.apply(self.loss)
    }

    /// SHA-256 of the config with the run-length fields cleared.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.training.max_epochs = 0;
        c.training.max_steps = None;
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }
}

/// Seeded subject-level split; the training side gets `floor(n·fraction)`
/// subjects, clamped so both sides are non-empty.
pub fn split_subjects<T: Clone>(subjects: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let n = subjects.len();
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 subjects to split, got {n}")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n_train = ((n as f64 * fraction + 1e-9).floor() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |ids: &[usize]| -> Vec<T> {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.into_iter().map(|i| subjects[i].clone()).collect()
    };
    Ok((pick(&idx[..n_train]), pick(&idx[n_train..])))
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The `(subject, z)` visiting order of one epoch.
pub fn epoch_order(depths: &[usize], seed: u64, epoch: usize) -> Vec<(usize, usize)> {
    let mut items: Vec<(usize, usize)> = depths
        .iter()
        .enumerate()
        .flat_map(|(v, &d)| (0..d).map(move |z| (v, z)))
        .collect();
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64)));
    items
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub global_step: usize,
    pub ablation: String,
    pub train_losses: LossReport,
    pub val_losses: Option<LossReport>,
    pub val_psnr: Option<f64>,
    pub val_msssim: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Tensor>,
    pub adam: AdamState,
    /// Epoch in progress; equals the completed count at an epoch boundary.
    pub epoch: usize,
    /// Batches of `epoch` already taken.
    pub step_in_epoch: usize,
    pub global_step: usize,
    pub config: TrainConfig,
    pub config_digest: String,
    pub best_val: Option<f64>,
    pub encoder_digest: String,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (k, t) in &self.params {
            tensors.push((format!("param.{k}"), t.to_dtype(DType::F32)?.contiguous()?));
        }
        for (k, t) in &self.adam.m {
            tensors.push((format!("adam.m.{k}"), t.to_dtype(DType::F32)?.contiguous()?));
        }
        for (k, t) in &self.adam.v {
            tensors.push((format!("adam.v.{k}"), t.to_dtype(DType::F32)?.contiguous()?));
        }
        let mut meta = HashMap::new();
        meta.insert("epoch".to_string(), self.epoch.to_string());
        meta.insert("step_in_epoch".to_string(), self.step_in_epoch.to_string());
        meta.insert("global_step".to_string(), self.global_step.to_string());
        meta.insert("adam_t".to_string(), self.adam.t.to_string());
        meta.insert("config".to_string(), self.config.to_toml());
        meta.insert("config_digest".to_string(), self.config_digest.clone());
        meta.insert("encoder_digest".to_string(), self.encoder_digest.clone());
        if let Some(b) = self.best_val {
            meta.insert("best_val".to_string(), format!("{b:e}"));
        }
        let tmp = path.with_extension("tmp");
        safetensors::serialize_to_file(tensors.iter().map(|(k, t)| (k.as_str(), t)), Some(meta), &tmp)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let (_, header) =
            safetensors::SafeTensors::read_metadata(&buf).map_err(|e| bad(e.to_string()))?;
        let meta = header.metadata().clone().unwrap_or_default();
        let get = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("missing `{k}`")));
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| bad(format!("bad `{k}`")))
        };
        let tensors = candle_core::safetensors::load_buffer(&buf, &Device::Cpu)?;
        let (mut params, mut m, mut v) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
        for (k, t) in tensors {
            if let Some(n) = k.strip_prefix("param.") {
                params.insert(n.to_string(), t);
            } else if let Some(n) = k.strip_prefix("adam.m.") {
                m.insert(n.to_string(), t);
            } else if let Some(n) = k.strip_prefix("adam.v.") {
                v.insert(n.to_string(), t);
            } else {
                return Err(bad(format!("unexpected tensor `{k}`")));
            }
        }
        let config: TrainConfig =
            toml::from_str(&get("config")?).map_err(|e| bad(format!("config: {e}")))?;
        let best_val = match meta.get("best_val") {
            Some(s) => Some(s.parse::<f64>().map_err(|_| bad("bad `best_val`".into()))?),
            None => None,
        };
        Ok(Self {
            params,
            adam: AdamState { m, v, t: num("adam_t")? },
            epoch: num("epoch")? as usize,
            step_in_epoch: num("step_in_epoch")? as usize,
            global_step: num("global_step")? as usize,
            config,
            config_digest: get("config_digest")?,
            best_val,
            encoder_digest: get("encoder_digest")?,
        })
    }

    /// Rebuilds the network described by this checkpoint around `encoder`.
    pub fn restore_model(&self, encoder: Encoder) -> Result<BoldNet> {
        if encoder.digest()? != self.encoder_digest {
            return Err(Error::Checkpoint(
                "encoder weights differ from those used for training".into(),
            ));
        }
        let c = &self.config;
        let model = BoldNet::new(
            encoder,
            &c.model,
            &c.ablation,
            c.training.slice_window,
            c.training.seed,
        )?;
        model.load_trainable(&self.params.clone().into_iter().collect())?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where `last.safetensors`, `best.safetensors` and `history.jsonl` go.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
}

pub struct TrainOutcome {
    pub model: BoldNet,
    pub history: Vec<EpochRecord>,
    /// Every optimizer step's loss report, in order.
    pub step_losses: Vec<LossReport>,
    pub checkpoint: Checkpoint,
}

struct Prepared {
    cache: FeatureCache,
    targets: Tensor,
}

fn prepare(encoder: &Encoder, subjects: &[Subject]) -> Result<Option<Prepared>> {
    if subjects.is_empty() {
        return Ok(None);
    }
    let vols: Vec<_> = subjects.iter().map(|s| &s.t1).collect();
    let cache = build_feature_cache(encoder, &vols)?;
    let size = encoder.config().image_size;
    let targets = subjects
        .iter()
        .map(|s| target_stack(&s.target, size, encoder.device()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(Prepared {
        cache,
        targets: Tensor::cat(&targets, 0)?,
    }))
}

struct Batch {
    taps: BTreeMap<usize, Tensor>,
    target: Tensor,
}

fn make_batch(p: &Prepared, items: &[(usize, usize)], k: usize) -> Result<Batch> {
    let rows: Vec<u32> = items
        .iter()
        .map(|&(v, z)| (p.cache.offsets[v] + z) as u32)
        .collect();
    let idx = Tensor::new(rows.as_slice(), p.targets.device())?;
    Ok(Batch {
        taps: p.cache.gather(items, k)?,
        target: p.targets.index_select(&idx, 0)?,
    })
}

struct StepCtx<'a> {
    weights: LossWeights,
    scales: usize,
    perc_layers: Vec<usize>,
    model: &'a BoldNet,
}

impl StepCtx<'_> {
    fn loss(&self, b: &Batch, ctx: &ForwardCtx) -> Result<(Tensor, LossReport)> {
        let pred = self.model.forward_taps(&b.taps, ctx)?;
        let mask = Tensor::ones(pred.dims(), pred.dtype(), pred.device())?;
        let perc = PerceptualTerm {
            encoder: self.model.encoder(),
            layers: &self.perc_layers,
        };
        total_loss(&pred, &b.target, &mask, &self.weights, self.scales, Some(perc))
    }
}

fn validate_epoch(
    step: &StepCtx<'_>,
    prepared: &Prepared,
    subjects: &[Subject],
    k: usize,
    batch_size: usize,
) -> Result<(LossReport, f64, f64)> {
    let ctx = ForwardCtx::eval();
    let items = epoch_order(&prepared.cache.depths, 0, 0);
    let mut sum = LossReport::default();
    for chunk in items.chunks(batch_size) {
        let (_, r) = step.loss(&make_batch(prepared, chunk, k)?, &ctx)?;
        sum = sum.add(&r.scaled(chunk.len() as f64));
    }
    let losses = sum.scaled(1.0 / items.len() as f64);
    let opts = EvalOptions::default();
    let (mut psnr_sum, mut psnr_n, mut ssim_sum) = (0.0, 0usize, 0.0);
    for (v, s) in subjects.iter().enumerate() {
        let pred = step.model.predict_cached(&prepared.cache, v, &s.t1)?;
        if let Psnr::Db(db) = psnr(&pred, &s.target, opts.data_range, None)? {
            psnr_sum += db;
            psnr_n += 1;
        }
        ssim_sum += ms_ssim_metric(&pred, &s.target, opts.scales, None)?;
    }
    let mean_psnr = if psnr_n == 0 { f64::INFINITY } else { psnr_sum / psnr_n as f64 };
    Ok((losses, mean_psnr, ssim_sum / subjects.len() as f64))
}

fn append_history(dir: &Path, rec: &EpochRecord) -> Result<()> {
    let path = dir.join("history.jsonl");
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(&path, e))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Splits `subjects` with the configured fraction and seed, then trains.
pub fn train(cfg: &TrainConfig, subjects: &[Subject], encoder: Encoder, opts: RunOptions) -> Result<TrainOutcome> {
    let (tr, val) = split_subjects(subjects, cfg.training.train_fraction, cfg.training.seed)?;
    train_on(cfg, &tr, &val, encoder, opts)
}

/// Trains on `train_set`, validating on `val_set` (which may be empty) after
/// every epoch.
pub fn train_on(
    cfg: &TrainConfig,
    train_set: &[Subject],
    val_set: &[Subject],
    encoder: Encoder,
    opts: RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let t = &cfg.training;
    let k = t.slice_window;
    let encoder_digest = encoder.digest()?;
    let config_digest = cfg.digest();
    let model = BoldNet::new(encoder, &cfg.model, &cfg.ablation, k, t.seed)?;
    let mut opt = AdamW::new(
        model.trainable().vars.clone(),
        AdamWConfig {
            lr: t.lr,
            weight_decay: t.weight_decay,
            ..AdamWConfig::default()
        },
    )?;

    let (mut epoch, mut skip_batches, mut global_step, mut best_val) = (0, 0, 0, None);
    if let Some(ck) = &opts.resume {
        if ck.config_digest != config_digest {
            return Err(Error::DigestMismatch {
                checkpoint: ck.config_digest.clone(),
                config: config_digest,
            });
        }
        if ck.encoder_digest != encoder_digest {
            return Err(Error::Checkpoint(
                "encoder weights differ from those used for training".into(),
            ));
        }
        model.load_trainable(&ck.params.clone().into_iter().collect())?;
        opt.load_state(ck.adam.clone())?;
        epoch = ck.epoch;
        skip_batches = ck.step_in_epoch;
        global_step = ck.global_step;
        best_val = ck.best_val;
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let size = model.image_size();
    let step = StepCtx {
        weights: cfg.effective_loss_weights(),
        scales: max_scales(size),
        perc_layers: cfg.model.perceptual_layers(model.encoder().config()),
        model: &model,
    };
    let train_data = prepare(model.encoder(), train_set)?.expect("non-empty");
    let val_data = prepare(model.encoder(), val_set)?;

    let snapshot = |epoch: usize, step_in_epoch: usize, global_step: usize, best_val: Option<f64>, opt: &AdamW| {
        Checkpoint {
            params: model
                .trainable()
                .vars
                .iter()
                .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
                .collect(),
            adam: opt.state().clone(),
            epoch,
            step_in_epoch,
            global_step,
            config: cfg.clone(),
            config_digest: config_digest.clone(),
            best_val,
            encoder_digest: encoder_digest.clone(),
        }
    };

    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut stopped = t.max_steps.is_some_and(|m| global_step >= m);
    let mut partial = skip_batches;
    while epoch < t.max_epochs && !stopped {
        let lr = cosine_lr(epoch, t.max_epochs, t.lr, t.min_lr)?;
        opt.set_lr(lr);
        let order = epoch_order(&train_data.cache.depths, t.seed, epoch);
        let batches: Vec<&[(usize, usize)]> = order.chunks(t.batch_size).skip(skip_batches).collect();
        let mut taken = skip_batches;
        skip_batches = 0;
        partial = 0;
        let mut sum = LossReport::default();
        let mut seen = 0usize;

        let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(2);
        let run = std::thread::scope(|scope| -> Result<()> {
            let data = &train_data;
            let producer_batches = batches.clone();
            scope.spawn(move || {
                for items in producer_batches {
                    if tx.send(make_batch(data, items, k)).is_err() {
                        break;
                    }
                }
            });
            for items in &batches {
                if t.max_steps.is_some_and(|m| global_step >= m) {
                    stopped = true;
                    break;
                }
                let batch = rx.recv().expect("producer sends one batch per item")?;
                let ctx = ForwardCtx::train(mix(t.seed, global_step as u64));
                let (loss, report) = step.loss(&batch, &ctx)?;
                if !report.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step: global_step,
                        detail: format!("{report:?}"),
                    });
                }
                opt.step(&loss.backward()?)?;
                global_step += 1;
                taken += 1;
                seen += items.len();
                sum = sum.add(&report.scaled(items.len() as f64));
                step_losses.push(report);
                log::debug!("epoch {epoch} step {global_step}: loss {:.6}", report.total);
            }
            drop(rx);
            Ok(())
        });
        run?;

        if stopped && taken < order.chunks(t.batch_size).len() {
            partial = taken;
            if let Some(dir) = &opts.out_dir {
                snapshot(epoch, taken, global_step, best_val, &opt).save(dir.join("last.safetensors"))?;
            }
            break;
        }

        let train_losses = if seen == 0 { sum } else { sum.scaled(1.0 / seen as f64) };
        let (val_losses, val_psnr, val_msssim) = match &val_data {
            Some(p) => {
                let (l, ps, ss) = validate_epoch(&step, p, val_set, k, t.batch_size)?;
                (Some(l), Some(ps), Some(ss))
            }
            None => (None, None, None),
        };
        let improved = match (val_msssim, best_val) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            best_val = val_msssim;
        }
        let rec = EpochRecord {
            epoch,
            lr,
            global_step,
            ablation: cfg.ablation.tag(),
            train_losses,
            val_losses,
            val_psnr,
            val_msssim,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} train {:.5} val_msssim {:?}",
            rec.train_losses.total,
            rec.val_msssim
        );
        epoch += 1;
        if let Some(dir) = &opts.out_dir {
            append_history(dir, &rec)?;
            let ck = snapshot(epoch, 0, global_step, best_val, &opt);
            ck.save(dir.join("last.safetensors"))?;
            if improved {
                ck.save(dir.join("best.safetensors"))?;
            }
        }
        history.push(rec);
    }

    let checkpoint = snapshot(epoch, partial, global_step, best_val, &opt);
    Ok(TrainOutcome {
        model,
        history,
        step_losses,
        checkpoint,
    })
}
