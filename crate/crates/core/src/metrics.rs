//! Full-resolution evaluation metrics.
//!
//! PSNR is computed over all voxels; volume MS-SSIM is the mean of the 2D
//! MS-SSIM of each axial slice. Both assume a data range of 1.

use std::fmt;
use std::io::Write;
use std::path::Path;

use candle_core::{Device, Tensor};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::dataset::Subject;
use crate::error::{Error, Result};
use crate::losses::{max_scales, ms_ssim};
use crate::volume_io::Volume3D;

pub const DEFAULT_DATA_RANGE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Psnr {
    Db(f64),
    /// Zero mean squared error.
    Identical,
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Identical => None,
        }
    }

    /// Decibels, with identical volumes mapped to `+inf`.
    pub fn as_f64(self) -> f64 {
        self.db().unwrap_or(f64::INFINITY)
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v}"),
            Psnr::Identical => f.write_str("identical"),
        }
    }
}

fn check_shapes(pred: &Volume3D, target: &Volume3D) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> Psnr {
    if mse == 0.0 {
        Psnr::Identical
    } else {
        Psnr::Db(10.0 * (data_range * data_range / mse).log10())
    }
}

/// `10·log10(range² / MSE)` over all voxels, or over `mask > 0` if given.
pub fn psnr(
    pred: &Volume3D,
    target: &Volume3D,
    data_range: f64,
    mask: Option<&Array3<f32>>,
) -> Result<Psnr> {
    check_shapes(pred, target)?;
    if !(data_range > 0.0) {
        return Err(Error::Config(format!("data range must be positive, got {data_range}")));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for ((idx, &p), &t) in pred.data.indexed_iter().zip(target.data.iter()) {
        if let Some(m) = mask {
            if m[idx] <= 0.0 {
                continue;
            }
        }
        let d = p as f64 - t as f64;
        sum += d * d;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Shape("PSNR mask selects no voxels".into()));
    }
    Ok(psnr_from_mse(sum / count as f64, data_range))
}

fn slices_tensor(v: &Array3<f32>) -> Result<Tensor> {
    let (h, w, z) = v.dim();
    let data: Vec<f64> = v
        .view()
        .permuted_axes([2, 0, 1])
        .iter()
        .map(|&x| x as f64)
        .collect();
    Ok(Tensor::from_vec(data, (z, 1, h, w), &Device::Cpu)?)
}

/// Per-axial-slice 2D MS-SSIM. `scales = None` picks the largest count the
/// in-plane size allows.
pub fn ms_ssim_slices(
    pred: &Volume3D,
    target: &Volume3D,
    scales: Option<usize>,
    mask: Option<&Array3<f32>>,
) -> Result<Vec<f64>> {
    check_shapes(pred, target)?;
    let (h, w, _) = pred.shape();
    let scales = scales.unwrap_or_else(|| max_scales(h.min(w)));
    let (mut p, mut t) = (pred.data.clone(), target.data.clone());
    if let Some(m) = mask {
        p.zip_mut_with(m, |a, &m| *a *= m);
        t.zip_mut_with(m, |a, &m| *a *= m);
    }
    let scores = ms_ssim(&slices_tensor(&p)?, &slices_tensor(&t)?, scales)?;
    Ok(scores.to_vec1::<f64>()?)
}

/// Mean of [`ms_ssim_slices`].
pub fn ms_ssim_metric(
    pred: &Volume3D,
    target: &Volume3D,
    scales: Option<usize>,
    mask: Option<&Array3<f32>>,
) -> Result<f64> {
    let s = ms_ssim_slices(pred, target, scales, mask)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Anything that maps a normalised T1 volume to a predicted mean-BOLD volume
/// on the same grid.
pub trait VolumePredictor {
    fn predict_volume(&self, t1: &Volume3D) -> Result<Volume3D>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub data_range: f64,
    pub scales: Option<usize>,
    /// Restricts both metrics to voxels where the target is nonzero.
    pub mask_to_target: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            data_range: DEFAULT_DATA_RANGE,
            scales: None,
            mask_to_target: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject_id: String,
    pub psnr: Psnr,
    pub ms_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean over subjects with finite PSNR; `Identical` only if every subject is.
    pub psnr: Psnr,
    pub ms_ssim: f64,
    pub per_subject: Vec<SubjectMetrics>,
}

impl EvalResult {
    pub fn from_subjects(per_subject: Vec<SubjectMetrics>) -> Self {
        let finite: Vec<f64> = per_subject.iter().filter_map(|s| s.psnr.db()).collect();
        let psnr = if finite.is_empty() {
            Psnr::Identical
        } else {
            Psnr::Db(finite.iter().sum::<f64>() / finite.len() as f64)
        };
        let ms_ssim = if per_subject.is_empty() {
            f64::NAN
        } else {
            per_subject.iter().map(|s| s.ms_ssim).sum::<f64>() / per_subject.len() as f64
        };
        Self { psnr, ms_ssim, per_subject }
    }

    pub fn summary(&self) -> String {
        format!(
            "{} subjects: PSNR {} dB, MS-SSIM {:.4}",
            self.per_subject.len(),
            self.psnr,
            self.ms_ssim
        )
    }

    /// CSV with header `subject_id,psnr_db,ms_ssim`, one row per subject and
    /// a final `mean` row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["subject_id", "psnr_db", "ms_ssim"])?;
        for s in &self.per_subject {
            w.write_record([s.subject_id.clone(), s.psnr.to_string(), s.ms_ssim.to_string()])?;
        }
        w.write_record(["mean".to_string(), self.psnr.to_string(), self.ms_ssim.to_string()])?;
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

pub fn evaluate_subject(
    model: &dyn VolumePredictor,
    subject: &Subject,
    opts: &EvalOptions,
) -> Result<SubjectMetrics> {
    let inner = || -> Result<SubjectMetrics> {
        let pred = model.predict_volume(&subject.t1)?;
        let mask = opts
            .mask_to_target
            .then(|| subject.target.data.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        Ok(SubjectMetrics {
            subject_id: subject.id.clone(),
            psnr: psnr(&pred, &subject.target, opts.data_range, mask.as_ref())?,
            ms_ssim: ms_ssim_metric(&pred, &subject.target, opts.scales, mask.as_ref())?,
        })
    };
    inner().map_err(|e| e.for_subject(&subject.id))
}

pub fn evaluate_dataset(
    model: &dyn VolumePredictor,
    subjects: &[Subject],
    opts: &EvalOptions,
) -> Result<EvalResult> {
    let per_subject = subjects
        .iter()
        .map(|s| evaluate_subject(model, s, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::from_subjects(per_subject))
}
