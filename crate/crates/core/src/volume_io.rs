//! Volume containers and their on-disk formats.
//!
//! Two formats are supported, selected by file extension:
//!
//! * NIfTI-1 (`.nii`, `.nii.gz`), float32 payload, voxel sizes in `pixdim[1..4]`
//!   and the repetition time in `pixdim[4]`.
//! * A raw container (`.rvol`): the bytes `RVOL`, a little-endian `u32` version
//!   (1), a `u32` rank (3 or 4), one `u32` per axis, three `f32` voxel sizes,
//!   one `f32` repetition time, then the float32 payload in row-major order
//!   (last axis fastest).
//!
//! Axis order is `(H, W, Z[, T])` everywhere; for NIfTI this is `(i, j, k[, t])`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayD, Axis, Dimension, Ix3, Ix4};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};

/// Number of leading frames dropped before averaging a BOLD series.
pub const DEFAULT_DISCARD: usize = 10;

const RAW_MAGIC: &[u8; 4] = b"RVOL";
const RAW_VERSION: u32 = 1;

/// A spatial intensity grid of shape `(H, W, Z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub data: Array3<f32>,
    /// Voxel size in millimetres along `(H, W, Z)`.
    pub voxel_size: [f32; 3],
}

/// A time series of spatial grids, shape `(H, W, Z, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    pub data: Array4<f32>,
    pub voxel_size: [f32; 3],
    /// Repetition time. Carried as metadata only.
    pub tr_seconds: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Spatial(Volume3D),
    Series(Volume4D),
}

impl AnyVolume {
    pub fn into_3d(self, path: &Path) -> Result<Volume3D> {
        match self {
            AnyVolume::Spatial(v) => Ok(v),
            AnyVolume::Series(_) => Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: "expected a 3D volume, found a 4D series".into(),
            }),
        }
    }

    pub fn into_4d(self, path: &Path) -> Result<Volume4D> {
        match self {
            AnyVolume::Series(v) => Ok(v),
            AnyVolume::Spatial(_) => Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: "expected a 4D series, found a 3D volume".into(),
            }),
        }
    }
}

impl Volume3D {
    pub fn new(data: Array3<f32>, voxel_size: [f32; 3]) -> Self {
        Self { data, voxel_size }
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self::new(Array3::zeros(shape), [1.0; 3])
    }

    /// `(H, W, Z)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn depth(&self) -> usize {
        self.data.dim().2
    }

    /// Minimum and maximum intensity; `(0, 0)` for an empty grid.
    pub fn intensity_range(&self) -> (f32, f32) {
        let mut iter = self.data.iter().copied();
        match iter.next() {
            None => (0.0, 0.0),
            Some(first) => iter.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))),
        }
    }

    /// Axial slice `z` as an owned `(H, W)` grid.
    pub fn slice(&self, z: usize) -> ndarray::Array2<f32> {
        self.data.index_axis(Axis(2), z).to_owned()
    }
}

impl Volume4D {
    /// `(H, W, Z, T)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn frames(&self) -> usize {
        self.data.dim().3
    }
}

/// Voxel-wise temporal mean of frames `discard..T`.
pub fn compute_mean_bold(series: &Volume4D, discard: usize) -> Result<Volume3D> {
    let frames = series.frames();
    if frames <= discard {
        return Err(Error::TooFewFrames {
            found: frames,
            required: discard + 1,
            discard,
        });
    }
    let (h, w, z, _) = series.shape();
    let retained = (frames - discard) as f64;
    let mut out = Array3::<f32>::zeros((h, w, z));
    for ((i, j, k), o) in out.indexed_iter_mut() {
        // Accumulate in f64 so the result does not depend on frame order beyond rounding.
        let sum: f64 = (discard..frames)
            .map(|t| series.data[[i, j, k, t]] as f64)
            .sum();
        *o = (sum / retained) as f32;
    }
    Ok(Volume3D::new(out, series.voxel_size))
}

/// Per-volume min-max scaling to `[0, 1]`.
///
/// An all-zero volume is returned unchanged; any other constant volume maps to
/// all zeros.
pub fn normalize_volume(v: &Volume3D) -> Volume3D {
    let (lo, hi) = v.intensity_range();
    let span = hi - lo;
    let data = if span > 0.0 {
        let (lo, span) = (lo as f64, span as f64);
        v.data
            .mapv(|x| (((x as f64 - lo) / span).clamp(0.0, 1.0)) as f32)
    } else {
        Array3::zeros(v.data.raw_dim())
    };
    Volume3D::new(data, v.voxel_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Nifti,
    Raw,
}

fn format_of(path: &Path) -> Result<Format> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        Ok(Format::Nifti)
    } else if name.ends_with(".rvol") {
        Ok(Format::Raw)
    } else {
        Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "expected .nii, .nii.gz or .rvol".into(),
        })
    }
}

/// Loads a 3D volume or 4D series; the rank comes from the file header.
pub fn load_volume(path: impl AsRef<Path>) -> Result<AnyVolume> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let (data, voxel_size, tr) = match format_of(path)? {
        Format::Nifti => read_nifti(path)?,
        Format::Raw => read_raw(path)?,
    };
    check_finite(path, &data)?;
    match data.ndim() {
        3 => Ok(AnyVolume::Spatial(Volume3D::new(
            data.into_dimensionality::<Ix3>().expect("rank checked"),
            voxel_size,
        ))),
        4 => Ok(AnyVolume::Series(Volume4D {
            data: data.into_dimensionality::<Ix4>().expect("rank checked"),
            voxel_size,
            tr_seconds: tr,
        })),
        n => Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("rank {n} volumes are not supported"),
        }),
    }
}

pub fn load_volume_3d(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    load_volume(path)?.into_3d(path)
}

pub fn load_volume_4d(path: impl AsRef<Path>) -> Result<Volume4D> {
    let path = path.as_ref();
    load_volume(path)?.into_4d(path)
}

pub fn save_volume(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    write_any(&v.data.view().into_dyn(), v.voxel_size, 0.0, path.as_ref())
}

pub fn save_series(v: &Volume4D, path: impl AsRef<Path>) -> Result<()> {
    write_any(
        &v.data.view().into_dyn(),
        v.voxel_size,
        v.tr_seconds,
        path.as_ref(),
    )
}

fn check_finite(path: &Path, data: &ArrayD<f32>) -> Result<()> {
    let mut count = 0;
    let mut first = None;
    for (idx, v) in data.indexed_iter() {
        if !v.is_finite() {
            count += 1;
            first.get_or_insert_with(|| idx.slice().to_vec());
        }
    }
    if count > 0 {
        return Err(Error::NonFiniteVoxels {
            path: path.to_path_buf(),
            count,
            first: first.unwrap_or_default(),
        });
    }
    Ok(())
}

fn write_any(
    data: &ndarray::ArrayViewD<'_, f32>,
    voxel_size: [f32; 3],
    tr: f32,
    path: &Path,
) -> Result<()> {
    match format_of(path)? {
        Format::Nifti => {
            let mut header = NiftiHeader::default();
            header.pixdim = [
                1.0,
                voxel_size[0],
                voxel_size[1],
                voxel_size[2],
                tr,
                1.0,
                1.0,
                1.0,
            ];
            // millimetres + seconds
            header.xyzt_units = 2 | 8;
            WriterOptions::new(path)
                .reference_header(&header)
                .write_nifti(data)?;
            Ok(())
        }
        Format::Raw => write_raw(data, voxel_size, tr, path),
    }
}

fn read_nifti(path: &Path) -> Result<(ArrayD<f32>, [f32; 3], f32)> {
    let obj = ReaderOptions::new().read_file(path)?;
    let header = obj.header();
    let voxel_size = [header.pixdim[1], header.pixdim[2], header.pixdim[3]];
    let tr = header.pixdim[4];
    let data = obj.into_volume().into_ndarray::<f32>()?;
    // The reader hands back a Fortran-ordered view; make it standard layout.
    let data = data.as_standard_layout().into_owned();
    Ok((data, voxel_size, tr))
}

fn write_raw(
    data: &ndarray::ArrayViewD<'_, f32>,
    voxel_size: [f32; 3],
    tr: f32,
    path: &Path,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(64);
    header.extend_from_slice(RAW_MAGIC);
    header.extend_from_slice(&RAW_VERSION.to_le_bytes());
    header.extend_from_slice(&(data.ndim() as u32).to_le_bytes());
    for &d in data.shape() {
        header.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in voxel_size.iter().chain(std::iter::once(&tr)) {
        header.extend_from_slice(&v.to_le_bytes());
    }
    let io = |e| Error::io(path, e);
    w.write_all(&header).map_err(io)?;
    let mut payload = Vec::with_capacity(data.len() * 4);
    for v in data.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload).map_err(io)?;
    w.flush().map_err(io)
}

fn read_raw(path: &Path) -> Result<(ArrayD<f32>, [f32; 3], f32)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::UnsupportedFormat {
        path: PathBuf::from(path),
        reason: reason.to_string(),
    };
    let mut cursor = RawCursor { bytes: &bytes, pos: 0 };
    if cursor.take(4).ok_or_else(|| bad("truncated header"))? != RAW_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = cursor.u32().ok_or_else(|| bad("truncated header"))?;
    if version != RAW_VERSION {
        return Err(bad(&format!("unknown raw container version {version}")));
    }
    let rank = cursor.u32().ok_or_else(|| bad("truncated header"))? as usize;
    if !(3..=4).contains(&rank) {
        return Err(bad(&format!("rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cursor.u32().ok_or_else(|| bad("truncated header"))? as usize);
    }
    let mut meta = [0f32; 4];
    for m in &mut meta {
        *m = cursor.f32().ok_or_else(|| bad("truncated header"))?;
    }
    let n: usize = shape.iter().product();
    let payload = cursor.take(n * 4).ok_or_else(|| bad("truncated payload"))?;
    if cursor.pos != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = ArrayD::from_shape_vec(shape, values).map_err(|e| bad(&e.to_string()))?;
    Ok((data, [meta[0], meta[1], meta[2]], meta[3]))
}

struct RawCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RawCursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
