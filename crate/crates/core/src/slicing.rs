//! Axial slice windows around a target index, model-resolution resampling and
//! the inverse mapping back to the original in-plane grid.

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::volume_io::Volume3D;

/// Channels the encoder expects; slices are replicated across them.
pub const CHANNELS: usize = 3;

/// Validity information carried alongside a window.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidMask {
    /// One entry per window position; false where the slice fell outside the volume.
    pub slice_valid: Vec<bool>,
    /// `(S, S)` binary mask at model resolution.
    pub in_plane_mask: Array2<f32>,
    /// In-plane shape `(H, W)` of the source volume.
    pub original_shape: (usize, usize),
}

impl ValidMask {
    pub fn all_valid(k: usize, size: usize, original_shape: (usize, usize)) -> Self {
        Self {
            slice_valid: vec![true; k],
            in_plane_mask: Array2::ones((size, size)),
            original_shape,
        }
    }
}

/// `K` model-resolution slices centred on `center_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceWindow {
    /// `(K, 3, S, S)`.
    pub slices: Array4<f32>,
    pub center_index: usize,
    pub mask: ValidMask,
}

impl SliceWindow {
    pub fn len(&self) -> usize {
        self.slices.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> usize {
        self.slices.dim().2
    }

    pub fn center_position(&self) -> usize {
        self.len() / 2
    }

    /// Replaces the in-plane mask (for example with a brain mask resampled to `S`).
    pub fn with_in_plane_mask(mut self, mask: Array2<f32>) -> Result<Self> {
        let s = self.size();
        if mask.dim() != (s, s) {
            return Err(Error::Shape(format!(
                "in-plane mask is {:?}, window resolution is {s}",
                mask.dim()
            )));
        }
        if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Shape("in-plane mask must be binary".into()));
        }
        self.mask.in_plane_mask = mask;
        Ok(self)
    }
}

/// Source taps of a 1D bilinear resize from `src` to `dst` samples, using
/// half-pixel centres with edge clamping. Each output gets two `(index, weight)`
/// pairs; resizing to the same length is the identity.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<[(usize, f64); 2]> {
    if src == dst {
        return (0..dst).map(|i| [(i, 1.0), (i, 0.0)]).collect();
    }
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let x = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (x.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = x - i0 as f64;
            [(i0, 1.0 - frac), (i1, frac)]
        })
        .collect()
}

/// Dense `(dst, src)` interpolation matrix, row-major.
pub fn interpolation_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    for (row, taps) in bilinear_taps(src, dst).iter().enumerate() {
        for &(i, w) in taps {
            m[row * src + i] += w;
        }
    }
    m
}

/// Bilinear resize of a 2D grid to `(out_h, out_w)`.
pub fn resize_bilinear(img: ArrayView2<'_, f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.to_owned();
    }
    let rows = bilinear_taps(h, out_h);
    let cols = bilinear_taps(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let mut acc = 0f64;
        for &(i, wy) in &rows[r] {
            for &(j, wx) in &cols[c] {
                acc += wy * wx * img[[i, j]] as f64;
            }
        }
        acc as f32
    })
}

/// Bilinear resample of one slice to `target × target`.
pub fn resample_slice(img: ArrayView2<'_, f32>, target: usize) -> Array2<f32> {
    resize_bilinear(img, target, target)
}

/// Builds the `k`-slice window centred on axial index `z` at resolution `size`.
///
/// Positions outside `[0, Z)` are zero-filled and flagged invalid.
pub fn extract_window(v: &Volume3D, z: usize, k: usize, size: usize) -> Result<SliceWindow> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::Config(format!("window size must be odd, got {k}")));
    }
    let (h, w, depth) = v.shape();
    if z >= depth {
        return Err(Error::Shape(format!(
            "slice index {z} out of range for depth {depth}"
        )));
    }
    let half = (k / 2) as isize;
    let mut slices = Array4::<f32>::zeros((k, CHANNELS, size, size));
    let mut slice_valid = vec![false; k];
    for (pos, valid) in slice_valid.iter_mut().enumerate() {
        let src = z as isize - half + pos as isize;
        if src < 0 || src >= depth as isize {
            continue;
        }
        *valid = true;
        let resized = resample_slice(v.data.index_axis(Axis(2), src as usize), size);
        for c in 0..CHANNELS {
            slices.slice_mut(s![pos, c, .., ..]).assign(&resized);
        }
    }
    Ok(SliceWindow {
        slices,
        center_index: z,
        mask: ValidMask {
            slice_valid,
            in_plane_mask: Array2::ones((size, size)),
            original_shape: (h, w),
        },
    })
}

/// Maps a model-resolution prediction back to the original in-plane grid and
/// zeroes everything outside the valid region.
pub fn restore_output(pred: ArrayView2<'_, f32>, mask: &ValidMask) -> Array2<f32> {
    let (h, w) = mask.original_shape;
    let mut out = resize_bilinear(pred, h, w);
    if mask.in_plane_mask.iter().all(|&m| m == 1.0) {
        return out;
    }
    let m = resize_bilinear(mask.in_plane_mask.view(), h, w);
    out.zip_mut_with(&m, |o, &m| {
        if m < 0.5 {
            *o = 0.0;
        }
    });
    out
}

/// Stacks per-slice predictions into a volume carrying `reference`'s metadata.
pub fn assemble_volume(preds: &[Array2<f32>], reference: &Volume3D) -> Result<Volume3D> {
    let (h, w, depth) = reference.shape();
    if preds.len() != depth {
        return Err(Error::Shape(format!(
            "expected {depth} slice predictions, got {}",
            preds.len()
        )));
    }
    let mut data = Array3::<f32>::zeros((h, w, depth));
    for (z, p) in preds.iter().enumerate() {
        if p.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "slice {z} prediction is {:?}, expected {:?}",
                p.dim(),
                (h, w)
            )));
        }
        data.index_axis_mut(Axis(2), z).assign(p);
    }
    Ok(Volume3D::new(data, reference.voxel_size))
}
