//! Seeded phantom pairs with a known structural → functional mapping.
//!
//! T1 is a normalised sum of compact blobs `amp·(1 − r²)²` inside a head
//! ellipsoid. Every BOLD frame is `smooth(a·t1 + b·t1²)` restricted to the
//! head, plus masked Gaussian noise clamped at zero; frames before the
//! discard point also carry a decaying offset.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_manifest, ManifestEntry, Subject};
use crate::error::{Error, Result};
use crate::volume_io::{compute_mean_bold, save_series, save_volume, Volume3D, Volume4D, DEFAULT_DISCARD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mapping {
    pub a: f64,
    pub b: f64,
    /// Gaussian smoothing sigma in voxels; 0 disables smoothing.
    pub radius: f64,
}

impl Default for Mapping {
    fn default() -> Self {
        Self { a: 0.3, b: 0.7, radius: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `(H, W, Z)`.
    pub shape: (usize, usize, usize),
    pub frames: usize,
    pub n_blobs: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub mapping: Mapping,
    /// Offset added to frame 0, decaying linearly to zero at the discard point.
    pub transient: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: (32, 32, 12),
            frames: 16,
            n_blobs: 6,
            noise_sigma: 0.02,
            seed: 0,
            mapping: Mapping::default(),
            transient: 0.5,
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, z) = self.shape;
        if h < 2 || w < 2 || z < 1 {
            return Err(Error::Config(format!("degenerate phantom shape {:?}", self.shape)));
        }
        if self.frames <= DEFAULT_DISCARD {
            return Err(Error::Config(format!(
                "phantom needs more than {DEFAULT_DISCARD} frames, got {}",
                self.frames
            )));
        }
        let m = self.mapping;
        if !(self.noise_sigma >= 0.0) || !(m.radius >= 0.0) || !m.a.is_finite() || !m.b.is_finite() {
            return Err(Error::Config("phantom noise, mapping and radius must be finite and non-negative".into()));
        }
        Ok(())
    }
}

struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
    amp: f64,
}

impl Blob {
    fn value(&self, p: [f64; 3]) -> f64 {
        let r2: f64 = (0..3).map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2)).sum();
        if r2 >= 1.0 {
            0.0
        } else {
            self.amp * (1.0 - r2).powi(2)
        }
    }
}

fn coord(i: usize, n: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / n as f64 - 1.0
}

/// The blob field on the grid: head ellipsoid plus interior blobs.
fn blob_field(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let jitter = |rng: &mut ChaCha8Rng, s: f64| rng.random_range(-s..s);
    let head = Blob {
        center: [jitter(rng, 0.05), jitter(rng, 0.05), 0.0],
        radii: [0.85 + jitter(rng, 0.05), 0.75 + jitter(rng, 0.05), 1.1],
        amp: 0.35,
    };
    let mut blobs = vec![];
    for _ in 0..spec.n_blobs {
        let c = [jitter(rng, 0.45), jitter(rng, 0.4), jitter(rng, 0.6)];
        blobs.push(Blob {
            center: [head.center[0] + c[0], head.center[1] + c[1], c[2]],
            radii: [
                rng.random_range(0.15..0.35),
                rng.random_range(0.15..0.35),
                rng.random_range(0.25..0.6),
            ],
            amp: rng.random_range(0.3..1.0),
        });
    }
    let (h, w, z) = spec.shape;
    Array3::from_shape_fn((h, w, z), |(i, j, k)| {
        let p = [coord(i, h), coord(j, w), coord(k, z)];
        let inside = head.value(p);
        if inside == 0.0 {
            return 0.0;
        }
        inside + blobs.iter().map(|b| b.value(p)).sum::<f64>()
    })
}

/// Separable Gaussian smoothing with zero padding, truncated at 3σ.
pub fn smooth3d(v: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma == 0.0 {
        return v.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / sum).collect();
    let mut out = v.clone();
    for axis in 0..3 {
        let src = out.clone();
        let n = src.len_of(Axis(axis)) as isize;
        for (mut dst_lane, src_lane) in out
            .lanes_mut(Axis(axis))
            .into_iter()
            .zip(src.lanes(Axis(axis)))
        {
            for i in 0..n {
                let mut acc = 0.0;
                for (t, d) in taps.iter().zip(-r..=r) {
                    let j = i + d;
                    if j >= 0 && j < n {
                        acc += t * src_lane[j as usize];
                    }
                }
                dst_lane[i as usize] = acc;
            }
        }
    }
    out
}

/// `smooth(a·t1 + b·t1²)` restricted to the support of `t1`.
pub fn clean_bold(t1: &Array3<f32>, m: &Mapping) -> Array3<f64> {
    let mapped = t1.mapv(|x| {
        let x = x as f64;
        m.a * x + m.b * x * x
    });
    let mut s = smooth3d(&mapped, m.radius);
    Zip::from(&mut s).and(t1).for_each(|o, &t| {
        if t == 0.0 {
            *o = 0.0;
        }
    });
    s
}

pub fn generate_pair(spec: &PhantomSpec) -> Result<(Volume3D, Volume4D)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let field = blob_field(spec, &mut rng);
    let max = field.iter().copied().fold(0.0f64, f64::max);
    let t1 = field.mapv(|v| if max > 0.0 { (v / max) as f32 } else { 0.0 });
    let clean = clean_bold(&t1, &spec.mapping);
    let (h, w, z) = spec.shape;
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0))
        .map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut bold = Array4::<f32>::zeros((h, w, z, spec.frames));
    for t in 0..spec.frames {
        let offset = if t < DEFAULT_DISCARD {
            spec.transient * (DEFAULT_DISCARD - t) as f64 / DEFAULT_DISCARD as f64
        } else {
            0.0
        };
        let mut frame = bold.index_axis_mut(Axis(3), t);
        Zip::from(&mut frame).and(&clean).and(&t1).for_each(|o, &c, &s| {
            if s > 0.0 {
                let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                *o = (c + offset + n).max(0.0) as f32;
            }
        });
    }
    let voxel = [2.0f32; 3];
    Ok((
        Volume3D::new(t1, voxel),
        Volume4D {
            data: bold,
            voxel_size: voxel,
            tr_seconds: 2.0,
        },
    ))
}

pub fn subject_id(i: usize) -> String {
    format!("sub-{i:03}")
}

/// Subject `i` uses seed `spec.seed + i`.
pub fn generate_cohort(spec: &PhantomSpec, n: usize) -> Result<Vec<(String, Volume3D, Volume4D)>> {
    (0..n)
        .map(|i| {
            let (t1, bold) = generate_pair(&spec.with_seed(spec.seed.wrapping_add(i as u64)))?;
            Ok((subject_id(i), t1, bold))
        })
        .collect()
}

/// Preprocessed in-memory subjects, as `load_manifest` would produce them.
pub fn phantom_subjects(spec: &PhantomSpec, n: usize) -> Result<Vec<Subject>> {
    generate_cohort(spec, n)?
        .into_iter()
        .map(|(id, t1, bold)| Subject::new(id, &t1, &compute_mean_bold(&bold, DEFAULT_DISCARD)?))
        .collect()
}

/// Writes every pair as NIfTI next to a `manifest.csv` and returns its path.
pub fn build_manifest(pairs: &[(String, Volume3D, Volume4D)], out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (id, t1, bold) in pairs {
        let t1_name = format!("{id}_t1.nii.gz");
        let bold_name = format!("{id}_bold.nii.gz");
        save_volume(t1, dir.join(&t1_name))?;
        save_series(bold, dir.join(&bold_name))?;
        entries.push(ManifestEntry {
            subject_id: id.clone(),
            t1_path: t1_name.into(),
            bold_path: bold_name.into(),
        });
    }
    let path = dir.join("manifest.csv");
    write_manifest(&entries, &path)?;
    Ok(path)
}
