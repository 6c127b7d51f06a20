//! Paired subjects and the CSV manifest that lists them on disk.
//!
//! Manifest columns are `subject_id, t1_path, bold_path`. Relative paths are
//! resolved against the manifest's directory. `bold_path` may name a 4D series
//! (averaged after the discard rule) or an already averaged 3D volume.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::{compute_mean_bold, load_volume, normalize_volume, AnyVolume, Volume3D};

/// A preprocessed pair: normalised T1 input and normalised mean-BOLD target.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub t1: Volume3D,
    pub target: Volume3D,
}

impl Subject {
    /// Min-max normalises both volumes and checks that their grids agree.
    pub fn new(id: impl Into<String>, t1: &Volume3D, mean_bold: &Volume3D) -> Result<Self> {
        let id = id.into();
        if t1.shape() != mean_bold.shape() {
            return Err(Error::Shape(format!(
                "T1 {:?} and mean BOLD {:?} differ",
                t1.shape(),
                mean_bold.shape()
            ))
            .for_subject(&id));
        }
        Ok(Self {
            id,
            t1: normalize_volume(t1),
            target: normalize_volume(mean_bold),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub t1_path: PathBuf,
    pub bold_path: PathBuf,
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a manifest, resolving relative paths against its directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let mut e: ManifestEntry = row?;
        if e.t1_path.is_relative() {
            e.t1_path = base.join(&e.t1_path);
        }
        if e.bold_path.is_relative() {
            e.bold_path = base.join(&e.bold_path);
        }
        out.push(e);
    }
    if out.is_empty() {
        return Err(Error::Config(format!("manifest {} lists no subjects", path.display())));
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    }
}

pub fn load_subject(entry: &ManifestEntry, discard: usize) -> Result<Subject> {
    let inner = || -> Result<Subject> {
        let t1 = load_volume(&entry.t1_path)?.into_3d(&entry.t1_path)?;
        let mean = match load_volume(&entry.bold_path)? {
            AnyVolume::Series(s) => compute_mean_bold(&s, discard)?,
            AnyVolume::Spatial(v) => v,
        };
        Subject::new(entry.subject_id.clone(), &t1, &mean)
    };
    inner().map_err(|e| match e {
        Error::Subject { .. } => e,
        other => other.for_subject(&entry.subject_id),
    })
}

pub fn load_manifest(path: impl AsRef<Path>, discard: usize) -> Result<Vec<Subject>> {
    read_manifest(path)?
        .iter()
        .map(|e| load_subject(e, discard))
        .collect()
}
