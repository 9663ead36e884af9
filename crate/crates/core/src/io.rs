//! On-disk formats: a strict JSON header next to a raw little-endian payload
//! with the same stem and a `.raw` extension.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, ScanKind};
use crate::projector::{ProjectionSet, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32le,
    #[default]
    F64le,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32le => 4,
            Dtype::F64le => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub voxel_size_mm: f64,
    pub dtype: Dtype,
    pub order: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionHeader {
    pub n_views: usize,
    pub det_rows: usize,
    pub det_cols: usize,
    pub angles_deg: Vec<f64>,
    pub geometry: ConeBeamGeometry,
    pub dtype: Dtype,
    pub scan_kind: ScanKind,
}

/// Writes through a temporary file in the same directory and renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Param(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// `fs::read` with the path in the error message.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(read_file(path)?)))
}

/// Payload path belonging to a header path.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

fn encode(values: &[f64], dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.size());
    match dtype {
        Dtype::F32le => values.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        Dtype::F64le => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

fn decode(bytes: &[u8], n: usize, dtype: Dtype, what: &Path) -> Result<Vec<f64>> {
    let expected = n * dtype.size();
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} payload bytes, found {}",
            what.display(),
            bytes.len()
        )));
    }
    Ok(match dtype {
        Dtype::F32le => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64le => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    })
}

pub fn write_volume(path: &Path, vol: &Volume, dtype: Dtype) -> Result<()> {
    vol.check_finite()?;
    let header = VolumeHeader {
        dims: vol.dims,
        voxel_size_mm: vol.voxel_size_mm,
        dtype,
        order: "zyx".into(),
    };
    write_atomic(&payload_path(path), &encode(&vol.data, dtype))?;
    write_json(path, &header)
}

pub fn read_volume(path: &Path) -> Result<(Volume, Dtype)> {
    let h: VolumeHeader = read_json(path)?;
    if h.order != "zyx" {
        return Err(Error::Format(format!("unsupported voxel order {:?}", h.order)));
    }
    if !(h.voxel_size_mm > 0.0) || h.dims.contains(&0) {
        return Err(Error::Format("volume header has empty dims or bad voxel size".into()));
    }
    let raw = payload_path(path);
    let data = decode(&read_file(&raw)?, h.dims.iter().product(), h.dtype, &raw)?;
    let vol = Volume::from_data(h.dims, h.voxel_size_mm, data)?;
    vol.check_finite()?;
    Ok((vol, h.dtype))
}

pub fn write_projections(
    path: &Path,
    projs: &ProjectionSet,
    geom: &ConeBeamGeometry,
    dtype: Dtype,
) -> Result<()> {
    projs.check_finite()?;
    if projs.n_views != geom.n_views() || projs.det_rows != geom.det_rows || projs.det_cols != geom.det_cols {
        return Err(Error::Shape("projections do not match their geometry".into()));
    }
    let header = ProjectionHeader {
        n_views: projs.n_views,
        det_rows: projs.det_rows,
        det_cols: projs.det_cols,
        angles_deg: projs.angles_deg.clone(),
        geometry: geom.clone(),
        dtype,
        scan_kind: geom.scan_kind,
    };
    write_atomic(&payload_path(path), &encode(&projs.data, dtype))?;
    write_json(path, &header)
}

pub fn read_projections(path: &Path) -> Result<(ProjectionSet, ConeBeamGeometry, Dtype)> {
    let h: ProjectionHeader = read_json(path)?;
    let g = &h.geometry;
    if h.angles_deg.len() != h.n_views
        || g.angles_deg != h.angles_deg
        || g.det_rows != h.det_rows
        || g.det_cols != h.det_cols
        || g.scan_kind != h.scan_kind
    {
        return Err(Error::Format("projection header is inconsistent with its geometry".into()));
    }
    g.validate().map_err(|e| Error::Format(format!("projection geometry: {e}")))?;
    let raw = payload_path(path);
    let data = decode(&read_file(&raw)?, h.n_views * h.det_rows * h.det_cols, h.dtype, &raw)?;
    let projs = ProjectionSet {
        n_views: h.n_views,
        det_rows: h.det_rows,
        det_cols: h.det_cols,
        angles_deg: h.angles_deg,
        data,
    };
    projs.check_finite()?;
    Ok((projs, h.geometry, h.dtype))
}

/// 16-bit binary portable graymap of one slice, min-max windowed. Returns the
/// window used.
pub fn write_pgm16(path: &Path, vol: &Volume, z: usize) -> Result<(f64, f64)> {
    let [nx, ny, nz] = vol.dims;
    if z >= nz {
        return Err(Error::Range(format!("slice {z} outside volume of depth {nz}")));
    }
    let s = vol.slice(z);
    let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{nx} {ny}\n65535\n").into_bytes();
    for &v in s {
        let q = if hi > lo {
            ((v - lo) / (hi - lo) * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    write_atomic(path, &out)?;
    Ok((lo, hi))
}
