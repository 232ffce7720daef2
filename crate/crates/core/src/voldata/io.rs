//! MRC2014 (mode 2, little-endian) and headerless raw volume I/O.
//!
//! Raw volumes are little-endian `f32` in z-major order with a JSON sidecar
//! at `<path>.json` holding `shape`, `dtype` and `voxel_size_nm`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::Tomogram;
use crate::error::{Error, Result};

const MRC_HEADER_LEN: usize = 1024;
const MRC_MODE_F32: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Mrc,
    Raw,
}

impl VolumeFormat {
    /// `.mrc`, `.map`, `.rec` and `.st` are MRC; anything else is raw.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("mrc" | "map" | "rec" | "st") => VolumeFormat::Mrc,
            _ => VolumeFormat::Raw,
        }
    }
}

impl std::str::FromStr for VolumeFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mrc" => Ok(VolumeFormat::Mrc),
            "raw" => Ok(VolumeFormat::Raw),
            other => Err(Error::invalid("format", format!("unknown volume format {other}"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSidecar {
    shape: Vec<usize>,
    dtype: String,
    #[serde(default)]
    voxel_size_nm: Option<f32>,
    #[serde(default)]
    name: Option<String>,
}

pub(crate) fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<Tomogram> {
    match format {
        VolumeFormat::Mrc => load_mrc(path),
        VolumeFormat::Raw => load_raw(path),
    }
}

pub fn save_volume(tomo: &Tomogram, path: &Path, format: VolumeFormat) -> Result<()> {
    // Tomogram construction already rejects non-finite data.
    match format {
        VolumeFormat::Mrc => save_mrc(tomo, path),
        VolumeFormat::Raw => save_raw(tomo, path),
    }
}

fn default_name(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("volume")
        .to_string()
}

fn le_f32_payload(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn f32_to_le(data: &Array3<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_i32(h: &[u8], word: usize) -> i32 {
    let o = word * 4;
    i32::from_le_bytes([h[o], h[o + 1], h[o + 2], h[o + 3]])
}

fn read_f32(h: &[u8], word: usize) -> f32 {
    let o = word * 4;
    f32::from_le_bytes([h[o], h[o + 1], h[o + 2], h[o + 3]])
}

fn load_mrc(path: &Path) -> Result<Tomogram> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < MRC_HEADER_LEN {
        return Err(bad(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    let h = &bytes[..MRC_HEADER_LEN];
    // MACHST: 0x44 0x44 or 0x44 0x41 denote little-endian.
    if h[212] != 0x44 && !(h[212] == 0 && h[213] == 0) {
        return Err(bad("only little-endian MRC files are supported".into()));
    }
    let (nx, ny, nz) = (read_i32(h, 0), read_i32(h, 1), read_i32(h, 2));
    if nx <= 0 || ny <= 0 || nz <= 0 {
        return Err(bad(format!("non-positive dimensions {nx}x{ny}x{nz}")));
    }
    let mode = read_i32(h, 3);
    if mode != MRC_MODE_F32 {
        return Err(bad(format!("mode {mode} unsupported (only mode 2)")));
    }
    let (mapc, mapr, maps) = (read_i32(h, 16), read_i32(h, 17), read_i32(h, 18));
    if (mapc, mapr, maps) != (1, 2, 3) && (mapc, mapr, maps) != (0, 0, 0) {
        return Err(bad(format!("axis order {mapc},{mapr},{maps} unsupported")));
    }
    let nsymbt = read_i32(h, 23);
    if nsymbt < 0 {
        return Err(bad(format!("negative extended header size {nsymbt}")));
    }
    let n = nx as usize * ny as usize * nz as usize;
    let start = MRC_HEADER_LEN + nsymbt as usize;
    if bytes.len() != start + n * 4 {
        return Err(Error::ShapeMismatch(format!(
            "{}: header declares {nz}x{ny}x{nx} float32 ({} bytes) but payload is {} bytes",
            path.display(),
            n * 4,
            bytes.len().saturating_sub(start)
        )));
    }
    let values = le_f32_payload(&bytes[start..]);
    let data = Array3::from_shape_vec((nz as usize, ny as usize, nx as usize), values)
        .expect("payload length checked");
    let mx = read_i32(h, 7);
    let xlen = read_f32(h, 10);
    let voxel = if mx > 0 && xlen > 0.0 && xlen.is_finite() {
        // Cell dimensions are in Angstrom.
        Some(xlen / mx as f32 / 10.0)
    } else {
        None
    };
    Tomogram::new(data, default_name(path))?.with_voxel_size(voxel)
}

fn save_mrc(tomo: &Tomogram, path: &Path) -> Result<()> {
    let [nz, ny, nx] = tomo.shape();
    let mut h = vec![0u8; MRC_HEADER_LEN];
    let put_i32 = |h: &mut [u8], word: usize, v: i32| {
        h[word * 4..word * 4 + 4].copy_from_slice(&v.to_le_bytes())
    };
    put_i32(&mut h, 0, nx as i32);
    put_i32(&mut h, 1, ny as i32);
    put_i32(&mut h, 2, nz as i32);
    put_i32(&mut h, 3, MRC_MODE_F32);
    put_i32(&mut h, 7, nx as i32);
    put_i32(&mut h, 8, ny as i32);
    put_i32(&mut h, 9, nz as i32);
    put_i32(&mut h, 16, 1);
    put_i32(&mut h, 17, 2);
    put_i32(&mut h, 18, 3);
    put_i32(&mut h, 27, 20140);
    let put_f32 = |h: &mut [u8], word: usize, v: f32| {
        h[word * 4..word * 4 + 4].copy_from_slice(&v.to_le_bytes())
    };
    let angstrom = tomo.voxel_size_nm().unwrap_or(0.1) * 10.0;
    put_f32(&mut h, 10, angstrom * nx as f32);
    put_f32(&mut h, 11, angstrom * ny as f32);
    put_f32(&mut h, 12, angstrom * nz as f32);
    for w in 13..16 {
        put_f32(&mut h, w, 90.0);
    }
    let data = tomo.data();
    let (mut min, mut max, mut sum) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64);
    for &v in data.iter() {
        min = min.min(v);
        max = max.max(v);
        sum += v as f64;
    }
    let mean = sum / data.len() as f64;
    let rms = (data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / data.len() as f64).sqrt();
    put_f32(&mut h, 19, min);
    put_f32(&mut h, 20, max);
    put_f32(&mut h, 21, mean as f32);
    h[208..212].copy_from_slice(b"MAP ");
    h[212] = 0x44;
    h[213] = 0x44;
    put_f32(&mut h, 54, rms as f32);
    let mut out = h;
    out.extend_from_slice(&f32_to_le(data));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn load_raw(path: &Path) -> Result<Tomogram> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: RawSidecar = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: side.clone(),
        reason: e.to_string(),
    })?;
    if meta.dtype != "float32" {
        return Err(Error::MalformedHeader {
            path: side,
            reason: format!("dtype {} unsupported (only float32)", meta.dtype),
        });
    }
    let &[d, h, w] = meta.shape.as_slice() else {
        return Err(Error::MalformedHeader {
            path: side,
            reason: format!("shape must have 3 entries, got {:?}", meta.shape),
        });
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != d * h * w * 4 {
        return Err(Error::ShapeMismatch(format!(
            "{}: sidecar shape {d}x{h}x{w} needs {} bytes, payload has {}",
            path.display(),
            d * h * w * 4,
            bytes.len()
        )));
    }
    let data = Array3::from_shape_vec((d, h, w), le_f32_payload(&bytes)).expect("length checked");
    let name = meta.name.unwrap_or_else(|| default_name(path));
    Tomogram::new(data, name)?.with_voxel_size(meta.voxel_size_nm)
}

fn save_raw(tomo: &Tomogram, path: &Path) -> Result<()> {
    let meta = RawSidecar {
        shape: tomo.shape().to_vec(),
        dtype: "float32".into(),
        voxel_size_nm: tomo.voxel_size_nm(),
        name: Some(tomo.name().to_string()),
    };
    fs::write(path, f32_to_le(tomo.data())).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

/// Writes a multi-channel `(C, D, H, W)` float volume in raw format.
pub fn save_raw_channels(data: &ndarray::Array4<f32>, path: &Path) -> Result<()> {
    let meta = RawSidecar {
        shape: data.shape().to_vec(),
        dtype: "float32".into(),
        voxel_size_nm: None,
        name: None,
    };
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&meta).expect("sidecar serializes"))
        .map_err(|e| Error::io(&side, e))
}
