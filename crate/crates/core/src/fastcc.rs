//! Bridge to an external connected-components kernel.
//!
//! The kernel is an executable that reads a binary volume from stdin and
//! writes labels to stdout, all little-endian:
//!
//! * request: `d, h, w` as `u64`, then `d*h*w` bytes in z-major order, each 0 or 1;
//! * response: `d, h, w` as `u64`, `component_count` as `u64`, then `d*h*w`
//!   `u32` labels, dense in first-encounter raster order.
//!
//! The executable is located through the `TOMOPICK_FASTCC` environment
//! variable, else as `tomopick-fastcc` on `PATH`. When it cannot be found the
//! reference labeling is used and a warning is logged.

use std::ffi::OsString;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;

use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::postproc::{connected_components_26, ComponentVolume};

pub const FASTCC_ENV: &str = "TOMOPICK_FASTCC";
pub const FASTCC_EXE: &str = "tomopick-fastcc";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CcBackend {
    #[default]
    Reference,
    Fastcc,
}

impl FromStr for CcBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Self::Reference),
            "fastcc" => Ok(Self::Fastcc),
            other => Err(Error::invalid("backend", format!("'{other}' (expected reference or fastcc)"))),
        }
    }
}

pub fn encode_volume(binary: ArrayView3<'_, u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + binary.len());
    for &n in binary.shape() {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    out.extend(binary.iter().copied());
    out
}

fn read_u64(bytes: &[u8], at: usize) -> Result<u64> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
        .ok_or_else(|| Error::Backend("truncated header".into()))
}

fn read_shape(bytes: &[u8]) -> Result<[usize; 3]> {
    let mut s = [0usize; 3];
    for (i, v) in s.iter_mut().enumerate() {
        *v = usize::try_from(read_u64(bytes, 8 * i)?).map_err(|_| Error::Backend("shape overflows".into()))?;
    }
    Ok(s)
}

fn voxel_count(s: [usize; 3]) -> Result<usize> {
    s.iter()
        .try_fold(1usize, |a, &b| a.checked_mul(b))
        .ok_or_else(|| Error::Backend("shape overflows".into()))
}

pub fn decode_volume(bytes: &[u8]) -> Result<Array3<u8>> {
    let s = read_shape(bytes)?;
    let n = voxel_count(s)?;
    let payload = &bytes[24..];
    if payload.len() != n {
        return Err(Error::Backend(format!("payload has {} bytes, shape needs {n}", payload.len())));
    }
    if let Some(b) = payload.iter().find(|&&b| b > 1) {
        return Err(Error::Backend(format!("non-binary byte {b}")));
    }
    Ok(Array3::from_shape_vec((s[0], s[1], s[2]), payload.to_vec()).expect("checked length"))
}

pub fn encode_labels(c: &ComponentVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 4 * c.labels.len());
    for &n in c.labels.shape() {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    out.extend_from_slice(&(c.component_count as u64).to_le_bytes());
    for &l in c.labels.iter() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

/// Parses and validates a response: dense ids in first-encounter order.
pub fn decode_labels(bytes: &[u8]) -> Result<ComponentVolume> {
    let s = read_shape(bytes)?;
    let count = read_u64(bytes, 24)? as usize;
    let n = voxel_count(s)?;
    let payload = &bytes[32..];
    if payload.len() != n.checked_mul(4).ok_or_else(|| Error::Backend("shape overflows".into()))? {
        return Err(Error::Backend(format!("label payload has {} bytes, shape needs {}", payload.len(), 4 * n)));
    }
    let labels: Vec<u32> = payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    let mut next = 1u64;
    for &l in &labels {
        if l as u64 > next || (l as u64 == next && l as usize > count) {
            return Err(Error::Backend(format!("label {l} breaks dense first-encounter order")));
        }
        if l as u64 == next {
            next += 1;
        }
    }
    if next - 1 != count as u64 {
        return Err(Error::Backend(format!("header count {count}, labels use {}", next - 1)));
    }
    Ok(ComponentVolume {
        labels: Array3::from_shape_vec((s[0], s[1], s[2]), labels).expect("checked length"),
        component_count: count,
    })
}

fn locate() -> Option<PathBuf> {
    if let Some(p) = std::env::var_os(FASTCC_ENV).filter(|p| !p.is_empty()) {
        let p = PathBuf::from(p);
        return p.is_file().then_some(p);
    }
    let path: OsString = std::env::var_os("PATH")?;
    std::env::split_paths(&path).map(|d| d.join(FASTCC_EXE)).find(|p| p.is_file())
}

/// Calls the kernel at `exe` on `binary`.
pub fn call_executable(exe: &Path, binary: ArrayView3<'_, u8>) -> Result<ComponentVolume> {
    let mut child = Command::new(exe)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::Backend(format!("{}: {e}", exe.display())))?;
    let request = encode_volume(binary);
    let mut stdin = child.stdin.take().expect("piped stdin");
    let writer = std::thread::spawn(move || stdin.write_all(&request));
    let mut response = Vec::new();
    child
        .stdout
        .take()
        .expect("piped stdout")
        .read_to_end(&mut response)
        .map_err(|e| Error::Backend(format!("reading kernel output: {e}")))?;
    let output = child
        .wait_with_output()
        .map_err(|e| Error::Backend(format!("{}: {e}", exe.display())))?;
    writer
        .join()
        .expect("writer thread")
        .map_err(|e| Error::Backend(format!("writing kernel input: {e}")))?;
    if !output.status.success() {
        return Err(Error::Backend(format!(
            "{} exited with {}: {}",
            exe.display(),
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }
    let c = decode_labels(&response)?;
    if c.labels.shape() != binary.shape() {
        return Err(Error::Backend("kernel returned a different shape".into()));
    }
    Ok(c)
}

/// Connected components through the selected backend.
pub fn label_components(binary: ArrayView3<'_, u8>, backend: CcBackend) -> Result<ComponentVolume> {
    match backend {
        CcBackend::Reference => connected_components_26(binary),
        CcBackend::Fastcc => match locate() {
            Some(exe) => {
                if let Some(v) = binary.iter().find(|&&v| v > 1) {
                    return Err(Error::invalid("binary", format!("value {v}")));
                }
                call_executable(&exe, binary)
            }
            None => {
                log::warn!("fastcc kernel not found (set {FASTCC_ENV}); using reference labeling");
                connected_components_26(binary)
            }
        },
    }
}

/// Serves one request on the given streams with the reference labeling.
pub fn serve<R: Read, W: Write>(mut input: R, mut output: W) -> Result<()> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Backend(format!("reading request: {e}")))?;
    let vol = decode_volume(&bytes)?;
    let c = connected_components_26(vol.view())?;
    output
        .write_all(&encode_labels(&c))
        .map_err(|e| Error::Backend(format!("writing response: {e}")))
}
