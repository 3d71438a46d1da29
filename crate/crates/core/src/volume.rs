//! Raw little-endian volumes with a JSON sidecar.
//!
//! A volume `stem` is stored as `stem.raw` plus `stem.json`:
//!
//! ```json
//! { "dims": [x, y, z], "channels": c, "order": "row-major", "dtype": "f32" }
//! ```
//!
//! Data is channel-major: channel 0 holds a full `x*y*z` block (x fastest),
//! followed by channel 1, and so on.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::pyramid::Dims;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: Dims,
    pub channels: usize,
    pub order: String,
    #[serde(default = "default_dtype")]
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

fn default_dtype() -> String {
    "f32".into()
}

/// Element types with a fixed little-endian encoding.
pub trait Element: Copy + Default + PartialEq + std::fmt::Debug {
    const DTYPE: &'static str;
    const SIZE: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    const SIZE: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
}

impl Element for u16 {
    const DTYPE: &'static str = "u16";
    const SIZE: usize = 2;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        u16::from_le_bytes([b[0], b[1]])
    }
}

impl Element for u8 {
    const DTYPE: &'static str = "u8";
    const SIZE: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(b: &[u8]) -> Self {
        b[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub dims: Dims,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Element> Volume<T> {
    pub fn new(dims: Dims, channels: usize, data: Vec<T>) -> Result<Self> {
        let expect = dims.iter().product::<usize>() * channels;
        if data.len() != expect {
            return Err(invalid(format!(
                "volume data has {} elements, dims {dims:?} x {channels} channels need {expect}",
                data.len()
            )));
        }
        Ok(Self { dims, channels, data })
    }

    pub fn zeros(dims: Dims, channels: usize) -> Self {
        let n = dims.iter().product::<usize>() * channels;
        Self {
            dims,
            channels,
            data: vec![T::default(); n],
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn index(&self, v: Dims) -> usize {
        v[0] + self.dims[0] * (v[1] + self.dims[1] * v[2])
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxel_count();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxel_count();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, v: Dims) -> T {
        self.data[c * self.voxel_count() + self.index(v)]
    }

    /// Pads to `dims` at the high-index faces; channel `c` is filled with `fill(c)`.
    pub fn padded(&self, dims: Dims, fill: impl Fn(usize) -> T) -> Result<Self> {
        if (0..3).any(|a| dims[a] < self.dims[a]) {
            return Err(invalid(format!("cannot pad {:?} down to {dims:?}", self.dims)));
        }
        if dims == self.dims {
            return Ok(self.clone());
        }
        let mut out = Self::zeros(dims, self.channels);
        for c in 0..self.channels {
            let f = fill(c);
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            dst.fill(f);
            for z in 0..self.dims[2] {
                for y in 0..self.dims[1] {
                    let s = self.dims[0] * (y + self.dims[1] * z);
                    let d = dims[0] * (y + dims[1] * z);
                    dst[d..d + self.dims[0]].copy_from_slice(&src[s..s + self.dims[0]]);
                }
            }
        }
        Ok(out)
    }

    pub fn write(&self, stem: &Path, meta: Option<serde_json::Value>) -> Result<()> {
        let (raw, json) = paths(stem);
        if let Some(parent) = raw.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut bytes = Vec::with_capacity(self.data.len() * T::SIZE);
        for &v in &self.data {
            v.write_le(&mut bytes);
        }
        fs::write(&raw, bytes)?;
        let sidecar = Sidecar {
            dims: self.dims,
            channels: self.channels,
            order: "row-major".into(),
            dtype: T::DTYPE.into(),
            meta,
        };
        fs::write(&json, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn read(stem: &Path) -> Result<Self> {
        let (raw, json) = paths(stem);
        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(&json)?)?;
        if sidecar.order != "row-major" {
            return Err(invalid(format!("unsupported order {:?}", sidecar.order)));
        }
        if sidecar.dtype != T::DTYPE {
            return Err(invalid(format!(
                "{} holds {} data, expected {}",
                json.display(),
                sidecar.dtype,
                T::DTYPE
            )));
        }
        let bytes = fs::read(&raw)?;
        if bytes.len() % T::SIZE != 0 {
            return Err(invalid(format!("{} has a truncated element", raw.display())));
        }
        let data = bytes.chunks_exact(T::SIZE).map(T::read_le).collect();
        Self::new(sidecar.dims, sidecar.channels, data)
    }
}

impl Volume<f32> {
    pub fn from_f64(dims: Dims, channels: usize, data: &[f64]) -> Result<Self> {
        Self::new(dims, channels, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Reads just the sidecar of a stored volume.
pub fn read_sidecar(stem: &Path) -> Result<Sidecar> {
    let (_, json) = paths(stem);
    Ok(serde_json::from_str(&fs::read_to_string(json)?)?)
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_string_lossy();
    let base = s
        .strip_suffix(".raw")
        .or_else(|| s.strip_suffix(".json"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{base}.raw")),
        PathBuf::from(format!("{base}.json")),
    )
}

/// Interleaves a sample-major matrix (`n x k`, row-major) into channel-major order.
pub fn rows_to_channels(rows: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for j in 0..n {
        for c in 0..k {
            out[c * n + j] = rows[j * k + c];
        }
    }
    out
}

/// Inverse of [`rows_to_channels`].
pub fn channels_to_rows(chans: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for c in 0..k {
        for j in 0..n {
            out[j * k + c] = chans[c * n + j];
        }
    }
    out
}
