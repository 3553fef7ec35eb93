//! On-disk layouts. Every array is a flat little-endian `f64` binary next to
//! a JSON manifest that names it and records its shape.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use emofuse_core::diff::ParamStore;
use emofuse_core::eeg::RawRecording;
use emofuse_core::linalg::Mat;
use emofuse_core::visual::Frame;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DTYPE: &str = "f64-le";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_f64s<'a>(path: &Path, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(path, format!("{} bytes is not a whole number of f64s", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn check_dtype(path: &Path, dtype: &str) -> Result<()> {
    if dtype != DTYPE {
        return Err(Error::format(path, format!("unsupported dtype `{dtype}`, expected `{DTYPE}`")));
    }
    Ok(())
}

/// Binary file named in a manifest, resolved next to the manifest.
fn data_path(manifest: &Path, data: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(data)
}

fn sibling_bin(manifest: &Path) -> Result<(PathBuf, String)> {
    let stem = manifest
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::format(manifest, "manifest path has no file name"))?;
    let name = format!("{stem}.bin");
    Ok((data_path(manifest, &name), name))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data file.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamManifest {
    pub dtype: String,
    /// Data file, relative to the manifest.
    pub data: String,
    pub params: Vec<ParamEntry>,
}

/// Writes every parameter of `store`, in registration order, to `data`
/// (a path relative to `dir`) and returns the manifest describing it.
pub fn save_params(store: &ParamStore, dir: &Path, data: &str) -> Result<ParamManifest> {
    let mut params = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (_, p) in store.iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset,
        });
        offset += 8 * p.tensor.len() as u64;
    }
    write_f64s(&dir.join(data), store.iter().flat_map(|(_, p)| p.tensor.data()))?;
    Ok(ParamManifest {
        dtype: DTYPE.into(),
        data: data.into(),
        params,
    })
}

/// Fills `store` from a dump. Every parameter of `store` must be present
/// with a matching shape; extra entries are an error too.
pub fn load_params(store: &mut ParamStore, manifest: &ParamManifest, dir: &Path) -> Result<()> {
    let path = dir.join(&manifest.data);
    check_dtype(&path, &manifest.dtype)?;
    let values = read_f64s(&path)?;
    if manifest.params.len() != store.len() {
        return Err(Error::format(
            &path,
            format!("dump holds {} parameters, model has {}", manifest.params.len(), store.len()),
        ));
    }
    for e in &manifest.params {
        if e.offset % 8 != 0 {
            return Err(Error::format(&path, format!("`{}` starts at unaligned offset {}", e.name, e.offset)));
        }
        let start = (e.offset / 8) as usize;
        let len: usize = e.shape.iter().product();
        let slice = values.get(start..start + len).ok_or_else(|| {
            Error::format(&path, format!("`{}` runs past the end of the data", e.name))
        })?;
        store.load(&e.name, &e.shape, slice.to_vec())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordingManifest {
    pub channels: usize,
    pub samples: usize,
    pub fs: f64,
    pub channel_names: Vec<String>,
    pub dtype: String,
    /// Channel-major sample file, relative to the manifest.
    pub data: String,
}

/// Writes `<stem>.json` and its `<stem>.bin` data file.
pub fn write_recording(manifest: &Path, rec: &RawRecording) -> Result<()> {
    let (bin, name) = sibling_bin(manifest)?;
    write_f64s(&bin, &rec.data.data)?;
    write_json(
        manifest,
        &RecordingManifest {
            channels: rec.channels(),
            samples: rec.samples(),
            fs: rec.fs,
            channel_names: rec.channel_names.clone(),
            dtype: DTYPE.into(),
            data: name,
        },
    )
}

pub fn read_recording(manifest: &Path) -> Result<RawRecording> {
    let m: RecordingManifest = read_json(manifest)?;
    check_dtype(manifest, &m.dtype)?;
    let bin = data_path(manifest, &m.data);
    let values = read_f64s(&bin)?;
    if values.len() != m.channels * m.samples {
        return Err(Error::format(
            &bin,
            format!("{} values for {} channels × {} samples", values.len(), m.channels, m.samples),
        ));
    }
    let data = Mat::from_vec(m.channels, m.samples, values)?;
    Ok(RawRecording::new(data, m.fs, m.channel_names)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramesManifest {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub count: usize,
    pub dtype: String,
    /// Frames back to back, each `H × W × C` row-major.
    pub data: String,
}

/// Writes a stack of equally sized frames.
pub fn write_frames(manifest: &Path, frames: &[Frame]) -> Result<()> {
    let (h, w, c) = frames.first().map_or((0, 0, 1), |f| (f.height, f.width, f.channels));
    if frames.iter().any(|f| (f.height, f.width, f.channels) != (h, w, c)) {
        return Err(Error::format(manifest, "frames in one stack must share a shape"));
    }
    let (bin, name) = sibling_bin(manifest)?;
    write_f64s(&bin, frames.iter().flat_map(|f| &f.pixels))?;
    write_json(
        manifest,
        &FramesManifest {
            height: h,
            width: w,
            channels: c,
            count: frames.len(),
            dtype: DTYPE.into(),
            data: name,
        },
    )
}

pub fn read_frames(manifest: &Path) -> Result<Vec<Frame>> {
    let m: FramesManifest = read_json(manifest)?;
    check_dtype(manifest, &m.dtype)?;
    let bin = data_path(manifest, &m.data);
    let values = read_f64s(&bin)?;
    let per = m.height * m.width * m.channels;
    if values.len() != per * m.count {
        return Err(Error::format(
            &bin,
            format!("{} values for {} frames of {}×{}×{}", values.len(), m.count, m.height, m.width, m.channels),
        ));
    }
    if per == 0 {
        return Ok(Vec::new());
    }
    values
        .chunks_exact(per)
        .enumerate()
        .map(|(i, px)| {
            let mut f = Frame::new(m.height, m.width, m.channels, px.to_vec())?;
            f.frame_index = i;
            Ok(f)
        })
        .collect()
}
