//! On-disk field container: a directory holding `manifest.json` and one raw
//! little-endian file per field per frame, named `<field>_<frame:04>.bin`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{DomainSpec, ScalarField3};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_TAG: &str = "pionix-fields";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32le")]
    F32Le,
    #[serde(rename = "f64le")]
    F64Le,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32Le => 4,
            Dtype::F64Le => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerManifest {
    pub format: String,
    /// Grid dimensions, x fastest in the binary files.
    pub dims: [usize; 3],
    /// Physical box edge lengths in meters.
    pub extents: [f64; 3],
    /// Time span of the full domain the frames were drawn from.
    pub time_span: [f64; 2],
    /// Frame count of that full domain.
    pub domain_frame_count: usize,
    pub dtype: Dtype,
    pub fields: Vec<String>,
    /// Timestamps of the stored frames in seconds.
    pub frame_times: Vec<f64>,
    /// Index of each stored frame in the full-domain frame sequence.
    pub frame_indices: Vec<usize>,
}

impl ContainerManifest {
    pub fn domain(&self) -> DomainSpec {
        DomainSpec {
            extent: self.extents,
            time_span: self.time_span,
            grid_shape: self.dims,
            frame_count: self.domain_frame_count,
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frame_times.len()
    }
}

pub fn field_file_name(field: &str, frame: usize) -> String {
    format!("{field}_{frame:04}.bin")
}

pub fn encode(values: &[f64], dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.width());
    match dtype {
        Dtype::F32Le => values
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        Dtype::F64Le => values
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F32Le => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64Le => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    }
}

pub fn write_raw(path: &Path, values: &[f64], dtype: Dtype) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(values, dtype))
        .map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path, expected_len: usize, dtype: Dtype) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len * dtype.width() {
        return Err(Error::format(
            path,
            format!(
                "expected {} bytes, found {}",
                expected_len * dtype.width(),
                bytes.len()
            ),
        ));
    }
    Ok(decode(&bytes, dtype))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable manifest");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a manifest plus one file per (field, frame). `frames[f][i]` is
/// field `manifest.fields[i]` of stored frame `f`.
pub fn write_container(
    dir: &Path,
    manifest: &ContainerManifest,
    frames: &[Vec<&ScalarField3>],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if frames.len() != manifest.frame_times.len() || frames.len() != manifest.frame_indices.len() {
        return Err(Error::Shape(format!(
            "{} frames but {} timestamps",
            frames.len(),
            manifest.frame_times.len()
        )));
    }
    for (f, fields) in frames.iter().enumerate() {
        if fields.len() != manifest.fields.len() {
            return Err(Error::Shape(format!(
                "frame {f} has {} fields, manifest lists {}",
                fields.len(),
                manifest.fields.len()
            )));
        }
        for (name, field) in manifest.fields.iter().zip(fields) {
            if field.shape() != manifest.dims {
                return Err(Error::Shape(format!(
                    "field {name} has shape {:?}, manifest dims {:?}",
                    field.shape(),
                    manifest.dims
                )));
            }
            write_raw(
                &dir.join(field_file_name(name, f)),
                field.data(),
                manifest.dtype,
            )?;
        }
    }
    write_json(&dir.join(MANIFEST), manifest)
}

pub fn read_manifest(dir: &Path) -> Result<ContainerManifest> {
    let path = dir.join(MANIFEST);
    let m: ContainerManifest = read_json(&path)?;
    if m.format != FORMAT_TAG {
        return Err(Error::format(&path, format!("unknown format tag {:?}", m.format)));
    }
    if m.frame_times.len() != m.frame_indices.len() {
        return Err(Error::format(&path, "frame_times and frame_indices differ in length"));
    }
    Ok(m)
}

pub fn read_field(dir: &Path, manifest: &ContainerManifest, field: &str, frame: usize) -> Result<ScalarField3> {
    let path: PathBuf = dir.join(field_file_name(field, frame));
    let n = manifest.dims.iter().product();
    let data = read_raw(&path, n, manifest.dtype)?;
    ScalarField3::new(manifest.dims, data)
}
