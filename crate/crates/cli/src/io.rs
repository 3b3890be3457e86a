//! On-disk formats: f32le/f64le raw payloads with JSON sidecars, 16-bit PGM
//! slices, and atomic writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tnt::field::{FieldConfig, NeuralField};
use tnt::geometry::{ScannerGeometry, VolumeExtent};
use tnt::params::{ParamSet, Segment};
use tnt::projector::{ProjectionKind, ProjectionStack};
use tnt::volume::Volume;
use tnt::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

/// Writes `bytes` to a temporary sibling and renames it over `path`, so a
/// reader never observes a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Sidecar path for a payload: `foo.raw` -> `foo.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub version: u32,
    pub kind: String,
    pub dtype: String,
    /// `[nx, ny, nz]`, x fastest in the payload.
    pub dims: [usize; 3],
    pub extent: VolumeExtent,
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32_from_bytes(bytes: &[u8], expected: usize, what: &str) -> Result<Vec<f32>> {
    if bytes.len() != expected * 4 {
        return format_err(format!("{what}: payload holds {} bytes, header implies {}", bytes.len(), expected * 4));
    }
    Ok(bytes.as_chunks::<4>().0.iter().map(|c| f32::from_le_bytes(*c)).collect())
}

fn check_dtype(dtype: &str, want: &str, version: u32) -> Result<()> {
    if dtype != want {
        return format_err(format!("unsupported dtype {dtype:?}, expected {want:?}"));
    }
    if version != FORMAT_VERSION {
        return format_err(format!("unsupported format version {version}"));
    }
    Ok(())
}

/// Writes `path` (f32le payload) and its JSON sidecar.
pub fn write_volume(path: &Path, vol: &Volume, kind: &str) -> Result<()> {
    let header = VolumeHeader {
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        dtype: "f32le".into(),
        dims: vol.dims(),
        extent: vol.extent,
    };
    atomic_write(path, &f32_bytes(&vol.data))?;
    write_json(&sidecar(path), &header)
}

pub fn read_volume(path: &Path) -> Result<(Volume, VolumeHeader)> {
    let header: VolumeHeader = read_json(&sidecar(path))?;
    check_dtype(&header.dtype, "f32le", header.version)?;
    header.extent.validate()?;
    if header.dims != header.extent.dims() {
        return format_err("volume header dims disagree with its extent");
    }
    let data = f32_from_bytes(&fs::read(path)?, header.extent.len(), "volume")?;
    Ok((Volume::from_data(header.extent, data)?, header))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionHeader {
    pub version: u32,
    pub kind: ProjectionKind,
    pub dtype: String,
    /// `[views, rows, cols]`, columns fastest.
    pub dims: [usize; 3],
    pub geometry: ScannerGeometry,
}

pub fn write_projections(path: &Path, stack: &ProjectionStack) -> Result<()> {
    let g = &stack.geom;
    let header = ProjectionHeader {
        version: FORMAT_VERSION,
        kind: stack.kind,
        dtype: "f32le".into(),
        dims: [g.n_views(), g.det_rows, g.det_cols],
        geometry: g.clone(),
    };
    atomic_write(path, &f32_bytes(&stack.data))?;
    write_json(&sidecar(path), &header)
}

pub fn read_projections(path: &Path) -> Result<ProjectionStack> {
    let header: ProjectionHeader = read_json(&sidecar(path))?;
    check_dtype(&header.dtype, "f32le", header.version)?;
    let g = header.geometry;
    g.validate()?;
    if header.dims != [g.n_views(), g.det_rows, g.det_cols] {
        return format_err("projection header dims disagree with its geometry");
    }
    let data = f32_from_bytes(&fs::read(path)?, g.n_views() * g.pixels_per_view(), "projections")?;
    ProjectionStack::from_data(g, header.kind, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: String,
    pub field: FieldConfig,
    pub n_params: usize,
    /// Flattening order of the payload.
    pub segments: Vec<Segment>,
    pub iteration: usize,
}

/// Parameters as f64le in segment order, plus a header with the field config.
pub fn write_checkpoint(path: &Path, field: &NeuralField, iteration: usize) -> Result<()> {
    let p = field.params();
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        dtype: "f64le".into(),
        field: field.config().clone(),
        n_params: p.len(),
        segments: p.segments().to_vec(),
        iteration,
    };
    let bytes: Vec<u8> = p.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    atomic_write(path, &bytes)?;
    write_json(&sidecar(path), &header)
}

pub fn read_checkpoint(path: &Path) -> Result<(NeuralField, CheckpointHeader)> {
    let header: CheckpointHeader = read_json(&sidecar(path))?;
    check_dtype(&header.dtype, "f64le", header.version)?;
    let bytes = fs::read(path)?;
    if bytes.len() != header.n_params * 8 {
        return format_err(format!("checkpoint holds {} bytes, header implies {}", bytes.len(), header.n_params * 8));
    }
    let values: Vec<f64> = bytes.as_chunks::<8>().0.iter().map(|c| f64::from_le_bytes(*c)).collect();
    let mut field = NeuralField::uninit(&header.field)?;
    let params = ParamSet::from_parts(values, header.segments.clone())?;
    if !params.same_layout(field.params()) {
        return format_err("checkpoint segments do not match the field configuration");
    }
    *field.params_mut() = params;
    Ok((field, header))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            _ => Err(format!("axis must be x, y or z, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceHeader {
    pub axis: Axis,
    pub index: usize,
    pub width: usize,
    pub height: usize,
    /// Values at or below `window_low` map to 0, at or above `window_high` to `maxval`.
    pub window_low: f64,
    pub window_high: f64,
    pub maxval: u16,
}

/// Samples of one axis-aligned slice, row-major with the first in-plane axis fastest.
pub fn extract_slice(vol: &Volume, axis: Axis, index: usize) -> Result<(usize, usize, Vec<f32>)> {
    let [nx, ny, nz] = vol.dims();
    let limit = match axis {
        Axis::X => nx,
        Axis::Y => ny,
        Axis::Z => nz,
    };
    if index >= limit {
        return Err(Error::InvalidArgument(format!("slice index {index} out of range for axis of length {limit}")));
    }
    Ok(match axis {
        Axis::X => (ny, nz, (0..nz).flat_map(|k| (0..ny).map(move |j| (j, k))).map(|(j, k)| vol.get(index, j, k)).collect()),
        Axis::Y => (nx, nz, (0..nz).flat_map(|k| (0..nx).map(move |i| (i, k))).map(|(i, k)| vol.get(i, index, k)).collect()),
        Axis::Z => (nx, ny, (0..ny).flat_map(|j| (0..nx).map(move |i| (i, j))).map(|(i, j)| vol.get(i, j, index)).collect()),
    })
}

/// Binary 16-bit PGM (big-endian samples), top row = highest second in-plane
/// coordinate so slices appear upright.
pub fn encode_pgm16(width: usize, height: usize, values: &[f32], low: f64, high: f64) -> Result<Vec<u8>> {
    if !(high > low) {
        return Err(Error::InvalidArgument(format!("window must satisfy low < high, got [{low}, {high}]")));
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for r in (0..height).rev() {
        for &v in &values[r * width..(r + 1) * width] {
            let t = ((v as f64 - low) / (high - low)).clamp(0.0, 1.0);
            out.extend_from_slice(&((t * 65535.0).round() as u16).to_be_bytes());
        }
    }
    Ok(out)
}

pub fn write_slice(path: &Path, vol: &Volume, axis: Axis, index: usize, window: (f64, f64)) -> Result<SliceHeader> {
    let (width, height, values) = extract_slice(vol, axis, index)?;
    let bytes = encode_pgm16(width, height, &values, window.0, window.1)?;
    let header = SliceHeader {
        axis,
        index,
        width,
        height,
        window_low: window.0,
        window_high: window.1,
        maxval: u16::MAX,
    };
    atomic_write(path, &bytes)?;
    write_json(&sidecar(path), &header)?;
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_window() {
        let bytes = encode_pgm16(2, 1, &[0.0, 2.0], 0.0, 1.0).unwrap();
        let head = b"P5\n2 1\n65535\n";
        assert_eq!(&bytes[..head.len()], head);
        assert_eq!(&bytes[head.len()..], &[0, 0, 0xff, 0xff]);
        assert!(encode_pgm16(1, 1, &[0.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn slice_orientation() {
        let extent = VolumeExtent::cube(1.0, 3).unwrap();
        let vol = Volume::from_fn(extent, |i, j, k| (i + 10 * j + 100 * k) as f32);
        let (w, h, v) = extract_slice(&vol, Axis::Z, 2).unwrap();
        assert_eq!((w, h), (3, 3));
        assert_eq!(v[1 + 3 * 2], 221.0);
        let (_, _, v) = extract_slice(&vol, Axis::X, 1).unwrap();
        assert_eq!(v[2 + 3], 121.0);
        assert!(extract_slice(&vol, Axis::Y, 3).is_err());
    }
}
