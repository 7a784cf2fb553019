//! Volume file formats: single-file NIfTI-1 (`.nii`, `.nii.gz`) and a raw
//! little-endian array with a JSON sidecar (`.raw` + `.json`).
//!
//! CT intensities are stored as signed 16-bit HU; the NIfTI reader honours
//! `scl_slope`/`scl_inter` and accepts any common integer or float datatype.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{CtVolume, LabelVolume, PathologyLabel};

const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Uint8,
    Int16,
    Float32,
}

impl DType {
    fn nifti_code(self) -> i16 {
        match self {
            DType::Uint8 => 2,
            DType::Int16 => 4,
            DType::Float32 => 16,
        }
    }

    fn bits(self) -> i16 {
        match self {
            DType::Uint8 => 8,
            DType::Int16 => 16,
            DType::Float32 => 32,
        }
    }
}

/// Sidecar document for `.raw` volumes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawSidecar {
    pub shape: [usize; 3],
    pub spacing: Option<[f64; 3]>,
    #[serde(default)]
    pub origin: [f64; 3],
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    /// Free text, the counterpart of the NIfTI `descrip` field.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

fn default_dtype() -> DType {
    DType::Int16
}

/// Decoded voxel data before any interpretation, (z, y, x) order.
struct RawGrid {
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    values: Vec<f64>,
}

enum Format {
    Nifti { gz: bool },
    Raw,
}

fn format_of(path: &Path) -> Result<Format> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if name.ends_with(".nii.gz") {
        Ok(Format::Nifti { gz: true })
    } else if name.ends_with(".nii") {
        Ok(Format::Nifti { gz: false })
    } else if name.ends_with(".raw") {
        Ok(Format::Raw)
    } else {
        Err(Error::invalid(format!(
            "unsupported volume format: {} (expected .nii, .nii.gz or .raw)",
            path.display()
        )))
    }
}

pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

fn unreadable(path: &Path, reason: impl std::fmt::Display) -> Error {
    Error::Unreadable {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

/// Loads a CT volume in HU.
pub fn load_volume(path: &Path) -> Result<CtVolume> {
    let grid = read_grid(path)?;
    let values =
        Array3::from_shape_vec(grid.shape, grid.values).map_err(|e| unreadable(path, e))?;
    CtVolume::from_real(values, grid.spacing, grid.origin)
}

pub fn save_volume(path: &Path, v: &CtVolume) -> Result<()> {
    let values: Vec<f64> = v.voxels().iter().map(|&h| h as f64).collect();
    write_grid(
        path,
        v.shape(),
        v.spacing(),
        v.origin(),
        DType::Int16,
        &values,
    )
}

pub fn load_labels(path: &Path) -> Result<(LabelVolume, [f64; 3], [f64; 3])> {
    let grid = read_grid(path)?;
    let mut labels = Vec::with_capacity(grid.values.len());
    for v in &grid.values {
        let l = PathologyLabel::from_index(v.round() as usize)
            .filter(|_| *v >= 0.0)
            .ok_or_else(|| unreadable(path, format!("invalid label value {v}")))?;
        labels.push(l);
    }
    let labels = Array3::from_shape_vec(grid.shape, labels).map_err(|e| unreadable(path, e))?;
    Ok((labels, grid.spacing, grid.origin))
}

pub fn save_labels(
    path: &Path,
    labels: &LabelVolume,
    spacing: [f64; 3],
    origin: [f64; 3],
) -> Result<()> {
    let d = labels.dim();
    let values: Vec<f64> = labels.iter().map(|l| l.index() as f64).collect();
    write_grid(
        path,
        [d.0, d.1, d.2],
        spacing,
        origin,
        DType::Uint8,
        &values,
    )
}

pub fn save_real(
    path: &Path,
    values: &Array3<f64>,
    spacing: [f64; 3],
    origin: [f64; 3],
) -> Result<()> {
    let d = values.dim();
    let flat: Vec<f64> = values.iter().copied().collect();
    write_grid(
        path,
        [d.0, d.1, d.2],
        spacing,
        origin,
        DType::Float32,
        &flat,
    )
}

pub fn load_real(path: &Path) -> Result<(Array3<f64>, [f64; 3], [f64; 3])> {
    let grid = read_grid(path)?;
    let values =
        Array3::from_shape_vec(grid.shape, grid.values).map_err(|e| unreadable(path, e))?;
    Ok((values, grid.spacing, grid.origin))
}

const NIFTI_DESCRIP: std::ops::Range<usize> = 148..228;

fn read_nifti_bytes(path: &Path, gz: bool) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| unreadable(path, e))?;
    if !gz {
        return Ok(bytes);
    }
    let mut out = Vec::new();
    GzDecoder::new(&bytes[..])
        .read_to_end(&mut out)
        .map_err(|e| unreadable(path, e))?;
    Ok(out)
}

fn write_nifti_bytes(path: &Path, gz: bool, bytes: &[u8]) -> Result<()> {
    if gz {
        let mut enc = GzEncoder::new(fs::File::create(path)?, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

/// Stores up to 79 bytes of text in an existing volume file: the NIfTI
/// `descrip` field, or the `description` entry of a raw sidecar.
pub fn set_description(path: &Path, text: &str) -> Result<()> {
    match format_of(path)? {
        Format::Nifti { gz } => {
            let mut bytes = read_nifti_bytes(path, gz)?;
            if bytes.len() < NIFTI_HEADER_LEN {
                return Err(unreadable(path, "file too small"));
            }
            let field = &mut bytes[NIFTI_DESCRIP];
            field.fill(0);
            let n = text.len().min(field.len() - 1);
            field[..n].copy_from_slice(&text.as_bytes()[..n]);
            write_nifti_bytes(path, gz, &bytes)
        }
        Format::Raw => {
            let side = sidecar_path(path);
            let text_json = fs::read_to_string(&side).map_err(|e| unreadable(&side, e))?;
            let mut meta: RawSidecar =
                serde_json::from_str(&text_json).map_err(|e| unreadable(&side, e))?;
            meta.description = Some(text.to_string());
            fs::write(&side, serde_json::to_vec_pretty(&meta)?)?;
            Ok(())
        }
    }
}

/// Reads the text written by [`set_description`]; empty is `None`.
pub fn description(path: &Path) -> Result<Option<String>> {
    match format_of(path)? {
        Format::Nifti { gz } => {
            let bytes = read_nifti_bytes(path, gz)?;
            if bytes.len() < NIFTI_HEADER_LEN {
                return Err(unreadable(path, "file too small"));
            }
            let field = &bytes[NIFTI_DESCRIP];
            let end = field.iter().position(|&b| b == 0).unwrap_or(field.len());
            let s = String::from_utf8_lossy(&field[..end]).into_owned();
            Ok((!s.is_empty()).then_some(s))
        }
        Format::Raw => {
            let side = sidecar_path(path);
            let text = fs::read_to_string(&side).map_err(|e| unreadable(&side, e))?;
            let meta: RawSidecar = serde_json::from_str(&text).map_err(|e| unreadable(&side, e))?;
            Ok(meta.description)
        }
    }
}

fn read_grid(path: &Path) -> Result<RawGrid> {
    match format_of(path)? {
        Format::Nifti { gz } => {
            let bytes = read_nifti_bytes(path, gz)?;
            parse_nifti(path, &bytes)
        }
        Format::Raw => read_raw(path),
    }
}

fn write_grid(
    path: &Path,
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: DType,
    values: &[f64],
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    match format_of(path)? {
        Format::Nifti { gz } => {
            let bytes = encode_nifti(shape, spacing, origin, dtype, values);
            write_nifti_bytes(path, gz, &bytes)?;
        }
        Format::Raw => {
            fs::write(path, encode_samples(dtype, values, true))?;
            let sidecar = RawSidecar {
                shape,
                spacing: Some(spacing),
                origin,
                dtype,
                description: None,
            };
            fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
        }
    }
    Ok(())
}

fn encode_samples(dtype: DType, values: &[f64], little: bool) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * (dtype.bits() as usize / 8));
    for &v in values {
        match dtype {
            DType::Uint8 => out.push(v.round().clamp(0.0, 255.0) as u8),
            DType::Int16 => {
                let x = v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
                out.extend_from_slice(&if little {
                    x.to_le_bytes()
                } else {
                    x.to_be_bytes()
                });
            }
            DType::Float32 => {
                let x = v as f32;
                out.extend_from_slice(&if little {
                    x.to_le_bytes()
                } else {
                    x.to_be_bytes()
                });
            }
        }
    }
    out
}

fn read_raw(path: &Path) -> Result<RawGrid> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| unreadable(&side, e))?;
    let meta: RawSidecar = serde_json::from_str(&text).map_err(|e| unreadable(&side, e))?;
    let spacing = meta
        .spacing
        .ok_or_else(|| Error::MissingSpacing(side.display().to_string()))?;
    let bytes = fs::read(path).map_err(|e| unreadable(path, e))?;
    let n: usize = meta.shape.iter().product();
    let width = meta.dtype.bits() as usize / 8;
    if bytes.len() != n * width {
        return Err(unreadable(
            path,
            format!(
                "expected {} bytes for shape {:?}, found {}",
                n * width,
                meta.shape,
                bytes.len()
            ),
        ));
    }
    let values = decode_samples(&bytes, meta.dtype.nifti_code(), true, n)
        .ok_or_else(|| unreadable(path, "could not decode samples"))?;
    Ok(RawGrid {
        shape: meta.shape,
        spacing,
        origin: meta.origin,
        values,
    })
}

fn decode_samples(bytes: &[u8], datatype: i16, little: bool, n: usize) -> Option<Vec<f64>> {
    macro_rules! decode {
        ($t:ty, $w:expr) => {{
            if bytes.len() < n * $w {
                return None;
            }
            bytes[..n * $w]
                .chunks_exact($w)
                .map(|c| {
                    let arr: [u8; $w] = c.try_into().unwrap();
                    (if little {
                        <$t>::from_le_bytes(arr)
                    } else {
                        <$t>::from_be_bytes(arr)
                    }) as f64
                })
                .collect()
        }};
    }
    Some(match datatype {
        2 => {
            if bytes.len() < n {
                return None;
            }
            bytes[..n].iter().map(|&b| b as f64).collect()
        }
        256 => {
            if bytes.len() < n {
                return None;
            }
            bytes[..n].iter().map(|&b| b as i8 as f64).collect()
        }
        4 => decode!(i16, 2),
        512 => decode!(u16, 2),
        8 => decode!(i32, 4),
        768 => decode!(u32, 4),
        16 => decode!(f32, 4),
        64 => decode!(f64, 8),
        _ => return None,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    little: bool,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.little {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    }

    /// Widens through the shortest decimal form so 0.6f32 reads back as 0.6.
    fn f32_decimal(&self, off: usize) -> f64 {
        let v = self.f32(off);
        v.to_string().parse().unwrap_or(v as f64)
    }
}

fn parse_nifti(path: &Path, bytes: &[u8]) -> Result<RawGrid> {
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(unreadable(
            path,
            format!("file too small ({} bytes)", bytes.len()),
        ));
    }
    let size_le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let size_be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let little = match (size_le, size_be) {
        (348, _) => true,
        (_, 348) => false,
        _ => return Err(unreadable(path, "not a NIfTI-1 header")),
    };
    if &bytes[344..347] != b"n+1" {
        return Err(unreadable(
            path,
            "only single-file NIfTI-1 (n+1) is supported",
        ));
    }
    let r = Reader { bytes, little };
    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(unreadable(path, format!("invalid dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        if (i as i16) < ndim {
            let v = r.i16(42 + 2 * i);
            if v < 1 {
                return Err(unreadable(path, format!("invalid dim[{}] = {v}", i + 1)));
            }
            *d = v as usize;
        }
    }
    for i in 3..ndim as usize {
        if r.i16(42 + 2 * i) > 1 {
            return Err(unreadable(path, "only 3D volumes are supported"));
        }
    }
    let datatype = r.i16(70);
    let mut spacing_xyz = [0.0f64; 3];
    for (i, s) in spacing_xyz.iter_mut().enumerate() {
        *s = r.f32_decimal(80 + 4 * i);
    }
    if spacing_xyz.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::MissingSpacing(path.display().to_string()));
    }
    let vox_offset = r.f32(108);
    if !(vox_offset >= NIFTI_HEADER_LEN as f32) {
        return Err(unreadable(path, format!("invalid vox_offset {vox_offset}")));
    }
    let mut slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let inter = if inter.is_finite() { inter } else { 0.0 };
    let origin_xyz = [r.f32_decimal(268), r.f32_decimal(272), r.f32_decimal(276)];

    let n = dims[0] * dims[1] * dims[2];
    let data = &bytes[vox_offset as usize..];
    let mut values = decode_samples(data, datatype, little, n).ok_or_else(|| {
        unreadable(
            path,
            format!("truncated data or unsupported datatype {datatype} for {n} voxels"),
        )
    })?;
    for v in values.iter_mut() {
        *v = *v * slope + inter;
    }
    // NIfTI stores x fastest, which is (z, y, x) C order.
    Ok(RawGrid {
        shape: [dims[2], dims[1], dims[0]],
        spacing: [spacing_xyz[2], spacing_xyz[1], spacing_xyz[0]],
        origin: [origin_xyz[2], origin_xyz[1], origin_xyz[0]],
        values,
    })
}

fn encode_nifti(
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: DType,
    values: &[f64],
) -> Vec<u8> {
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    let put_i16 =
        |h: &mut Vec<u8>, off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 =
        |h: &mut Vec<u8>, off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    h[38] = b'r';
    let xyz = [shape[2], shape[1], shape[0]];
    put_i16(&mut h, 40, 3);
    for (i, d) in xyz.iter().enumerate() {
        put_i16(&mut h, 42 + 2 * i, *d as i16);
    }
    for i in 3..7 {
        put_i16(&mut h, 42 + 2 * i, 1);
    }
    put_i16(&mut h, 70, dtype.nifti_code());
    put_i16(&mut h, 72, dtype.bits());
    put_f32(&mut h, 76, 1.0);
    let sp = [spacing[2], spacing[1], spacing[0]];
    for (i, s) in sp.iter().enumerate() {
        put_f32(&mut h, 80 + 4 * i, *s as f32);
    }
    put_f32(&mut h, 108, NIFTI_VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 2; // mm
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    let org = [origin[2], origin[1], origin[0]];
    for (i, o) in org.iter().enumerate() {
        put_f32(&mut h, 268 + 4 * i, *o as f32);
    }
    for row in 0..3 {
        put_f32(&mut h, 280 + 16 * row + 4 * row, sp[row] as f32);
        put_f32(&mut h, 280 + 16 * row + 12, org[row] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h.extend(encode_samples(dtype, values, true));
    h
}

/// Writes rows of `(origin, values)` as CSV with the given column names.
pub fn write_matrix_csv(
    path: &Path,
    columns: &[String],
    rows: impl IntoIterator<Item = ([usize; 3], Vec<f64>)>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["origin_z".to_string(), "origin_y".into(), "origin_x".into()];
    header.extend(columns.iter().cloned());
    w.write_record(&header)?;
    for (o, vals) in rows {
        let mut rec: Vec<String> = o.iter().map(|v| v.to_string()).collect();
        rec.extend(vals.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
