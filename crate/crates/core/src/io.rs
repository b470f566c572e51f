//! Volume persistence: the native `.vkv.json` + `.vkv.raw` pair, read-only
//! uncompressed MetaImage, and 8-bit grayscale PNG output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::volume::{checked_len, Dims, VesselMask, Volume3D};

pub const NATIVE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    U8,
    I16,
    U16,
    F32,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            ElementType::U8 => 1,
            ElementType::I16 | ElementType::U16 => 2,
            ElementType::F32 => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    Little,
    Big,
}

/// Native sidecar contents. Field order is the on-disk key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NativeHeader {
    pub format: String,
    pub version: u32,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub element_type: ElementType,
    pub endianness: Endianness,
    pub payload: String,
}

/// Decoded payload before conversion to a volume or mask.
struct RawVolume {
    dims: Dims,
    spacing: [f64; 3],
    element_type: ElementType,
    big_endian: bool,
    bytes: Vec<u8>,
}

impl RawVolume {
    fn values(&self) -> Vec<f32> {
        let b = &self.bytes;
        let be = self.big_endian;
        match self.element_type {
            ElementType::U8 => b.iter().map(|&v| v as f32).collect(),
            ElementType::I16 => b
                .chunks_exact(2)
                .map(|c| {
                    let a = [c[0], c[1]];
                    (if be { i16::from_be_bytes(a) } else { i16::from_le_bytes(a) }) as f32
                })
                .collect(),
            ElementType::U16 => b
                .chunks_exact(2)
                .map(|c| {
                    let a = [c[0], c[1]];
                    (if be { u16::from_be_bytes(a) } else { u16::from_le_bytes(a) }) as f32
                })
                .collect(),
            ElementType::F32 => b
                .chunks_exact(4)
                .map(|c| {
                    let a = [c[0], c[1], c[2], c[3]];
                    if be {
                        f32::from_be_bytes(a)
                    } else {
                        f32::from_le_bytes(a)
                    }
                })
                .collect(),
        }
    }
}

/// `(sidecar, payload)` paths for a native file named by `path`.
///
/// `a/b.vkv.json` and `a/b` both map to `a/b.vkv.json` + `a/b.vkv.raw`.
pub fn native_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let base = s
        .strip_suffix(".vkv.json")
        .or_else(|| s.strip_suffix(".vkv.raw"))
        .or_else(|| s.strip_suffix(".json"))
        .unwrap_or(&s)
        .to_string();
    (PathBuf::from(format!("{base}.vkv.json")), PathBuf::from(format!("{base}.vkv.raw")))
}

fn write_native(
    path: &Path,
    dims: Dims,
    spacing: [f64; 3],
    element_type: ElementType,
    bytes: &[u8],
) -> Result<PathBuf> {
    let (json_path, raw_path) = native_paths(path);
    let header = NativeHeader {
        format: "vkv".into(),
        version: NATIVE_VERSION,
        dims,
        spacing,
        element_type,
        endianness: Endianness::Little,
        payload: raw_path.file_name().expect("payload has a file name").to_string_lossy().into(),
    };
    let mut text = serde_json::to_string_pretty(&header)?;
    text.push('\n');
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    write_file(&raw_path, bytes)?;
    write_file(&json_path, text.as_bytes())?;
    Ok(json_path)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    f.write_all(bytes).map_err(|e| CoreError::io(path, e))?;
    f.sync_all().map_err(|e| CoreError::io(path, e))
}

/// Writes `vol` as 32-bit little-endian floats. Returns the sidecar path.
pub fn write_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<PathBuf> {
    let bytes: Vec<u8> = vol.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_native(path.as_ref(), vol.dims(), vol.spacing(), ElementType::F32, &bytes)
}

/// Writes `mask` as one byte (0/1) per voxel. Returns the sidecar path.
pub fn write_mask(mask: &VesselMask, path: impl AsRef<Path>) -> Result<PathBuf> {
    write_mask_with_spacing(mask, [1.0; 3], path)
}

pub fn write_mask_with_spacing(
    mask: &VesselMask,
    spacing: [f64; 3],
    path: impl AsRef<Path>,
) -> Result<PathBuf> {
    write_native(path.as_ref(), mask.dims(), spacing, ElementType::U8, mask.data())
}

/// Writes a `k1 x k2` slice-index map as a 16-bit volume with one slice.
pub fn write_index_map(map: &[usize], k1: usize, k2: usize, path: impl AsRef<Path>) -> Result<PathBuf> {
    if map.len() != k1 * k2 {
        return Err(CoreError::DimensionMismatch(format!(
            "index map of {} entries for {k1}x{k2}",
            map.len()
        )));
    }
    let mut bytes = Vec::with_capacity(map.len() * 2);
    for &z in map {
        let z = u16::try_from(z)
            .map_err(|_| CoreError::Corruption(format!("slice index {z} exceeds 16 bits")))?;
        bytes.extend(z.to_le_bytes());
    }
    write_native(path.as_ref(), [k1, k2, 1], [1.0; 3], ElementType::U16, &bytes)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let raw = read_raw(path.as_ref())?;
    Volume3D::new(raw.dims, raw.spacing, raw.values())
}

/// Reads a mask; any element type is accepted as long as every value is 0 or 1.
pub fn read_mask(path: impl AsRef<Path>) -> Result<VesselMask> {
    let raw = read_raw(path.as_ref())?;
    let data: Vec<u8> = match raw.element_type {
        ElementType::U8 => raw.bytes,
        _ => raw
            .values()
            .into_iter()
            .map(|v| if v == 0.0 { 0 } else if v == 1.0 { 1 } else { 2 })
            .collect(),
    };
    VesselMask::new(raw.dims, data)
}

fn read_raw(path: &Path) -> Result<RawVolume> {
    let header_path = if path.exists() { path.to_path_buf() } else { native_paths(path).0 };
    let bytes = fs::read(&header_path).map_err(|e| CoreError::io(&header_path, e))?;
    let first = bytes.iter().find(|b| !b.is_ascii_whitespace()).copied();
    if first == Some(b'{') {
        return read_native(&header_path, &bytes);
    }
    let head = String::from_utf8_lossy(&bytes[..bytes.len().min(4096)]);
    let looks_meta = head
        .lines()
        .take(64)
        .any(|l| l.split('=').next().map(str::trim) == Some("NDims"));
    if looks_meta {
        return read_metaimage(&header_path, &bytes);
    }
    Err(CoreError::UnknownFormat(format!(
        "{}: neither a native sidecar nor a MetaImage header",
        header_path.display()
    )))
}

fn payload_len(dims: &[u64], element: ElementType) -> Result<(Dims, usize)> {
    let overflow = || CoreError::DimensionOverflow(dims.to_vec());
    let n = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(element.size() as u64))
        .ok_or_else(overflow)?;
    let n = usize::try_from(n).map_err(|_| overflow())?;
    let mut d = [0usize; 3];
    for (i, &v) in dims.iter().enumerate() {
        d[i] = usize::try_from(v).map_err(|_| overflow())?;
    }
    checked_len(d)?;
    Ok((d, n))
}

fn read_native(path: &Path, bytes: &[u8]) -> Result<RawVolume> {
    let header: NativeHeader = serde_json::from_slice(bytes)
        .map_err(|e| CoreError::Header(format!("{}: {e}", path.display())))?;
    if header.format != "vkv" {
        return Err(CoreError::UnknownFormat(format!("format tag {:?}", header.format)));
    }
    if header.version != NATIVE_VERSION {
        return Err(CoreError::Header(format!("unsupported version {}", header.version)));
    }
    let dims64 = header.dims.map(|d| d as u64);
    let (dims, expected) = payload_len(&dims64, header.element_type)?;
    let raw_path = path.parent().unwrap_or(Path::new("")).join(&header.payload);
    let payload = fs::read(&raw_path).map_err(|e| CoreError::io(&raw_path, e))?;
    if payload.len() != expected {
        return Err(CoreError::Truncated { expected: expected as u64, found: payload.len() as u64 });
    }
    Ok(RawVolume {
        dims,
        spacing: header.spacing,
        element_type: header.element_type,
        big_endian: header.endianness == Endianness::Big,
        bytes: payload,
    })
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| CoreError::Header(format!("{key}: cannot parse {t:?}"))))
        .collect()
}

fn parse_bool(value: &str) -> bool {
    matches!(value.to_ascii_lowercase().as_str(), "true" | "1" | "yes")
}

/// Uncompressed MetaImage. `DimSize = d0 d1 d2` maps to dims `(d1, d0, d2)`:
/// the file's fastest axis is our in-row axis.
fn read_metaimage(path: &Path, bytes: &[u8]) -> Result<RawVolume> {
    let mut ndims = None;
    let mut size: Option<Vec<u64>> = None;
    let mut spacing: Option<Vec<f64>> = None;
    let mut element = None;
    let mut data_file = None;
    let mut big_endian = false;
    let mut header_size: i64 = 0;
    let mut header_end = bytes.len();
    let mut offset = 0usize;
    for line in bytes.split_inclusive(|&b| b == b'\n') {
        offset += line.len();
        let text = String::from_utf8_lossy(line);
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        let (key, value) = text
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| CoreError::Header(format!("line without '=': {text:?}")))?;
        match key {
            "NDims" => {
                ndims = Some(
                    value.parse::<usize>().map_err(|_| CoreError::Header(format!("NDims {value:?}")))?,
                )
            }
            "DimSize" => size = Some(parse_list(key, value)?),
            "ElementSpacing" => spacing = Some(parse_list(key, value)?),
            "ElementSize" if spacing.is_none() => spacing = Some(parse_list(key, value)?),
            "ElementType" => {
                element = Some(match value {
                    "MET_UCHAR" => ElementType::U8,
                    "MET_SHORT" => ElementType::I16,
                    "MET_USHORT" => ElementType::U16,
                    "MET_FLOAT" => ElementType::F32,
                    other => {
                        return Err(CoreError::Header(format!("unsupported ElementType {other}")))
                    }
                })
            }
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => big_endian = parse_bool(value),
            "CompressedData" if parse_bool(value) => return Err(CoreError::CompressedUnsupported),
            "HeaderSize" => {
                header_size =
                    value.parse().map_err(|_| CoreError::Header(format!("HeaderSize {value:?}")))?
            }
            "ElementDataFile" => {
                data_file = Some(value.to_string());
                header_end = offset;
                break;
            }
            _ => {}
        }
    }
    let ndims = ndims.ok_or_else(|| CoreError::Header("missing NDims".into()))?;
    if !(2..=3).contains(&ndims) {
        return Err(CoreError::Header(format!("NDims {ndims} (only 2 or 3 supported)")));
    }
    let size = size.ok_or_else(|| CoreError::Header("missing DimSize".into()))?;
    if size.len() != ndims {
        return Err(CoreError::Header(format!("DimSize has {} entries for NDims {ndims}", size.len())));
    }
    let element = element.ok_or_else(|| CoreError::Header("missing ElementType".into()))?;
    let data_file = data_file.ok_or_else(|| CoreError::Header("missing ElementDataFile".into()))?;
    let sp = spacing.unwrap_or_else(|| vec![1.0; ndims]);
    if sp.len() != ndims {
        return Err(CoreError::Header(format!("spacing has {} entries for NDims {ndims}", sp.len())));
    }
    let file_dims = [size[0], size[1], if ndims == 3 { size[2] } else { 1 }];
    let file_sp = [sp[0], sp[1], if ndims == 3 { sp[2] } else { 1.0 }];
    let (_, expected) = payload_len(&file_dims, element)?;
    let dims = [file_dims[1] as usize, file_dims[0] as usize, file_dims[2] as usize];
    let spacing = [file_sp[1], file_sp[0], file_sp[2]];

    let data: Vec<u8> = if data_file == "LOCAL" {
        bytes[header_end..].to_vec()
    } else {
        let p = path.parent().unwrap_or(Path::new("")).join(&data_file);
        fs::read(&p).map_err(|e| CoreError::io(&p, e))?
    };
    let start = if header_size < 0 {
        data.len().saturating_sub(expected)
    } else {
        header_size as usize
    };
    let available = data.len().saturating_sub(start);
    if available < expected {
        return Err(CoreError::Truncated { expected: expected as u64, found: available as u64 });
    }
    Ok(RawVolume {
        dims,
        spacing,
        element_type: element,
        big_endian,
        bytes: data[start..start + expected].to_vec(),
    })
}

/// Linear map of `[lo, hi]` onto `0..=255`, clamped, rounding to nearest.
pub fn window_to_u8(values: &[f32], lo: f32, hi: f32) -> Vec<u8> {
    let range = hi - lo;
    values
        .iter()
        .map(|&v| {
            if !(range > 0.0) {
                return if v > lo { 255 } else { 0 };
            }
            let t = ((v - lo) / range).clamp(0.0, 1.0);
            (t * 255.0).round() as u8
        })
        .collect()
}

/// Encodes a `height x width` row-major grayscale image.
pub fn encode_png_gray8(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(CoreError::DimensionMismatch(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| CoreError::Png(e.to_string()))?;
        writer.write_image_data(pixels).map_err(|e| CoreError::Png(e.to_string()))?;
        writer.finish().map_err(|e| CoreError::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png_gray8(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let bytes = encode_png_gray8(width, height, pixels)?;
    write_file(path.as_ref(), &bytes)
}

/// Decodes an 8-bit grayscale PNG into `(width, height, pixels)`.
pub fn decode_png_gray8(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| CoreError::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| CoreError::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(CoreError::Png(format!("{:?}/{:?} is not 8-bit gray", info.color_type, info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}
