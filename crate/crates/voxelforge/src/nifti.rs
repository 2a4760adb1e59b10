//! Uncompressed NIfTI-1 volumes, single-file (`.nii`) or header/image pair
//! (`.hdr` + `.img`).
//!
//! Axis convention: on disk `dim[1]` varies fastest. It is read as the depth
//! axis, `dim[2]` as height and `dim[3]` as width, so a volume with extents
//! `[d, h, w]` is stored with `dim = [3, d, h, w]` and spacing
//! `pixdim[1..=3]` in the same order. This matches the KiTS files, whose
//! first axis is the slice axis. Orientation matrices are written as a plain
//! diagonal and ignored on read.

use std::fs;
use std::path::{Path, PathBuf};

use voxelforge_core::volume::{Volume, VolumeKind};

use crate::error::{Error, IoContext, Result};
use crate::fsutil::write_atomic;

pub const HEADER_SIZE: usize = 348;
/// Data offset of files this module writes: header plus the 4-byte extension flag.
const SINGLE_FILE_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl Datatype {
    pub const ALL: [Datatype; 5] = [Datatype::U8, Datatype::I16, Datatype::I32, Datatype::F32, Datatype::F64];

    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::I32 => 8,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::U8,
            4 => Datatype::I16,
            8 => Datatype::I32,
            16 => Datatype::F32,
            64 => Datatype::F64,
            other => {
                return Err(Error::UnsupportedFormat(format!(
                    "NIfTI datatype code {other} (supported: 2, 4, 8, 16, 64)"
                )))
            }
        })
    }

    pub fn size(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::F32 | Datatype::I32 => 4,
            Datatype::F64 => 8,
        }
    }

    /// Inclusive range of exactly representable integers, `None` for floats.
    fn integer_range(self) -> Option<(f64, f64)> {
        match self {
            Datatype::U8 => Some((0.0, u8::MAX as f64)),
            Datatype::I16 => Some((i16::MIN as f64, i16::MAX as f64)),
            Datatype::I32 => Some((i32::MIN as f64, i32::MAX as f64)),
            Datatype::F32 | Datatype::F64 => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ByteOrder {
    Little,
    Big,
}

impl ByteOrder {
    fn native() -> Self {
        if cfg!(target_endian = "big") {
            ByteOrder::Big
        } else {
            ByteOrder::Little
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Magic {
    /// `n+1`: header and data in one file.
    Single,
    /// `ni1`: header in `.hdr`, data in `.img`.
    Pair,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub byte_order: ByteOrder,
    /// `dim[1..=3]`.
    pub dims: [usize; 3],
    /// `pixdim[1..=3]`, always positive.
    pub spacing: [f32; 3],
    pub datatype: Datatype,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub vox_offset: usize,
    pub magic: Magic,
}

impl NiftiHeader {
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data_len(&self) -> usize {
        self.voxels() * self.datatype.size()
    }

    /// True when stored values go through `slope * v + inter` on read.
    pub fn is_scaled(&self) -> bool {
        self.scl_slope != 0.0 && self.scl_slope.is_finite()
    }
}

struct Fields<'a> {
    bytes: &'a [u8],
    order: ByteOrder,
}

impl Fields<'_> {
    fn take<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.bytes[at..at + N].try_into().unwrap();
        if self.order != ByteOrder::native() {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_ne_bytes(self.take(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_ne_bytes(self.take(at))
    }
}

/// Parses the first 348 bytes of a NIfTI-1 header. The byte order is
/// whichever makes `sizeof_hdr` read 348.
pub fn parse_nifti_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        return Err(Error::UnsupportedFormat(
            "gzip-compressed NIfTI; decompress it first (e.g. `gunzip -k`)".into(),
        ));
    }
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!(
            "NIfTI header needs {HEADER_SIZE} bytes, got {}",
            bytes.len()
        )));
    }
    let raw: [u8; 4] = bytes[0..4].try_into().unwrap();
    let order = if i32::from_le_bytes(raw) == HEADER_SIZE as i32 {
        ByteOrder::Little
    } else if i32::from_be_bytes(raw) == HEADER_SIZE as i32 {
        ByteOrder::Big
    } else {
        return Err(Error::Format(format!(
            "sizeof_hdr is {} (neither byte order gives 348)",
            i32::from_le_bytes(raw)
        )));
    };
    let f = Fields { bytes, order };

    let magic = match &bytes[344..348] {
        m if m == MAGIC_SINGLE => Magic::Single,
        m if m == MAGIC_PAIR => Magic::Pair,
        m => return Err(Error::Format(format!("bad NIfTI-1 magic {:?}", m))),
    };

    let dim: Vec<i16> = (0..8).map(|i| f.i16(40 + 2 * i)).collect();
    let rank = dim[0];
    if !(1..=7).contains(&rank) {
        return Err(Error::Format(format!("dim[0] = {rank} is outside 1..=7")));
    }
    let rank = rank as usize;
    let mut dims = [1usize; 3];
    for (axis, d) in dims.iter_mut().enumerate() {
        if axis < rank {
            let v = dim[axis + 1];
            if v < 1 {
                return Err(Error::Format(format!("dim[{}] = {v}", axis + 1)));
            }
            *d = v as usize;
        }
    }
    if let Some(extra) = (4..=rank).find(|&i| dim[i] > 1) {
        return Err(Error::UnsupportedFormat(format!(
            "only 3D volumes are supported, dim[{extra}] = {}",
            dim[extra]
        )));
    }

    let datatype = Datatype::from_code(f.i16(70))?;
    let bitpix = f.i16(72);
    if bitpix as usize != 8 * datatype.size() {
        return Err(Error::Format(format!(
            "bitpix {bitpix} does not match datatype code {}",
            datatype.code()
        )));
    }

    let mut spacing = [0f32; 3];
    for (axis, s) in spacing.iter_mut().enumerate() {
        let v = f.f32(76 + 4 * (axis + 1)).abs();
        if axis >= rank {
            *s = if v > 0.0 && v.is_finite() { v } else { 1.0 };
            continue;
        }
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Format(format!(
                "pixdim[{}] = {v} is not a usable spacing",
                axis + 1
            )));
        }
        *s = v;
    }

    let vox_offset = f.f32(108);
    if !(vox_offset >= 0.0 && vox_offset.is_finite() && vox_offset.fract() == 0.0) {
        return Err(Error::Format(format!("vox_offset {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;
    if magic == Magic::Single && vox_offset < HEADER_SIZE {
        return Err(Error::Format(format!("vox_offset {vox_offset} overlaps the header")));
    }

    Ok(NiftiHeader {
        byte_order: order,
        dims,
        spacing,
        datatype,
        scl_slope: f.f32(112),
        scl_inter: f.f32(116),
        vox_offset,
        magic,
    })
}

fn decode(header: &NiftiHeader, data: &[u8]) -> Vec<f64> {
    let size = header.datatype.size();
    let swap = header.byte_order != ByteOrder::native();
    data.chunks_exact(size)
        .map(|c| {
            let mut b = [0u8; 8];
            b[..size].copy_from_slice(c);
            if swap {
                b[..size].reverse();
            }
            match header.datatype {
                Datatype::U8 => b[0] as f64,
                Datatype::I16 => i16::from_ne_bytes([b[0], b[1]]) as f64,
                Datatype::I32 => i32::from_ne_bytes(b[..4].try_into().unwrap()) as f64,
                Datatype::F32 => f32::from_ne_bytes(b[..4].try_into().unwrap()) as f64,
                Datatype::F64 => f64::from_ne_bytes(b),
            }
        })
        .collect()
}

/// `dim[1]`-fastest file order to row-major `[d, h, w]`.
fn file_to_volume_order(values: &[f64], [d, h, w]: [usize; 3]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for k in 0..w {
        for j in 0..h {
            for i in 0..d {
                out[(i * h + j) * w + k] = values[i + d * (j + h * k)];
            }
        }
    }
    out
}

fn volume_to_file_order(values: &[f64], [d, h, w]: [usize; 3]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for k in 0..w {
        for j in 0..h {
            for i in 0..d {
                out[i + d * (j + h * k)] = values[(i * h + j) * w + k];
            }
        }
    }
    out
}

fn image_path_for(header_path: &Path) -> PathBuf {
    header_path.with_extension("img")
}

/// Decodes a NIfTI-1 volume held in memory. For `ni1` pairs the image bytes
/// are passed separately.
pub fn decode_volume(header_bytes: &[u8], image_bytes: Option<&[u8]>, kind: VolumeKind) -> Result<Volume> {
    let header = parse_nifti_header(header_bytes)?;
    let source = match (header.magic, image_bytes) {
        (Magic::Single, _) => header_bytes,
        (Magic::Pair, Some(img)) => img,
        (Magic::Pair, None) => {
            return Err(Error::Format("ni1 header without a separate image file".into()));
        }
    };
    let end = header.vox_offset + header.data_len();
    if source.len() < end {
        return Err(Error::Format(format!(
            "truncated data section: need {} bytes from offset {}, file has {}",
            header.data_len(),
            header.vox_offset,
            source.len().saturating_sub(header.vox_offset)
        )));
    }
    let mut values = decode(&header, &source[header.vox_offset..end]);
    if header.is_scaled() {
        let (slope, inter) = (header.scl_slope as f64, header.scl_inter as f64);
        for v in &mut values {
            *v = slope * *v + inter;
        }
    }
    let data = file_to_volume_order(&values, header.dims);
    let spacing = header.spacing.map(f64::from);
    Ok(Volume::new(header.dims, spacing, data, kind)?)
}

/// Reads a `.nii` file, or a `.hdr` with its `.img` companion.
pub fn read_volume(path: &Path, kind: VolumeKind) -> Result<Volume> {
    let bytes = fs::read(path).at(path)?;
    let header = parse_nifti_header(&bytes)?;
    match header.magic {
        Magic::Single => decode_volume(&bytes, None, kind),
        Magic::Pair => {
            let img_path = image_path_for(path);
            let img = fs::read(&img_path).at(&img_path)?;
            decode_volume(&bytes, Some(&img), kind)
        }
    }
}

fn encode_value(v: f64, datatype: Datatype, out: &mut Vec<u8>) -> Result<()> {
    if let Some((lo, hi)) = datatype.integer_range() {
        if !(v.is_finite() && v.fract() == 0.0 && v >= lo && v <= hi) {
            return Err(Error::Range(format!(
                "{v} is not representable as datatype code {}",
                datatype.code()
            )));
        }
    }
    match datatype {
        Datatype::U8 => out.push(v as u8),
        Datatype::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
        Datatype::I32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
        Datatype::F32 => {
            if v.is_finite() && v.abs() > f32::MAX as f64 {
                return Err(Error::Range(format!("{v} overflows float32")));
            }
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Datatype::F64 => out.extend_from_slice(&v.to_le_bytes()),
    }
    Ok(())
}

/// Little-endian single-file NIfTI-1 bytes for `vol`.
pub fn encode_volume(vol: &Volume, datatype: Datatype) -> Result<Vec<u8>> {
    let dims = vol.extents();
    for &d in &dims {
        if d > i16::MAX as usize {
            return Err(Error::Range(format!("extent {d} exceeds the NIfTI-1 limit")));
        }
    }
    let spacing = vol.spacing();
    let mut h = vec![0u8; SINGLE_FILE_OFFSET];
    let put = |h: &mut Vec<u8>, at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);
    put(&mut h, 0, &(HEADER_SIZE as i32).to_le_bytes());
    let dim: [i16; 8] = [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put(&mut h, 40 + 2 * i, &d.to_le_bytes());
    }
    put(&mut h, 70, &datatype.code().to_le_bytes());
    put(&mut h, 72, &((8 * datatype.size()) as i16).to_le_bytes());
    let pixdim: [f32; 8] = [
        1.0,
        spacing[0] as f32,
        spacing[1] as f32,
        spacing[2] as f32,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        put(&mut h, 76 + 4 * i, &p.to_le_bytes());
    }
    put(&mut h, 108, &(SINGLE_FILE_OFFSET as f32).to_le_bytes());
    put(&mut h, 112, &1f32.to_le_bytes());
    put(&mut h, 116, &0f32.to_le_bytes());
    // Spatial units: millimetres.
    h[123] = 2;
    // sform_code 1 with a diagonal affine.
    put(&mut h, 254, &1i16.to_le_bytes());
    for axis in 0..3 {
        put(&mut h, 280 + 16 * axis + 4 * axis, &pixdim[axis + 1].to_le_bytes());
    }
    put(&mut h, 344, MAGIC_SINGLE);

    let file_order = volume_to_file_order(vol.data(), dims);
    h.reserve(file_order.len() * datatype.size());
    for &v in &file_order {
        encode_value(v, datatype, &mut h)?;
    }
    Ok(h)
}

/// Writes `vol` as a single-file NIfTI-1 (`n+1`) with the given on-disk type.
pub fn write_volume(vol: &Volume, path: &Path, datatype: Datatype) -> Result<()> {
    let bytes = encode_volume(vol, datatype)?;
    write_atomic(path, &bytes)
}

/// Label volumes are always stored as uint8.
pub fn write_labels(vol: &Volume, path: &Path) -> Result<()> {
    if vol.kind() != VolumeKind::Labels {
        return Err(voxelforge_core::Error::Contract("write_labels given an image volume".into()).into());
    }
    write_volume(vol, path, Datatype::U8)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(extents: [usize; 3], f: impl Fn(usize) -> f64) -> Volume {
        let n = extents.iter().product();
        Volume::image(extents, [2.5, 0.75, 0.8], (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn swapped_sizeof_hdr_value() {
        // 348 = 0x0000015C; reversed bytes give 0x5C010000.
        let swapped = u32::from_be_bytes(348u32.to_le_bytes());
        assert_eq!(swapped, 0x5C01_0000);
        assert_eq!(swapped, 1_543_569_408);
    }

    #[test]
    fn header_fields_round_trip() {
        let v = vol([3, 4, 5], |i| i as f64);
        let bytes = encode_volume(&v, Datatype::I16).unwrap();
        let h = parse_nifti_header(&bytes).unwrap();
        assert_eq!(h.byte_order, ByteOrder::Little);
        assert_eq!(h.dims, [3, 4, 5]);
        assert_eq!(h.spacing, [2.5, 0.75, 0.8]);
        assert_eq!(h.datatype, Datatype::I16);
        assert_eq!(h.vox_offset, 352);
        assert_eq!(h.magic, Magic::Single);
    }

    #[test]
    fn first_axis_varies_fastest_on_disk() {
        let v = vol([2, 1, 3], |i| i as f64);
        let bytes = encode_volume(&v, Datatype::U8).unwrap();
        // (z, x) = (0,0) (1,0) (0,1) (1,1) (0,2) (1,2) -> flat 0 3 1 4 2 5
        assert_eq!(&bytes[352..], &[0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn slope_and_intercept_apply() {
        let v = vol([1, 1, 2], |_| 3.0);
        let mut bytes = encode_volume(&v, Datatype::I16).unwrap();
        bytes[112..116].copy_from_slice(&2f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&10f32.to_le_bytes());
        let back = decode_volume(&bytes, None, VolumeKind::Image).unwrap();
        assert_eq!(back.data(), &[16.0, 16.0]);
    }

    #[test]
    fn zero_slope_means_unscaled() {
        let v = vol([1, 1, 2], |i| i as f64 + 7.0);
        let mut bytes = encode_volume(&v, Datatype::I16).unwrap();
        bytes[112..116].copy_from_slice(&0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&10f32.to_le_bytes());
        let back = decode_volume(&bytes, None, VolumeKind::Image).unwrap();
        assert_eq!(back.data(), &[7.0, 8.0]);
    }

    #[test]
    fn header_errors() {
        let v = vol([2, 2, 2], |i| i as f64);
        let good = encode_volume(&v, Datatype::F32).unwrap();

        assert!(matches!(parse_nifti_header(&good[..100]), Err(Error::Format(_))));

        let mut b = good.clone();
        b[344..348].copy_from_slice(b"xyz\0");
        assert!(matches!(parse_nifti_header(&b), Err(Error::Format(_))));

        let mut b = good.clone();
        b[70..72].copy_from_slice(&32i16.to_le_bytes());
        assert!(matches!(parse_nifti_header(&b), Err(Error::UnsupportedFormat(_))));

        let mut b = good.clone();
        b[80..84].copy_from_slice(&0f32.to_le_bytes());
        assert!(matches!(parse_nifti_header(&b), Err(Error::Format(_))));

        let mut b = good.clone();
        b[0..4].copy_from_slice(&349i32.to_le_bytes());
        assert!(matches!(parse_nifti_header(&b), Err(Error::Format(_))));

        let mut b = good.clone();
        b[40..42].copy_from_slice(&4i16.to_le_bytes());
        b[48..50].copy_from_slice(&3i16.to_le_bytes());
        assert!(matches!(parse_nifti_header(&b), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn truncated_data_is_a_format_error() {
        let v = vol([2, 2, 2], |i| i as f64);
        let b = encode_volume(&v, Datatype::F64).unwrap();
        let r = decode_volume(&b[..b.len() - 1], None, VolumeKind::Image);
        assert!(matches!(r, Err(Error::Format(_))));
    }

    #[test]
    fn gzip_is_rejected_with_a_hint() {
        let mut b = vec![0x1f, 0x8b];
        b.resize(400, 0);
        assert!(matches!(parse_nifti_header(&b), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn out_of_range_values() {
        let v = vol([1, 1, 1], |_| 256.0);
        assert!(matches!(encode_volume(&v, Datatype::U8), Err(Error::Range(_))));
        let v = vol([1, 1, 1], |_| -1.0);
        assert!(matches!(encode_volume(&v, Datatype::U8), Err(Error::Range(_))));
        let v = vol([1, 1, 1], |_| 0.5);
        assert!(matches!(encode_volume(&v, Datatype::I32), Err(Error::Range(_))));
        let v = vol([1, 1, 1], |_| 1e39);
        assert!(matches!(encode_volume(&v, Datatype::F32), Err(Error::Range(_))));
        let v = vol([1, 1, 1], |_| 40000.0);
        assert!(matches!(encode_volume(&v, Datatype::I16), Err(Error::Range(_))));
        assert!(encode_volume(&v, Datatype::I32).is_ok());
    }

    #[test]
    fn label_kind_is_validated_on_read() {
        let v = vol([1, 1, 3], |i| i as f64 + 1.0);
        let b = encode_volume(&v, Datatype::U8).unwrap();
        let r = decode_volume(&b, None, VolumeKind::Labels);
        assert!(matches!(r, Err(Error::Core(voxelforge_core::Error::Validation(_)))));
    }
}
