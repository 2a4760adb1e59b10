use proptest::prelude::*;
use tempfile::tempdir;
use voxelforge::nifti::{
    decode_volume, encode_volume, parse_nifti_header, read_volume, write_volume, ByteOrder, Datatype,
};
use voxelforge_core::volume::{Volume, VolumeKind};

/// Hand-assembled NIfTI-1 header, independent of the encoder.
struct RawHeader {
    big_endian: bool,
    dims: [i16; 3],
    datatype: i16,
    bitpix: i16,
    pixdim: [f32; 3],
    vox_offset: f32,
    slope: f32,
    inter: f32,
    magic: &'static [u8; 4],
}

impl RawHeader {
    fn bytes(&self) -> Vec<u8> {
        let mut h = vec![0u8; 348];
        let be = self.big_endian;
        let i32b = |v: i32| if be { v.to_be_bytes() } else { v.to_le_bytes() };
        let i16b = |v: i16| if be { v.to_be_bytes() } else { v.to_le_bytes() };
        let f32b = |v: f32| if be { v.to_be_bytes() } else { v.to_le_bytes() };
        h[0..4].copy_from_slice(&i32b(348));
        let dim = [3, self.dims[0], self.dims[1], self.dims[2], 1, 1, 1, 1];
        for (i, d) in dim.into_iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&i16b(d));
        }
        h[70..72].copy_from_slice(&i16b(self.datatype));
        h[72..74].copy_from_slice(&i16b(self.bitpix));
        let pix = [1.0, self.pixdim[0], self.pixdim[1], self.pixdim[2], 0.0, 0.0, 0.0, 0.0];
        for (i, p) in pix.into_iter().enumerate() {
            h[76 + 4 * i..80 + 4 * i].copy_from_slice(&f32b(p));
        }
        h[108..112].copy_from_slice(&f32b(self.vox_offset));
        h[112..116].copy_from_slice(&f32b(self.slope));
        h[116..120].copy_from_slice(&f32b(self.inter));
        h[344..348].copy_from_slice(self.magic);
        h
    }
}

/// File order puts the first axis fastest.
fn file_index(ext: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    z + ext[0] * (y + ext[1] * x)
}

#[test]
fn big_endian_int16_volume() {
    let ext = [2usize, 3, 4];
    let raw = RawHeader {
        big_endian: true,
        dims: [2, 3, 4],
        datatype: 4,
        bitpix: 16,
        pixdim: [2.5, 0.75, 0.75],
        vox_offset: 352.0,
        slope: 2.0,
        inter: -1024.0,
        magic: b"n+1\0",
    };
    let mut bytes = raw.bytes();
    bytes.resize(352, 0);
    let mut stored = vec![0i16; 24];
    for z in 0..2 {
        for y in 0..3 {
            for x in 0..4 {
                stored[file_index(ext, z, y, x)] = (100 * z + 10 * y + x) as i16 - 50;
            }
        }
    }
    for v in &stored {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    let h = parse_nifti_header(&bytes).unwrap();
    assert_eq!(h.byte_order, ByteOrder::Big);
    assert_eq!(h.dims, ext);
    assert_eq!(h.datatype, Datatype::I16);
    let vol = decode_volume(&bytes, None, VolumeKind::Image).unwrap();
    assert_eq!(vol.extents(), ext);
    assert_eq!(vol.spacing(), [2.5, 0.75, 0.75]);
    for z in 0..2 {
        for y in 0..3 {
            for x in 0..4 {
                let want = 2.0 * ((100 * z + 10 * y + x) as f64 - 50.0) - 1024.0;
                assert_eq!(vol.data()[vol.index(z, y, x)], want);
            }
        }
    }
}

#[test]
fn byte_swapped_size_field_is_recognised() {
    let le = RawHeader {
        big_endian: false,
        dims: [1, 1, 1],
        datatype: 2,
        bitpix: 8,
        pixdim: [1.0; 3],
        vox_offset: 352.0,
        slope: 0.0,
        inter: 0.0,
        magic: b"n+1\0",
    };
    let be = RawHeader { big_endian: true, ..le };
    let (mut a, mut b) = (le.bytes(), be.bytes());
    // 348 read with the wrong byte order.
    assert_eq!(i32::from_le_bytes(b[0..4].try_into().unwrap()), 0x5C01_0000);
    a.resize(353, 7);
    b.resize(353, 7);
    assert_eq!(parse_nifti_header(&a).unwrap().byte_order, ByteOrder::Little);
    assert_eq!(parse_nifti_header(&b).unwrap().byte_order, ByteOrder::Big);
    let va = decode_volume(&a, None, VolumeKind::Image).unwrap();
    let vb = decode_volume(&b, None, VolumeKind::Image).unwrap();
    assert_eq!(va, vb);
    assert_eq!(va.data(), &[7.0]);
}

#[test]
fn header_image_pair() {
    let dir = tempdir().unwrap();
    let raw = RawHeader {
        big_endian: false,
        dims: [2, 2, 1],
        datatype: 16,
        bitpix: 32,
        pixdim: [1.0, 2.0, 3.0],
        vox_offset: 0.0,
        slope: 0.0,
        inter: 0.0,
        magic: b"ni1\0",
    };
    std::fs::write(dir.path().join("v.hdr"), raw.bytes()).unwrap();
    let img: Vec<u8> = [1.5f32, -2.0, 3.25, 4.0].iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(dir.path().join("v.img"), img).unwrap();
    let v = read_volume(&dir.path().join("v.hdr"), VolumeKind::Image).unwrap();
    // file order (z fastest): (0,0) (1,0) (0,1) (1,1)
    assert_eq!(v.data(), &[1.5, 3.25, -2.0, 4.0]);
    assert_eq!(v.spacing(), [1.0, 2.0, 3.0]);
}

fn volume_for(dt: Datatype) -> impl Strategy<Value = Volume> {
    let values: BoxedStrategy<f64> = match dt {
        Datatype::U8 => (0u8..=255).prop_map(f64::from).boxed(),
        Datatype::I16 => any::<i16>().prop_map(f64::from).boxed(),
        Datatype::I32 => any::<i32>().prop_map(f64::from).boxed(),
        Datatype::F32 => (-1e6f32..1e6).prop_map(f64::from).boxed(),
        Datatype::F64 => (-1e12f64..1e12).boxed(),
    };
    (prop::array::uniform3(1usize..6), prop::array::uniform3(0.25f32..5.0)).prop_flat_map(move |(ext, sp)| {
        prop::collection::vec(values.clone(), ext.iter().product::<usize>())
            .prop_map(move |data| Volume::image(ext, sp.map(f64::from), data).unwrap())
    })
}

fn roundtrip(dt: Datatype, vol: &Volume) {
    let dir = tempdir().unwrap();
    let path = dir.path().join("v.nii");
    write_volume(vol, &path, dt).unwrap();
    let back = read_volume(&path, VolumeKind::Image).unwrap();
    assert_eq!(&back, vol);
    assert_eq!(
        parse_nifti_header(&encode_volume(vol, dt).unwrap()).unwrap().datatype,
        dt
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn roundtrip_u8(v in volume_for(Datatype::U8)) { roundtrip(Datatype::U8, &v) }
    #[test]
    fn roundtrip_i16(v in volume_for(Datatype::I16)) { roundtrip(Datatype::I16, &v) }
    #[test]
    fn roundtrip_i32(v in volume_for(Datatype::I32)) { roundtrip(Datatype::I32, &v) }
    #[test]
    fn roundtrip_f32(v in volume_for(Datatype::F32)) { roundtrip(Datatype::F32, &v) }
    #[test]
    fn roundtrip_f64(v in volume_for(Datatype::F64)) { roundtrip(Datatype::F64, &v) }
}

#[test]
fn unsupported_datatype_code() {
    let raw = RawHeader {
        big_endian: false,
        dims: [1, 1, 1],
        datatype: 32,
        bitpix: 64,
        pixdim: [1.0; 3],
        vox_offset: 352.0,
        slope: 0.0,
        inter: 0.0,
        magic: b"n+1\0",
    };
    let err = parse_nifti_header(&raw.bytes()).unwrap_err();
    assert_eq!(err.category(), "unsupported-format");
}
