//! Raw ensemble softmax files (`.vxs`), for combining predictions across runs.
//!
//! ```text
//! b"VXFSOFT\0" | extents: 3 x u64 LE | spacing: 3 x f64 LE | channels: u64 LE | data: f64 LE
//! ```

use std::path::Path;

use voxelforge_core::inference::SoftmaxVolume;

use crate::error::{Error, IoContext, Result};
use crate::fsutil::write_atomic;

const MAGIC: &[u8; 8] = b"VXFSOFT\0";
const HEADER: usize = 8 + 24 + 24 + 8;

pub fn encode_softmax(s: &SoftmaxVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 8 * s.data.len());
    out.extend_from_slice(MAGIC);
    for e in s.extents {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in s.spacing {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(s.channels as u64).to_le_bytes());
    for v in &s.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_softmax(b: &[u8]) -> Result<SoftmaxVolume> {
    if b.len() < HEADER || &b[..8] != MAGIC {
        return Err(Error::Format("softmax file: bad magic".into()));
    }
    let u = |at: usize| u64::from_le_bytes(b[at..at + 8].try_into().unwrap()) as usize;
    let f = |at: usize| f64::from_le_bytes(b[at..at + 8].try_into().unwrap());
    let extents = [u(8), u(16), u(24)];
    let spacing = [f(32), f(40), f(48)];
    let channels = u(56);
    let n = extents
        .iter()
        .try_fold(channels, |a, &e| a.checked_mul(e))
        .ok_or_else(|| Error::Format("softmax file: size overflow".into()))?;
    if b.len() - HEADER != n.checked_mul(8).unwrap_or(usize::MAX) {
        return Err(Error::Format("softmax file: payload size does not match header".into()));
    }
    let data = b[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(SoftmaxVolume {
        extents,
        spacing,
        channels,
        data,
    })
}

pub fn write_softmax(path: &Path, s: &SoftmaxVolume) -> Result<()> {
    write_atomic(path, &encode_softmax(s))
}

pub fn read_softmax(path: &Path) -> Result<SoftmaxVolume> {
    decode_softmax(&std::fs::read(path).at(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let s = SoftmaxVolume {
            extents: [1, 2, 1],
            spacing: [1.5, 1.0, 0.5],
            channels: 3,
            data: vec![0.2, 0.3, 0.5, 0.1, 0.3, 0.6],
        };
        let b = encode_softmax(&s);
        assert_eq!(decode_softmax(&b).unwrap(), s);
        assert!(decode_softmax(&b[..b.len() - 8]).is_err());
    }
}
