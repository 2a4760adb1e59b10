//! Preprocessed-case cache: one `case_XXXXX.vxc` file per case.
//!
//! ```text
//! b"VXFCASE\0" | version: u32 LE | header length: u64 LE | header (JSON)
//! | image: f64 LE | labels: u8 (if present) | SHA-256 of all prior bytes
//! ```
//!
//! The header records the plan hash and a digest of the source files so a
//! stale entry is detected and rebuilt.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use voxelforge_core::preprocessing::PreprocessPlan;
use voxelforge_core::volume::{CaseRecord, CaseStatus, Geometry, Volume};

use crate::dataset::{case_dir_name, IMAGING_FILE, SEGMENTATION_FILE};
use crate::error::{Error, IoContext, Result};
use crate::fsutil::{sha256_hex, write_atomic};

const MAGIC: &[u8; 8] = b"VXFCASE\0";
const VERSION: u32 = 1;

pub fn plan_hash(plan: &PreprocessPlan) -> String {
    sha256_hex(plan.canonical().as_bytes())
}

pub fn cache_file_name(case_id: u32) -> String {
    format!("{}.vxc", case_dir_name(case_id))
}

/// Digest of a case directory's imaging and segmentation files.
pub fn source_digest(case_dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in [IMAGING_FILE, SEGMENTATION_FILE] {
        let p = case_dir.join(name);
        if p.is_file() {
            h.update(name.as_bytes());
            h.update(std::fs::read(&p).at(&p)?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    case_id: u32,
    plan_hash: String,
    source_digest: String,
    status: String,
    extents: [usize; 3],
    spacing: [f64; 3],
    original_extents: [usize; 3],
    original_spacing: [f64; 3],
    has_labels: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CachedCase {
    pub case: CaseRecord,
    pub plan_hash: String,
    pub source_digest: String,
}

fn status_name(s: CaseStatus) -> &'static str {
    match s {
        CaseStatus::Included => "included",
        CaseStatus::Excluded => "excluded",
        CaseStatus::Substituted => "substituted",
        CaseStatus::SubstitutedPending => "substituted-pending",
    }
}

fn parse_status(s: &str) -> Result<CaseStatus> {
    Ok(match s {
        "included" => CaseStatus::Included,
        "excluded" => CaseStatus::Excluded,
        "substituted" => CaseStatus::Substituted,
        "substituted-pending" => CaseStatus::SubstitutedPending,
        other => return Err(Error::Format(format!("cache: unknown case status {other:?}"))),
    })
}

pub fn encode_cached_case(c: &CachedCase) -> Result<Vec<u8>> {
    let case = &c.case;
    let original = case
        .original
        .ok_or_else(|| voxelforge_core::Error::Contract(format!("case {} is not preprocessed", case.case_id)))?;
    let header = Header {
        case_id: case.case_id,
        plan_hash: c.plan_hash.clone(),
        source_digest: c.source_digest.clone(),
        status: status_name(case.status).into(),
        extents: case.image.extents(),
        spacing: case.image.spacing(),
        original_extents: original.extents,
        original_spacing: original.spacing,
        has_labels: case.labels.is_some(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in case.image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(l) = &case.labels {
        out.extend_from_slice(&l.label_bytes()?);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_cached_case(bytes: &[u8]) -> Result<CachedCase> {
    let bad = |m: &str| Error::Format(format!("cache: {m}"));
    if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Incompatible(format!("cache format version {version}")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let json = body
        .get(20..20usize.saturating_add(hlen))
        .ok_or_else(|| bad("truncated header"))?;
    let h: Header = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
    let n: usize = h.extents.iter().product();
    let rest = &body[20 + hlen..];
    let expected = 8 * n + if h.has_labels { n } else { 0 };
    if rest.len() != expected {
        return Err(bad("payload size does not match extents"));
    }
    let image: Vec<f64> = rest[..8 * n]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let image = Volume::image(h.extents, h.spacing, image)?;
    let labels = if h.has_labels {
        Some(Volume::labels(h.extents, h.spacing, &rest[8 * n..])?)
    } else {
        None
    };
    let mut case = CaseRecord::new(h.case_id, image, labels)?;
    case.status = parse_status(&h.status)?;
    case.original = Some(Geometry::new(h.original_extents, h.original_spacing)?);
    Ok(CachedCase {
        case,
        plan_hash: h.plan_hash,
        source_digest: h.source_digest,
    })
}

pub fn write_cached_case(dir: &Path, c: &CachedCase) -> Result<PathBuf> {
    let path = dir.join(cache_file_name(c.case.case_id));
    write_atomic(&path, &encode_cached_case(c)?)?;
    Ok(path)
}

pub fn read_cached_case(path: &Path) -> Result<CachedCase> {
    decode_cached_case(&std::fs::read(path).at(path)?)
}

/// The cached case if it exists, decodes, and matches both hashes.
pub fn lookup(dir: &Path, case_id: u32, plan_hash: &str, source_digest: &str) -> Option<CachedCase> {
    let c = read_cached_case(&dir.join(cache_file_name(case_id))).ok()?;
    (c.plan_hash == plan_hash && c.source_digest == source_digest && c.case.case_id == case_id).then_some(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use voxelforge_core::preprocessing::preprocess_case;

    #[test]
    fn round_trip() {
        let image = Volume::image([2, 3, 4], [2.0, 1.0, 1.0], (0..24).map(|i| i as f64 * 10.0).collect()).unwrap();
        let labels = Volume::labels([2, 3, 4], [2.0, 1.0, 1.0], &[1; 24]).unwrap();
        let case = CaseRecord::new(5, image, Some(labels)).unwrap();
        let plan = PreprocessPlan::with_spacing([2.0, 1.0, 1.0]).unwrap();
        let pre = preprocess_case(&case, &plan).unwrap();
        let c = CachedCase {
            case: pre,
            plan_hash: plan_hash(&plan),
            source_digest: "abc".into(),
        };
        let bytes = encode_cached_case(&c).unwrap();
        assert_eq!(decode_cached_case(&bytes).unwrap(), c);
        let mut bad = bytes.clone();
        bad[30] ^= 4;
        assert!(decode_cached_case(&bad).is_err());
    }

    #[test]
    fn plan_hash_tracks_the_plan() {
        let a = plan_hash(&PreprocessPlan::default());
        let b = plan_hash(&PreprocessPlan::with_spacing([3.22, 1.62, 1.6]).unwrap());
        assert_ne!(a, b);
        assert_eq!(a.len(), 64);
    }
}
