//! `manifest.json`: every file under an output directory with its SHA-256,
//! plus the hash of the resolved configuration.

use std::path::Path;

use serde::Serialize;

use crate::error::{IoContext, Result};
use crate::fsutil::{sha256_hex, write_atomic};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize)]
struct Entry {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: &'a str,
    outputs: Vec<Entry>,
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<Entry>) -> Result<()> {
    for entry in std::fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else if path.is_file() {
            let rel = path
                .strip_prefix(root)
                .expect("under root")
                .to_string_lossy()
                .replace('\\', "/");
            if rel == MANIFEST_FILE {
                continue;
            }
            let bytes = std::fs::read(&path).at(&path)?;
            out.push(Entry {
                path: rel,
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
    }
    Ok(())
}

pub fn write_manifest(out_dir: &Path, command: &str, config_hash: &str) -> Result<()> {
    let mut outputs = Vec::new();
    collect(out_dir, out_dir, &mut outputs)?;
    outputs.sort_by(|a, b| a.path.cmp(&b.path));
    let m = Manifest {
        command,
        config_hash,
        outputs,
    };
    let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    text.push('\n');
    write_atomic(&out_dir.join(MANIFEST_FILE), text.as_bytes())
}
