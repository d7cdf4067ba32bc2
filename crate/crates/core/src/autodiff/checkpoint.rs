//! Parameter checkpoints: a flat little-endian `f64` payload plus a
//! `key=value` text manifest stored next to it with a `.manifest` suffix.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) =
            line.split_once('=').ok_or_else(|| Error::Format(format!("line {}: expected key=value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn render_key_values(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Writes the parameters and a manifest holding `entries` plus their shapes.
pub fn save_checkpoint(path: &Path, params: &[&Matrix], entries: &BTreeMap<String, String>) -> Result<()> {
    let mut payload = Vec::with_capacity(params.iter().map(|p| p.len() * 8).sum());
    for p in params {
        for v in p.as_slice() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut manifest = entries.clone();
    let shapes: Vec<String> = params.iter().map(|p| format!("{}x{}", p.rows(), p.cols())).collect();
    manifest.insert("shapes".into(), shapes.join(","));
    manifest.insert("values".into(), params.iter().map(|p| p.len()).sum::<usize>().to_string());
    fs::write(path, payload)?;
    fs::write(manifest_path(path), render_key_values(&manifest))?;
    Ok(())
}

/// Reads a checkpoint back; returns the tensors and the full manifest.
pub fn load_checkpoint(path: &Path) -> Result<(Vec<Matrix>, BTreeMap<String, String>)> {
    let manifest = parse_key_values(&fs::read_to_string(manifest_path(path))?)?;
    let payload = fs::read(path)?;
    let shapes = manifest.get("shapes").ok_or_else(|| Error::Format("checkpoint manifest lacks shapes".into()))?;
    let mut dims = Vec::new();
    for s in shapes.split(',').filter(|s| !s.is_empty()) {
        let (r, c) = s.split_once('x').ok_or_else(|| Error::Format(format!("bad shape {s}")))?;
        let parse = |v: &str| v.parse::<usize>().map_err(|_| Error::Format(format!("bad shape {s}")));
        dims.push((parse(r)?, parse(c)?));
    }
    let total: usize = dims.iter().map(|(r, c)| r * c).sum();
    if payload.len() != total * 8 {
        return Err(Error::Format(format!(
            "checkpoint payload has {} bytes, manifest expects {}",
            payload.len(),
            total * 8
        )));
    }
    let mut values = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
    let tensors = dims
        .into_iter()
        .map(|(r, c)| Matrix::from_vec(r, c, values.by_ref().take(r * c).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok((tensors, manifest))
}
