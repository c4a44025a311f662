//! Patch-depth target files.
//!
//! `<name>.bin`: magic `FDGT`, `u32` version, `u64` record count, then per
//! record `u64` id, `u32` lambda, `u32` grid rows, `u32` grid columns and
//! `rows * cols` little-endian `f32` targets in `[0, 1]`. A JSON sidecar
//! `<name>.json` names the depth oracle and the dataset seed and carries the
//! checksum of the binary file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::depth_gt::{patch_targets, PatchGrid};
use crate::error::{Error, Result};
use crate::synth::SampleRecord;

pub const GT_MAGIC: &[u8; 4] = b"FDGT";
pub const GT_FORMAT_VERSION: u32 = 1;
pub const ORACLE_NAME: &str = "synthetic-dome";

#[derive(Clone, Debug, PartialEq)]
pub struct PatchTargetRecord {
    pub id: u64,
    pub lambda: u32,
    pub grid: (u32, u32),
    pub targets: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtSidecar {
    pub oracle: String,
    pub dataset_seed: u64,
    pub lambda: u32,
    pub patches_per_side: usize,
    pub records: usize,
    pub sha256: String,
}

pub fn compute_patch_targets(records: &[SampleRecord], lambda: u32, per_side: usize) -> Result<Vec<PatchTargetRecord>> {
    records
        .iter()
        .map(|r| {
            let (h, w) = r.oracle_depth.0.dims();
            let grid = PatchGrid::new(h, w, per_side)?;
            let t = patch_targets(&r.oracle_depth, &r.mask, lambda, &grid)?;
            Ok(PatchTargetRecord {
                id: r.id,
                lambda,
                grid: (per_side as u32, per_side as u32),
                targets: t.0.iter().map(|&v| v as f32).collect(),
            })
        })
        .collect()
}

pub fn encode_targets(records: &[PatchTargetRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(GT_MAGIC);
    out.extend_from_slice(&GT_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        out.extend_from_slice(&r.id.to_le_bytes());
        out.extend_from_slice(&r.lambda.to_le_bytes());
        out.extend_from_slice(&r.grid.0.to_le_bytes());
        out.extend_from_slice(&r.grid.1.to_le_bytes());
        for v in &r.targets {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_targets(bytes: &[u8], path: &Path) -> Result<Vec<PatchTargetRecord>> {
    let corrupt = |d: &str| Error::corrupt(path, d);
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| corrupt("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != GT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
    let version = u32_at(take(4)?);
    if version != GT_FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: GT_FORMAT_VERSION,
        });
    }
    let count = u64_at(take(8)?) as usize;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id = u64_at(take(8)?);
        let lambda = u32_at(take(4)?);
        let grid = (u32_at(take(4)?), u32_at(take(4)?));
        let p = grid.0 as usize * grid.1 as usize;
        let targets = take(p * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.push(PatchTargetRecord { id, lambda, grid, targets });
    }
    if pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(records)
}

/// Write `<stem>.bin` and `<stem>.json`.
pub fn write_targets(stem: &Path, records: &[PatchTargetRecord], dataset_seed: u64) -> Result<GtSidecar> {
    let bytes = encode_targets(records);
    let first = records.first();
    let sidecar = GtSidecar {
        oracle: ORACLE_NAME.into(),
        dataset_seed,
        lambda: first.map_or(0, |r| r.lambda),
        patches_per_side: first.map_or(0, |r| r.grid.0 as usize),
        records: records.len(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    let bin = stem.with_extension("bin");
    fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
    let json = stem.with_extension("json");
    fs::write(&json, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))?;
    Ok(sidecar)
}

pub fn read_targets(stem: &Path) -> Result<(GtSidecar, Vec<PatchTargetRecord>)> {
    let json = stem.with_extension("json");
    let text = fs::read(&json).map_err(|e| Error::io(&json, e))?;
    let sidecar: GtSidecar = serde_json::from_slice(&text).map_err(|e| Error::corrupt(&json, e.to_string()))?;
    let bin = stem.with_extension("bin");
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if hex::encode(Sha256::digest(&bytes)) != sidecar.sha256 {
        return Err(Error::corrupt(&bin, "checksum mismatch"));
    }
    let records = decode_targets(&bytes, &bin)?;
    if records.len() != sidecar.records {
        return Err(Error::corrupt(&bin, "record count differs from sidecar"));
    }
    Ok((sidecar, records))
}
