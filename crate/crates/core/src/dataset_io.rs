//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<split>/records.json      id, label, seed, quality per record
//! <root>/<split>/images.f32        H*W*3 little-endian f32 per record
//! <root>/<split>/masks.u8          H*W bytes per record
//! <root>/<split>/oracle_depth.u8   H*W bytes per record
//! <root>/<split>/gt_depth.u8       H*W bytes per record
//! ```
//!
//! The manifest stores the SHA-256 of every split file; reads verify them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::depth_gt::{DepthMap, FakeMask, GroundTruthDepth, Plane};
use crate::error::{Error, Result};
use crate::raster::{Image, CHANNELS};
use crate::synth::{Dataset, DatasetConfig, DegradeLevel, Label, SampleRecord, Split, GENERATOR_VERSION};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const FILES: [&str; 5] = ["records.json", "images.f32", "masks.u8", "oracle_depth.u8", "gt_depth.u8"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub count: usize,
    pub ids: Vec<u64>,
    /// File name to hex SHA-256.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator_version: u32,
    pub global_seed: u64,
    pub record_count: usize,
    pub image_size: usize,
    pub config: DatasetConfig,
    pub splits: BTreeMap<Split, SplitManifest>,
}

impl DatasetManifest {
    pub fn validate(&self, path: &Path) -> Result<()> {
        let total: usize = self.splits.values().map(|s| s.count).sum();
        if total != self.record_count {
            return Err(Error::corrupt(path, format!("split counts sum to {total}, manifest says {}", self.record_count)));
        }
        let mut seen = std::collections::HashSet::new();
        for s in self.splits.values() {
            if s.ids.len() != s.count {
                return Err(Error::corrupt(path, "split id list length differs from count"));
            }
            if let Some(dup) = s.ids.iter().find(|id| !seen.insert(**id)) {
                return Err(Error::corrupt(path, format!("record {dup} appears in more than one split")));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    id: u64,
    label: Label,
    seed: u64,
    quality: Option<DegradeLevel>,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_split(records: &[SampleRecord]) -> Result<[Vec<u8>; 5]> {
    let meta: Vec<RecordMeta> = records
        .iter()
        .map(|r| RecordMeta {
            id: r.id,
            label: r.label,
            seed: r.seed,
            quality: r.quality,
        })
        .collect();
    let mut images = Vec::new();
    let (mut masks, mut oracle, mut gt) = (Vec::new(), Vec::new(), Vec::new());
    for r in records {
        for v in r.image.as_slice() {
            images.extend_from_slice(&v.to_le_bytes());
        }
        masks.extend_from_slice(r.mask.plane().as_slice());
        oracle.extend_from_slice(r.oracle_depth.0.as_slice());
        gt.extend_from_slice(r.gt_depth.0.as_slice());
    }
    Ok([serde_json::to_vec(&meta)?, images, masks, oracle, gt])
}

fn build_manifest(
    dataset: &Dataset,
    mut sink: impl FnMut(Split, &str, &[u8]) -> Result<()>,
) -> Result<DatasetManifest> {
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let records = dataset.split(split);
        let blobs = encode_split(records)?;
        for (name, blob) in FILES.iter().zip(&blobs) {
            sink(split, name, blob)?;
        }
        splits.insert(
            split,
            SplitManifest {
                count: records.len(),
                ids: records.iter().map(|r| r.id).collect(),
                files: FILES.iter().zip(&blobs).map(|(n, b)| (n.to_string(), sha_hex(b))).collect(),
            },
        );
    }
    Ok(DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        generator_version: GENERATOR_VERSION,
        global_seed: dataset.config.seed,
        record_count: dataset.len(),
        image_size: dataset.config.generator.image_size,
        config: dataset.config.clone(),
        splits,
    })
}

/// Manifest of an in-memory dataset, checksums included.
pub fn manifest_for(dataset: &Dataset) -> Result<DatasetManifest> {
    build_manifest(dataset, |_, _, _| Ok(()))
}

pub fn write_dataset(root: &Path, dataset: &Dataset) -> Result<DatasetManifest> {
    let manifest = build_manifest(dataset, |split, name, blob| {
        let dir = root.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_file(&dir.join(name), blob)
    })?;
    let path = root.join("manifest.json");
    write_file(&path, &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(&path, format!("manifest: {e}")))?;
    if m.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            path,
            found: m.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    if m.generator_version != GENERATOR_VERSION {
        return Err(Error::Version {
            path,
            found: m.generator_version,
            expected: GENERATOR_VERSION,
        });
    }
    m.validate(&path)?;
    Ok(m)
}

fn read_checked(dir: &Path, name: &str, expected: &SplitManifest) -> Result<(PathBuf, Vec<u8>)> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let want = expected
        .files
        .get(name)
        .ok_or_else(|| Error::corrupt(&path, "file missing from manifest"))?;
    if &sha_hex(&bytes) != want {
        return Err(Error::corrupt(&path, "checksum mismatch"));
    }
    Ok((path, bytes))
}

fn read_split_with(root: &Path, m: &DatasetManifest, split: Split) -> Result<Vec<SampleRecord>> {
    let dir = root.join(split.name());
    let sm = m
        .splits
        .get(&split)
        .ok_or_else(|| Error::corrupt(root.join("manifest.json"), format!("no entry for split {split}")))?;
    let (meta_path, meta) = read_checked(&dir, "records.json", sm)?;
    let meta: Vec<RecordMeta> =
        serde_json::from_slice(&meta).map_err(|e| Error::corrupt(&meta_path, e.to_string()))?;
    if meta.len() != sm.count || meta.iter().map(|r| r.id).ne(sm.ids.iter().copied()) {
        return Err(Error::corrupt(&meta_path, "records disagree with manifest ids"));
    }
    let n = m.image_size;
    let px = n * n;
    let blob = |name: &str, per_record: usize| -> Result<Vec<u8>> {
        let (path, bytes) = read_checked(&dir, name, sm)?;
        if bytes.len() != per_record * sm.count {
            return Err(Error::corrupt(&path, format!("expected {} bytes, found {}", per_record * sm.count, bytes.len())));
        }
        Ok(bytes)
    };
    let images = blob("images.f32", px * CHANNELS * 4)?;
    let masks = blob("masks.u8", px)?;
    let oracle = blob("oracle_depth.u8", px)?;
    let gt = blob("gt_depth.u8", px)?;
    meta.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let data = images[i * px * CHANNELS * 4..(i + 1) * px * CHANNELS * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let plane = |b: &[u8]| Plane::from_vec(n, n, b[i * px..(i + 1) * px].to_vec());
            let record = SampleRecord {
                id: r.id,
                image: Image::new(n, n, data)?,
                mask: FakeMask::from_binary(plane(&masks)?)
                    .map_err(|e| Error::corrupt(dir.join("masks.u8"), e.to_string()))?,
                oracle_depth: DepthMap(plane(&oracle)?),
                gt_depth: GroundTruthDepth(plane(&gt)?),
                label: r.label,
                seed: r.seed,
                quality: r.quality,
            };
            record
                .check_consistency(m.config.generator.lambda)
                .map_err(|e| Error::corrupt(&dir, e.to_string()))?;
            Ok(record)
        })
        .collect()
}

pub fn read_split(root: &Path, split: Split) -> Result<Vec<SampleRecord>> {
    let m = read_manifest(root)?;
    read_split_with(root, &m, split)
}

pub fn read_dataset(root: &Path) -> Result<(DatasetManifest, Dataset)> {
    let m = read_manifest(root)?;
    let mut parts = Split::ALL
        .into_iter()
        .map(|s| read_split_with(root, &m, s))
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let mut next = || parts.next().expect("three splits");
    let dataset = Dataset {
        config: m.config.clone(),
        train: next(),
        val: next(),
        test: next(),
    };
    Ok((m, dataset))
}
