//! Checkpoint file: `HAILCKPT`, a u32 format version, a u64 header length,
//! a JSON header, then raw little-endian f64 blocks (parameters, Adam first
//! moments, Adam second moments), each in [`Params::blocks`] order.

use std::fs;
use std::io::{ErrorKind, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::Adam;
use super::train::EpochMetrics;
use super::{hex, TrainConfig};
use crate::corpus::SplitSet;
use crate::encoder::{DualModel, ModelShape, Params};
use crate::error::{HailError, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HAILCKPT";
const PREAMBLE: usize = 8 + 4 + 8;

/// Early-stopping bookkeeping on valid HR@1.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub best_hr1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
    pub stopped: bool,
}

/// Running sums of the epoch in progress.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochProgress {
    pub batches: usize,
    pub sk: Vec<f64>,
    pub med_pos: Vec<f64>,
    pub med_neg: Vec<f64>,
    pub total: f64,
    pub truncated: usize,
}

/// Full training state at a batch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    pub data_hash: String,
    pub shape: ModelShape,
    pub params: Params,
    pub adam: Adam,
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed batches of the current epoch.
    pub batch_in_epoch: usize,
    pub progress: EpochProgress,
    pub early: EarlyStopping,
    pub log: Vec<EpochMetrics>,
}

impl Checkpoint {
    pub fn model(&self) -> DualModel {
        DualModel {
            shape: self.shape,
            params: self.params.clone(),
        }
    }
}

/// The random state is fully determined by the seed and the position in the
/// run: epoch shuffles come from per-epoch streams.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    epoch: usize,
    batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: TrainConfig,
    config_hash: String,
    data_hash: String,
    shape: ModelShape,
    step: u64,
    epoch: usize,
    batch_in_epoch: usize,
    rng: RngState,
    progress: EpochProgress,
    early: EarlyStopping,
    log: Vec<EpochMetrics>,
    blocks: Vec<BlockEntry>,
    payload_sha256: String,
}

/// Digest of the split a run trains and validates on.
pub fn data_hash(split: &SplitSet) -> String {
    let mut h = Sha256::new();
    let mut put = |x: u64| h.update(x.to_le_bytes());
    put(split.train.len() as u64);
    for s in &split.train {
        put(s.generator as u64);
        put(s.elements.len() as u64);
        s.elements.iter().for_each(|&e| put(e as u64));
    }
    for map in [&split.valid_targets, &split.test_targets] {
        put(map.len() as u64);
        for (&g, &t) in map {
            put(g as u64);
            put(t as u64);
        }
    }
    put(split.contexts.len() as u64);
    for (&g, ctx) in &split.contexts {
        put(g as u64);
        put(ctx.len() as u64);
        ctx.iter().for_each(|&e| put(e as u64));
    }
    hex(&h.finalize())
}

fn payload(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::with_capacity(3 * 8 * ckpt.params.num_scalars());
    for p in [&ckpt.params, &ckpt.adam.m, &ckpt.adam.v] {
        for (_, m) in p.blocks() {
            for x in &m.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let body = payload(ckpt);
    let header = Header {
        format_version: FORMAT_VERSION,
        config: ckpt.config.clone(),
        config_hash: ckpt.config_hash.clone(),
        data_hash: ckpt.data_hash.clone(),
        shape: ckpt.shape,
        step: ckpt.step,
        epoch: ckpt.epoch,
        batch_in_epoch: ckpt.batch_in_epoch,
        rng: RngState {
            seed: ckpt.config.seed,
            epoch: ckpt.epoch,
            batch: ckpt.batch_in_epoch,
        },
        progress: ckpt.progress.clone(),
        early: ckpt.early.clone(),
        log: ckpt.log.clone(),
        blocks: ckpt
            .params
            .blocks()
            .into_iter()
            .map(|(name, m)| BlockEntry { name, rows: m.rows, cols: m.cols })
            .collect(),
        payload_sha256: hex(&Sha256::digest(&body)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| HailError::contract(format!("header encoding: {e}")))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HailError::io(dir, e))?;
    }
    // Write beside the target and rename so a crash never leaves half a file.
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&body)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| HailError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => HailError::CheckpointNotFound(path.to_path_buf()),
        _ => HailError::io(path, e),
    })?;
    if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
        return Err(HailError::Corrupt(format!("{} is not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(HailError::Incompatible(format!(
            "format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_start = PREAMBLE
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| HailError::Corrupt("header extends past the end of the file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..body_start])
        .map_err(|e| HailError::Corrupt(format!("unreadable header: {e}")))?;
    let body = &bytes[body_start..];

    let mut skeleton = DualModel::with_seeds(header.shape, 0, &vec![0; header.shape.peers], 0.0)
        .map_err(|e| HailError::Incompatible(format!("stored shape is invalid: {e}")))?
        .params;
    let layout: Vec<BlockEntry> = skeleton
        .blocks()
        .into_iter()
        .map(|(name, m)| BlockEntry { name, rows: m.rows, cols: m.cols })
        .collect();
    if layout != header.blocks {
        return Err(HailError::Incompatible("block table does not match the stored model shape".into()));
    }
    let scalars = skeleton.num_scalars();
    if body.len() != 3 * 8 * scalars {
        return Err(HailError::Corrupt(format!(
            "payload holds {} bytes, expected {}",
            body.len(),
            3 * 8 * scalars
        )));
    }
    if hex(&Sha256::digest(body)) != header.payload_sha256 {
        return Err(HailError::Corrupt("payload checksum mismatch".into()));
    }
    let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut read = |p: &mut Params| {
        for (_, m) in p.blocks_mut() {
            for x in m.data.iter_mut() {
                *x = values.next().expect("length checked");
            }
        }
    };
    read(&mut skeleton);
    let mut m = skeleton.zeros_like();
    let mut v = skeleton.zeros_like();
    read(&mut m);
    read(&mut v);
    Ok(Checkpoint {
        config: header.config,
        config_hash: header.config_hash,
        data_hash: header.data_hash,
        shape: header.shape,
        params: skeleton,
        adam: Adam { m, v },
        step: header.step,
        epoch: header.epoch,
        batch_in_epoch: header.batch_in_epoch,
        progress: header.progress,
        early: header.early,
        log: header.log,
    })
}
