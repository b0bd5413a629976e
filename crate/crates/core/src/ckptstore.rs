//! Sharded and sliced checkpoints.
//!
//! A sharded checkpoint holds one binary file per rank plus `metadata.json`:
//!
//! ```text
//! "SHTRSHRD" | version u32 | rank u32 | world u32 | n_records u32
//! n_records × (layer u32 | full_len u64 | offset u64 | shard_len u64 | kind u8)
//! payloads: f64 little-endian, in record order
//! ```
//!
//! Records come in pairs per unit (weights, then momentum). Shard payloads
//! include the zero padding of the last blocks.
//!
//! A sliced checkpoint holds one file per (unit, kind) with the full unpadded
//! vector, plus `slices.json`. It can be loaded at any world size.
//!
//! ```text
//! "SHTRSLCE" | version u32 | layer u32 | full_len u64 | kind u8 | payload
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::NetLayout;
use crate::error::{Error, Result};
use crate::fsdp::{shard_vector, ShardedState, UnitShard};
use crate::optim::shard_len;

pub const SHARD_MAGIC: &[u8; 8] = b"SHTRSHRD";
pub const SLICE_MAGIC: &[u8; 8] = b"SHTRSLCE";
pub const FORMAT_VERSION: u32 = 1;
pub const METADATA_FILE: &str = "metadata.json";
pub const SLICES_FILE: &str = "slices.json";

const SHARD_HEADER: u64 = 8 + 4 * 4;
const RECORD_LEN: u64 = 4 + 8 + 8 + 8 + 1;
const SLICE_HEADER: u64 = 8 + 4 + 4 + 8 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Weights,
    Momentum,
}

impl TensorKind {
    pub const ALL: [TensorKind; 2] = [TensorKind::Weights, TensorKind::Momentum];

    fn code(self) -> u8 {
        match self {
            TensorKind::Weights => 0,
            TensorKind::Momentum => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(TensorKind::Weights),
            1 => Some(TensorKind::Momentum),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            TensorKind::Weights => "weights",
            TensorKind::Momentum => "momentum",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardRecord {
    pub layer: u32,
    pub full_len: u64,
    pub offset: u64,
    pub shard_len: u64,
    pub kind: TensorKind,
}

/// Run bookkeeping stored next to the tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunInfo {
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub files: Vec<String>,
    pub world_size: usize,
    #[serde(flatten)]
    pub run: RunInfo,
    pub layout: NetLayout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub layer: usize,
    pub kind: TensorKind,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMeta {
    pub slices: Vec<SliceEntry>,
    #[serde(flatten)]
    pub run: RunInfo,
    pub layout: NetLayout,
}

pub fn shard_file_name(rank: usize) -> String {
    format!("shard_{rank:05}.bin")
}

pub fn slice_file_name(layer: usize, kind: TensorKind) -> String {
    format!("layer_{layer:04}_{}.bin", kind.as_str())
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn f64s_from(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

/// Serializes one rank's state in the shard format.
pub fn encode_shard(state: &ShardedState) -> Vec<u8> {
    let n_records = 2 * state.units.len();
    let payload: usize = state.units.iter().map(|u| 2 * u.shard_len()).sum();
    let mut out = Vec::with_capacity(SHARD_HEADER as usize + n_records * RECORD_LEN as usize + 8 * payload);
    out.extend_from_slice(SHARD_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(state.rank as u32).to_le_bytes());
    out.extend_from_slice(&(state.world_size as u32).to_le_bytes());
    out.extend_from_slice(&(n_records as u32).to_le_bytes());
    for (l, u) in state.units.iter().enumerate() {
        for kind in TensorKind::ALL {
            out.extend_from_slice(&(l as u32).to_le_bytes());
            out.extend_from_slice(&(u.full_len as u64).to_le_bytes());
            out.extend_from_slice(&((state.rank * u.shard_len()) as u64).to_le_bytes());
            out.extend_from_slice(&(u.shard_len() as u64).to_le_bytes());
            out.push(kind.code());
        }
    }
    for u in &state.units {
        put_f64s(&mut out, &u.weights);
        put_f64s(&mut out, &u.momentum);
    }
    out
}

struct ShardHeader {
    rank: usize,
    world: usize,
    records: Vec<ShardRecord>,
}

impl ShardHeader {
    fn payload_start(&self) -> u64 {
        SHARD_HEADER + RECORD_LEN * self.records.len() as u64
    }

    fn payload_len(&self) -> u64 {
        self.records.iter().map(|r| 8 * r.shard_len).sum()
    }

    /// Byte offset of record `i`'s payload.
    fn record_pos(&self, i: usize) -> u64 {
        self.payload_start() + self.records[..i].iter().map(|r| 8 * r.shard_len).sum::<u64>()
    }
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|_| format_err(path, "truncated file"))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

fn read_kind(r: &mut impl Read, path: &Path) -> Result<TensorKind> {
    let mut b = [0u8; 1];
    read_exact_or(r, &mut b, path)?;
    TensorKind::from_code(b[0]).ok_or_else(|| format_err(path, format!("unknown tensor kind {}", b[0])))
}

fn check_magic(r: &mut impl Read, magic: &[u8; 8], path: &Path) -> Result<()> {
    let mut m = [0u8; 8];
    read_exact_or(r, &mut m, path)?;
    if &m != magic {
        return Err(format_err(path, format!("bad magic {:?}", String::from_utf8_lossy(&m))));
    }
    let version = read_u32(r, path)?;
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    Ok(())
}

/// Reads and validates a shard header against the file length and `layout`.
fn read_shard_header(file: &mut File, path: &Path, layout: &NetLayout) -> Result<ShardHeader> {
    let file_len = file.metadata().map_err(|e| Error::io(path, None, e))?.len();
    let mut r = BufReader::new(&mut *file);
    check_magic(&mut r, SHARD_MAGIC, path)?;
    let rank = read_u32(&mut r, path)? as usize;
    let world = read_u32(&mut r, path)? as usize;
    let n_records = read_u32(&mut r, path)? as usize;
    if world == 0 || rank >= world {
        return Err(format_err(path, format!("rank {rank} of world {world}")));
    }
    let lens = layout.unit_lens();
    if n_records != 2 * lens.len() {
        return Err(format_err(path, format!("{n_records} records for {} units", lens.len())));
    }
    let mut records = Vec::with_capacity(n_records);
    for i in 0..n_records {
        let rec = ShardRecord {
            layer: read_u32(&mut r, path)?,
            full_len: read_u64(&mut r, path)?,
            offset: read_u64(&mut r, path)?,
            shard_len: read_u64(&mut r, path)?,
            kind: read_kind(&mut r, path)?,
        };
        let unit = i / 2;
        let block = shard_len(lens[unit], world) as u64;
        if rec.layer as usize != unit
            || rec.kind != TensorKind::ALL[i % 2]
            || rec.full_len != lens[unit] as u64
            || rec.shard_len != block
            || rec.offset != rank as u64 * block
        {
            return Err(format_err(path, format!("record {i} inconsistent with the layout: {rec:?}")));
        }
        records.push(rec);
    }
    let header = ShardHeader { rank, world, records };
    if header.payload_start() + header.payload_len() != file_len {
        return Err(format_err(
            path,
            format!(
                "payload of {} bytes, file holds {}",
                header.payload_len(),
                file_len.saturating_sub(header.payload_start())
            ),
        ));
    }
    Ok(header)
}

fn write_file(path: &Path, bytes: &[u8], rank: Option<usize>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, rank, e))?);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, rank, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes(), None)
}

pub fn read_metadata(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(METADATA_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, None, e))?;
    serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))
}

pub fn read_slice_meta(dir: &Path) -> Result<SliceMeta> {
    let path = dir.join(SLICES_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::IncompleteSlices {
        dir: dir.to_path_buf(),
        msg: format!("{SLICES_FILE}: {e}"),
    })?;
    serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))
}

/// Writes this rank's shard file; rank 0 also writes the metadata file.
pub fn save_sharded(state: &ShardedState, run: &RunInfo, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, Some(state.rank), e))?;
    let path = dir.join(shard_file_name(state.rank));
    write_file(&path, &encode_shard(state), Some(state.rank))?;
    if state.rank == 0 {
        let meta = CheckpointMeta {
            files: (0..state.world_size).map(shard_file_name).collect(),
            world_size: state.world_size,
            run: run.clone(),
            layout: state.layout.clone(),
        };
        write_json(&dir.join(METADATA_FILE), &meta)?;
    }
    Ok(())
}

/// Loads `rank`'s shard of a checkpoint saved at world size `world`.
pub fn load_sharded(dir: &Path, rank: usize, world: usize) -> Result<(ShardedState, RunInfo)> {
    let meta = read_metadata(dir)?;
    if meta.world_size != world {
        return Err(Error::ReshardRequired {
            saved: meta.world_size,
            requested: world,
        });
    }
    if rank >= world {
        return Err(Error::InvalidArgument(format!("rank {rank} of world {world}")));
    }
    let path = dir.join(shard_file_name(rank));
    if !path.exists() {
        return Err(Error::MissingShard {
            rank,
            dir: dir.to_path_buf(),
        });
    }
    let mut file = File::open(&path).map_err(|e| Error::io(&path, Some(rank), e))?;
    let header = read_shard_header(&mut file, &path, &meta.layout)?;
    if header.rank != rank || header.world != world {
        return Err(format_err(
            &path,
            format!("file holds rank {} of {}, expected {rank} of {world}", header.rank, header.world),
        ));
    }
    file.seek(SeekFrom::Start(header.payload_start()))
        .map_err(|e| Error::io(&path, Some(rank), e))?;
    let mut bytes = Vec::with_capacity(header.payload_len() as usize);
    file.read_to_end(&mut bytes).map_err(|e| Error::io(&path, Some(rank), e))?;
    let mut pos = 0;
    let mut take = |n: u64| {
        let v = f64s_from(&bytes[pos..pos + 8 * n as usize]);
        pos += 8 * n as usize;
        v
    };
    let units = header
        .records
        .chunks(2)
        .map(|pair| UnitShard {
            full_len: pair[0].full_len as usize,
            weights: take(pair[0].shard_len),
            momentum: take(pair[1].shard_len),
        })
        .collect();
    Ok((
        ShardedState {
            rank,
            world_size: world,
            layout: meta.layout,
            units,
        },
        meta.run,
    ))
}

fn encode_slice_header(layer: usize, full_len: usize, kind: TensorKind) -> Vec<u8> {
    let mut out = Vec::with_capacity(SLICE_HEADER as usize);
    out.extend_from_slice(SLICE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(layer as u32).to_le_bytes());
    out.extend_from_slice(&(full_len as u64).to_le_bytes());
    out.push(kind.code());
    out
}

/// Converts a sharded checkpoint into per-unit slice files, one unit at a
/// time: at most one full unit plus one shard block is held in memory.
pub fn consolidate_to_sliced(in_dir: &Path, out_dir: &Path) -> Result<SliceMeta> {
    let meta = read_metadata(in_dir)?;
    let world = meta.world_size;
    let mut files = Vec::with_capacity(world);
    let mut headers = Vec::with_capacity(world);
    for rank in 0..world {
        let path = in_dir.join(shard_file_name(rank));
        if !path.exists() {
            return Err(Error::MissingShard {
                rank,
                dir: in_dir.to_path_buf(),
            });
        }
        let mut f = File::open(&path).map_err(|e| Error::io(&path, Some(rank), e))?;
        let h = read_shard_header(&mut f, &path, &meta.layout)?;
        if h.rank != rank || h.world != world {
            return Err(format_err(&path, format!("file holds rank {} of {}", h.rank, h.world)));
        }
        files.push((f, path));
        headers.push(h);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, None, e))?;

    let mut slices = Vec::new();
    let n_records = headers[0].records.len();
    let mut block = Vec::new();
    for i in 0..n_records {
        let rec = headers[0].records[i];
        let full_len = rec.full_len as usize;
        let mut full = Vec::with_capacity(8 * full_len);
        for (rank, (f, path)) in files.iter_mut().enumerate() {
            let pos = headers[rank].record_pos(i);
            block.resize(8 * rec.shard_len as usize, 0);
            f.seek(SeekFrom::Start(pos)).map_err(|e| Error::io(&*path, Some(rank), e))?;
            read_exact_or(f, &mut block, path)?;
            let remaining = 8 * full_len - full.len();
            full.extend_from_slice(&block[..block.len().min(remaining)]);
        }
        let layer = rec.layer as usize;
        let name = slice_file_name(layer, rec.kind);
        let mut bytes = encode_slice_header(layer, full_len, rec.kind);
        bytes.extend_from_slice(&full);
        write_file(&out_dir.join(&name), &bytes, None)?;
        slices.push(SliceEntry {
            layer,
            kind: rec.kind,
            file: name,
        });
    }
    let slice_meta = SliceMeta {
        slices,
        run: meta.run,
        layout: meta.layout,
    };
    write_json(&out_dir.join(SLICES_FILE), &slice_meta)?;
    Ok(slice_meta)
}

/// Reads one full unit vector from a slice file.
pub fn read_slice(dir: &Path, layer: usize, kind: TensorKind, expected_len: usize) -> Result<Vec<f64>> {
    let path = dir.join(slice_file_name(layer, kind));
    let bytes = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::IncompleteSlices {
            dir: dir.to_path_buf(),
            msg: format!("missing {} slice of unit {layer}", kind.as_str()),
        },
        _ => Error::io(&path, None, e),
    })?;
    let mut r = &bytes[..];
    check_magic(&mut r, SLICE_MAGIC, &path)?;
    let file_layer = read_u32(&mut r, &path)? as usize;
    let full_len = read_u64(&mut r, &path)? as usize;
    let file_kind = read_kind(&mut r, &path)?;
    if file_layer != layer || file_kind != kind || full_len != expected_len {
        return Err(format_err(
            &path,
            format!("holds unit {file_layer} {file_kind:?} of length {full_len}, expected unit {layer} {kind:?} of {expected_len}"),
        ));
    }
    if r.len() != 8 * full_len {
        return Err(format_err(&path, format!("payload of {} bytes for {full_len} values", r.len())));
    }
    Ok(f64s_from(r))
}

/// Loads `rank`'s shard at an arbitrary world size from a sliced checkpoint.
pub fn load_sliced(dir: &Path, rank: usize, world: usize) -> Result<(ShardedState, RunInfo)> {
    if world == 0 || rank >= world {
        return Err(Error::InvalidArgument(format!("rank {rank} of world {world}")));
    }
    let meta = read_slice_meta(dir)?;
    let lens = meta.layout.unit_lens();
    let mut units = Vec::with_capacity(lens.len());
    for (layer, &len) in lens.iter().enumerate() {
        let w = read_slice(dir, layer, TensorKind::Weights, len)?;
        let m = read_slice(dir, layer, TensorKind::Momentum, len)?;
        units.push(UnitShard {
            full_len: len,
            weights: shard_vector(&w, rank, world),
            momentum: shard_vector(&m, rank, world),
        });
    }
    Ok((
        ShardedState {
            rank,
            world_size: world,
            layout: meta.layout,
            units,
        },
        meta.run,
    ))
}

/// Writes a sharded checkpoint for `world` ranks from a sliced checkpoint.
pub fn shards_from_sliced(in_dir: &Path, out_dir: &Path, world: usize) -> Result<()> {
    for rank in 0..world {
        let (state, run) = load_sliced(in_dir, rank, world)?;
        save_sharded(&state, &run, out_dir)?;
    }
    Ok(())
}

/// Writes a full set of rank states straight to a sliced checkpoint, staging
/// the shards next to `dir`.
pub fn save_sliced(states: &[ShardedState], run: &RunInfo, dir: &Path) -> Result<SliceMeta> {
    let tmp = dir.with_extension("shards.tmp");
    for st in states {
        save_sharded(st, run, &tmp)?;
    }
    let meta = consolidate_to_sliced(&tmp, dir)?;
    fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, None, e))?;
    Ok(meta)
}

/// Every file a sharded checkpoint consists of, metadata first.
pub fn sharded_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let meta = read_metadata(dir)?;
    let mut out = vec![dir.join(METADATA_FILE)];
    out.extend(meta.files.iter().map(|f| dir.join(f)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Activation, LayeredNet};
    use crate::fsdp::DenseState;

    fn layout() -> NetLayout {
        NetLayout {
            dims: vec![3, 2, 2],
            activations: vec![Activation::Relu, Activation::None],
            n_prototypes: 2,
        }
    }

    fn states(world: usize) -> Vec<ShardedState> {
        let net = LayeredNet::init(&layout(), &mut crate::rng::stream(1, &[9])).unwrap();
        let mut dense = DenseState::new(net);
        for (u, m) in dense.momentum.iter_mut().enumerate() {
            for (i, v) in m.iter_mut().enumerate() {
                *v = (u * 100 + i) as f64 * 0.5;
            }
        }
        dense.shard(world).unwrap()
    }

    fn run() -> RunInfo {
        RunInfo {
            step: 7,
            seed: 3,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn shard_round_trip_and_idempotent_save() {
        let dir = tempfile::tempdir().unwrap();
        let st = states(3);
        for s in &st {
            save_sharded(s, &run(), dir.path()).unwrap();
        }
        let before = fs::read(dir.path().join(shard_file_name(1))).unwrap();
        for (r, s) in st.iter().enumerate() {
            let (loaded, info) = load_sharded(dir.path(), r, 3).unwrap();
            assert_eq!(&loaded, s);
            assert_eq!(info, run());
            save_sharded(&loaded, &info, dir.path()).unwrap();
        }
        assert_eq!(fs::read(dir.path().join(shard_file_name(1))).unwrap(), before);
        assert_eq!(read_metadata(dir.path()).unwrap().files.len(), 3);
    }

    #[test]
    fn wrong_world_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        for s in &states(2) {
            save_sharded(s, &run(), dir.path()).unwrap();
        }
        assert!(matches!(
            load_sharded(dir.path(), 0, 4),
            Err(Error::ReshardRequired { saved: 2, requested: 4 })
        ));
        let path = dir.path().join(shard_file_name(1));
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_sharded(dir.path(), 1, 2), Err(Error::Format { .. })));
        bytes[0] = b'S';
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_sharded(dir.path(), 1, 2), Err(Error::Format { .. })));
        fs::remove_file(&path).unwrap();
        assert!(matches!(
            consolidate_to_sliced(dir.path(), &dir.path().join("s")),
            Err(Error::MissingShard { rank: 1, .. })
        ));
    }

    #[test]
    fn world_one_slices_relabel_payloads() {
        let dir = tempfile::tempdir().unwrap();
        let st = states(1);
        save_sharded(&st[0], &run(), &dir.path().join("a")).unwrap();
        consolidate_to_sliced(&dir.path().join("a"), &dir.path().join("b")).unwrap();
        for (l, u) in st[0].units.iter().enumerate() {
            assert_eq!(read_slice(&dir.path().join("b"), l, TensorKind::Weights, u.full_len).unwrap(), u.weights);
            assert_eq!(read_slice(&dir.path().join("b"), l, TensorKind::Momentum, u.full_len).unwrap(), u.momentum);
        }
    }

    #[test]
    fn missing_slice_reported() {
        let dir = tempfile::tempdir().unwrap();
        for s in &states(2) {
            save_sharded(s, &run(), &dir.path().join("a")).unwrap();
        }
        let out = dir.path().join("b");
        consolidate_to_sliced(&dir.path().join("a"), &out).unwrap();
        fs::remove_file(out.join(slice_file_name(1, TensorKind::Momentum))).unwrap();
        assert!(matches!(load_sliced(&out, 0, 3), Err(Error::IncompleteSlices { .. })));
    }
}
