//! Persistent per-layer embedding cache.
//!
//! One cache directory holds embeddings for exactly one (model, pooling)
//! pair: a binary container `embeddings.rpec` plus a human-readable
//! `manifest.json`. The container starts with the magic bytes `RPEC1`, a
//! header pinning model id, pooling strategy and topology, followed by
//! length-prefixed records of `(text_hash, num_layers x hidden_dim)`
//! float32 little-endian values. Records are committed atomically: a
//! truncated trailing record (e.g. after a crash) is detected on open and
//! ignored.

use crate::encoder::Pooling;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 5] = b"RPEC1";
pub const CACHE_FILE: &str = "embeddings.rpec";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Identity and topology pinned by a cache file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub model_id: String,
    pub pooling: Pooling,
    pub num_layers: usize,
    pub hidden_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    model_id: String,
    pooling: Pooling,
    num_layers: usize,
    hidden_dim: usize,
    record_count: usize,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    text_hash: String,
    offset: u64,
}

/// Single-writer, multi-reader embedding store for one (model, pooling)
/// pair. Values are stored as float32; lookups return them unchanged.
#[derive(Debug)]
pub struct EmbeddingCache {
    header: CacheHeader,
    dir: PathBuf,
    /// text_hash -> byte offset of the record start.
    index: HashMap<String, u64>,
    /// Insertion order, for the manifest.
    order: Vec<String>,
}

impl EmbeddingCache {
    /// Open a cache directory, creating it (and the container) if absent.
    /// An existing container must match `header` exactly.
    pub fn open(dir: &Path, header: CacheHeader) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(CACHE_FILE);
        if !path.exists() {
            let mut file = std::fs::File::create(&path)?;
            write_header(&mut file, &header)?;
            file.sync_all()?;
            let cache = Self {
                header,
                dir: dir.to_path_buf(),
                index: HashMap::new(),
                order: Vec::new(),
            };
            cache.write_manifest()?;
            return Ok(cache);
        }

        let mut file = std::fs::File::open(&path)?;
        let on_disk = read_header(&mut file)?;
        if on_disk != header {
            return Err(Error::CacheHeaderMismatch(format!(
                "cache at {} holds ({}, {:?}, L={}, d={}) but ({}, {:?}, L={}, d={}) was requested",
                dir.display(),
                on_disk.model_id,
                on_disk.pooling,
                on_disk.num_layers,
                on_disk.hidden_dim,
                header.model_id,
                header.pooling,
                header.num_layers,
                header.hidden_dim,
            )));
        }
        let (index, order) = scan_records(&mut file, &header)?;
        Ok(Self {
            header,
            dir: dir.to_path_buf(),
            index,
            order,
        })
    }

    /// Open a cache directory and accept whatever header it carries.
    pub fn open_existing(dir: &Path) -> Result<Self> {
        let path = dir.join(CACHE_FILE);
        let mut file = std::fs::File::open(&path)
            .map_err(|e| Error::Storage(format!("cannot open cache {}: {e}", path.display())))?;
        let header = read_header(&mut file)?;
        let (index, order) = scan_records(&mut file, &header)?;
        Ok(Self {
            header,
            dir: dir.to_path_buf(),
            index,
            order,
        })
    }

    pub fn header(&self) -> &CacheHeader {
        &self.header
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, text_hash: &str) -> bool {
        self.index.contains_key(text_hash)
    }

    /// Append one record (all layers of one text). Re-inserting an existing
    /// hash is a no-op, which makes precomputation idempotent.
    pub fn insert(&mut self, text_hash: &str, values: &[f32]) -> Result<()> {
        if self.contains(text_hash) {
            return Ok(());
        }
        let expected = self.header.num_layers * self.header.hidden_dim;
        if values.len() != expected {
            return Err(Error::Storage(format!(
                "record for {text_hash} has {} values, expected {expected}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "embedding for {text_hash} contains non-finite values"
            )));
        }

        let path = self.dir.join(CACHE_FILE);
        let mut file = std::fs::OpenOptions::new().append(true).open(&path)?;
        let offset = file.seek(SeekFrom::End(0))?;

        let mut buf = Vec::with_capacity(4 + text_hash.len() + 4 + values.len() * 4);
        buf.extend_from_slice(&(text_hash.len() as u32).to_le_bytes());
        buf.extend_from_slice(text_hash.as_bytes());
        buf.extend_from_slice(&((values.len() * 4) as u32).to_le_bytes());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        // One write + flush per record keeps partially-written trailing
        // records detectable (and skippable) on the next open.
        file.write_all(&buf)?;
        file.flush()?;

        self.index.insert(text_hash.to_string(), offset);
        self.order.push(text_hash.to_string());
        Ok(())
    }

    /// All layers of one text, layer-major: `num_layers * hidden_dim` f32s.
    pub fn get(&self, text_hash: &str) -> Result<Vec<f32>> {
        let &offset = self.index.get(text_hash).ok_or_else(|| Error::CacheMiss {
            text_hash: text_hash.to_string(),
            cache: self.dir.display().to_string(),
        })?;
        let path = self.dir.join(CACHE_FILE);
        let mut file = std::fs::File::open(&path)?;
        file.seek(SeekFrom::Start(offset))?;
        let hash_len = read_u32(&mut file)? as usize;
        let mut hash_bytes = vec![0u8; hash_len];
        file.read_exact(&mut hash_bytes)?;
        let payload_len = read_u32(&mut file)? as usize;
        let mut payload = vec![0u8; payload_len];
        file.read_exact(&mut payload)?;
        Ok(payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// One layer of one text as f32 values widened to f64 for numeric code.
    pub fn get_layer(&self, text_hash: &str, layer_index: usize) -> Result<Vec<f64>> {
        if layer_index >= self.header.num_layers {
            return Err(Error::Argument(format!(
                "layer index {layer_index} out of range 0..{}",
                self.header.num_layers
            )));
        }
        let all = self.get(text_hash)?;
        let d = self.header.hidden_dim;
        Ok(all[layer_index * d..(layer_index + 1) * d]
            .iter()
            .map(|&v| v as f64)
            .collect())
    }

    /// Rewrite the human-readable manifest from the in-memory index.
    pub fn write_manifest(&self) -> Result<()> {
        let manifest = Manifest {
            model_id: self.header.model_id.clone(),
            pooling: self.header.pooling,
            num_layers: self.header.num_layers,
            hidden_dim: self.header.hidden_dim,
            record_count: self.order.len(),
            entries: self
                .order
                .iter()
                .map(|hash| ManifestEntry {
                    text_hash: hash.clone(),
                    offset: self.index[hash],
                })
                .collect(),
        };
        let path = self.dir.join(MANIFEST_FILE);
        let tmp = self.dir.join(format!("{MANIFEST_FILE}.tmp"));
        let file = std::fs::File::create(&tmp)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}

fn write_header(file: &mut std::fs::File, header: &CacheHeader) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.model_id.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.model_id.as_bytes());
    buf.push(header.pooling.wire_tag());
    buf.extend_from_slice(&(header.num_layers as u32).to_le_bytes());
    buf.extend_from_slice(&(header.hidden_dim as u32).to_le_bytes());
    file.write_all(&buf)?;
    Ok(())
}

fn read_header(file: &mut std::fs::File) -> Result<CacheHeader> {
    let mut magic = [0u8; 5];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Storage("cache file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Storage(format!(
            "bad cache magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let id_len = read_u32(file)? as usize;
    let mut id_bytes = vec![0u8; id_len];
    file.read_exact(&mut id_bytes)?;
    let model_id = String::from_utf8(id_bytes)
        .map_err(|_| Error::Storage("model id in cache header is not UTF-8".into()))?;
    let mut tag = [0u8; 1];
    file.read_exact(&mut tag)?;
    let pooling = Pooling::from_wire_tag(tag[0])?;
    let num_layers = read_u32(file)? as usize;
    let hidden_dim = read_u32(file)? as usize;
    Ok(CacheHeader {
        model_id,
        pooling,
        num_layers,
        hidden_dim,
    })
}

fn read_u32(file: &mut std::fs::File) -> Result<u32> {
    let mut buf = [0u8; 4];
    file.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Scan all complete records after the header; a truncated trailing record
/// is skipped with a warning.
fn scan_records(
    file: &mut std::fs::File,
    header: &CacheHeader,
) -> Result<(HashMap<String, u64>, Vec<String>)> {
    let expected_payload = (header.num_layers * header.hidden_dim * 4) as u32;
    let file_len = file.metadata()?.len();
    let mut index = HashMap::new();
    let mut order = Vec::new();
    let mut pos = file.stream_position()?;

    while pos < file_len {
        file.seek(SeekFrom::Start(pos))?;
        let record_start = pos;
        let Ok(hash_len) = read_u32(file) else { break };
        let mut hash_bytes = vec![0u8; hash_len as usize];
        if file.read_exact(&mut hash_bytes).is_err() {
            log::warn!("cache holds a truncated record at offset {record_start}; ignoring");
            break;
        }
        let Ok(payload_len) = read_u32(file) else {
            log::warn!("cache holds a truncated record at offset {record_start}; ignoring");
            break;
        };
        if payload_len != expected_payload {
            return Err(Error::Storage(format!(
                "record at offset {record_start} has payload {payload_len} bytes, expected {expected_payload}"
            )));
        }
        let next = pos + 4 + hash_len as u64 + 4 + payload_len as u64;
        if next > file_len {
            log::warn!("cache holds a truncated record at offset {record_start}; ignoring");
            break;
        }
        let hash = String::from_utf8(hash_bytes)
            .map_err(|_| Error::Storage("text hash is not UTF-8".into()))?;
        if index.insert(hash.clone(), record_start).is_none() {
            order.push(hash);
        }
        pos = next;
    }
    Ok((index, order))
}
