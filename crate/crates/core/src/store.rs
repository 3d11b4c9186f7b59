//! Embedding persistence: a flat binary format holding one f32 vector per
//! (sample, model-version) pair, written and read bit-exactly.

use crate::error::{Error, Result};
use std::collections::{BTreeMap, HashMap};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"BCTF";
const FORMAT_VERSION: u32 = 1;

/// One stored embedding, tagged with the model version that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub sample_id: String,
    pub class_id: i64,
    pub version: String,
    pub embedding: Vec<f32>,
}

/// In-memory collection of feature records, unique per (sample, version),
/// with a consistent embedding width per version.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    records: Vec<FeatureRecord>,
    index: HashMap<(String, String), usize>,
    dims: BTreeMap<String, usize>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: FeatureRecord) -> Result<()> {
        if record.embedding.is_empty() {
            return Err(Error::StoreFormat(format!(
                "record {} has an empty embedding",
                record.sample_id
            )));
        }
        if record.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "stored embedding" });
        }
        if let Some(&dim) = self.dims.get(&record.version) {
            if dim != record.embedding.len() {
                return Err(Error::InconsistentDim {
                    version: record.version.clone(),
                    expected: dim,
                    actual: record.embedding.len(),
                });
            }
        }
        let key = (record.sample_id.clone(), record.version.clone());
        if self.index.contains_key(&key) {
            return Err(Error::DuplicateRecord {
                sample_id: record.sample_id,
                version: record.version,
            });
        }
        self.dims.insert(record.version.clone(), record.embedding.len());
        self.index.insert(key, self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    /// Version tags present, ascending.
    pub fn versions(&self) -> Vec<&str> {
        self.dims.keys().map(|s| s.as_str()).collect()
    }

    pub fn dim_of(&self, version: &str) -> Option<usize> {
        self.dims.get(version).copied()
    }

    pub fn get(&self, sample_id: &str, version: &str) -> Option<&FeatureRecord> {
        self.index
            .get(&(sample_id.to_string(), version.to_string()))
            .map(|&i| &self.records[i])
    }

    pub fn records_for_version(&self, version: &str) -> Vec<&FeatureRecord> {
        self.records.iter().filter(|r| r.version == version).collect()
    }

    /// Absorbs another store; collisions surface as duplicate errors.
    pub fn merge(&mut self, other: FeatureStore) -> Result<()> {
        for r in other.records {
            self.insert(r)?;
        }
        Ok(())
    }

    /// Serializes every record, in insertion order. A file carries a single
    /// embedding width, so stores mixing widths must be written separately.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::StoreFormat("refusing to write an empty store".into()));
        }
        let dim = self.records[0].embedding.len();
        if self.dims.values().any(|&d| d != dim) {
            return Err(Error::StoreFormat(format!(
                "store mixes embedding widths {:?}; one width per file",
                self.dims.values().collect::<Vec<_>>()
            )));
        }
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(dim as u32).to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            write_str(&mut w, &r.sample_id)?;
            w.write_all(&r.class_id.to_le_bytes())?;
            write_str(&mut w, &r.version)?;
            for v in &r.embedding {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<FeatureStore> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::StoreFormat(format!("bad magic {magic:?}")));
        }
        let format = read_u32(&mut r)?;
        if format != FORMAT_VERSION {
            return Err(Error::StoreFormat(format!("unsupported format version {format}")));
        }
        let dim = read_u32(&mut r)? as usize;
        if dim == 0 {
            return Err(Error::StoreFormat("zero embedding width".into()));
        }
        let count = read_u64(&mut r)?;
        let mut store = FeatureStore::new();
        for _ in 0..count {
            let sample_id = read_str(&mut r)?;
            let mut cls = [0u8; 8];
            read_exact(&mut r, &mut cls)?;
            let class_id = i64::from_le_bytes(cls);
            let version = read_str(&mut r)?;
            let mut embedding = Vec::with_capacity(dim);
            for _ in 0..dim {
                let mut b = [0u8; 4];
                read_exact(&mut r, &mut b)?;
                embedding.push(f32::from_le_bytes(b));
            }
            store.insert(FeatureRecord { sample_id, class_id, version, embedding })?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::StoreFormat("trailing bytes after final record".into()));
        }
        Ok(store)
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    if s.len() > u16::MAX as usize {
        return Err(Error::StoreFormat(format!("string field of {} bytes", s.len())));
    }
    w.write_all(&(s.len() as u16).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::StoreFormat("truncated file".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let mut lb = [0u8; 2];
    read_exact(r, &mut lb)?;
    let len = u16::from_le_bytes(lb) as usize;
    let mut bytes = vec![0u8; len];
    read_exact(r, &mut bytes)?;
    String::from_utf8(bytes).map_err(|e| Error::StoreFormat(format!("bad utf-8: {e}")))
}
