//! JSONL persistence, record index, corpus statistics and the content-addressed artifact cache.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::record::{ContentHash, License, RepairOutcome, SourceKind, TikZRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    /// Abort on the first malformed line.
    #[default]
    Strict,
    /// Skip malformed lines and report them as diagnostics.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineDiagnostic {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ReadOutcome<T> {
    pub items: Vec<T>,
    pub diagnostics: Vec<LineDiagnostic>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteReceipt {
    pub path: PathBuf,
    pub count: usize,
    /// SHA-256 of the file bytes.
    pub sha256: String,
}

/// Writes any serializable items as JSONL (one compact object per line).
pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<WriteReceipt> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut hasher = Sha256::new();
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        let mut line = serde_json::to_vec(item)?;
        line.push(b'\n');
        hasher.update(&line);
        out.write_all(&line)?;
    }
    out.flush()?;
    Ok(WriteReceipt {
        path: path.to_path_buf(),
        count: items.len(),
        sha256: hex::encode(hasher.finalize()),
    })
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, strictness: Strictness) -> Result<ReadOutcome<T>> {
    let file = File::open(path)?;
    let mut items = Vec::new();
    let mut diagnostics = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(&line) {
            Ok(item) => items.push(item),
            Err(e) => {
                if strictness == Strictness::Strict {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        message: e.to_string(),
                    });
                }
                diagnostics.push(LineDiagnostic {
                    line: idx + 1,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(ReadOutcome { items, diagnostics })
}

/// Writes records after checking invariants and record_id uniqueness.
pub fn write_records(records: &[TikZRecord], path: &Path) -> Result<WriteReceipt> {
    let mut ids = HashSet::with_capacity(records.len());
    for r in records {
        r.validate()?;
        if !ids.insert(r.record_id.as_str()) {
            return Err(Error::invalid(format!("duplicate record_id {}", r.record_id)));
        }
    }
    write_jsonl(records, path)
}

pub fn read_records(path: &Path, strictness: Strictness) -> Result<ReadOutcome<TikZRecord>> {
    read_jsonl(path, strictness)
}

fn index_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".idx");
    PathBuf::from(p)
}

/// Builds `<path>.idx`, a JSON map from record_id to byte offset of its line.
pub fn write_index(path: &Path) -> Result<BTreeMap<String, u64>> {
    #[derive(Deserialize)]
    struct IdOnly {
        record_id: String,
    }
    let mut reader = BufReader::new(File::open(path)?);
    let mut offset = 0u64;
    let mut index = BTreeMap::new();
    let mut buf = String::new();
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 {
            break;
        }
        if let Ok(rec) = serde_json::from_str::<IdOnly>(buf.trim_end()) {
            index.insert(rec.record_id, offset);
        }
        offset += n as u64;
    }
    fs::write(index_path(path), serde_json::to_vec(&index)?)?;
    Ok(index)
}

/// Fetches one record through the index file written by [`write_index`].
pub fn lookup_record(path: &Path, record_id: &str) -> Result<Option<TikZRecord>> {
    let index: BTreeMap<String, u64> = serde_json::from_slice(&fs::read(index_path(path))?)?;
    let Some(&offset) = index.get(record_id) else {
        return Ok(None);
    };
    let mut file = File::open(path)?;
    file.seek(SeekFrom::Start(offset))?;
    let mut line = String::new();
    BufReader::new(file).read_line(&mut line)?;
    Ok(Some(serde_json::from_str(line.trim_end())?))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub count: usize,
    /// Compiled without needing repair.
    pub compiled_first_pass: usize,
    pub repaired: usize,
    pub repaired_first_iteration: usize,
    pub repair_failed: usize,
    /// Fraction compiled after repair.
    pub compile_rate: f64,
    pub first_pass_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: usize,
    pub per_source: BTreeMap<SourceKind, SourceStats>,
    pub license_shares: BTreeMap<License, f64>,
    pub redistributable_share: f64,
    pub first_pass_rate: f64,
    pub compile_rate: f64,
    pub repaired: usize,
    pub repaired_first_iteration: usize,
    pub described: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn corpus_stats(records: &[TikZRecord]) -> CorpusStats {
    let mut stats = CorpusStats {
        total: records.len(),
        ..Default::default()
    };
    let mut licenses: BTreeMap<License, usize> = BTreeMap::new();
    let mut compiled = 0;
    let mut first_pass = 0;
    for r in records {
        let s = stats.per_source.entry(r.source_kind).or_default();
        s.count += 1;
        let ok = r.is_compiled();
        if ok {
            compiled += 1;
        }
        match r.repair_outcome {
            RepairOutcome::NotNeeded if ok => {
                s.compiled_first_pass += 1;
                first_pass += 1;
            }
            RepairOutcome::RepairedAt(k) => {
                s.repaired += 1;
                stats.repaired += 1;
                if k == 1 {
                    s.repaired_first_iteration += 1;
                    stats.repaired_first_iteration += 1;
                }
            }
            RepairOutcome::Failed => s.repair_failed += 1,
            RepairOutcome::NotNeeded => {}
        }
        if r.description.is_some() {
            stats.described += 1;
        }
        *licenses.entry(r.license).or_default() += 1;
    }
    for s in stats.per_source.values_mut() {
        s.first_pass_rate = ratio(s.compiled_first_pass, s.count);
        s.compile_rate = ratio(s.compiled_first_pass + s.repaired, s.count);
    }
    stats.license_shares = licenses
        .iter()
        .map(|(l, n)| (*l, ratio(*n, records.len())))
        .collect();
    stats.redistributable_share = ratio(
        licenses
            .iter()
            .filter(|(l, _)| l.redistributable())
            .map(|(_, n)| n)
            .sum(),
        records.len(),
    );
    stats.first_pass_rate = ratio(first_pass, records.len());
    stats.compile_rate = ratio(compiled, records.len());
    stats
}

/// Content-addressed blob store with a two-level hex fan-out (`ab/cd/abcd….ext`).
#[derive(Debug)]
pub struct ArtifactCache {
    root: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ArtifactCache {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)
            .map_err(|e| Error::Infrastructure(format!("cannot create cache {}: {e}", root.display())))?;
        Ok(ArtifactCache {
            root,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Relative key for a hash, e.g. `ab/cd/abcd….png`.
    pub fn key(hash: &ContentHash, ext: &str) -> String {
        let hex = hash.to_hex();
        format!("{}/{}/{}.{}", &hex[..2], &hex[2..4], hex, ext)
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.root.join(key)
    }

    /// Stores bytes atomically (write to a temp file, then rename). Idempotent.
    pub fn put(&self, hash: &ContentHash, ext: &str, bytes: &[u8]) -> Result<String> {
        let key = Self::key(hash, ext);
        let dest = self.path_for(&key);
        if dest.exists() {
            return Ok(key);
        }
        let parent = dest.parent().expect("key has parent directories");
        fs::create_dir_all(parent).map_err(|e| Error::Infrastructure(e.to_string()))?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| Error::Infrastructure(e.to_string()))?;
        tmp.write_all(bytes).map_err(|e| Error::Infrastructure(e.to_string()))?;
        tmp.persist(&dest)
            .map_err(|e| Error::Infrastructure(format!("cannot persist {}: {e}", dest.display())))?;
        Ok(key)
    }

    pub fn get(&self, hash: &ContentHash, ext: &str) -> Result<Option<Vec<u8>>> {
        let path = self.path_for(&Self::key(hash, ext));
        match File::open(&path) {
            Ok(mut f) => {
                let mut buf = Vec::new();
                f.read_to_end(&mut buf)?;
                self.hits.fetch_add(1, Ordering::Relaxed);
                Ok(Some(buf))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}
