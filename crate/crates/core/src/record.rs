//! Shared record schema: source documents, provenance enums and the canonical
//! `TikZRecord` that flows between pipeline stages.

use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Schema tag written into every persisted record.
pub const RECORD_SCHEMA: &str = "tikzkit.record/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Arxiv,
    Github,
    Texse,
    Synthetic,
    Curated,
}

impl SourceKind {
    pub const ALL: [SourceKind; 5] = [
        SourceKind::Arxiv,
        SourceKind::Github,
        SourceKind::Texse,
        SourceKind::Synthetic,
        SourceKind::Curated,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum License {
    PermissiveCc,
    NonexclusiveDist,
    Unknown,
}

impl License {
    /// Only permissive Creative Commons material may be redistributed.
    pub fn redistributable(self) -> bool {
        matches!(self, License::PermissiveCc)
    }
}

impl Default for License {
    fn default() -> Self {
        License::Unknown
    }
}

/// One TeX source file (or forum post) as ingested from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub id: String,
    pub source_kind: SourceKind,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<NaiveDate>,
    #[serde(default)]
    pub license: License,
    pub origin_key: String,
}

impl SourceDocument {
    /// Builds a document from raw bytes; malformed UTF-8 is replaced with U+FFFD.
    pub fn from_bytes(
        id: impl Into<String>,
        source_kind: SourceKind,
        bytes: &[u8],
        origin_key: impl Into<String>,
    ) -> Self {
        SourceDocument {
            id: id.into(),
            source_kind,
            raw_text: String::from_utf8_lossy(bytes).into_owned(),
            date: None,
            license: License::Unknown,
            origin_key: origin_key.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.id.is_empty() {
            problems.push("document id is empty".to_string());
        }
        if self.raw_text.is_empty() {
            problems.push(format!("document {}: raw_text is empty", self.id));
        }
        if self.origin_key.is_empty() {
            problems.push(format!("document {}: origin_key is empty", self.id));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(problems.join("; ")))
        }
    }

    pub fn meta(&self) -> SourceMeta {
        SourceMeta {
            source_kind: self.source_kind,
            origin_key: self.origin_key.clone(),
            license: self.license,
            date: self.date,
        }
    }
}

/// Provenance carried alongside extracted snippets so later stages need not
/// re-read the source documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub source_kind: SourceKind,
    pub origin_key: String,
    pub license: License,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<NaiveDate>,
}

/// SHA-256 digest, serialized as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn of(bytes: &[u8]) -> Self {
        ContentHash(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::invalid(format!("bad hash {s:?}: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::invalid(format!("hash {s:?} is not 32 bytes")))?;
        Ok(ContentHash(arr))
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", self.to_hex())
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ContentHash::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompileStatus {
    Ok,
    CompileError,
    Timeout,
    EmptyOutput,
    CorruptedOutput,
}

impl CompileStatus {
    pub fn is_ok(self) -> bool {
        self == CompileStatus::Ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairOutcome {
    NotNeeded,
    /// Repaired by the 1-based attempt `k`.
    RepairedAt(u32),
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Quarantine,
}

/// Canonical corpus record. Unknown JSON fields survive a read/write cycle in `extra`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TikZRecord {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub record_id: String,
    pub source_kind: SourceKind,
    pub origin_key: String,
    #[serde(default)]
    pub license: License,
    #[serde(default)]
    pub date: Option<NaiveDate>,
    pub code: String,
    #[serde(default)]
    pub caption: Option<String>,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub compile_status: Option<CompileStatus>,
    #[serde(default = "default_repair")]
    pub repair_outcome: RepairOutcome,
    #[serde(default)]
    pub image_artifact: Option<String>,
    #[serde(default)]
    pub split: Option<Split>,
    /// Stage names that produced this version of the record, oldest first.
    #[serde(default)]
    pub provenance: Vec<String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

fn default_schema() -> String {
    RECORD_SCHEMA.to_string()
}

fn default_repair() -> RepairOutcome {
    RepairOutcome::NotNeeded
}

impl TikZRecord {
    pub fn new(record_id: impl Into<String>, meta: &SourceMeta, code: impl Into<String>) -> Self {
        TikZRecord {
            schema: default_schema(),
            record_id: record_id.into(),
            source_kind: meta.source_kind,
            origin_key: meta.origin_key.clone(),
            license: meta.license,
            date: meta.date,
            code: code.into(),
            caption: None,
            description: None,
            compile_status: None,
            repair_outcome: RepairOutcome::NotNeeded,
            image_artifact: None,
            split: None,
            provenance: Vec::new(),
            extra: serde_json::Map::new(),
        }
    }

    /// Returns a new version of the record with `stage` appended to the audit trail.
    pub fn next_version(&self, stage: &str) -> Self {
        let mut next = self.clone();
        next.provenance.push(stage.to_string());
        next
    }

    pub fn is_compiled(&self) -> bool {
        self.compile_status.is_some_and(CompileStatus::is_ok)
    }

    /// Checks the cross-field invariants that must hold before persisting.
    pub fn validate(&self) -> Result<()> {
        if self.record_id.is_empty() {
            return Err(Error::invalid("record_id is empty"));
        }
        if self.split == Some(Split::Test) && (!self.is_compiled() || self.description.is_none()) {
            return Err(Error::invalid(format!(
                "record {} is in the test split but is not compiled and described",
                self.record_id
            )));
        }
        Ok(())
    }
}
