//! Newline-delimited JSON manifests: one header record, then one record per
//! sample. Paths are relative to the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "forgeseg-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Provenance of a sample. Unrecognised tags deserialise to `Other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourceTag {
    #[serde(rename = "real-A")]
    RealA,
    #[serde(rename = "real-B")]
    RealB,
    #[serde(rename = "spliced-entire")]
    SplicedEntire,
    #[serde(rename = "spliced-partial")]
    SplicedPartial,
    #[serde(rename = "other", other)]
    Other,
}

impl SourceTag {
    pub const ALL: [SourceTag; 5] = [
        SourceTag::RealA,
        SourceTag::RealB,
        SourceTag::SplicedEntire,
        SourceTag::SplicedPartial,
        SourceTag::Other,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SourceTag::RealA => "real-A",
            SourceTag::RealB => "real-B",
            SourceTag::SplicedEntire => "spliced-entire",
            SourceTag::SplicedPartial => "spliced-partial",
            SourceTag::Other => "other",
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image_path: String,
    pub mask_path: String,
    pub label: u8,
    pub source_tag: SourceTag,
    pub group_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    seed: u64,
    config_hash: String,
    records: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config_hash: String,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.label > 1 {
                return Err(Error::Validation(format!("{}: label {} is not 0 or 1", r.image_path, r.label)));
            }
            for p in [&r.image_path, &r.mask_path] {
                if !seen.insert(p.as_str()) {
                    return Err(Error::Validation(format!("duplicate path {p}")));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        self.validate()?;
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            records: self.records.len(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::from_lines(text.lines().map(|l| Ok(l.to_string())))
    }

    fn from_lines(mut lines: impl Iterator<Item = Result<String>>) -> Result<Self> {
        let first = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Validation("manifest is empty".into()))?;
        let header: Header = serde_json::from_str(&first)
            .map_err(|e| Error::Validation(format!("manifest header: {e}")))?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(Error::Validation(format!(
                "unsupported manifest {} v{}",
                header.format, header.version
            )));
        }
        let mut records = Vec::with_capacity(header.records);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Validation(format!("manifest line {}: {e}", i + 2)))?;
            records.push(rec);
        }
        if records.len() != header.records {
            return Err(Error::Validation(format!(
                "header announces {} records, found {}",
                header.records,
                records.len()
            )));
        }
        let manifest = Self { seed: header.seed, config_hash: header.config_hash, records };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl()?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(
            BufReader::new(f)
                .lines()
                .map(|l| l.map_err(|e| Error::io(path, e))),
        )
    }
}

/// Directory that relative manifest paths resolve against.
pub fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}
