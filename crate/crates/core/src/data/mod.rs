//! Language-tagged documents, byte tokenization, packing into tagged
//! batches, replay mixing, and the synthetic bilingual corpus.

mod batch;
mod mix;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{build_batches, eval_batches, pack_sequences, BatchStream, PackedSequence, TaggedBatch, TokenTag};
pub use mix::{mix_corpora, MixRatio};
pub use synth::{SynthConfig, SynthLanguage};

/// End-of-document separator.
pub const EOD: usize = 256;
/// Padding id. Never a prediction target.
pub const PAD: usize = 257;
/// 256 byte ids plus the two specials.
pub const VOCAB_SIZE: usize = 258;

/// Whether a language is one the base model already handles or one being
/// added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Original,
    Expanded,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Original => "original",
            Role::Expanded => "expanded",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Role::Original),
            "expanded" => Ok(Role::Expanded),
            other => Err(Error::Data(format!("unknown role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub text: Vec<u8>,
    pub lang: String,
    pub role: Role,
}

impl Document {
    pub fn new(text: impl Into<Vec<u8>>, lang: impl Into<String>, role: Role) -> Self {
        Self {
            text: text.into(),
            lang: lang.into(),
            role,
        }
    }
}

/// One line of the newline-delimited corpus format.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    text: String,
    lang: String,
    role: Role,
}

/// A line that failed validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedLine {
    /// 1-based.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocumentSet {
    pub docs: Vec<Document>,
    pub rejected: Vec<RejectedLine>,
}

impl DocumentSet {
    pub fn new(docs: Vec<Document>) -> Self {
        Self {
            docs,
            rejected: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn count_by_role(&self) -> BTreeMap<Role, usize> {
        let mut out = BTreeMap::new();
        for d in &self.docs {
            *out.entry(d.role).or_insert(0) += 1;
        }
        out
    }

    pub fn with_role(&self, role: Role) -> Vec<Document> {
        self.docs.iter().filter(|d| d.role == role).cloned().collect()
    }

    /// Documents grouped by language code.
    pub fn by_lang(&self) -> BTreeMap<String, Vec<Document>> {
        let mut out: BTreeMap<String, Vec<Document>> = BTreeMap::new();
        for d in &self.docs {
            out.entry(d.lang.clone()).or_default().push(d.clone());
        }
        out
    }

    /// Tokens including each document's end-of-document marker.
    pub fn token_count(&self, role: Option<Role>) -> usize {
        self.docs
            .iter()
            .filter(|d| role.is_none_or(|r| d.role == r))
            .map(|d| d.text.len() + 1)
            .sum()
    }

    /// Serialize to the newline-delimited record format.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for d in &self.docs {
            let text = String::from_utf8(d.text.clone())
                .map_err(|_| Error::Data(format!("document in {} is not UTF-8", d.lang)))?;
            let rec = Record {
                text,
                lang: d.lang.clone(),
                role: d.role,
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

/// Parse newline-delimited `{"text", "lang", "role"}` records. Bad lines
/// are collected in `rejected` and the rest kept.
pub fn parse_corpus(contents: &str) -> Result<DocumentSet> {
    let mut set = DocumentSet::default();
    let mut saw_line = false;
    for (i, line) in contents.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        saw_line = true;
        let reject = |reason: String| RejectedLine { line: i + 1, reason };
        match serde_json::from_str::<Record>(line) {
            Ok(rec) if rec.lang.trim().is_empty() => set.rejected.push(reject("empty lang".into())),
            Ok(rec) => set.docs.push(Document::new(rec.text, rec.lang, rec.role)),
            Err(e) => set.rejected.push(reject(e.to_string())),
        }
    }
    if !saw_line {
        return Err(Error::Data("corpus is empty".into()));
    }
    for r in &set.rejected {
        log::warn!("line {}: {}", r.line, r.reason);
    }
    Ok(set)
}

pub fn ingest_corpus(path: &Path) -> Result<DocumentSet> {
    let contents = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&contents).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Byte-level tokenization: each byte is its own id.
pub fn tokenize(doc: &Document) -> Vec<usize> {
    doc.text.iter().map(|&b| b as usize).collect()
}

/// Inverse of [`tokenize`]; special ids are dropped.
pub fn detokenize(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect()
}
