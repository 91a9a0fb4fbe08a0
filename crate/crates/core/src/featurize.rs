//! Evidence text to node feature vectors.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_TOKENS: usize = 140;
pub const SEPARATOR: &str = "</s>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceKind {
    Sentence,
    TableCell,
    TableCaption,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidencePiece {
    pub id: String,
    pub kind: EvidenceKind,
    pub wiki_title: String,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header2: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_rationale: Option<bool>,
}

impl EvidencePiece {
    pub fn sentence(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind: EvidenceKind::Sentence,
            wiki_title: title.into(),
            text: text.into(),
            header1: None,
            header2: None,
            cell_value: None,
            is_rationale: None,
        }
    }

    pub fn cell(
        id: impl Into<String>,
        title: impl Into<String>,
        header1: impl Into<String>,
        header2: Option<String>,
        value: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            kind: EvidenceKind::TableCell,
            wiki_title: title.into(),
            text: String::new(),
            header1: Some(header1.into()),
            header2,
            cell_value: Some(value.into()),
            is_rationale: None,
        }
    }

    /// Cells need a first header and a value.
    pub fn validate(&self) -> Result<()> {
        if self.kind == EvidenceKind::TableCell && (self.header1.is_none() || self.cell_value.is_none()) {
            return Err(Error::MalformedEvidence {
                id: self.id.clone(),
                detail: "table cell requires header1 and cell_value".into(),
            });
        }
        Ok(())
    }
}

/// Renders a table cell as a sentence:
/// `In {title}, the header is {h1}[ and {h2}], the value is {value}.`
pub fn linearize_cell(piece: &EvidencePiece) -> Result<String> {
    let malformed = |detail: &str| Error::MalformedEvidence {
        id: piece.id.clone(),
        detail: detail.into(),
    };
    if piece.kind != EvidenceKind::TableCell {
        return Err(malformed("only table cells can be linearized"));
    }
    let header1 = piece.header1.as_deref().ok_or_else(|| malformed("missing header1"))?;
    let value = piece
        .cell_value
        .as_deref()
        .ok_or_else(|| malformed("missing cell_value"))?;
    let header = match piece.header2.as_deref() {
        Some(h2) => format!("{header1} and {h2}"),
        None => header1.to_string(),
    };
    Ok(format!(
        "In {}, the header is {header}, the value is {value}.",
        piece.wiki_title
    ))
}

/// `{claim} </s> {title} : {evidence}`, cut to `max_tokens` whitespace tokens.
pub fn build_sequence(claim: &str, piece: &EvidencePiece, max_tokens: usize) -> Result<String> {
    let evidence = match piece.kind {
        EvidenceKind::TableCell => linearize_cell(piece)?,
        EvidenceKind::Sentence | EvidenceKind::TableCaption => piece.text.clone(),
    };
    let sequence = format!("{claim} {SEPARATOR} {} : {evidence}", piece.wiki_title);
    Ok(truncate_tokens(&sequence, max_tokens))
}

pub fn truncate_tokens(text: &str, max_tokens: usize) -> String {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() <= max_tokens {
        return text.to_string();
    }
    tokens[..max_tokens].join(" ")
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(PRIME))
}

/// Bucket a lowercase token lands in for a hashed bag-of-words of width `dim`.
pub fn token_bucket(token: &str, dim: usize) -> usize {
    (fnv1a64(token.to_lowercase().as_bytes()) % dim as u64) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    HashedBow,
    FileLookup,
}

/// Source of node embeddings.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingProvider {
    HashedBow {
        dim: usize,
    },
    FileLookup {
        dim: usize,
        vectors: HashMap<String, Vec<Vec<f64>>>,
    },
}

#[derive(Deserialize)]
struct EmbeddingLine {
    instance_id: String,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingProvider {
    pub fn hashed(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("embedding dim must be >= 2, got {dim}")));
        }
        Ok(Self::HashedBow { dim })
    }

    /// Loads a JSON-lines embedding file; every vector must have length `dim`.
    pub fn from_file(path: &Path, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("embedding dim must be >= 2, got {dim}")));
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut vectors = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: EmbeddingLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                detail: e.to_string(),
            })?;
            if let Some(bad) = parsed.vectors.iter().find(|v| v.len() != dim) {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    detail: format!("vector of length {} does not match dim {dim}", bad.len()),
                });
            }
            vectors.insert(parsed.instance_id, parsed.vectors);
        }
        Ok(Self::FileLookup { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::HashedBow { dim } | Self::FileLookup { dim, .. } => *dim,
        }
    }

    pub fn kind(&self) -> ProviderKind {
        match self {
            Self::HashedBow { .. } => ProviderKind::HashedBow,
            Self::FileLookup { .. } => ProviderKind::FileLookup,
        }
    }

    pub fn embed(&self, sequence: &str, instance_id: &str, node_index: usize) -> Result<Vec<f64>> {
        match self {
            Self::HashedBow { dim } => Ok(hashed_bow(sequence, *dim)),
            Self::FileLookup { vectors, .. } => vectors
                .get(instance_id)
                .and_then(|rows| rows.get(node_index))
                .cloned()
                .ok_or_else(|| Error::MissingEmbedding {
                    instance_id: instance_id.to_string(),
                    node_index,
                }),
        }
    }
}

/// L2-normalized token counts; empty text maps to the zero vector.
pub fn hashed_bow(text: &str, dim: usize) -> Vec<f64> {
    let mut counts = vec![0.0; dim];
    for token in text.split_whitespace() {
        counts[token_bucket(token, dim)] += 1.0;
    }
    let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm > 0.0 {
        counts.iter_mut().for_each(|c| *c /= norm);
    }
    counts
}
