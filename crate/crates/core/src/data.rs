//! Instances on disk, the planted-rationale generator, and file persistence.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::Explanation;
use crate::featurize::{token_bucket, EmbeddingProvider, EvidencePiece};
use crate::graph::{build_graph, EvidenceGraph, GraphOptions};
use crate::model::{ModelCheckpoint, TrainExample, CHECKPOINT_VERSION};

pub const EXPLANATION_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "SUPPORTS")]
    Supports,
    #[serde(rename = "REFUTES")]
    Refutes,
}

impl Verdict {
    pub fn index(self) -> usize {
        match self {
            Self::Supports => 0,
            Self::Refutes => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Self::Supports
        } else {
            Self::Refutes
        }
    }

    fn parse(label: &str) -> Option<Self> {
        match label {
            "SUPPORTS" => Some(Self::Supports),
            "REFUTES" => Some(Self::Refutes),
            _ => None,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Supports => "SUPPORTS",
            Self::Refutes => "REFUTES",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Instance {
    pub id: String,
    pub claim: String,
    pub label: Verdict,
    pub evidence: Vec<EvidencePiece>,
}

/// On-disk form; the label stays a string so unsupported labels get a
/// specific message, and gold may also be listed by id.
#[derive(Deserialize)]
struct RawInstance {
    id: String,
    claim: String,
    label: String,
    evidence: Vec<EvidencePiece>,
    #[serde(default)]
    rationale_ids: Option<Vec<String>>,
}

impl Instance {
    /// Ids of pieces flagged as gold rationale.
    pub fn gold_ids(&self) -> Vec<&str> {
        self.evidence
            .iter()
            .filter(|p| p.is_rationale == Some(true))
            .map(|p| p.id.as_str())
            .collect()
    }

    pub fn has_gold(&self) -> bool {
        self.evidence.iter().all(|p| p.is_rationale.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |detail: String| Error::InvalidInstance {
            id: self.id.clone(),
            detail,
        };
        if self.evidence.is_empty() {
            return Err(invalid("no evidence pieces".into()));
        }
        let mut seen = HashSet::new();
        for p in &self.evidence {
            p.validate()?;
            if !seen.insert(p.id.as_str()) {
                return Err(invalid(format!("duplicate evidence id {}", p.id)));
            }
        }
        let flagged = self.evidence.iter().filter(|p| p.is_rationale.is_some()).count();
        if flagged != 0 && flagged != self.evidence.len() {
            return Err(invalid("is_rationale must be set on every piece or none".into()));
        }
        if flagged != 0 && self.gold_ids().is_empty() {
            return Err(invalid("gold rationale set is empty".into()));
        }
        Ok(())
    }

    pub fn graph(&self, provider: &EmbeddingProvider, options: GraphOptions) -> Result<EvidenceGraph> {
        build_graph(&self.id, &self.claim, &self.evidence, provider, options)
    }

    pub fn train_example(&self, provider: &EmbeddingProvider, options: GraphOptions) -> Result<TrainExample> {
        Ok(TrainExample {
            id: self.id.clone(),
            graph: self.graph(provider, options)?,
            label: self.label,
        })
    }
}

impl RawInstance {
    fn into_instance(mut self) -> Result<Instance> {
        let invalid = |id: &str, detail: String| Error::InvalidInstance {
            id: id.to_string(),
            detail,
        };
        let label = match Verdict::parse(&self.label) {
            Some(v) => v,
            None if self.label == "NOT ENOUGH INFO" => {
                return Err(invalid(
                    &self.id,
                    "label NOT ENOUGH INFO is not supported; such claims must be removed".into(),
                ))
            }
            None => return Err(invalid(&self.id, format!("unknown label {:?}", self.label))),
        };
        if let Some(ids) = self.rationale_ids.take() {
            let known: HashSet<&str> = self.evidence.iter().map(|p| p.id.as_str()).collect();
            if let Some(missing) = ids.iter().find(|id| !known.contains(id.as_str())) {
                return Err(invalid(
                    &self.id,
                    format!("gold rationale {missing} is not among the evidence pieces"),
                ));
            }
            let gold: HashSet<&str> = ids.iter().map(String::as_str).collect();
            for p in &mut self.evidence {
                let flag = gold.contains(p.id.as_str());
                if p.is_rationale.is_some_and(|b| b != flag) {
                    return Err(invalid(
                        &self.id,
                        format!("piece {} disagrees with rationale_ids", p.id),
                    ));
                }
                p.is_rationale = Some(flag);
            }
        }
        let inst = Instance {
            id: self.id,
            claim: self.claim,
            label,
            evidence: self.evidence,
        };
        inst.validate()?;
        Ok(inst)
    }
}

fn parse_error(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        detail: detail.into(),
    }
}

/// Reads non-empty JSON lines, reporting the 1-based line of any failure.
fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| parse_error(path, i + 1, e.to_string()))?;
        out.push((i + 1, value));
    }
    Ok(out)
}

fn write_json_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(&item).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Vec<Instance>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, raw) in read_json_lines::<RawInstance>(path)? {
        let inst = raw
            .into_instance()
            .map_err(|e| parse_error(path, line, e.to_string()))?;
        if !seen.insert(inst.id.clone()) {
            return Err(parse_error(path, line, format!("duplicate instance id {}", inst.id)));
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, instances: &[Instance]) -> Result<()> {
    write_json_lines(path, instances)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub instances: usize,
    pub supports: usize,
    pub refutes: usize,
    pub avg_pieces: f64,
    /// Mean gold rationale count per instance.
    pub avg_rationales: f64,
}

pub fn dataset_stats(instances: &[Instance]) -> DatasetStats {
    let n = instances.len().max(1) as f64;
    let supports = instances.iter().filter(|i| i.label == Verdict::Supports).count();
    DatasetStats {
        instances: instances.len(),
        supports,
        refutes: instances.len() - supports,
        avg_pieces: instances.iter().map(|i| i.evidence.len()).sum::<usize>() as f64 / n,
        avg_rationales: instances.iter().map(|i| i.gold_ids().len()).sum::<usize>() as f64 / n,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_instances: usize,
    pub nodes: usize,
    pub rationales: usize,
    /// Feature dimension the vocabulary is laid out for.
    pub dim: usize,
    /// Probability that a noise token is copied from the claim's entities.
    pub noise_overlap: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_instances: 200,
            nodes: 8,
            rationales: 3,
            dim: 32,
            noise_overlap: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rationales == 0 || self.rationales >= self.nodes {
            return Err(Error::Config(format!(
                "need 0 < rationales < nodes, got {} and {}",
                self.rationales, self.nodes
            )));
        }
        if self.dim < 8 {
            return Err(Error::Config(format!(
                "synthetic data needs dim >= 8, got {}",
                self.dim
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_overlap) {
            return Err(Error::Config("noise_overlap must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordRole {
    Keyword,
    Decoy,
    Entity,
    Filler,
}

/// Pseudo-words split by the hash bucket they land in, so each role owns a
/// disjoint band of feature coordinates.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    dim: usize,
    pub keywords: Vec<String>,
    pub decoys: Vec<String>,
    pub entities: Vec<String>,
    pub fillers: Vec<String>,
}

impl Vocabulary {
    pub fn new(dim: usize, min_per_role: usize) -> Self {
        const CONSONANTS: &[u8] = b"bcdfghklmnprstvz";
        const VOWELS: &[u8] = b"aeiou";
        let mut v = Self {
            dim,
            keywords: Vec::new(),
            decoys: Vec::new(),
            entities: Vec::new(),
            fillers: Vec::new(),
        };
        let mut i = 0usize;
        while [&v.keywords, &v.decoys, &v.entities, &v.fillers]
            .iter()
            .any(|p| p.len() < min_per_role)
        {
            let c = |k: usize| CONSONANTS[k % 16] as char;
            let vw = |k: usize| VOWELS[k % 5] as char;
            let mut word: String = [c(i), vw(i / 16), c(i / 80), vw(i / 1280), c(i / 6400)]
                .iter()
                .collect();
            if i >= 32000 {
                word.push_str(&(i / 32000).to_string());
            }
            i += 1;
            let pool = match v.role(&word) {
                WordRole::Keyword => &mut v.keywords,
                WordRole::Decoy => &mut v.decoys,
                WordRole::Entity => &mut v.entities,
                WordRole::Filler => &mut v.fillers,
            };
            pool.push(word);
        }
        v
    }

    pub fn role(&self, word: &str) -> WordRole {
        let b = token_bucket(word, self.dim) * 8;
        let d = self.dim;
        if b < 2 * d {
            WordRole::Keyword
        } else if b < 3 * d {
            WordRole::Decoy
        } else if b < 5 * d {
            WordRole::Entity
        } else {
            WordRole::Filler
        }
    }
}

/// Three-valued reading of a set of evidence texts against a claim.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleVerdict {
    Supports,
    Refutes,
    NotEnoughInfo,
}

impl From<Verdict> for OracleVerdict {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Supports => Self::Supports,
            Verdict::Refutes => Self::Refutes,
        }
    }
}

/// Every claim entity must be attested by a piece that pairs it with a
/// keyword or a decoy; any decoy refutes, all keywords support, and an
/// unattested entity leaves the claim undecided.
pub fn oracle_verdict(vocab: &Vocabulary, claim_entities: &[&str], texts: &[&str]) -> OracleVerdict {
    let mut refuted = false;
    for entity in claim_entities {
        let mut slot = None;
        for text in texts {
            let tokens: Vec<&str> = text.split_whitespace().collect();
            if !tokens.contains(entity) {
                continue;
            }
            for t in &tokens {
                match vocab.role(t) {
                    WordRole::Keyword => slot = slot.or(Some(false)),
                    WordRole::Decoy => slot = Some(true),
                    _ => {}
                }
            }
        }
        match slot {
            None => return OracleVerdict::NotEnoughInfo,
            Some(decoy) => refuted |= decoy,
        }
    }
    if refuted {
        OracleVerdict::Refutes
    } else {
        OracleVerdict::Supports
    }
}

/// Entities of a synthetic claim (its entity-role tokens).
pub fn claim_entities<'a>(vocab: &Vocabulary, claim: &'a str) -> Vec<&'a str> {
    claim
        .split_whitespace()
        .filter(|t| vocab.role(t) == WordRole::Entity)
        .collect()
}

pub fn synthetic_vocabulary(cfg: &SynthConfig) -> Vocabulary {
    Vocabulary::new(cfg.dim, (2 * cfg.rationales).max(30))
}

/// Planted-rationale instances: `k` rationale pieces each pair one claim
/// entity with a keyword (or, in one slot of a REFUTES claim, a decoy);
/// the remaining pieces mix claim entities and fillers only.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Instance>> {
    cfg.validate()?;
    let vocab = synthetic_vocabulary(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.rationales;
    let mut out = Vec::with_capacity(cfg.num_instances);
    for idx in 0..cfg.num_instances {
        let entities: Vec<&String> = vocab.entities.choose_multiple(&mut rng, k).collect();
        let keywords: Vec<&String> = vocab.keywords.choose_multiple(&mut rng, k).collect();
        let supports = rng.random_bool(0.5);
        let flipped = rng.random_range(0..k);
        let mut claim: Vec<&str> = entities.iter().map(|s| s.as_str()).collect();
        claim.extend(vocab.fillers.choose_multiple(&mut rng, 2).map(String::as_str));
        let claim = claim.join(" ");

        let mut pieces: Vec<(String, String, bool)> = Vec::with_capacity(cfg.nodes);
        for j in 0..k {
            let word = if supports || j != flipped {
                keywords[j].as_str()
            } else {
                vocab.decoys.choose(&mut rng).expect("non-empty pool")
            };
            let filler = vocab.fillers.choose(&mut rng).expect("non-empty pool");
            pieces.push((entities[j].clone(), format!("{} {word} {filler}", entities[j]), true));
        }
        for _ in k..cfg.nodes {
            let tokens: Vec<&str> = (0..3)
                .map(|_| {
                    if rng.random_bool(cfg.noise_overlap) {
                        entities.choose(&mut rng).expect("k > 0").as_str()
                    } else {
                        vocab.fillers.choose(&mut rng).expect("non-empty pool").as_str()
                    }
                })
                .collect();
            let title = vocab.entities.choose(&mut rng).expect("non-empty pool").clone();
            pieces.push((title, tokens.join(" "), false));
        }
        pieces.shuffle(&mut rng);
        let evidence = pieces
            .into_iter()
            .enumerate()
            .map(|(i, (title, text, gold))| {
                let mut p = EvidencePiece::sentence(format!("s{i}"), title, text);
                p.is_rationale = Some(gold);
                p
            })
            .collect();
        out.push(Instance {
            id: format!("synth-{}-{idx:05}", cfg.seed),
            claim,
            label: if supports { Verdict::Supports } else { Verdict::Refutes },
            evidence,
        });
    }
    Ok(out)
}

#[derive(Deserialize)]
struct VersionProbe {
    version: Option<u32>,
}

fn check_version(path: &Path, line: usize, text: &str, expected: u32) -> Result<()> {
    let probe: VersionProbe = serde_json::from_str(text).map_err(|e| parse_error(path, line, e.to_string()))?;
    match probe.version {
        Some(v) if v == expected => Ok(()),
        Some(found) => Err(Error::Version {
            path: path.display().to_string(),
            found,
            expected,
        }),
        None => Err(parse_error(path, line, "missing version field")),
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    ckpt.validate()?;
    let text = serde_json::to_string(ckpt).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    check_version(path, 1, &text, CHECKPOINT_VERSION)?;
    let ckpt: ModelCheckpoint = serde_json::from_str(&text).map_err(|e| parse_error(path, 1, e.to_string()))?;
    ckpt.validate()?;
    Ok(ckpt)
}

#[derive(Serialize)]
struct VersionedOut<'a> {
    version: u32,
    #[serde(flatten)]
    explanation: &'a Explanation,
}

#[derive(Deserialize)]
struct VersionedIn {
    #[allow(dead_code)]
    version: u32,
    #[serde(flatten)]
    explanation: Explanation,
}

pub fn save_explanations(path: &Path, explanations: &[Explanation]) -> Result<()> {
    write_json_lines(
        path,
        explanations.iter().map(|explanation| VersionedOut {
            version: EXPLANATION_VERSION,
            explanation,
        }),
    )
}

pub fn load_explanations(path: &Path) -> Result<Vec<Explanation>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        check_version(path, i + 1, &line, EXPLANATION_VERSION)?;
        let v: VersionedIn = serde_json::from_str(&line).map_err(|e| parse_error(path, i + 1, e.to_string()))?;
        out.push(v.explanation);
    }
    Ok(out)
}
