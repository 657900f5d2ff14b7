//! Study corpus ingestion, node catalogs, initial embedding tables and the
//! hashing fallback embedder.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::ops::{Index, IndexMut};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

/// Default width of text embeddings.
pub const DEFAULT_EMBEDDING_DIM: usize = 768;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate study id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("corpus file contains no studies")]
    Empty,
    #[error("embedding file: {0}")]
    EmbeddingFormat(String),
    #[error("embedding file line {line}: expected {expected} values, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("embedding file line {line}: non-finite value")]
    NonFinite { line: usize },
    #[error("embedding file has no vector for {kind} {label:?}")]
    MissingNode { kind: NodeKind, label: String },
    #[error("embedding file line {line}: duplicate row for {kind} {label:?}")]
    DuplicateRow {
        line: usize,
        kind: NodeKind,
        label: String,
    },
}

/// Node types of the evidence graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Evidence,
    Problem,
    Intervention,
    Outcome,
}

impl NodeKind {
    pub const ALL: [NodeKind; 4] = [
        NodeKind::Evidence,
        NodeKind::Problem,
        NodeKind::Intervention,
        NodeKind::Outcome,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Evidence => "evidence",
            NodeKind::Problem => "problem",
            NodeKind::Intervention => "intervention",
            NodeKind::Outcome => "outcome",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        NodeKind::ALL.into_iter().find(|k| k.as_str() == s)
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One value per node kind.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PerKind<T>(pub [T; 4]);

impl<T> PerKind<T> {
    pub fn from_fn(mut f: impl FnMut(NodeKind) -> T) -> Self {
        PerKind(NodeKind::ALL.map(&mut f))
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeKind, &T)> {
        NodeKind::ALL.into_iter().zip(self.0.iter())
    }

    pub fn map<U>(&self, mut f: impl FnMut(NodeKind, &T) -> U) -> PerKind<U> {
        PerKind::from_fn(|k| f(k, &self[k]))
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(NodeKind, &T) -> Result<U, E>) -> Result<PerKind<U>, E> {
        let mut out = Vec::with_capacity(4);
        for k in NodeKind::ALL {
            out.push(f(k, &self[k])?);
        }
        let arr: [U; 4] = out.try_into().ok().expect("four kinds");
        Ok(PerKind(arr))
    }
}

impl<T> Index<NodeKind> for PerKind<T> {
    type Output = T;
    fn index(&self, kind: NodeKind) -> &T {
        &self.0[kind.slot()]
    }
}

impl<T> IndexMut<NodeKind> for PerKind<T> {
    fn index_mut(&mut self, kind: NodeKind) -> &mut T {
        &mut self.0[kind.slot()]
    }
}

/// A registered study as it appears in the dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Study {
    pub id: String,
    pub title: String,
    pub description: String,
    pub problems: Vec<String>,
    pub interventions: Vec<String>,
    pub outcomes: Vec<String>,
}

impl Study {
    /// Text used for the study's initial embedding.
    pub fn text(&self) -> String {
        format!("{} {}", self.title, self.description)
    }

    fn labels(&self, kind: NodeKind) -> &[String] {
        match kind {
            NodeKind::Problem => &self.problems,
            NodeKind::Intervention => &self.interventions,
            NodeKind::Outcome => &self.outcomes,
            NodeKind::Evidence => &[],
        }
    }
}

/// Key under which element labels are deduplicated.
pub fn normalize_label(label: &str) -> String {
    label.trim().to_lowercase()
}

/// Deduplicated element labels with indices assigned in sorted key order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Catalog {
    keys: Vec<String>,
    display: Vec<String>,
    index: HashMap<String, usize>,
}

impl Catalog {
    /// `variants` maps normalized key to every trimmed spelling seen.
    fn from_variants(variants: BTreeMap<String, Vec<String>>) -> Self {
        let mut keys = Vec::with_capacity(variants.len());
        let mut display = Vec::with_capacity(variants.len());
        let mut index = HashMap::with_capacity(variants.len());
        for (i, (key, mut spellings)) in variants.into_iter().enumerate() {
            spellings.sort();
            index.insert(key.clone(), i);
            display.push(spellings.swap_remove(0));
            keys.push(key);
        }
        Self { keys, display, index }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Index of a label, matched after trim + lowercase.
    pub fn lookup(&self, label: &str) -> Option<usize> {
        self.index.get(&normalize_label(label)).copied()
    }

    /// Human-readable form of entry `i`.
    pub fn label(&self, i: usize) -> &str {
        &self.display[i]
    }

    pub fn key(&self, i: usize) -> &str {
        &self.keys[i]
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.display.iter().map(String::as_str)
    }
}

/// Element indices referenced by one study, deduplicated and sorted.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StudyElements {
    pub problems: Vec<usize>,
    pub interventions: Vec<usize>,
    pub outcomes: Vec<usize>,
}

impl StudyElements {
    pub fn of(&self, kind: NodeKind) -> &[usize] {
        match kind {
            NodeKind::Problem => &self.problems,
            NodeKind::Intervention => &self.interventions,
            NodeKind::Outcome => &self.outcomes,
            NodeKind::Evidence => &[],
        }
    }
}

/// The evidence set together with its problem, intervention and outcome
/// catalogs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    studies: Vec<Study>,
    elements: Vec<StudyElements>,
    catalogs: PerKind<Catalog>,
}

impl Corpus {
    /// Validate studies and build catalogs. `lines[i]` is the 1-based source
    /// line of study `i`, used in error messages.
    pub fn from_studies(studies: Vec<Study>) -> Result<Self, CorpusError> {
        let lines: Vec<usize> = (1..=studies.len()).collect();
        Self::build(studies, &lines)
    }

    fn build(studies: Vec<Study>, lines: &[usize]) -> Result<Self, CorpusError> {
        if studies.is_empty() {
            return Err(CorpusError::Empty);
        }
        let mut seen = HashSet::new();
        let mut variants: PerKind<BTreeMap<String, Vec<String>>> = PerKind::default();
        for (study, &line) in studies.iter().zip(lines) {
            if study.id.trim().is_empty() {
                return Err(CorpusError::Malformed {
                    line,
                    message: "empty study id".into(),
                });
            }
            if !seen.insert(study.id.clone()) {
                return Err(CorpusError::DuplicateId {
                    line,
                    id: study.id.clone(),
                });
            }
            if study.problems.is_empty() && study.interventions.is_empty() && study.outcomes.is_empty() {
                return Err(CorpusError::Malformed {
                    line,
                    message: format!("study {:?} references no elements", study.id),
                });
            }
            for kind in [NodeKind::Problem, NodeKind::Intervention, NodeKind::Outcome] {
                for label in study.labels(kind) {
                    let trimmed = label.trim();
                    if trimmed.is_empty() {
                        return Err(CorpusError::Malformed {
                            line,
                            message: format!("empty {kind} label in study {:?}", study.id),
                        });
                    }
                    variants[kind]
                        .entry(normalize_label(trimmed))
                        .or_default()
                        .push(trimmed.to_string());
                }
            }
        }
        let mut catalogs: PerKind<Catalog> = PerKind::default();
        for kind in [NodeKind::Problem, NodeKind::Intervention, NodeKind::Outcome] {
            catalogs[kind] = Catalog::from_variants(std::mem::take(&mut variants[kind]));
        }
        let elements = studies
            .iter()
            .map(|s| {
                let resolve = |kind: NodeKind| {
                    let mut idx: Vec<usize> = s
                        .labels(kind)
                        .iter()
                        .map(|l| catalogs[kind].lookup(l).expect("label registered above"))
                        .collect();
                    idx.sort_unstable();
                    idx.dedup();
                    idx
                };
                StudyElements {
                    problems: resolve(NodeKind::Problem),
                    interventions: resolve(NodeKind::Intervention),
                    outcomes: resolve(NodeKind::Outcome),
                }
            })
            .collect();
        Ok(Self {
            studies,
            elements,
            catalogs,
        })
    }

    /// Parse the one-JSON-object-per-line dataset format. Blank lines are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut studies = Vec::new();
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let study: Study = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
            studies.push(study);
            lines.push(i + 1);
        }
        Self::build(studies, &lines)
    }

    /// Serialize back to the dataset format, one study per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.studies {
            out.push_str(&serde_json::to_string(s).expect("study serializes"));
            out.push('\n');
        }
        out
    }

    pub fn studies(&self) -> &[Study] {
        &self.studies
    }

    pub fn study(&self, e: usize) -> &Study {
        &self.studies[e]
    }

    pub fn elements(&self, e: usize) -> &StudyElements {
        &self.elements[e]
    }

    pub fn catalog(&self, kind: NodeKind) -> &Catalog {
        &self.catalogs[kind]
    }

    pub fn num_evidence(&self) -> usize {
        self.studies.len()
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::Evidence => self.studies.len(),
            k => self.catalogs[k].len(),
        }
    }

    pub fn counts(&self) -> PerKind<usize> {
        PerKind::from_fn(|k| self.count(k))
    }

    pub fn evidence_by_id(&self, id: &str) -> Option<usize> {
        self.studies.iter().position(|s| s.id == id)
    }

    /// Display name of a node: the study id for evidence, the label otherwise.
    pub fn node_name(&self, kind: NodeKind, i: usize) -> &str {
        match kind {
            NodeKind::Evidence => &self.studies[i].id,
            k => self.catalogs[k].label(i),
        }
    }

    /// Text that is embedded for a node.
    pub fn node_text(&self, kind: NodeKind, i: usize) -> String {
        match kind {
            NodeKind::Evidence => self.studies[i].text(),
            k => self.catalogs[k].label(i).to_string(),
        }
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Corpus::parse(&text)
}

/// Per-kind node vectors at one layer of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    layer: usize,
    tables: PerKind<Array2<f64>>,
}

impl EmbeddingTable {
    /// All matrices must have `dim` columns and finite entries.
    pub fn new(layer: usize, tables: PerKind<Array2<f64>>) -> Result<Self, CorpusError> {
        let dim = tables[NodeKind::Evidence].ncols();
        for (kind, m) in tables.iter() {
            if m.ncols() != dim {
                return Err(CorpusError::EmbeddingFormat(format!(
                    "{kind} table has width {} but evidence has {dim}",
                    m.ncols()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(CorpusError::EmbeddingFormat(format!("{kind} table has non-finite entries")));
            }
        }
        if dim == 0 {
            return Err(CorpusError::EmbeddingFormat("dimension must be positive".into()));
        }
        Ok(Self { dim, layer, tables })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn table(&self, kind: NodeKind) -> &Array2<f64> {
        &self.tables[kind]
    }

    pub fn tables(&self) -> &PerKind<Array2<f64>> {
        &self.tables
    }

    pub fn row(&self, kind: NodeKind, i: usize) -> ArrayView1<'_, f64> {
        self.tables[kind].row(i)
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.tables[kind].nrows()
    }

    /// Write in the `dim=<D>` text format.
    pub fn to_text(&self, corpus: &Corpus) -> String {
        let mut out = format!("dim={}\n", self.dim);
        for kind in NodeKind::ALL {
            for (i, row) in self.tables[kind].outer_iter().enumerate() {
                out.push_str(kind.as_str());
                out.push(':');
                out.push_str(corpus.node_name(kind, i));
                out.push('\t');
                let values: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                out.push_str(&values.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn write(&self, corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_text(corpus)).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Parse the embedding text format against `corpus`. Every node of every
    /// kind must be covered; rows for ids the corpus does not know are
    /// skipped with a warning.
    pub fn parse(text: &str, corpus: &Corpus) -> Result<Self, CorpusError> {
        let mut lines = text.lines().enumerate();
        let header = lines
            .by_ref()
            .find(|(_, l)| !l.trim().is_empty())
            .ok_or_else(|| CorpusError::EmbeddingFormat("empty file".into()))?
            .1;
        let dim: usize = header
            .trim()
            .strip_prefix("dim=")
            .and_then(|d| d.trim().parse().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| CorpusError::EmbeddingFormat(format!("bad header {header:?}")))?;

        let mut tables = corpus.counts().map(|_, &n| Array2::<f64>::zeros((n, dim)));
        let mut filled = corpus.counts().map(|_, &n| vec![false; n]);
        for (i, raw) in lines {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let (key, values) = raw
                .split_once('\t')
                .ok_or_else(|| CorpusError::EmbeddingFormat(format!("line {line}: missing tab")))?;
            let (kind, name) = key
                .split_once(':')
                .and_then(|(k, n)| NodeKind::parse(k).map(|k| (k, n)))
                .ok_or_else(|| CorpusError::EmbeddingFormat(format!("line {line}: bad key {key:?}")))?;
            let idx = match kind {
                NodeKind::Evidence => corpus.evidence_by_id(name),
                k => corpus.catalog(k).lookup(name),
            };
            let Some(idx) = idx else {
                log::warn!("embedding line {line}: unknown {kind} {name:?}, skipped");
                continue;
            };
            let parsed: Vec<f64> = values
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| CorpusError::EmbeddingFormat(format!("line {line}: {e}")))?;
            if parsed.len() != dim {
                return Err(CorpusError::DimensionMismatch {
                    line,
                    expected: dim,
                    found: parsed.len(),
                });
            }
            if parsed.iter().any(|v| !v.is_finite()) {
                return Err(CorpusError::NonFinite { line });
            }
            if std::mem::replace(&mut filled[kind][idx], true) {
                return Err(CorpusError::DuplicateRow {
                    line,
                    kind,
                    label: name.to_string(),
                });
            }
            tables[kind]
                .row_mut(idx)
                .assign(&ArrayView1::from(&parsed[..]));
        }
        for kind in NodeKind::ALL {
            if let Some(missing) = filled[kind].iter().position(|f| !f) {
                return Err(CorpusError::MissingNode {
                    kind,
                    label: corpus.node_name(kind, missing).to_string(),
                });
            }
        }
        Ok(Self { dim, layer: 0, tables })
    }
}

pub fn load_embeddings(path: &Path, corpus: &Corpus) -> Result<EmbeddingTable, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    EmbeddingTable::parse(&text, corpus)
}

/// Lowercased words split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Signed feature hashing of the token multiset, L2-normalized. Text without
/// tokens maps to the zero vector.
pub fn hash_embed(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    assert!(dim >= 1, "hash_embed needs a positive dimension");
    let mut v = vec![0.0; dim];
    for token in tokenize(text) {
        let h = splitmix(fnv1a(token.as_bytes(), seed));
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Layer-0 table built with [`hash_embed`] over every node's text.
pub fn fallback_embeddings(corpus: &Corpus, dim: usize, seed: u64) -> EmbeddingTable {
    let tables = corpus.counts().map(|kind, &n| {
        let mut m = Array2::zeros((n, dim));
        for (i, mut row) in m.outer_iter_mut().enumerate() {
            let v = hash_embed(&corpus.node_text(kind, i), dim, seed);
            row.assign(&ArrayView1::from(&v[..]));
        }
        m
    });
    EmbeddingTable {
        dim,
        layer: 0,
        tables,
    }
}
