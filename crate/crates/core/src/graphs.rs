//! Evidence co-reference graph, text-similarity matrix, evidence text graph
//! and the unified single-channel graph.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, NodeKind, PerKind};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("similarity needs at least two evidence nodes, got {0}")]
    TooFewNodes(usize),
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("graphs built over different corpora ({ecg} vs {etg} evidence nodes)")]
    CorpusMismatch { ecg: usize, etg: usize },
    #[error("non-finite embedding entry")]
    NonFinite,
}

/// Edge types. The first three run from evidence to an element; each has
/// an inverse so messages flow both ways. `Similar` links evidence pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    HasProblem,
    HasIntervention,
    HasOutcome,
    ProblemOf,
    InterventionOf,
    OutcomeOf,
    Similar,
}

impl Relation {
    pub const ALL: [Relation; 7] = [
        Relation::HasProblem,
        Relation::HasIntervention,
        Relation::HasOutcome,
        Relation::ProblemOf,
        Relation::InterventionOf,
        Relation::OutcomeOf,
        Relation::Similar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Relation::HasProblem => "hasProblem",
            Relation::HasIntervention => "hasIntervention",
            Relation::HasOutcome => "hasOutcome",
            Relation::ProblemOf => "problemOf",
            Relation::InterventionOf => "interventionOf",
            Relation::OutcomeOf => "outcomeOf",
            Relation::Similar => "similar",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Relation::ALL.into_iter().find(|r| r.name() == s)
    }

    pub fn src_kind(self) -> NodeKind {
        match self {
            Relation::ProblemOf => NodeKind::Problem,
            Relation::InterventionOf => NodeKind::Intervention,
            Relation::OutcomeOf => NodeKind::Outcome,
            _ => NodeKind::Evidence,
        }
    }

    pub fn dst_kind(self) -> NodeKind {
        match self {
            Relation::HasProblem => NodeKind::Problem,
            Relation::HasIntervention => NodeKind::Intervention,
            Relation::HasOutcome => NodeKind::Outcome,
            _ => NodeKind::Evidence,
        }
    }

    pub fn inverse(self) -> Option<Relation> {
        match self {
            Relation::HasProblem => Some(Relation::ProblemOf),
            Relation::HasIntervention => Some(Relation::InterventionOf),
            Relation::HasOutcome => Some(Relation::OutcomeOf),
            Relation::ProblemOf => Some(Relation::HasProblem),
            Relation::InterventionOf => Some(Relation::HasIntervention),
            Relation::OutcomeOf => Some(Relation::HasOutcome),
            Relation::Similar => None,
        }
    }

    /// Forward evidence-to-element relation for an element kind.
    pub fn forward_for(kind: NodeKind) -> Option<Relation> {
        match kind {
            NodeKind::Problem => Some(Relation::HasProblem),
            NodeKind::Intervention => Some(Relation::HasIntervention),
            NodeKind::Outcome => Some(Relation::HasOutcome),
            NodeKind::Evidence => None,
        }
    }

    pub fn is_forward(self) -> bool {
        matches!(
            self,
            Relation::HasProblem | Relation::HasIntervention | Relation::HasOutcome
        )
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef {
    pub kind: NodeKind,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    pub src: NodeRef,
    pub relation: Relation,
    pub dst: NodeRef,
}

/// Heterogeneous co-reference graph. Arcs are stored per relation as
/// sorted `(src_index, dst_index)` pairs; endpoint kinds follow from the
/// relation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EcgGraph {
    counts: PerKind<usize>,
    arcs: BTreeMap<Relation, Vec<(usize, usize)>>,
}

impl EcgGraph {
    pub fn counts(&self) -> &PerKind<usize> {
        &self.counts
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.counts[kind]
    }

    pub fn num_nodes(&self) -> usize {
        self.counts.0.iter().sum()
    }

    /// Relations present in the graph, including those whose arc list
    /// became empty after edge removal.
    pub fn relations(&self) -> impl Iterator<Item = Relation> + '_ {
        self.arcs.keys().copied()
    }

    pub fn arcs(&self, relation: Relation) -> &[(usize, usize)] {
        self.arcs.get(&relation).map_or(&[], Vec::as_slice)
    }

    pub fn edge_count(&self, relation: Relation) -> usize {
        self.arcs(relation).len()
    }

    pub fn num_edges(&self) -> usize {
        self.arcs.values().map(Vec::len).sum()
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.arcs.iter().flat_map(|(&relation, pairs)| {
            pairs.iter().map(move |&(s, d)| Edge {
                src: NodeRef {
                    kind: relation.src_kind(),
                    index: s,
                },
                relation,
                dst: NodeRef {
                    kind: relation.dst_kind(),
                    index: d,
                },
            })
        })
    }

    /// `(relation, source)` pairs pointing at `node`.
    pub fn in_neighbors(&self, node: NodeRef) -> Vec<(Relation, NodeRef)> {
        self.edges()
            .filter(|e| e.dst == node)
            .map(|e| (e.relation, e.src))
            .collect()
    }

    /// Dense `dst × src` adjacency of one relation.
    pub fn adjacency(&self, relation: Relation) -> Array2<bool> {
        let mut m = Array2::from_elem(
            (self.counts[relation.dst_kind()], self.counts[relation.src_kind()]),
            false,
        );
        for &(s, d) in self.arcs(relation) {
            m[[d, s]] = true;
        }
        m
    }

    /// Copy without the given evidence→element arcs of a forward relation,
    /// and without their inverses. `pairs` are `(evidence, element)`.
    pub fn without_arcs(&self, relation: Relation, pairs: &[(usize, usize)]) -> Self {
        let drop: std::collections::HashSet<(usize, usize)> = pairs.iter().copied().collect();
        let mut out = self.clone();
        if let Some(v) = out.arcs.get_mut(&relation) {
            v.retain(|p| !drop.contains(p));
        }
        if let Some(inv) = relation.inverse() {
            if let Some(v) = out.arcs.get_mut(&inv) {
                v.retain(|&(s, d)| !drop.contains(&(d, s)));
            }
        }
        out
    }
}

/// One forward arc per distinct (study, element) membership, plus inverses.
pub fn build_ecg(corpus: &Corpus) -> EcgGraph {
    let mut arcs = BTreeMap::new();
    for kind in [NodeKind::Problem, NodeKind::Intervention, NodeKind::Outcome] {
        let forward = Relation::forward_for(kind).expect("element kind");
        let mut fwd = Vec::new();
        for e in 0..corpus.num_evidence() {
            for &x in corpus.elements(e).of(kind) {
                fwd.push((e, x));
            }
        }
        let mut inv: Vec<(usize, usize)> = fwd.iter().map(|&(e, x)| (x, e)).collect();
        inv.sort_unstable();
        arcs.insert(forward, fwd);
        arcs.insert(forward.inverse().expect("forward has inverse"), inv);
    }
    EcgGraph {
        counts: corpus.counts(),
        arcs,
    }
}

/// How Euclidean distances are turned into similarities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityNormalization {
    /// `1 - D / (max D - min D)`
    #[default]
    Printed,
    /// `1 - (D - min D) / (max D - min D)`
    Shifted,
}

impl std::str::FromStr for SimilarityNormalization {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "printed" => Ok(Self::Printed),
            "shifted" => Ok(Self::Shifted),
            _ => Err(format!("unknown similarity normalization {s:?}")),
        }
    }
}

/// Pairwise text similarity between evidence nodes. The diagonal is not
/// meaningful and is stored as 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
    min_distance: f64,
    max_distance: f64,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// `(min D, max D)` over distinct pairs.
    pub fn distance_extrema(&self) -> (f64, f64) {
        (self.min_distance, self.max_distance)
    }
}

/// Similarity of every evidence pair from the rows of `vectors`.
pub fn similarity_matrix(
    vectors: ArrayView2<f64>,
    normalization: SimilarityNormalization,
) -> Result<SimilarityMatrix, GraphError> {
    let n = vectors.nrows();
    if n < 2 {
        return Err(GraphError::TooFewNodes(n));
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(GraphError::NonFinite);
    }
    let mut dist = Array2::<f64>::zeros((n, n));
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = &vectors.row(i) - &vectors.row(j);
            let d = diff.dot(&diff).sqrt();
            dist[[i, j]] = d;
            dist[[j, i]] = d;
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    let range = hi - lo;
    let mut values = Array2::<f64>::ones((n, n));
    if range > 0.0 {
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d = dist[[i, j]];
                    values[[i, j]] = match normalization {
                        SimilarityNormalization::Printed => 1.0 - d / range,
                        SimilarityNormalization::Shifted => 1.0 - (d - lo) / range,
                    };
                }
            }
        }
    }
    Ok(SimilarityMatrix {
        values,
        min_distance: lo,
        max_distance: hi,
    })
}

/// Homogeneous evidence graph: arc `i -> j` iff `sim(i, j) >= threshold`,
/// plus a self-loop on every node.
#[derive(Debug, Clone, PartialEq)]
pub struct EtgGraph {
    threshold: f64,
    neighbors: Vec<Vec<usize>>,
}

impl EtgGraph {
    /// Build directly from neighbor lists; lists are sorted, deduplicated and
    /// symmetrized, and self-loops are added.
    pub fn from_neighbors(threshold: f64, mut neighbors: Vec<Vec<usize>>) -> Self {
        let n = neighbors.len();
        let mut extra = vec![Vec::new(); n];
        for (j, list) in neighbors.iter().enumerate() {
            for &i in list {
                extra[i].push(j);
            }
        }
        for (j, list) in neighbors.iter_mut().enumerate() {
            list.append(&mut extra[j]);
            list.push(j);
            list.sort_unstable();
            list.dedup();
        }
        Self { threshold, neighbors }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// In-neighbors of `j` (equal to out-neighbors), self included.
    pub fn neighbors(&self, j: usize) -> &[usize] {
        &self.neighbors[j]
    }

    pub fn has_arc(&self, i: usize, j: usize) -> bool {
        self.neighbors[j].binary_search(&i).is_ok()
    }

    pub fn has_self_loop(&self, j: usize) -> bool {
        self.has_arc(j, j)
    }

    /// Directed arcs `(src, dst)` in ascending order, self-loops included.
    pub fn arcs(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .neighbors
            .iter()
            .enumerate()
            .flat_map(|(j, list)| list.iter().map(move |&i| (i, j)))
            .collect();
        out.sort_unstable();
        out
    }

    /// Undirected related pairs `(i, j)` with `i < j`.
    pub fn related_pairs(&self) -> Vec<(usize, usize)> {
        self.arcs().into_iter().filter(|&(i, j)| i < j).collect()
    }

    /// Dense `dst × src` adjacency.
    pub fn adjacency(&self) -> Array2<bool> {
        let n = self.len();
        let mut m = Array2::from_elem((n, n), false);
        for (j, list) in self.neighbors.iter().enumerate() {
            for &i in list {
                m[[j, i]] = true;
            }
        }
        m
    }

    /// Copy with an extra undirected edge `{i, j}`.
    pub fn with_edge(&self, i: usize, j: usize) -> Self {
        let mut lists = self.neighbors.clone();
        lists[j].push(i);
        Self::from_neighbors(self.threshold, lists)
    }

    /// Copy without the undirected edge `{i, j}` (self-loops are kept).
    pub fn without_edge(&self, i: usize, j: usize) -> Self {
        let mut lists = self.neighbors.clone();
        if i != j {
            lists[j].retain(|&x| x != i);
            lists[i].retain(|&x| x != j);
        }
        Self { threshold: self.threshold, neighbors: lists }
    }

    /// Copy with the self-loop of `j` removed. Attention layers reject such
    /// graphs; this exists to exercise that check.
    pub fn without_self_loop(&self, j: usize) -> Self {
        let mut lists = self.neighbors.clone();
        lists[j].retain(|&x| x != j);
        Self { threshold: self.threshold, neighbors: lists }
    }
}

pub fn build_etg(sim: &SimilarityMatrix, threshold: f64) -> Result<EtgGraph, GraphError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(GraphError::BadThreshold(threshold));
    }
    let n = sim.len();
    let neighbors = (0..n)
        .map(|j| {
            (0..n)
                .filter(|&i| i == j || sim.get(i, j) >= threshold)
                .collect()
        })
        .collect();
    Ok(EtgGraph { threshold, neighbors })
}

/// Co-reference graph plus a `Similar` relation carrying every non-self
/// text-graph arc.
pub fn build_ueg(ecg: &EcgGraph, etg: &EtgGraph) -> Result<EcgGraph, GraphError> {
    let n = ecg.count(NodeKind::Evidence);
    if etg.len() != n {
        return Err(GraphError::CorpusMismatch { ecg: n, etg: etg.len() });
    }
    let mut out = ecg.clone();
    let similar: Vec<(usize, usize)> = etg.arcs().into_iter().filter(|(i, j)| i != j).collect();
    out.arcs.insert(Relation::Similar, similar);
    Ok(out)
}

/// Dataset and graph size summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub evidence: usize,
    pub problems: usize,
    pub interventions: usize,
    pub outcomes: usize,
    pub has_problem: usize,
    pub has_intervention: usize,
    pub has_outcome: usize,
    pub related: usize,
    pub threshold: f64,
}

impl GraphStats {
    pub fn new(ecg: &EcgGraph, etg: &EtgGraph) -> Self {
        Self {
            evidence: ecg.count(NodeKind::Evidence),
            problems: ecg.count(NodeKind::Problem),
            interventions: ecg.count(NodeKind::Intervention),
            outcomes: ecg.count(NodeKind::Outcome),
            has_problem: ecg.edge_count(Relation::HasProblem),
            has_intervention: ecg.edge_count(Relation::HasIntervention),
            has_outcome: ecg.edge_count(Relation::HasOutcome),
            related: etg.related_pairs().len(),
            threshold: etg.threshold(),
        }
    }

    pub fn forward_edges(&self) -> usize {
        self.has_problem + self.has_intervention + self.has_outcome
    }

    pub fn to_table(&self) -> String {
        format!(
            "Dataset\n\
             {:>6} {:>6} {:>6} {:>6} {:>7}\n\
             {:>6} {:>6} {:>6} {:>6} {:>7}\n\n\
             Edges (threshold {})\n\
             {:>10} {:>15} {:>10} {:>8}\n\
             {:>10} {:>15} {:>10} {:>8}\n",
            "#p", "#i", "#o", "#e", "#edge",
            self.problems, self.interventions, self.outcomes, self.evidence, self.forward_edges(),
            self.threshold,
            "hasProblem", "hasIntervention", "hasOutcome", "related",
            self.has_problem, self.has_intervention, self.has_outcome, self.related,
        )
    }
}

/// JSON dump of both graphs for inspection. ETG arcs appear with relation
/// `related`; self-loops are implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub nodes: BTreeMap<String, Vec<String>>,
    pub edges: Vec<(String, usize, String, String, usize)>,
    pub threshold: f64,
}

impl GraphDump {
    pub fn new(corpus: &Corpus, ecg: &EcgGraph, etg: &EtgGraph) -> Self {
        let nodes = NodeKind::ALL
            .into_iter()
            .map(|k| {
                let names = (0..corpus.count(k)).map(|i| corpus.node_name(k, i).to_string()).collect();
                (k.as_str().to_string(), names)
            })
            .collect();
        let ev = NodeKind::Evidence.as_str().to_string();
        let mut edges: Vec<_> = ecg
            .edges()
            .map(|e| {
                (
                    e.src.kind.as_str().to_string(),
                    e.src.index,
                    e.relation.name().to_string(),
                    e.dst.kind.as_str().to_string(),
                    e.dst.index,
                )
            })
            .collect();
        edges.extend(
            etg.arcs()
                .into_iter()
                .filter(|(i, j)| i != j)
                .map(|(i, j)| (ev.clone(), i, "related".to_string(), ev.clone(), j)),
        );
        Self {
            nodes,
            edges,
            threshold: etg.threshold(),
        }
    }
}
