//! The layered two-channel recommender, its variants, scoring and top-k
//! recommendation.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, ParamId, ParamStore, Tape, Var};
use crate::channels::{gat_layer, hgt_layer, GatMean, GatParams, GatTopology, HgtParams, HgtTopology};
use crate::corpus::{Corpus, EmbeddingTable, NodeKind, PerKind};
use crate::fusion::{FusionKind, FusionParams};
use crate::graphs::{build_etg, build_ueg, similarity_matrix, EcgGraph, EtgGraph, SimilarityNormalization};
use crate::{Error, Result};

/// Which parts of the architecture are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub enum Variant {
    /// both channels with fusion
    #[default]
    #[serde(rename = "MHAN")]
    Mhan,
    /// co-reference channel only
    #[serde(rename = "CRec")]
    CRec,
    /// single heterogeneous channel over the co-reference graph extended
    /// with text-similarity arcs
    #[serde(rename = "URec")]
    URec,
    /// full model started from random instead of text embeddings
    #[serde(rename = "REeb")]
    REeb,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::REeb, Variant::CRec, Variant::URec, Variant::Mhan];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Mhan => "MHAN",
            Variant::CRec => "CRec",
            Variant::URec => "URec",
            Variant::REeb => "REeb",
        }
    }

    pub fn uses_text_channel(self) -> bool {
        matches!(self, Variant::Mhan | Variant::REeb)
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (MHAN, CRec, URec, REeb)")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub hgt_heads: usize,
    pub gat_heads: usize,
    pub fusion_heads: usize,
    pub fusion: FusionKind,
    pub variant: Variant,
    pub threshold: f64,
    pub seed: u64,
    pub similarity: SimilarityNormalization,
    pub gat_mean: GatMean,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dim: 256,
            hgt_heads: 4,
            gat_heads: 4,
            fusion_heads: 16,
            fusion: FusionKind::Fusional,
            variant: Variant::Mhan,
            threshold: 0.8,
            seed: 2022,
            similarity: SimilarityNormalization::Printed,
            gat_mean: GatMean::Heads,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("hidden dimension must be positive".into()));
        }
        for (name, heads) in [
            ("hgt_heads", self.hgt_heads),
            ("gat_heads", self.gat_heads),
            ("fusion_heads", self.fusion_heads),
        ] {
            if heads == 0 || self.dim % heads != 0 {
                return Err(Error::Config(format!(
                    "{name} = {heads} does not divide hidden dimension {}",
                    self.dim
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// Build the co-reference graph and the text graph over evidence rows of
/// `text` at the configured threshold.
pub fn build_graphs(corpus: &Corpus, text: &EmbeddingTable, config: &ModelConfig) -> Result<(EcgGraph, EtgGraph)> {
    let ecg = crate::graphs::build_ecg(corpus);
    let sim = similarity_matrix(text.table(NodeKind::Evidence).view(), config.similarity)?;
    let etg = build_etg(&sim, config.threshold)?;
    Ok((ecg, etg))
}

#[derive(Debug, Clone)]
struct LayerParams {
    hgt: HgtParams,
    text: Option<(GatParams, FusionParams)>,
}

/// A model instance: configuration, frozen graphs, initial embeddings and
/// all learnable parameters.
#[derive(Debug, Clone)]
pub struct Mhan {
    config: ModelConfig,
    graph: EcgGraph,
    etg: Option<EtgGraph>,
    hgt_topology: HgtTopology,
    gat_topology: Option<GatTopology>,
    initial: EmbeddingTable,
    layers: Vec<LayerParams>,
    store: ParamStore,
}

const RANDOM_INIT_STREAM: u64 = u64::MAX;

/// Seeded uniform `[-0.1, 0.1]` table with the same shape as `like`.
pub fn random_initial(like: &EmbeddingTable, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(RANDOM_INIT_STREAM);
    let tables = like
        .tables()
        .map(|_, m| Array2::from_shape_fn(m.dim(), |_| rng.random_range(-0.1..=0.1)));
    EmbeddingTable::new(0, tables).expect("finite by construction")
}

/// Assemble the requested variant. `ecg` is the message-passing graph
/// (held-out edges already removed); `etg` is ignored by the co-reference
/// only variant.
pub fn make_variant(config: &ModelConfig, ecg: &EcgGraph, etg: &EtgGraph, initial: &EmbeddingTable) -> Result<Mhan> {
    Mhan::new(config.clone(), ecg, etg, initial)
}

impl Mhan {
    pub fn new(config: ModelConfig, ecg: &EcgGraph, etg: &EtgGraph, initial: &EmbeddingTable) -> Result<Self> {
        config.validate()?;
        for kind in NodeKind::ALL {
            if initial.count(kind) != ecg.count(kind) {
                return Err(Error::DimensionMismatch(format!(
                    "{} initial {kind} rows for {} graph nodes",
                    initial.count(kind),
                    ecg.count(kind)
                )));
            }
        }
        if etg.len() != ecg.count(NodeKind::Evidence) {
            return Err(crate::graphs::GraphError::CorpusMismatch {
                ecg: ecg.count(NodeKind::Evidence),
                etg: etg.len(),
            }
            .into());
        }
        let variant = config.variant;
        let initial = match variant {
            Variant::REeb => random_initial(initial, config.seed),
            _ => initial.clone(),
        };
        let graph = match variant {
            Variant::URec => build_ueg(ecg, etg)?,
            _ => ecg.clone(),
        };
        let (etg, gat_topology) = if variant.uses_text_channel() {
            (Some(etg.clone()), Some(GatTopology::new(etg)?))
        } else {
            (None, None)
        };
        let hgt_topology = HgtTopology::new(&graph);
        let relations: Vec<_> = graph.relations().collect();
        let n_evidence = graph.count(NodeKind::Evidence);

        let mut store = ParamStore::new(config.seed);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let d_in = if l == 0 { initial.dim() } else { config.dim };
            let prefix = format!("layer{}", l + 1);
            let hgt = HgtParams::new(
                &mut store,
                &format!("{prefix}.hgt"),
                d_in,
                config.dim,
                config.hgt_heads,
                &relations,
            )?;
            let text = if variant.uses_text_channel() {
                let gat = GatParams::new(&mut store, &format!("{prefix}.gat"), d_in, config.dim, config.gat_heads)?;
                let fusion = FusionParams::new(
                    &mut store,
                    &format!("{prefix}.fusion"),
                    config.fusion,
                    n_evidence,
                    config.dim,
                    config.fusion_heads,
                )?;
                Some((gat, fusion))
            } else {
                None
            };
            layers.push(LayerParams { hgt, text });
        }
        Ok(Self {
            config,
            graph,
            etg,
            hgt_topology,
            gat_topology,
            initial,
            layers,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// The heterogeneous graph the model propagates over.
    pub fn graph(&self) -> &EcgGraph {
        &self.graph
    }

    pub fn text_graph(&self) -> Option<&EtgGraph> {
        self.etg.as_ref()
    }

    pub fn initial(&self) -> &EmbeddingTable {
        &self.initial
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_problems(&self) -> usize {
        self.graph.count(NodeKind::Problem)
    }

    pub fn num_evidence(&self) -> usize {
        self.graph.count(NodeKind::Evidence)
    }

    /// Parameters of the text channel and fusion, across layers.
    pub fn text_params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .filter_map(|l| l.text.as_ref())
            .flat_map(|(g, f)| g.params().into_iter().chain(f.params()))
            .collect()
    }

    /// Record the full forward pass on `tape`; returns final embeddings of
    /// every kind.
    pub fn forward_tape(&self, tape: &mut Tape) -> Result<PerKind<Var>> {
        let mut h = self.initial.tables().map(|_, m| tape.constant(m.clone()));
        for layer in &self.layers {
            let mut next = hgt_layer(tape, &self.store, &self.hgt_topology, &h, &layer.hgt)?;
            if let (Some((gat, fusion)), Some(topo)) = (&layer.text, &self.gat_topology) {
                let text = gat_layer(tape, &self.store, topo, h[NodeKind::Evidence], gat, self.config.gat_mean)?;
                next[NodeKind::Evidence] = fusion.forward(tape, &self.store, next[NodeKind::Evidence], text)?;
            }
            h = next;
        }
        Ok(h)
    }

    pub fn forward(&self) -> Result<EmbeddingTable> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape)?;
        let tables = out.map(|_, &v| tape.value(v).clone());
        Ok(EmbeddingTable::new(self.layers.len(), tables)?)
    }

    /// Scores of `(problem, evidence)` pairs as an `m × 1` column.
    ///
    /// Embeddings are centered on their kind's mean and scaled to unit
    /// length before the dot product. Every layer output carries a large
    /// shared positive offset from the sigmoid, so raw dot products are all
    /// large and nearly equal; this keeps the score responsive.
    pub fn pair_scores(&self, tape: &mut Tape, out: &PerKind<Var>, pairs: &[(usize, usize)]) -> Result<Var> {
        let p = scoring_rows(tape, out[NodeKind::Problem])?;
        let e = scoring_rows(tape, out[NodeKind::Evidence])?;
        let p = tape.gather_rows(p, Arc::new(pairs.iter().map(|&(p, _)| p).collect()))?;
        let e = tape.gather_rows(e, Arc::new(pairs.iter().map(|&(_, e)| e).collect()))?;
        let dots = tape.row_dot(p, e)?;
        Ok(tape.sigmoid(dots))
    }

    /// `problems × evidence` score matrix from final embeddings, matching
    /// [`Mhan::pair_scores`].
    pub fn score_matrix(&self, out: &EmbeddingTable) -> Array2<f64> {
        let p = scoring_matrix(out.table(NodeKind::Problem));
        let e = scoring_matrix(out.table(NodeKind::Evidence));
        p.dot(&e.t()).mapv(sigmoid)
    }

    pub fn scores(&self) -> Result<Array2<f64>> {
        Ok(self.score_matrix(&self.forward()?))
    }

    pub fn recommend_topk(&self, problem: usize, k: usize, exclude: &BTreeSet<usize>) -> Result<Ranking> {
        if problem >= self.num_problems() {
            return Err(Error::UnknownProblem(format!("index {problem}")));
        }
        let scores = self.scores()?;
        rank(scores.row(problem).as_slice().expect("standard layout"), problem, k, exclude)
    }
}

fn scoring_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    if tape.shape(x).0 == 0 {
        return Ok(x);
    }
    let mean = tape.mean(x, Some(0))?;
    let centered = tape.sub(x, mean)?;
    Ok(tape.l2_normalize_rows(centered))
}

fn scoring_matrix(m: &Array2<f64>) -> Array2<f64> {
    let Some(mean) = m.mean_axis(ndarray::Axis(0)) else {
        return m.clone();
    };
    let mut out = m - &mean;
    for mut row in out.outer_iter_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

/// Relevance score of two embeddings: `sigmoid(hp · he)`.
pub fn score(hp: &[f64], he: &[f64]) -> Result<f64> {
    if hp.len() != he.len() {
        return Err(Error::DimensionMismatch(format!(
            "score of vectors with lengths {} and {}",
            hp.len(),
            he.len()
        )));
    }
    Ok(sigmoid(hp.iter().zip(he).map(|(a, b)| a * b).sum()))
}

/// Evidence for one problem, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub problem: usize,
    pub items: Vec<(usize, f64)>,
}

impl Ranking {
    pub fn evidence(&self) -> impl Iterator<Item = usize> + '_ {
        self.items.iter().map(|&(e, _)| e)
    }

    pub fn to_report(&self, corpus: &Corpus) -> RankingReport {
        RankingReport {
            problem: corpus.catalog(NodeKind::Problem).label(self.problem).to_string(),
            items: self
                .items
                .iter()
                .map(|&(e, score)| RankedItem {
                    id: corpus.study(e).id.clone(),
                    title: corpus.study(e).title.clone(),
                    score,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub id: String,
    pub title: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub problem: String,
    pub items: Vec<RankedItem>,
}

/// Top `k` of `scores` outside `exclude`; equal scores keep ascending
/// evidence order.
pub fn rank(scores: &[f64], problem: usize, k: usize, exclude: &BTreeSet<usize>) -> Result<Ranking> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut items: Vec<(usize, f64)> = scores
        .iter()
        .copied()
        .enumerate()
        .filter(|(e, _)| !exclude.contains(e))
        .collect();
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    items.truncate(k);
    Ok(Ranking { problem, items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fallback_embeddings;
    use crate::graphs::{build_ecg, Relation};

    fn corpus() -> Corpus {
        let text = [
            r#"{"id":"a","title":"aspirin trial","description":"pain relief","problems":["pain"],"interventions":["aspirin"],"outcomes":["pain score"]}"#,
            r#"{"id":"b","title":"ibuprofen trial","description":"pain relief study","problems":["pain","fever"],"interventions":["ibuprofen"],"outcomes":["pain score"]}"#,
            r#"{"id":"c","title":"fever study","description":"fever in children","problems":["fever"],"interventions":["paracetamol"],"outcomes":["temperature"]}"#,
            r#"{"id":"d","title":"sleep study","description":"insomnia","problems":["insomnia"],"interventions":["melatonin"],"outcomes":[]}"#,
        ]
        .join("\n");
        Corpus::parse(&text).unwrap()
    }

    fn small_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            dim: 8,
            hgt_heads: 2,
            gat_heads: 2,
            fusion_heads: 2,
            variant,
            threshold: 0.3,
            ..ModelConfig::default()
        }
    }

    fn model(variant: Variant) -> (Corpus, Mhan) {
        let c = corpus();
        let h0 = fallback_embeddings(&c, 12, 1);
        let config = small_config(variant);
        let (ecg, etg) = build_graphs(&c, &h0, &config).unwrap();
        let m = make_variant(&config, &ecg, &etg, &h0).unwrap();
        (c, m)
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.5);
        assert!((score(&[1.0], &[1.0]).unwrap() - 0.7310585786).abs() < 1e-9);
        let (a, b) = ([0.3, -1.2, 2.0], [1.5, 0.2, -0.7]);
        assert_eq!(score(&a, &b).unwrap(), score(&b, &a).unwrap());
        assert!(score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            fusion_heads: 12,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig {
            threshold: 1.5,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn variant_round_trips() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.as_str()));
        }
        assert!("GNN".parse::<Variant>().is_err());
    }

    #[test]
    fn forward_covers_every_kind() {
        let (c, m) = model(Variant::Mhan);
        let out = m.forward().unwrap();
        assert_eq!(out.dim(), 8);
        for kind in NodeKind::ALL {
            assert_eq!(out.count(kind), c.count(kind));
            assert!(out.table(kind).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_layers_is_identity() {
        let c = corpus();
        let h0 = fallback_embeddings(&c, 12, 1);
        let config = ModelConfig {
            layers: 0,
            ..small_config(Variant::Mhan)
        };
        let (ecg, etg) = build_graphs(&c, &h0, &config).unwrap();
        let m = make_variant(&config, &ecg, &etg, &h0).unwrap();
        assert_eq!(m.forward().unwrap().tables(), h0.tables());
    }

    #[test]
    fn crec_has_no_text_parameters() {
        let (_, m) = model(Variant::CRec);
        assert!(m.text_params().is_empty());
        assert!(m.store().names().all(|n| !n.contains(".gat.") && !n.contains(".fusion.")));
        assert!(m.text_graph().is_none());
        let (_, u) = model(Variant::URec);
        assert!(u.text_params().is_empty());
        assert!(u.graph().relations().any(|r| r == Relation::Similar));
    }

    #[test]
    fn crec_evidence_rows_come_from_hgt() {
        let c = corpus();
        let h0 = fallback_embeddings(&c, 12, 1);
        let config = small_config(Variant::CRec);
        let m = make_variant(&config, &build_ecg(&c), &EtgGraph::from_neighbors(1.0, vec![vec![]; 4]), &h0).unwrap();
        let mut tape = Tape::new();
        let inputs = h0.tables().map(|_, t| tape.constant(t.clone()));
        let mut h = inputs;
        for l in &m.layers {
            h = hgt_layer(&mut tape, m.store(), &m.hgt_topology, &h, &l.hgt).unwrap();
        }
        let out = m.forward().unwrap();
        assert_eq!(tape.value(h[NodeKind::Evidence]), out.table(NodeKind::Evidence));
    }

    #[test]
    fn reeb_initial_is_seeded() {
        let (_, a) = model(Variant::REeb);
        let (_, b) = model(Variant::REeb);
        assert_eq!(a.initial(), b.initial());
        assert!(a.initial().tables().iter().all(|(_, t)| t.iter().all(|v| v.abs() <= 0.1)));
        let (_, full) = model(Variant::Mhan);
        assert_ne!(a.initial(), full.initial());
    }

    #[test]
    fn self_loop_only_text_graph_runs() {
        let c = corpus();
        let h0 = fallback_embeddings(&c, 12, 1);
        let config = small_config(Variant::Mhan);
        let etg = EtgGraph::from_neighbors(1.0, vec![vec![]; 4]);
        let m = make_variant(&config, &build_ecg(&c), &etg, &h0).unwrap();
        assert!(m.forward().is_ok());
    }

    #[test]
    fn scores_lie_in_unit_interval() {
        let (_, m) = model(Variant::Mhan);
        let s = m.scores().unwrap();
        assert_eq!(s.dim(), (3, 4));
        assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn ranking_tie_break_and_bounds() {
        let r = rank(&[0.5, 0.7, 0.5, 0.7], 0, 3, &BTreeSet::new()).unwrap();
        assert_eq!(r.evidence().collect::<Vec<_>>(), vec![1, 3, 0]);
        let all = rank(&[0.1, 0.2], 0, 10, &BTreeSet::new()).unwrap();
        assert_eq!(all.items.len(), 2);
        let none = rank(&[0.1, 0.2], 0, 2, &[0, 1].into_iter().collect()).unwrap();
        assert!(none.items.is_empty());
        assert!(rank(&[0.1], 0, 0, &BTreeSet::new()).is_err());
    }

    #[test]
    fn recommend_reports_ids() {
        let (c, m) = model(Variant::Mhan);
        let exclude = BTreeSet::from([0]);
        let r = m.recommend_topk(1, 2, &exclude).unwrap();
        assert_eq!(r.items.len(), 2);
        assert!(r.evidence().all(|e| e != 0));
        let report = r.to_report(&c);
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["items"].as_array().unwrap().len(), 2);
        assert!(json["problem"].is_string());
        assert!(m.recommend_topk(99, 2, &exclude).is_err());
    }
}
