//! Ranking metrics, the end-to-end run pipeline and experiment grids.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, EmbeddingTable};
use crate::fusion::FusionKind;
use crate::graphs::build_ecg;
use crate::model::{build_graphs, make_variant, rank, Mhan, ModelConfig, Ranking, Variant};
use crate::training::{split_edges, train, EdgeSplit, TrainOutcome, TrainingConfig};
use crate::{Error, Result};

/// How per-query NDCG values are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NdcgAggregation {
    /// mean of per-problem NDCG over problems with held-out links
    #[default]
    PerQueryMean,
    /// summed DCG over summed ideal DCG
    Global,
}

impl FromStr for NdcgAggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_query_mean" => Ok(Self::PerQueryMean),
            "global" => Ok(Self::Global),
            _ => Err(Error::Config(format!("unknown ndcg aggregation {s:?}"))),
        }
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    Ok(())
}

/// Held-out links found in their problem's top `k`, over all held-out
/// links.
pub fn hit_rate_at_k(rankings: &BTreeMap<usize, Ranking>, test: &[(usize, usize)], k: usize) -> Result<f64> {
    check_k(k)?;
    if test.is_empty() {
        return Err(Error::Eval("empty test set".into()));
    }
    let hits = test
        .iter()
        .filter(|&&(p, e)| {
            rankings
                .get(&p)
                .is_some_and(|r| r.items.iter().take(k).any(|&(x, _)| x == e))
        })
        .count();
    Ok(hits as f64 / test.len() as f64)
}

fn discount(rank0: usize) -> f64 {
    1.0 / ((rank0 + 2) as f64).log2()
}

/// Binary-relevance NDCG of the problems that have held-out links and a
/// non-empty ranking.
pub fn ndcg_at_k(
    rankings: &BTreeMap<usize, Ranking>,
    test: &[(usize, usize)],
    k: usize,
    aggregation: NdcgAggregation,
) -> Result<f64> {
    check_k(k)?;
    if test.is_empty() {
        return Err(Error::Eval("empty test set".into()));
    }
    let mut relevant: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &(p, e) in test {
        relevant.entry(p).or_default().insert(e);
    }
    let (mut sum, mut dcg_total, mut idcg_total, mut queries) = (0.0, 0.0, 0.0, 0usize);
    for (p, rel) in &relevant {
        let Some(r) = rankings.get(p).filter(|r| !r.items.is_empty()) else {
            log::debug!("problem {p} has no candidates; skipped");
            continue;
        };
        let dcg: f64 = r
            .items
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, (e, _))| rel.contains(e))
            .map(|(i, _)| discount(i))
            .sum();
        let idcg: f64 = (0..rel.len().min(k)).map(discount).sum();
        sum += dcg / idcg;
        dcg_total += dcg;
        idcg_total += idcg;
        queries += 1;
    }
    if queries == 0 {
        return Err(Error::Eval("no query has candidates".into()));
    }
    Ok(match aggregation {
        NdcgAggregation::PerQueryMean => sum / queries as f64,
        NdcgAggregation::Global => dcg_total / idcg_total,
    })
}

/// Probability that a held-out link outscores a uniformly drawn non-link
/// of the same problem (ties count half), averaged over held-out links.
pub fn held_out_auc(scores: &Array2<f64>, split: &EdgeSplit) -> Result<f64> {
    if split.test.is_empty() {
        return Err(Error::Eval("empty test set".into()));
    }
    let known = split.all_by_problem();
    let n_evidence = scores.ncols();
    let mut total = 0.0;
    let mut counted = 0usize;
    for &(p, e) in &split.test {
        let pos = scores[[p, e]];
        let negatives: Vec<usize> = (0..n_evidence).filter(|x| !known[&p].contains(x)).collect();
        if negatives.is_empty() {
            continue;
        }
        let wins: f64 = negatives
            .iter()
            .map(|&n| match pos.total_cmp(&scores[[p, n]]) {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Equal => 0.5,
                std::cmp::Ordering::Less => 0.0,
            })
            .sum();
        total += wins / negatives.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Eval("no held-out link has a negative".into()));
    }
    Ok(total / counted as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub ndcg: NdcgAggregation,
    /// drop each problem's training links from its candidates
    pub exclude_train: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![3, 5, 7, 9],
            ndcg: NdcgAggregation::PerQueryMean,
            exclude_train: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: serde_json::Value,
    pub metrics: Metrics,
    pub gt: usize,
    pub queries: usize,
}

/// Full rankings for every problem with held-out links.
pub fn test_rankings(scores: &Array2<f64>, split: &EdgeSplit, exclude_train: bool) -> Result<BTreeMap<usize, Ranking>> {
    let train = split.train_by_problem();
    let empty = BTreeSet::new();
    let mut out = BTreeMap::new();
    for p in split.test_by_problem().into_keys() {
        let exclude = if exclude_train { train.get(&p).unwrap_or(&empty) } else { &empty };
        let row = scores.row(p);
        let ranking = rank(row.as_slice().expect("standard layout"), p, scores.ncols().max(1), exclude)?;
        out.insert(p, ranking);
    }
    Ok(out)
}

/// Metrics of precomputed scores on the held-out links.
pub fn evaluate_scores(scores: &Array2<f64>, split: &EdgeSplit, config: &EvalConfig) -> Result<MetricReport> {
    if split.test.is_empty() {
        return Err(Error::Eval("empty test set".into()));
    }
    let rankings = test_rankings(scores, split, config.exclude_train)?;
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in &config.ks {
        hr.insert(k, hit_rate_at_k(&rankings, &split.test, k)?);
        ndcg.insert(k, ndcg_at_k(&rankings, &split.test, k, config.ndcg)?);
    }
    Ok(MetricReport {
        config: serde_json::to_value(config)?,
        metrics: Metrics { hr, ndcg },
        gt: split.test.len(),
        queries: rankings.values().filter(|r| !r.items.is_empty()).count(),
    })
}

pub fn evaluate(model: &Mhan, split: &EdgeSplit, config: &EvalConfig) -> Result<MetricReport> {
    let mut report = evaluate_scores(&model.scores()?, split, config)?;
    report.config = serde_json::json!({ "model": model.config(), "eval": config });
    Ok(report)
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_table(&self) -> String {
        let mut out = config_line(&self.config);
        let rows = [("", self)];
        out.push_str(&metric_table(&rows));
        out
    }

    /// Write `<stem>.json` and `<stem>.txt`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        write_pair(stem, &self.to_json()?, &self.to_table())
    }
}

fn write_pair(stem: &Path, json: &str, table: &str) -> Result<()> {
    for (ext, body) in [("json", json), ("txt", table)] {
        let path = stem.with_extension(ext);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn config_line(config: &serde_json::Value) -> String {
    let model = config.get("model").unwrap_or(config);
    let mut line = String::new();
    for key in ["variant", "fusion", "seed", "threshold", "hgt_heads", "gat_heads", "fusion_heads"] {
        if let Some(v) = model.get(key) {
            let v = v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string());
            let _ = write!(line, "{}{key}={v}", if line.is_empty() { "" } else { " " });
        }
    }
    line.push('\n');
    line
}

fn metric_table(rows: &[(&str, &MetricReport)]) -> String {
    let ks: Vec<usize> = rows
        .first()
        .map(|(_, r)| r.metrics.hr.keys().copied().collect())
        .unwrap_or_default();
    let mut header = vec!["cell".to_string()];
    header.extend(ks.iter().map(|k| format!("HR@{k}")));
    header.extend(ks.iter().map(|k| format!("NDCG@{k}")));
    header.push("gt".into());
    header.push("queries".into());
    let mut table = vec![header];
    for (label, r) in rows {
        let mut line = vec![label.to_string()];
        line.extend(ks.iter().map(|k| format!("{:.4}", r.metrics.hr[k])));
        line.extend(ks.iter().map(|k| format!("{:.4}", r.metrics.ndcg[k])));
        line.push(r.gt.to_string());
        line.push(r.queries.to_string());
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, &w))| if i == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Everything one end-to-end run needs besides the data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainingConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: Mhan,
    pub split: EdgeSplit,
    pub outcome: TrainOutcome,
    pub report: MetricReport,
}

/// Split, build graphs without held-out links, construct the variant,
/// train and evaluate.
pub fn run_pipeline(corpus: &Corpus, text: &EmbeddingTable, spec: &RunSpec) -> Result<RunResult> {
    let (model, split) = prepare_model(corpus, text, spec)?;
    finish_pipeline(model, split, spec)
}

/// The untrained model and split of a run.
pub fn prepare_model(corpus: &Corpus, text: &EmbeddingTable, spec: &RunSpec) -> Result<(Mhan, EdgeSplit)> {
    spec.model.validate()?;
    spec.train.validate()?;
    let ecg = build_ecg(corpus);
    let split = split_edges(&ecg, spec.train.ratio, spec.train.seed)?;
    let (_, etg) = build_graphs(corpus, text, &spec.model)?;
    let model = make_variant(&spec.model, &split.message_graph(&ecg), &etg, text)?;
    Ok((model, split))
}

/// Train a prepared model and evaluate it.
pub fn finish_pipeline(mut model: Mhan, split: EdgeSplit, spec: &RunSpec) -> Result<RunResult> {
    let outcome = train(&mut model, &split, &spec.train)?;
    let mut report = evaluate(&model, &split, &spec.eval)?;
    report.config = serde_json::to_value(spec)?;
    Ok(RunResult {
        model,
        split,
        outcome,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Ablation,
    Fusion,
    Threshold,
    Heads,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ablation => "ablation",
            Self::Fusion => "fusion",
            Self::Threshold => "threshold",
            Self::Heads => "heads",
        }
    }

    /// Swept values, with the spec of each cell derived from `base`.
    pub fn cells(self, base: &RunSpec) -> Vec<(String, RunSpec)> {
        let with = |f: &dyn Fn(&mut ModelConfig)| {
            let mut s = base.clone();
            f(&mut s.model);
            s
        };
        match self {
            Self::Ablation => Variant::ALL
                .iter()
                .map(|&v| (v.to_string(), with(&|m| m.variant = v)))
                .collect(),
            Self::Fusion => FusionKind::ALL
                .iter()
                .map(|&f| (f.to_string(), with(&|m| m.fusion = f)))
                .collect(),
            Self::Threshold => (0..=10)
                .map(|i| {
                    let t = i as f64 / 10.0;
                    (format!("{t:.1}"), with(&|m| m.threshold = t))
                })
                .collect(),
            Self::Heads => [8, 16, 32]
                .iter()
                .map(|&h| (h.to_string(), with(&|m| m.fusion_heads = h)))
                .collect(),
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ablation" => Ok(Self::Ablation),
            "fusion" | "fusion-compare" => Ok(Self::Fusion),
            "threshold" | "threshold-sweep" => Ok(Self::Threshold),
            "heads" | "head-sweep" => Ok(Self::Heads),
            _ => Err(Error::Config(format!(
                "unknown experiment {s:?} (ablation, fusion, threshold, heads)"
            ))),
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub value: String,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub kind: ExperimentKind,
    pub base: RunSpec,
    pub cells: Vec<GridCell>,
}

/// Train and evaluate every cell of `kind` from the same seed.
pub fn run_experiment(kind: ExperimentKind, corpus: &Corpus, text: &EmbeddingTable, base: &RunSpec) -> Result<ExperimentGrid> {
    let mut cells = Vec::new();
    for (value, spec) in kind.cells(base) {
        log::info!("{kind} cell {value}");
        let result = run_pipeline(corpus, text, &spec)?;
        cells.push(GridCell {
            value,
            report: result.report,
        });
    }
    Ok(ExperimentGrid {
        kind,
        base: base.clone(),
        cells,
    })
}

impl ExperimentGrid {
    pub fn to_json(&self) -> Result<String> {
        if self.cells.is_empty() {
            return Err(Error::Eval("experiment grid has no cells".into()));
        }
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_table(&self) -> Result<String> {
        if self.cells.is_empty() {
            return Err(Error::Eval("experiment grid has no cells".into()));
        }
        let mut out = format!("experiment={} ", self.kind);
        out.push_str(&config_line(&serde_json::to_value(&self.base)?));
        let rows: Vec<(&str, &MetricReport)> = self.cells.iter().map(|c| (c.value.as_str(), &c.report)).collect();
        out.push_str(&metric_table(&rows));
        Ok(out)
    }

    pub fn write(&self, stem: &Path) -> Result<()> {
        write_pair(stem, &self.to_json()?, &self.to_table()?)
    }
}

/// Problem indices that have at least one held-out link.
pub fn queried_problems(split: &EdgeSplit) -> Vec<usize> {
    split.test_by_problem().into_keys().collect()
}
