//! Randomized comparisons of the library against the reference
//! implementations in the parent module. Each returns `Err` describing the
//! first disagreement.

use mhan_core::corpus::{fallback_embeddings, normalize_label};
use mhan_core::eval::{hit_rate_at_k, ndcg_at_k, test_rankings, NdcgAggregation};
use mhan_core::graphs::{build_ecg, build_etg, similarity_matrix, SimilarityNormalization};
use mhan_core::model::{build_graphs, ModelConfig};
use mhan_core::training::EdgeSplit;
use mhan_core::{NodeKind, Relation};
use rand::Rng;

use super::*;

/// The eleven thresholds 0.0, 0.1, …, 1.0.
pub fn threshold_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// A random scoring instance: scores, split and a cutoff.
pub struct MetricInstance {
    pub scores: Matrix,
    pub split: EdgeSplit,
    pub k: usize,
}

pub fn metric_instance(rng: &mut ChaCha8Rng) -> MetricInstance {
    let problems = rng.random_range(1..=10);
    let evidence = rng.random_range(2..=20);
    let tied = rng.random_bool(0.5);
    let scores = Matrix::from_shape_fn((problems, evidence), |_| {
        if tied {
            rng.random_range(0..4) as f64
        } else {
            rng.random::<f64>()
        }
    });
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for p in 0..problems {
        for e in 0..evidence {
            if rng.random_bool(0.3) {
                if rng.random_bool(0.3) {
                    test.push((p, e));
                } else {
                    train.push((p, e));
                }
            }
        }
    }
    if test.is_empty() {
        let pair = (rng.random_range(0..problems), rng.random_range(0..evidence));
        train.retain(|&x| x != pair);
        test.push(pair);
    }
    MetricInstance {
        scores,
        split: EdgeSplit { train, test },
        k: rng.random_range(1..=10),
    }
}

pub fn check_metrics(inst: &MetricInstance) -> Result<(), String> {
    let rankings = test_rankings(&inst.scores, &inst.split, true).map_err(|e| e.to_string())?;
    let reference = reference_metrics(&inst.scores, &inst.split.train, &inst.split.test, inst.k);
    let hr = hit_rate_at_k(&rankings, &inst.split.test, inst.k).map_err(|e| e.to_string())?;
    if hr != reference.hr {
        return Err(format!("HR@{} {hr} vs reference {}", inst.k, reference.hr));
    }
    for (agg, want) in [
        (NdcgAggregation::PerQueryMean, reference.ndcg_mean),
        (NdcgAggregation::Global, reference.ndcg_global),
    ] {
        let got = ndcg_at_k(&rankings, &inst.split.test, inst.k, agg).map_err(|e| e.to_string())?;
        if (got - want).abs() > 1e-9 {
            return Err(format!("NDCG@{} ({agg:?}) {got} vs reference {want}", inst.k));
        }
    }
    Ok(())
}

/// NDCG when every held-out link outscores every other candidate.
pub fn perfect_ndcg(inst: &MetricInstance) -> Result<f64, String> {
    let mut scores = Matrix::zeros(inst.scores.dim());
    for &(p, e) in &inst.split.test {
        scores[[p, e]] = 1.0;
    }
    let rankings = test_rankings(&scores, &inst.split, true).map_err(|e| e.to_string())?;
    ndcg_at_k(&rankings, &inst.split.test, inst.k, NdcgAggregation::PerQueryMean).map_err(|e| e.to_string())
}

/// `instances` random metric instances against the reference, plus the
/// perfect-ranking identity on each.
pub fn metric_suite(instances: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for i in 0..instances {
        let inst = metric_instance(&mut r);
        check_metrics(&inst).map_err(|e| format!("instance {i}: {e}"))?;
        let perfect = perfect_ndcg(&inst)?;
        if perfect != 1.0 {
            return Err(format!("instance {i}: perfect ranking has NDCG {perfect}"));
        }
    }
    Ok(())
}

/// Compare the text graph built by the library with the reference on one
/// set of evidence vectors at every grid threshold; also check nested
/// edge sets along the grid.
pub fn check_text_graph(vectors: &Matrix) -> Result<(), String> {
    let sim = similarity_matrix(vectors.view(), SimilarityNormalization::Printed).map_err(|e| e.to_string())?;
    let n = vectors.nrows();
    let mut previous: Option<Vec<(usize, usize)>> = None;
    for t in threshold_grid() {
        let (want, ref_sim) = reference_text_graph(vectors, t);
        for i in 0..n {
            for j in 0..n {
                if i != j && (sim.get(i, j) - ref_sim[[i, j]]).abs() > 1e-12 {
                    return Err(format!("similarity ({i},{j}) {} vs {}", sim.get(i, j), ref_sim[[i, j]]));
                }
            }
        }
        let got = build_etg(&sim, t).map_err(|e| e.to_string())?.arcs();
        if got != want {
            return Err(format!("threshold {t}: arcs {got:?} vs reference {want:?}"));
        }
        if let Some(prev) = &previous {
            if let Some(extra) = got.iter().find(|a| prev.binary_search(a).is_err()) {
                return Err(format!("threshold {t} adds arc {extra:?} absent at a lower threshold"));
            }
        }
        previous = Some(got);
    }
    Ok(())
}

/// `corpora` random corpora with up to 12 studies: text graphs built
/// through the model's graph builder match the reference, and each study's
/// problem degree equals its distinct problem count.
pub fn graph_suite(corpora: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for c in 0..corpora {
        let evidence = r.random_range(2..=12);
        let corpus = random_corpus(&mut r, evidence);
        // alternate between random vectors and hash embeddings of the texts
        let table = if c % 2 == 0 {
            random_table(&mut r, &corpus, 8)
        } else {
            fallback_embeddings(&corpus, 16, c as u64)
        };
        let vectors = table.table(NodeKind::Evidence).clone();
        check_text_graph(&vectors).map_err(|e| format!("corpus {c}: {e}"))?;

        let t = r.random_range(0.0..=1.0);
        let config = ModelConfig {
            threshold: t,
            ..ModelConfig::default()
        };
        let (ecg, etg) = build_graphs(&corpus, &table, &config).map_err(|e| e.to_string())?;
        let (want, _) = reference_text_graph(&vectors, t);
        if etg.arcs() != want {
            return Err(format!("corpus {c}: pipeline text graph differs at threshold {t}"));
        }
        if ecg != build_ecg(&corpus) {
            return Err(format!("corpus {c}: co-reference graph not reproducible"));
        }
        for e in 0..corpus.num_evidence() {
            let degree = ecg.arcs(Relation::HasProblem).iter().filter(|&&(src, _)| src == e).count();
            let distinct: BTreeSet<String> = corpus.study(e).problems.iter().map(|l| normalize_label(l)).collect();
            if degree != distinct.len() {
                return Err(format!("corpus {c}: study {e} problem degree {degree}"));
            }
        }
    }
    Ok(())
}
