//! Fixtures and independent reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

pub mod gradients;
pub mod oracles;

use mhan_core::autodiff::{ParamId, ParamStore, Tape, Var};
use mhan_core::corpus::Study;
use mhan_core::{Corpus, EmbeddingTable, PerKind};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Matrix = Array2<f64>;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

pub fn study(id: &str, problems: &[&str], interventions: &[&str], outcomes: &[&str]) -> Study {
    let owned = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
    Study {
        id: id.to_string(),
        title: format!("title of {id}"),
        description: format!("description of {id}"),
        problems: owned(problems),
        interventions: owned(interventions),
        outcomes: owned(outcomes),
    }
}

/// Four studies over two problems, two interventions and two outcomes:
/// ten nodes in total.
pub fn ten_node_corpus() -> Corpus {
    Corpus::from_studies(vec![
        study("S0", &["p0"], &["i0"], &["o0"]),
        study("S1", &["p0", "p1"], &["i1"], &["o0"]),
        study("S2", &["p1"], &["i0", "i1"], &["o1"]),
        study("S3", &["p1"], &["i1"], &["o1"]),
    ])
    .unwrap()
}

/// Random corpus whose element labels come from small pools.
pub fn random_corpus(rng: &mut ChaCha8Rng, evidence: usize) -> Corpus {
    let pick = |rng: &mut ChaCha8Rng, prefix: &str, pool: usize| -> Vec<String> {
        let n = rng.random_range(1..=3);
        (0..n).map(|_| format!("{prefix}{}", rng.random_range(0..pool))).collect()
    };
    let studies = (0..evidence)
        .map(|i| Study {
            id: format!("R{i}"),
            title: format!("study {i}"),
            description: String::new(),
            problems: pick(rng, "p", 4),
            interventions: pick(rng, "i", 5),
            outcomes: pick(rng, "o", 5),
        })
        .collect();
    Corpus::from_studies(studies).unwrap()
}

/// Uniform random initial embeddings of width `dim` for every node.
pub fn random_table(rng: &mut ChaCha8Rng, corpus: &Corpus, dim: usize) -> EmbeddingTable {
    let tables = PerKind::from_fn(|kind| random_matrix(rng, corpus.count(kind), dim, -1.0, 1.0));
    EmbeddingTable::new(0, tables).unwrap()
}

/// Central differences of `f` with respect to every entry of every input.
pub fn numeric_grads(inputs: &[Matrix], f: impl Fn(&[Matrix]) -> f64) -> Vec<Matrix> {
    let mut xs = inputs.to_vec();
    let mut out = Vec::with_capacity(xs.len());
    for m in 0..xs.len() {
        let mut g = Matrix::zeros(xs[m].dim());
        for idx in ndarray::indices(xs[m].dim()) {
            let x0 = xs[m][idx];
            xs[m][idx] = x0 + FD_STEP;
            let up = f(&xs);
            xs[m][idx] = x0 - FD_STEP;
            let down = f(&xs);
            xs[m][idx] = x0;
            g[idx] = (up - down) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

/// `‖a − n‖ / (‖a‖ + ‖n‖)` over all entries of all matrices together.
pub fn relative_error(analytic: &[Matrix], numeric: &[Matrix]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.dim(), n.dim());
        diff += (a - n).mapv(|v| v * v).sum();
        na += a.mapv(|v| v * v).sum();
        nn += n.mapv(|v| v * v).sum();
    }
    let denom = na.sqrt() + nn.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Compare the tape's parameter gradients of a scalar loss with central
/// differences. `store_of` exposes the store inside `system`, and `loss`
/// records the loss on a fresh tape. Returns the relative error and the
/// analytic gradients.
pub fn check_param_grads<S>(
    system: &mut S,
    store_of: impl Fn(&mut S) -> &mut ParamStore,
    ids: &[ParamId],
    loss: impl Fn(&S, &mut Tape) -> Var,
) -> (f64, Vec<Matrix>) {
    let eval = |s: &S| {
        let mut tape = Tape::new();
        let l = loss(s, &mut tape);
        tape.scalar(l)
    };
    store_of(system).zero_grad();
    let mut tape = Tape::new();
    let l = loss(system, &mut tape);
    tape.backward_into(l, store_of(system)).unwrap();
    let analytic: Vec<Matrix> = ids.iter().map(|&id| store_of(system).grad(id).clone()).collect();

    let mut numeric = Vec::with_capacity(ids.len());
    for &id in ids {
        let dim = store_of(system).value(id).dim();
        let mut g = Matrix::zeros(dim);
        for idx in ndarray::indices(dim) {
            let x0 = store_of(system).value(id)[idx];
            store_of(system).value_mut(id)[idx] = x0 + FD_STEP;
            let up = eval(system);
            store_of(system).value_mut(id)[idx] = x0 - FD_STEP;
            let down = eval(system);
            store_of(system).value_mut(id)[idx] = x0;
            g[idx] = (up - down) / (2.0 * FD_STEP);
        }
        numeric.push(g);
    }
    (relative_error(&analytic, &numeric), analytic)
}

/// `Σ x ⊙ weights` as a scalar, so every output entry matters with a
/// distinct coefficient.
pub fn weighted_sum(tape: &mut Tape, x: Var, weights: &Matrix) -> Var {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod, None).unwrap()
}

/// Reference top-k metrics computed from scratch: every held-out link's
/// rank is counted directly from the scores. Candidates of a problem are
/// all evidence except its training links; ties go to the lower index.
pub struct ReferenceMetrics {
    pub hr: f64,
    pub ndcg_mean: f64,
    pub ndcg_global: f64,
}

pub fn reference_metrics(
    scores: &Matrix,
    train: &[(usize, usize)],
    test: &[(usize, usize)],
    k: usize,
) -> ReferenceMetrics {
    let mut train_of: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &(p, e) in train {
        train_of.entry(p).or_default().insert(e);
    }
    let empty = BTreeSet::new();
    let position = |p: usize, e: usize| -> usize {
        let excluded = train_of.get(&p).unwrap_or(&empty);
        let s = scores[[p, e]];
        (0..scores.ncols())
            .filter(|c| !excluded.contains(c) && *c != e)
            .filter(|&c| scores[[p, c]] > s || (scores[[p, c]] == s && c < e))
            .count()
    };
    let hits = test.iter().filter(|&&(p, e)| position(p, e) < k).count();

    let mut test_of: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(p, e) in test {
        test_of.entry(p).or_default().push(e);
    }
    let gain = |pos: usize| 1.0 / ((pos + 1) as f64 + 1.0).log2();
    let (mut sum, mut dcg_all, mut idcg_all) = (0.0, 0.0, 0.0);
    for (&p, rel) in &test_of {
        let mut rel = rel.clone();
        rel.sort_unstable();
        rel.dedup();
        let dcg: f64 = rel.iter().map(|&e| position(p, e)).filter(|&pos| pos < k).map(gain).sum();
        let idcg: f64 = (0..rel.len().min(k)).map(gain).sum();
        sum += dcg / idcg;
        dcg_all += dcg;
        idcg_all += idcg;
    }
    ReferenceMetrics {
        hr: hits as f64 / test.len() as f64,
        ndcg_mean: sum / test_of.len() as f64,
        ndcg_global: dcg_all / idcg_all,
    }
}

/// Reference text graph: distances by a plain double loop, similarity
/// `1 - D / (max D - min D)` over distinct pairs (all ones when the range
/// is zero), arc `i -> j` iff the similarity reaches the threshold, plus
/// self-loops. Returns the sorted arc list and the similarity matrix.
pub fn reference_text_graph(vectors: &Matrix, threshold: f64) -> (Vec<(usize, usize)>, Matrix) {
    let n = vectors.nrows();
    let mut dist = Matrix::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for c in 0..vectors.ncols() {
                let d = vectors[[i, c]] - vectors[[j, c]];
                s += d * d;
            }
            dist[[i, j]] = s.sqrt();
        }
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                lo = lo.min(dist[[i, j]]);
                hi = hi.max(dist[[i, j]]);
            }
        }
    }
    let mut sim = Matrix::ones((n, n));
    let mut arcs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                arcs.push((i, j));
                continue;
            }
            if hi > lo {
                sim[[i, j]] = 1.0 - dist[[i, j]] / (hi - lo);
            }
            if sim[[i, j]] >= threshold {
                arcs.push((i, j));
            }
        }
    }
    arcs.sort_unstable();
    (arcs, sim)
}
