//! Held-out edge split, negative sampling, the margin objective and the
//! full-batch training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Checkpoint, Tape, Var};
use crate::graphs::{EcgGraph, Relation};
use crate::model::Mhan;
use crate::{Error, Result};

/// How negative evidence is drawn for a problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDistribution {
    #[default]
    Uniform,
    /// proportional to one plus the evidence's training problem count
    Popularity,
}

impl FromStr for NoiseDistribution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "popularity" => Ok(Self::Popularity),
            _ => Err(Error::Config(format!("unknown noise distribution {s:?}"))),
        }
    }
}

impl fmt::Display for NoiseDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Popularity => "popularity",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub seed: u64,
    /// fraction of problem links kept for training
    pub ratio: f64,
    pub lr: f64,
    pub epochs: usize,
    /// negatives per training positive
    pub negatives: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// stop after this many epochs without a new best loss
    pub patience: Option<usize>,
    pub noise: NoiseDistribution,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let adam = Adam::default();
        Self {
            seed: 2022,
            ratio: 0.8,
            lr: 1e-3,
            epochs: 200,
            negatives: 5,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            patience: None,
            noise: NoiseDistribution::Uniform,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!("split ratio {} outside (0, 1)", self.ratio)));
        }
        if self.negatives == 0 {
            return Err(Error::Config("need at least one negative per positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be positive when set".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Adam {
        Adam {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Problem links as `(problem, evidence)` pairs, sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSplit {
    pub train: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

fn by_problem(pairs: &[(usize, usize)]) -> BTreeMap<usize, BTreeSet<usize>> {
    let mut out: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &(p, e) in pairs {
        out.entry(p).or_default().insert(e);
    }
    out
}

impl EdgeSplit {
    pub fn train_by_problem(&self) -> BTreeMap<usize, BTreeSet<usize>> {
        by_problem(&self.train)
    }

    pub fn test_by_problem(&self) -> BTreeMap<usize, BTreeSet<usize>> {
        by_problem(&self.test)
    }

    /// Every known positive, train and test.
    pub fn all_by_problem(&self) -> BTreeMap<usize, BTreeSet<usize>> {
        let mut all = self.train.clone();
        all.extend_from_slice(&self.test);
        by_problem(&all)
    }

    /// The graph used for message passing: held-out problem links (and
    /// their inverses) removed, everything else kept.
    pub fn message_graph(&self, ecg: &EcgGraph) -> EcgGraph {
        let drop: Vec<(usize, usize)> = self.test.iter().map(|&(p, e)| (e, p)).collect();
        ecg.without_arcs(Relation::HasProblem, &drop)
    }
}

/// Seeded shuffle of all problem links: the first `round((1 − ratio) · n)`
/// become the test side, the rest are kept for training.
pub fn split_edges(ecg: &EcgGraph, ratio: f64, seed: u64) -> Result<EdgeSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Split(format!("ratio {ratio} outside (0, 1)")));
    }
    let mut pairs: Vec<(usize, usize)> = ecg.arcs(Relation::HasProblem).iter().map(|&(e, p)| (p, e)).collect();
    pairs.sort_unstable();
    let n = pairs.len();
    if n < 2 {
        return Err(Error::Split(format!("need at least 2 problem links, found {n}")));
    }
    let n_test = ((1.0 - ratio) * n as f64).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::Split(format!(
            "ratio {ratio} on {n} links leaves an empty side"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let mut train = pairs.split_off(n_test);
    let mut test = pairs;
    train.sort_unstable();
    test.sort_unstable();
    Ok(EdgeSplit { train, test })
}

/// `k` distinct evidence indices outside `positives`, uniform or weighted.
pub fn sample_negatives(
    problem: usize,
    k: usize,
    n_evidence: usize,
    positives: &BTreeSet<usize>,
    weights: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..n_evidence).filter(|e| !positives.contains(e)).collect();
    if pool.len() < k {
        return Err(Error::NegativePool {
            problem: problem.to_string(),
            available: pool.len(),
            requested: k,
        });
    }
    let picked = match weights {
        None => index::sample(rng, pool.len(), k),
        Some(w) => index::sample_weighted(rng, pool.len(), |i| w[pool[i]], k)
            .map_err(|e| Error::Config(format!("noise weights: {e}")))?,
    };
    Ok(picked.into_iter().map(|i| pool[i]).collect())
}

/// `Σ max(0, 1 − y_pos + y_neg)` over the negatives of one positive.
pub fn margin_loss(y_pos: f64, y_negs: &[f64]) -> Result<f64> {
    if y_negs.is_empty() {
        return Err(Error::Config("margin loss needs at least one negative".into()));
    }
    Ok(y_negs.iter().map(|&n| (1.0 - y_pos + n).max(0.0)).sum())
}

/// Margin loss over a batch: `pos` is `m × 1`, `neg` is `m·k × 1` with
/// rows `i·k..(i+1)·k` belonging to positive `i`.
pub fn margin_loss_tape(tape: &mut Tape, pos: Var, neg: Var, k: usize) -> Result<Var> {
    let m = tape.shape(pos).0;
    if k == 0 || tape.shape(neg) != (m * k, 1) || tape.shape(pos).1 != 1 {
        return Err(Error::DimensionMismatch(format!(
            "margin loss over {:?} positives and {:?} negatives with k = {k}",
            tape.shape(pos),
            tape.shape(neg)
        )));
    }
    let repeat: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let pos = tape.gather_rows(pos, Arc::new(repeat))?;
    let diff = tape.sub(neg, pos)?;
    let terms = tape.add_scalar(diff, 1.0);
    let terms = tape.relu(terms);
    Ok(tape.sum(terms, None)?)
}

/// Training positives and fresh negatives for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochBatch {
    pub positives: Vec<(usize, usize)>,
    /// `negatives.len() == positives.len() · k`
    pub negatives: Vec<(usize, usize)>,
}

/// Draws batches for each epoch from the run seed, independently of any
/// other random state.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    seed: u64,
    k: usize,
    n_evidence: usize,
    train: Vec<(usize, usize)>,
    known: BTreeMap<usize, BTreeSet<usize>>,
    weights: Option<Vec<f64>>,
}

impl NegativeSampler {
    pub fn new(split: &EdgeSplit, n_evidence: usize, config: &TrainingConfig) -> Self {
        let weights = match config.noise {
            NoiseDistribution::Uniform => None,
            NoiseDistribution::Popularity => {
                let mut w = vec![1.0; n_evidence];
                for &(_, e) in &split.train {
                    w[e] += 1.0;
                }
                Some(w)
            }
        };
        Self {
            seed: config.seed,
            k: config.negatives,
            n_evidence,
            train: split.train.clone(),
            known: split.all_by_problem(),
            weights,
        }
    }

    pub fn batch(&self, epoch: usize) -> Result<EpochBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        let empty = BTreeSet::new();
        let mut negatives = Vec::with_capacity(self.train.len() * self.k);
        for &(p, _) in &self.train {
            let known = self.known.get(&p).unwrap_or(&empty);
            for e in sample_negatives(p, self.k, self.n_evidence, known, self.weights.as_deref(), &mut rng)? {
                negatives.push((p, e));
            }
        }
        Ok(EpochBatch {
            positives: self.train.clone(),
            negatives,
        })
    }
}

/// Loss of `model` on one batch, recorded on `tape`.
pub fn batch_loss(tape: &mut Tape, model: &Mhan, batch: &EpochBatch) -> Result<Var> {
    let out = model.forward_tape(tape)?;
    let pos = model.pair_scores(tape, &out, &batch.positives)?;
    let neg = model.pair_scores(tape, &out, &batch.negatives)?;
    let k = batch.negatives.len() / batch.positives.len().max(1);
    margin_loss_tape(tape, pos, neg, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// loss before each epoch's update
    pub losses: Vec<f64>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn to_csv(&self) -> String {
        loss_trace_csv(&self.losses)
    }
}

pub fn loss_trace_csv(losses: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{l}\n", i + 1));
    }
    out
}

/// Full-batch training: one forward/backward pass and one optimizer step
/// per epoch.
pub fn train(model: &mut Mhan, split: &EdgeSplit, config: &TrainingConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::Split("no training positives".into()));
    }
    let n_evidence = model.num_evidence();
    let sampler = NegativeSampler::new(split, n_evidence, config);
    let adam = config.optimizer();
    let mut losses = Vec::with_capacity(config.epochs);
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 0..config.epochs {
        let batch = sampler.batch(epoch)?;
        let mut tape = Tape::new();
        let loss = batch_loss(&mut tape, model, &batch)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: epoch + 1 });
        }
        tape.backward_into(loss, model.store_mut())?;
        adam.step(model.store_mut()).map_err(|e| match e {
            crate::AutodiffError::NonFiniteGradient(_) => Error::NonFiniteLoss { epoch: epoch + 1 },
            other => other.into(),
        })?;
        losses.push(value);
        log::debug!("epoch {} loss {value:.6}", epoch + 1);
        if let Some(patience) = config.patience {
            if value < best {
                best = value;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome { losses, stopped_early })
}

/// Model parameters plus the configuration that produced them.
pub fn checkpoint(model: &Mhan, config: &TrainingConfig) -> Result<Checkpoint> {
    let meta = serde_json::json!({
        "model": model.config(),
        "train": config,
    });
    Ok(Checkpoint::from_store(model.store(), meta))
}
