//! Seeded generator of small corpora with planted cluster structure, used
//! to check that training recovers held-out problem links.
//!
//! Problems are dealt round-robin into clusters. Each study belongs to one
//! primary problem (and sometimes a second one from the same cluster),
//! uses interventions and outcomes drawn from its cluster's pool, usually
//! carries its problem's own therapy, and is described with words from its
//! cluster's vocabulary so that text embeddings of same-cluster studies
//! correlate.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Study};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub problems: usize,
    pub evidence: usize,
    pub clusters: usize,
    pub seed: u64,
    /// chance that a study lists its problem's own therapy
    pub therapy_rate: f64,
    /// chance that a study lists a second problem from its cluster
    pub second_problem_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            problems: 20,
            evidence: 60,
            clusters: 3,
            seed: 7,
            therapy_rate: 0.8,
            second_problem_rate: 0.25,
        }
    }
}

const SHARED_WORDS: [&str; 10] = [
    "randomized", "trial", "patients", "placebo", "controlled", "efficacy", "safety", "cohort", "adults", "baseline",
];

const GREEK: [&str; 12] = [
    "alpha", "beta", "gamma", "delta", "omega", "sigma", "kappa", "lambda", "theta", "zeta", "iota", "rho",
];

/// Digits spelled as letters, so tokens never share a digit run.
fn letters(n: usize) -> String {
    n.to_string().bytes().map(|d| (b'a' + d - b'0') as char).collect()
}

fn cluster_word(c: usize, j: usize) -> String {
    format!("theme{}{}", letters(c), GREEK[j % GREEK.len()])
}

fn problem_word(p: usize, j: usize) -> String {
    format!("marker{}{}", letters(p), ["x", "y", "z"][j % 3])
}

pub fn cluster_of(problem: usize, clusters: usize) -> usize {
    problem % clusters
}

/// Generate the corpus; problem `p` is labelled `problem {p}` and its
/// cluster is `cluster_of(p, clusters)`.
pub fn planted_corpus(config: &SyntheticConfig) -> Result<Corpus> {
    if config.problems == 0 || config.clusters == 0 || config.evidence == 0 || config.clusters > config.problems {
        return Err(crate::Error::Config(format!(
            "synthetic corpus needs 0 < clusters <= problems and evidence > 0, got {config:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let members: Vec<Vec<usize>> = (0..config.clusters)
        .map(|c| (0..config.problems).filter(|&p| cluster_of(p, config.clusters) == c).collect())
        .collect();
    let mut studies = Vec::with_capacity(config.evidence);
    for i in 0..config.evidence {
        let p = i % config.problems;
        let c = cluster_of(p, config.clusters);
        let mut problems = vec![format!("problem {p}")];
        if rng.random_bool(config.second_problem_rate) && members[c].len() > 1 {
            let other = *members[c].iter().filter(|&&q| q != p).collect::<Vec<_>>().choose(&mut rng).unwrap();
            problems.push(format!("problem {other}"));
        }
        let mut interventions: Vec<String> = (0..4).map(|j| format!("drug {c}-{j}")).collect();
        interventions.shuffle(&mut rng);
        interventions.truncate(2);
        if rng.random_bool(config.therapy_rate) {
            interventions.push(format!("therapy {p}"));
        }
        let outcomes = vec![format!("outcome {c}-{}", rng.random_range(0..3))];

        let mut words: Vec<String> = (0..12).map(|j| cluster_word(c, j)).collect();
        words.shuffle(&mut rng);
        words.truncate(8);
        words.extend((0..3).map(|j| problem_word(p, j)));
        words.extend(SHARED_WORDS.choose_multiple(&mut rng, 3).map(|w| w.to_string()));
        words.shuffle(&mut rng);
        let (title, description) = words.split_at(3);
        studies.push(Study {
            id: format!("SYN{i:04}"),
            title: title.join(" "),
            description: description.join(" "),
            problems,
            interventions,
            outcomes,
        });
    }
    Ok(Corpus::from_studies(studies)?)
}
