mod config;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mhan_core::autodiff::Checkpoint;
use mhan_core::corpus::{fallback_embeddings, load_corpus, load_embeddings};
use mhan_core::eval::{evaluate, prepare_model, run_experiment, ExperimentKind};
use mhan_core::fusion::FusionKind;
use mhan_core::graphs::{GraphDump, GraphStats};
use mhan_core::model::build_graphs;
use mhan_core::training::{checkpoint, train, EdgeSplit};
use mhan_core::{Corpus, EmbeddingTable, Mhan, NodeKind, Variant};

use crate::config::RunConfig;

/// Width of the hash embeddings used when no embedding file is given.
const FALLBACK_DIM: usize = 768;

#[derive(Parser, Debug)]
#[command(name = "mhan", version, about = "Clinical evidence recommendation over study graphs")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build both study graphs and report their sizes
    BuildGraphs(Common),
    /// Train a model and write its checkpoint and loss trace
    Train {
        #[command(flatten)]
        common: Common,
        /// Warm-start parameters from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score held-out links with a trained checkpoint
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Rank evidence for one problem
    Recommend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Problem label, matched case-insensitively
        #[arg(long)]
        problem: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Keep the problem's training links among the candidates
        #[arg(long)]
        include_train: bool,
    },
    /// Train and evaluate every cell of an experiment grid
    Experiment {
        #[command(flatten)]
        common: Common,
        /// ablation, fusion, threshold or heads
        #[arg(long)]
        kind: ExperimentKind,
    },
    /// Write hash-based embeddings for a dataset
    EmbedFallback {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = FALLBACK_DIM)]
        dim: usize,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Study corpus, one JSON object per line
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Embedding file; hash embeddings are used when absent
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Flat JSON config; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, env = "MHAN_OUT_DIR", default_value = "mhan-out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    fusion: Option<FusionKind>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "neg-k")]
    neg_k: Option<usize>,
}

impl Common {
    /// Defaults, then `base` (a checkpoint's stored config), then the
    /// config file, then flags.
    fn resolve(&self, base: Option<&serde_json::Value>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(nested) = base {
            cfg.apply_nested(nested).context("checkpoint config")?;
        }
        if let Some(path) = &self.config {
            cfg.load_file(path)?;
        }
        if let Some(p) = &self.dataset {
            cfg.dataset = Some(p.clone());
        }
        if let Some(p) = &self.embeddings {
            cfg.embeddings = Some(p.clone());
        }
        let spec = &mut cfg.spec;
        if let Some(seed) = self.seed {
            spec.model.seed = seed;
            spec.train.seed = seed;
        }
        if let Some(t) = self.threshold {
            spec.model.threshold = t;
        }
        if let Some(f) = self.fusion {
            spec.model.fusion = f;
        }
        if let Some(v) = self.variant {
            spec.model.variant = v;
        }
        if let Some(e) = self.epochs {
            spec.train.epochs = e;
        }
        if let Some(k) = self.neg_k {
            spec.train.negatives = k;
        }
        spec.model.validate()?;
        spec.train.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

struct Inputs {
    corpus: Corpus,
    text: EmbeddingTable,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let dataset = cfg.dataset.as_deref().context("--dataset is required")?;
    let corpus = load_corpus(dataset).with_context(|| format!("loading dataset {}", dataset.display()))?;
    let text = match &cfg.embeddings {
        Some(path) => load_embeddings(path, &corpus).with_context(|| format!("loading embeddings {}", path.display()))?,
        None => {
            log::info!("no embedding file given; using {FALLBACK_DIM}-dimensional hash embeddings");
            fallback_embeddings(&corpus, FALLBACK_DIM, cfg.spec.model.seed)
        }
    };
    Ok(Inputs { corpus, text })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::read(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

/// Rebuild the trained model described by a checkpoint.
fn restore(common: &Common, path: &Path) -> Result<(RunConfig, Inputs, Mhan, EdgeSplit)> {
    let ckpt = read_checkpoint(path)?;
    let cfg = common.resolve(Some(&ckpt.config))?;
    let inputs = load_inputs(&cfg)?;
    let (mut model, split) = prepare_model(&inputs.corpus, &inputs.text, &cfg.spec)?;
    ckpt.restore(model.store_mut())
        .with_context(|| format!("checkpoint {} does not fit the configured model", path.display()))?;
    Ok((cfg, inputs, model, split))
}

fn build_graphs_cmd(common: &Common) -> Result<()> {
    let cfg = common.resolve(None)?;
    let inputs = load_inputs(&cfg)?;
    let (ecg, etg) = build_graphs(&inputs.corpus, &inputs.text, &cfg.spec.model)?;
    let out = common.out_dir()?;
    let stats = GraphStats::new(&ecg, &etg);
    let dump = GraphDump::new(&inputs.corpus, &ecg, &etg);
    write(&out.join("graphs.json"), &(serde_json::to_string(&dump)? + "\n"))?;
    write(&out.join("stats.json"), &(serde_json::to_string_pretty(&stats)? + "\n"))?;
    write(&out.join("stats.txt"), &stats.to_table())?;
    cfg.write(out)?;
    print!("{}", stats.to_table());
    Ok(())
}

fn train_cmd(common: &Common, resume: Option<&Path>) -> Result<()> {
    let cfg = common.resolve(None)?;
    let inputs = load_inputs(&cfg)?;
    let (mut model, split) = prepare_model(&inputs.corpus, &inputs.text, &cfg.spec)?;
    if let Some(path) = resume {
        read_checkpoint(path)?
            .restore(model.store_mut())
            .with_context(|| format!("checkpoint {} does not fit the configured model", path.display()))?;
        log::info!("resuming from {}", path.display());
    }
    let outcome = train(&mut model, &split, &cfg.spec.train)?;
    let out = common.out_dir()?;
    checkpoint(&model, &cfg.spec.train)?.write(&out.join("checkpoint.json"))?;
    write(&out.join("loss.csv"), &outcome.to_csv())?;
    cfg.write(out)?;
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} epochs{}; final loss {last:.6}; outputs in {}",
        outcome.losses.len(),
        if outcome.stopped_early { " (stopped early)" } else { "" },
        out.display()
    );
    Ok(())
}

fn evaluate_cmd(common: &Common, ckpt: &Path) -> Result<()> {
    let (cfg, _, model, split) = restore(common, ckpt)?;
    let mut report = evaluate(&model, &split, &cfg.spec.eval)?;
    report.config = serde_json::to_value(&cfg.spec)?;
    let out = common.out_dir()?;
    report.write(&out.join("report"))?;
    cfg.write(out)?;
    print!("{}", report.to_table());
    Ok(())
}

fn recommend_cmd(common: &Common, ckpt: &Path, label: &str, k: usize, include_train: bool) -> Result<()> {
    let (cfg, inputs, model, split) = restore(common, ckpt)?;
    let problem = inputs
        .corpus
        .catalog(NodeKind::Problem)
        .lookup(label)
        .ok_or_else(|| mhan_core::Error::UnknownProblem(label.to_string()))?;
    let exclude = if include_train {
        BTreeSet::new()
    } else {
        split.train_by_problem().remove(&problem).unwrap_or_default()
    };
    let ranking = model.recommend_topk(problem, k, &exclude)?;
    let json = serde_json::to_string_pretty(&ranking.to_report(&inputs.corpus))? + "\n";
    let out = common.out_dir()?;
    write(&out.join("ranking.json"), &json)?;
    cfg.write(out)?;
    print!("{json}");
    Ok(())
}

fn experiment_cmd(common: &Common, kind: ExperimentKind) -> Result<()> {
    let cfg = common.resolve(None)?;
    let inputs = load_inputs(&cfg)?;
    let grid = run_experiment(kind, &inputs.corpus, &inputs.text, &cfg.spec)?;
    let out = common.out_dir()?;
    grid.write(&out.join(format!("experiment-{}", kind.as_str())))?;
    cfg.write(out)?;
    print!("{}", grid.to_table()?);
    Ok(())
}

fn embed_fallback_cmd(common: &Common, dim: usize) -> Result<()> {
    if dim == 0 {
        bail!("--dim must be positive");
    }
    let cfg = common.resolve(None)?;
    let dataset = cfg.dataset.as_deref().context("--dataset is required")?;
    let corpus = load_corpus(dataset).with_context(|| format!("loading dataset {}", dataset.display()))?;
    let table = fallback_embeddings(&corpus, dim, cfg.spec.model.seed);
    let out = common.out_dir()?;
    let path = out.join("embeddings.txt");
    table.write(&corpus, &path)?;
    println!("{}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::BuildGraphs(common) => build_graphs_cmd(common),
        Command::Train { common, resume } => train_cmd(common, resume.as_deref()),
        Command::Evaluate { common, checkpoint } => evaluate_cmd(common, checkpoint),
        Command::Recommend {
            common,
            checkpoint,
            problem,
            k,
            include_train,
        } => recommend_cmd(common, checkpoint, problem, *k, *include_train),
        Command::Experiment { common, kind } => experiment_cmd(common, *kind),
        Command::EmbedFallback { common, dim } => embed_fallback_cmd(common, *dim),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"seed": 3, "model.layers": 1, "train.epochs": 4}"#).unwrap();
        let cli = Cli::try_parse_from(["mhan", "train", "--config", path.to_str().unwrap(), "--epochs", "9"]).unwrap();
        let Command::Train { common, .. } = cli.command else { panic!() };
        let cfg = common.resolve(None).unwrap();
        assert_eq!(cfg.spec.model.layers, 1);
        assert_eq!(cfg.spec.train.seed, 3);
        assert_eq!(cfg.spec.train.epochs, 9);
    }

    #[test]
    fn heads_not_dividing_dim_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"model.fusion_heads": 7}"#).unwrap();
        let cli = Cli::try_parse_from(["mhan", "build-graphs", "--config", path.to_str().unwrap()]).unwrap();
        let Command::BuildGraphs(common) = cli.command else { panic!() };
        assert!(common.resolve(None).is_err());
    }
}
