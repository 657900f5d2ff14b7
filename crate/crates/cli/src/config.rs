//! Run configuration: a flat JSON object whose keys are either dotted paths
//! into the run spec (`model.layers`, `train.lr`, `eval.ks`) or flag names
//! (`seed`, `threshold`, `neg-k`, ...). Later layers override earlier ones.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mhan_core::eval::RunSpec;
use serde_json::{Map, Value};

/// Flag-named keys and the dotted keys they stand for.
const ALIASES: &[(&str, &[&str])] = &[
    ("seed", &["model.seed", "train.seed"]),
    ("threshold", &["model.threshold"]),
    ("fusion", &["model.fusion"]),
    ("variant", &["model.variant"]),
    ("epochs", &["train.epochs"]),
    ("neg-k", &["train.negatives"]),
];

const PATH_KEYS: [&str; 2] = ["dataset", "embeddings"];

/// Everything a command needs besides its own selectors.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub spec: RunSpec,
    pub dataset: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
}

impl RunConfig {
    /// Flatten into the on-disk form: dotted keys plus path keys.
    pub fn to_flat(&self) -> Result<Value> {
        let mut flat = Map::new();
        flatten("", &serde_json::to_value(&self.spec)?, &mut flat);
        for (key, path) in PATH_KEYS.iter().zip([&self.dataset, &self.embeddings]) {
            if let Some(p) = path {
                flat.insert((*key).to_string(), Value::String(p.display().to_string()));
            }
        }
        Ok(Value::Object(flat))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(&self.to_flat()?)? + "\n";
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Apply a flat object on top of this config.
    pub fn apply_flat(&mut self, flat: &Value) -> Result<()> {
        let Value::Object(entries) = flat else {
            bail!("config must be a JSON object");
        };
        let mut nested = serde_json::to_value(&self.spec)?;
        for (key, value) in entries {
            if PATH_KEYS.contains(&key.as_str()) {
                let path = match value {
                    Value::String(s) => Some(PathBuf::from(s)),
                    Value::Null => None,
                    other => bail!("config key {key:?} must be a path string, got {other}"),
                };
                if key == "dataset" {
                    self.dataset = path;
                } else {
                    self.embeddings = path;
                }
                continue;
            }
            let targets: Vec<&str> = match ALIASES.iter().find(|(alias, _)| alias == key) {
                Some((_, dotted)) => dotted.to_vec(),
                None => vec![key.as_str()],
            };
            for dotted in targets {
                set_dotted(&mut nested, dotted, value.clone())?;
            }
        }
        self.spec = serde_json::from_value(nested).context("invalid config")?;
        Ok(())
    }

    /// Apply an object nested by section, as stored inside checkpoints.
    pub fn apply_nested(&mut self, nested: &Value) -> Result<()> {
        let mut flat = Map::new();
        flatten("", nested, &mut flat);
        self.apply_flat(&Value::Object(flat))
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let flat: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        self.apply_flat(&flat).with_context(|| format!("in config {}", path.display()))
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut Map<String, Value>) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), value.clone());
        }
    }
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!("config key {key:?} does not name a setting");
        };
        if i + 1 == parts.len() {
            if !map.contains_key(*part) {
                bail!("unknown config key {key:?}");
            }
            map.insert((*part).to_string(), value);
            return Ok(());
        }
        node = map.get_mut(*part).with_context(|| format!("unknown config key {key:?}"))?;
    }
    unreachable!("split always yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flat_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_flat(&json!({"model.layers": 3, "train.lr": 0.01, "dataset": "d.jsonl"})).unwrap();
        let flat = cfg.to_flat().unwrap();
        let mut back = RunConfig::default();
        back.apply_flat(&flat).unwrap();
        assert_eq!(back.spec, cfg.spec);
        assert_eq!(back.spec.model.layers, 3);
        assert_eq!(back.dataset, Some(PathBuf::from("d.jsonl")));
        assert_eq!(back.embeddings, None);
    }

    #[test]
    fn aliases_fan_out() {
        let mut cfg = RunConfig::default();
        cfg.apply_flat(&json!({"seed": 5, "neg-k": 3, "epochs": 7})).unwrap();
        assert_eq!(cfg.spec.model.seed, 5);
        assert_eq!(cfg.spec.train.seed, 5);
        assert_eq!(cfg.spec.train.negatives, 3);
        assert_eq!(cfg.spec.train.epochs, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_flat(&json!({"model.layerz": 3})).is_err());
        assert!(cfg.apply_flat(&json!({"nonsense": 1})).is_err());
        assert!(cfg.apply_flat(&json!({"model.layers.x": 1})).is_err());
    }
}
