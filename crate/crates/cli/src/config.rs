use std::path::{Path, PathBuf};

use relage_core::evaluation::{default_age_bins, validate_bins, AgeBin};
use relage_core::ingest::SynthConfig;
use relage_core::model::Architecture;
use relage_core::relgraphs::DEFAULT_THRESHOLD;
use relage_core::sha256_hex;
use relage_core::training::TrainConfig;
use relage_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub beta: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub graphs: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub threshold: f64,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_mid: usize,
    pub dropout: f64,
    pub head_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = Architecture::new(1);
        ModelSection {
            d_mid: a.d_mid,
            dropout: a.dropout,
            head_hidden: a.head_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputeSection {
    pub k: usize,
}

impl Default for ImputeSection {
    fn default() -> Self {
        ImputeSection { k: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub ig_steps: usize,
    pub top_k: usize,
    /// Cap on explained test samples; all when absent.
    pub max_samples: Option<usize>,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection {
            ig_steps: relage_core::explain::DEFAULT_IG_STEPS,
            top_k: 20,
            max_samples: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub paths: Paths,
    pub graph: GraphSection,
    pub model: ModelSection,
    pub training: TrainConfig,
    pub impute: ImputeSection,
    pub synth: SynthConfig,
    pub explain: ExplainSection,
    pub age_bins: Vec<AgeBin>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            paths: Paths::default(),
            graph: GraphSection::default(),
            model: ModelSection::default(),
            training: TrainConfig::default(),
            impute: ImputeSection::default(),
            synth: SynthConfig::default(),
            explain: ExplainSection::default(),
            age_bins: default_age_bins(),
        }
    }
}

/// Sets `dotted.key` inside `root`, creating objects along the way. The value
/// is read as JSON when it parses, otherwise as a string.
fn set_key(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Invalid(format!("malformed key {key:?}")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Invalid(format!("{key}: {part} is not inside a section")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

impl Config {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                serde_json::from_str(&text).map_err(|e| Error::Parse {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("override {o:?} is not key=value")))?;
            set_key(&mut root, k.trim(), v.trim())?;
        }
        Ok(serde_json::from_value(root)?)
    }

    /// Twelve hex digits of the digest of the full resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(json.as_bytes())[..12].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        let base = self.paths.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
        base.join(format!("run-{}", self.hash()))
    }

    pub fn architecture(&self, n_nodes: usize) -> Result<Architecture> {
        let a = Architecture {
            d_mid: self.model.d_mid,
            dropout: self.model.dropout,
            head_hidden: self.model.head_hidden,
            seed: self.training.seed,
            ..Architecture::new(n_nodes)
        };
        a.validate()?;
        Ok(a)
    }

    pub fn check_graph(&self) -> Result<()> {
        let t = self.graph.threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Invalid(format!("graph.threshold {t} outside (0,1]")));
        }
        Ok(())
    }

    pub fn check_impute(&self) -> Result<()> {
        if self.impute.k == 0 {
            return Err(Error::Invalid("impute.k must be positive".into()));
        }
        Ok(())
    }

    pub fn check_explain(&self) -> Result<()> {
        if self.explain.ig_steps == 0 || self.explain.top_k == 0 {
            return Err(Error::Invalid("explain.ig_steps and explain.top_k must be positive".into()));
        }
        Ok(())
    }

    pub fn check_bins(&self) -> Result<()> {
        validate_bins(&self.age_bins)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let c = Config::load(None, &["training.lr=0.01".into(), "synth.disease_label=cancer".into()]).unwrap();
        assert_eq!(c.training.lr, 0.01);
        assert_eq!(c.synth.disease_label, "cancer");
        assert_eq!(c.graph.threshold, 0.8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::load(None, &["training.learning_rate=1".into()]).is_err());
        assert!(Config::load(None, &["nonsense=1".into()]).is_err());
        assert!(Config::load(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn hash_follows_content() {
        let a = Config::default();
        let b = Config::load(None, &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = Config::load(None, &["training.seed=9".into()]).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 12);
    }
}
