//! Run configuration: TOML sections resolved against defaults and CLI flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synthetic::SyntheticConfig;
use crate::trainer::{default_beta_eta, LossMode, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Files,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingFormat {
    #[default]
    Table,
    RawF32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub interactions: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub embeddings_format: EmbeddingFormat,
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub levels: usize,
    pub codebook_size: usize,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { levels: 4, codebook_size: 32, seed: 0, max_iters: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub min_count: usize,
    pub max_history: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { min_count: 5, max_history: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { dim: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub beam: usize,
    pub audit_k_global: usize,
    pub audit_k_beam: usize,
    /// audit at most this many test users
    pub audit_limit: Option<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { beam: 20, audit_k_global: 20, audit_k_beam: 20, audit_limit: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub cutoffs: Vec<usize>,
    pub sweep_k: Vec<usize>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { cutoffs: vec![10, 20], sweep_k: vec![5, 10, 20, 50, 100] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub betas: Vec<f64>,
    pub etas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { betas: vec![0.05, 0.1, 0.2, 0.3, 0.4], etas: vec![5e-6, 1e-5, 5e-5, 1e-4, 5e-4] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Tokenize,
    Split,
    Train,
    Evaluate,
    Audit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub root: PathBuf,
    pub stages: Vec<StageName>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            root: PathBuf::from("runs"),
            stages: vec![StageName::Tokenize, StageName::Split, StageName::Train, StageName::Evaluate, StageName::Audit],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    /// `trainer.dim` mirrors `model.dim` and is not read from files
    pub trainer: TrainConfig,
    pub decoder: DecoderConfig,
    pub evaluation: EvaluationConfig,
    pub sweep: SweepConfig,
    pub run: RunSection,
}

/// Command-line values applied over the file before defaults are filled in.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<LossMode>,
    pub seed: Option<u64>,
    pub beta: Option<f64>,
    pub eta: Option<f64>,
}

fn section<'a>(root: &'a mut toml::Table, name: &str) -> Result<&'a mut toml::Table> {
    root.entry(name)
        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("{name}: expected a table")))
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::resolve(toml::Table::new(), &Overrides::default()).expect("defaults resolve")
    }
}

impl RunConfig {
    /// Defaults, then `table`, then `ov`. Unset `trainer.beta`/`trainer.eta`
    /// take the per-mode defaults of the resolved mode.
    pub fn resolve(mut table: toml::Table, ov: &Overrides) -> Result<Self> {
        let dim = {
            let model = section(&mut table, "model")?;
            model.get("dim").cloned()
        };
        let trainer = section(&mut table, "trainer")?;
        if trainer.contains_key("dim") {
            return Err(Error::Config("trainer.dim: set model.dim instead".into()));
        }
        if let Some(mode) = ov.mode {
            trainer.insert("mode".into(), toml::Value::try_from(mode).expect("mode serializes"));
        }
        if let Some(seed) = ov.seed {
            let seed = i64::try_from(seed).map_err(|_| Error::Config("trainer.seed: exceeds i64".into()))?;
            trainer.insert("seed".into(), seed.into());
        }
        if let Some(b) = ov.beta {
            trainer.insert("beta".into(), b.into());
        }
        if let Some(e) = ov.eta {
            trainer.insert("eta".into(), e.into());
        }
        let mode: LossMode = match trainer.get("mode") {
            Some(v) => v.clone().try_into().map_err(|e| Error::Config(format!("trainer.mode: {e}")))?,
            None => LossMode::default(),
        };
        let (beta, eta) = default_beta_eta(mode);
        trainer.entry("beta").or_insert(beta.into());
        trainer.entry("eta").or_insert(eta.into());
        if let Some(d) = dim {
            trainer.insert("dim".into(), d);
        }
        for name in ["data", "tokenizer", "dataset", "decoder", "evaluation", "sweep", "run"] {
            section(&mut table, name)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str, ov: &Overrides) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::resolve(table, ov)
    }

    /// Relative data paths are taken relative to the config file.
    pub fn load(path: &Path, ov: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text, ov).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.interactions, &mut cfg.data.embeddings].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("{field}: {msg}")));
        if self.model.dim != self.trainer.dim {
            return bad("model.dim", "disagrees with trainer.dim");
        }
        self.trainer.validate()?;
        if self.tokenizer.levels == 0 {
            return bad("tokenizer.levels", "must be >= 1");
        }
        if self.tokenizer.codebook_size < 2 {
            return bad("tokenizer.codebook_size", "must be >= 2");
        }
        if self.tokenizer.max_iters == 0 {
            return bad("tokenizer.max_iters", "must be >= 1");
        }
        if self.dataset.max_history == 0 {
            return bad("dataset.max_history", "must be >= 1");
        }
        if self.model.dim == 0 {
            return bad("model.dim", "must be >= 1");
        }
        for (f, v) in [
            ("decoder.beam", self.decoder.beam),
            ("decoder.audit_k_global", self.decoder.audit_k_global),
            ("decoder.audit_k_beam", self.decoder.audit_k_beam),
        ] {
            if v == 0 {
                return bad(f, "must be >= 1");
            }
        }
        if self.evaluation.cutoffs.is_empty() || self.evaluation.cutoffs.contains(&0) {
            return bad("evaluation.cutoffs", "need at least one cutoff, all >= 1");
        }
        if self.evaluation.sweep_k.contains(&0) {
            return bad("evaluation.sweep_k", "beam sizes must be >= 1");
        }
        if self.sweep.betas.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            return bad("sweep.betas", "must be finite and >= 0");
        }
        if self.sweep.etas.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return bad("sweep.etas", "must be finite and >= 0");
        }
        match self.data.source {
            DataSource::Synthetic => self.data.synthetic.validate()?,
            DataSource::Files => {
                if self.data.interactions.is_none() {
                    return bad("data.interactions", "required when data.source = \"files\"");
                }
                if self.data.embeddings.is_none() {
                    return bad("data.embeddings", "required when data.source = \"files\"");
                }
            }
        }
        Ok(())
    }

    /// TOML form of the resolved configuration; parses back to an equal value.
    pub fn to_toml_string(&self) -> String {
        let mut v = toml::Table::try_from(self).expect("config serializes");
        if let Some(t) = v.get_mut("trainer").and_then(toml::Value::as_table_mut) {
            t.remove("dim");
        }
        toml::to_string(&v).expect("table serializes")
    }

    /// sha256 of the canonical JSON form, keys sorted.
    pub fn digest_bytes(&self) -> [u8; 32] {
        let v = serde_json::to_value(self).expect("config serializes");
        Sha256::digest(v.to_string().as_bytes()).into()
    }

    pub fn digest(&self) -> String {
        hex::encode(self.digest_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfig> {
        RunConfig::from_toml_str(s, &Overrides::default())
    }

    #[test]
    fn defaults_match_reference_values() {
        let c = RunConfig::default();
        assert_eq!(c.trainer.mode, LossMode::Ce);
        assert_eq!(c.decoder.beam, 20);
        assert_eq!(c.trainer.negatives, 100);
        assert_eq!(c.dataset.max_history, 20);
        assert_eq!(c.trainer.dim, 32);
    }

    #[test]
    fn per_mode_beta_eta_fill_unset_fields() {
        let c = parse("[trainer]\nmode = \"apao_pointwise\"\n").unwrap();
        assert_eq!((c.trainer.beta, c.trainer.eta), (0.3, 1e-4));
        let c = parse("[trainer]\nmode = \"apao_pairwise\"\nbeta = 0.05\n").unwrap();
        assert_eq!((c.trainer.beta, c.trainer.eta), (0.05, 3e-5));
        let ov = Overrides { mode: Some(LossMode::ApaoPairwise), seed: Some(9), ..Default::default() };
        let c = RunConfig::from_toml_str("", &ov).unwrap();
        assert_eq!((c.trainer.beta, c.trainer.eta, c.trainer.seed), (0.2, 3e-5, 9));
    }

    #[test]
    fn negative_beta_names_the_field() {
        let err = parse("[trainer]\nmode = \"apao_pointwise\"\nbeta = -0.1\n").unwrap_err();
        assert!(err.to_string().contains("trainer.beta"), "{err}");
        let err = parse("[tokenizer]\ncodebook_size = 1\n").unwrap_err();
        assert!(err.to_string().contains("tokenizer.codebook_size"), "{err}");
        let err = parse("[data]\nsource = \"files\"\n").unwrap_err();
        assert!(err.to_string().contains("data.interactions"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse("[trainer]\nbogus = 1\n").is_err());
        assert!(parse("[nope]\n").is_err());
        assert!(parse("[trainer]\ndim = 8\n").is_err());
    }

    #[test]
    fn dim_comes_from_model_section() {
        let c = parse("[model]\ndim = 8\n").unwrap();
        assert_eq!(c.trainer.dim, 8);
    }

    #[test]
    fn round_trip_is_digest_equal() {
        let c = parse(
            "[trainer]\nmode = \"apao_pairwise\"\nvalid_limit = 50\n[model]\ndim = 16\n[data.synthetic]\nnum_items = 200\n",
        )
        .unwrap();
        let text = c.to_toml_string();
        let back = parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
    }

    #[test]
    fn digest_ignores_key_order() {
        let a = parse("[trainer]\nlr = 0.001\nepochs = 3\n[decoder]\nbeam = 5\n").unwrap();
        let b = parse("[decoder]\nbeam = 5\n[trainer]\nepochs = 3\nlr = 0.001\n").unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = parse("[trainer]\nlr = 0.001\nepochs = 4\n[decoder]\nbeam = 5\n").unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[data]\nsource = \"files\"\ninteractions = \"i.tsv\"\nembeddings = \"e.tsv\"\n").unwrap();
        let c = RunConfig::load(&path, &Overrides::default()).unwrap();
        assert_eq!(c.data.interactions.unwrap(), dir.path().join("i.tsv"));
    }
}
