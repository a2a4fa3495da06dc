//! Run configuration files and the run directories named after them.

use std::fs;
use std::path::{Path, PathBuf};

use dape_core::DapeConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{hex, Corpus, CorpusParams};
use crate::error::{HarnessError, Result};
use crate::scene::DensityMix;

pub const RUN_DIR_ENV: &str = "DAPE_RUN_DIR";
pub const DEFAULT_RUN_ROOT: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    /// Metrics are written at step 0, every `eval_every` steps and at the end.
    pub eval_every: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec { steps: 200, eval_every: 50 }
    }
}

/// Either an existing corpus directory or parameters to generate one inside the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// Relative paths resolve against the config file's directory.
    pub path: Option<PathBuf>,
    pub n: usize,
    pub seed: u64,
    pub density_mix: DensityMix,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { path: None, n: 64, seed: 0, density_mix: DensityMix::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    /// Fractions of dense rows to force at each level.
    pub densities: Vec<f64>,
    /// Scenes to evaluate; `None` uses the whole corpus.
    pub scenes: Option<usize>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec { densities: vec![0.0, 0.25, 0.5, 0.75, 1.0], scenes: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: DapeConfig,
    pub train: TrainSpec,
    pub corpus: CorpusSpec,
    pub bench: BenchSpec,
    /// Directory of the file the config came from; not part of the hash.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| HarnessError::Usage(format!("{}: {e}", origin.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg = Self::parse(&text, path)?;
        cfg.base_dir = Some(path.parent().unwrap_or(Path::new(".")).to_path_buf());
        Ok(cfg)
    }

    /// The corpus path with a relative one rebased onto the config file's directory.
    pub fn corpus_path(&self) -> Option<PathBuf> {
        let p = self.corpus.path.as_ref()?;
        Some(match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.eval_every == 0 {
            return Err(HarnessError::Usage("train.eval_every must be positive".into()));
        }
        if self.bench.densities.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(HarnessError::Usage(format!("bench densities {:?} must lie in [0, 1]", self.bench.densities)));
        }
        if self.corpus.path.is_none() {
            self.corpus_params().validate()?;
        }
        Ok(())
    }

    pub fn corpus_params(&self) -> CorpusParams {
        let c = &self.corpus;
        CorpusParams::for_model(c.n, c.seed, c.density_mix, &self.model)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Short form used as run id and directory name.
    pub fn run_id(&self) -> String {
        self.hash()[..16].to_string()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// The configured corpus, generated into `run_dir/corpus` when no path is given.
    pub fn materialize_corpus(&self, run_dir: &Path) -> Result<Corpus> {
        let corpus = match self.corpus_path() {
            Some(p) => Corpus::load(&p)?,
            None => {
                let c = crate::corpus::generate(&self.corpus_params())?;
                c.save(&run_dir.join("corpus"))?;
                c
            }
        };
        corpus.check_model(&self.model)?;
        Ok(corpus)
    }
}

/// Output root: `$DAPE_RUN_DIR` when set, else `./runs`.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let p = Path::new("x.json");
        assert!(RunConfig::parse(r#"{"model": {"d": 48}}"#, p).is_ok());
        assert!(matches!(RunConfig::parse(r#"{"model": {"dd": 48}}"#, p), Err(HarnessError::Usage(_))));
        assert!(RunConfig::parse(r#"{"trian": {}}"#, p).is_err());
        assert!(RunConfig::parse(r#"{"train": {"eval_every": 0}}"#, p).is_err());
        assert!(RunConfig::parse(r#"{"model": {"k0": 1.5}}"#, p).is_err());
    }

    #[test]
    fn every_model_field_is_addressable() {
        let full = serde_json::to_value(DapeConfig::default()).unwrap();
        let text = serde_json::json!({ "model": full }).to_string();
        let cfg = RunConfig::parse(&text, Path::new("x.json")).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_eq!(a.hash().len(), 64);
        let mut b = a.clone();
        b.model.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let reparsed = RunConfig::parse(&a.to_json(), Path::new("x.json")).unwrap();
        assert_eq!(reparsed.hash(), a.hash());
    }

    #[test]
    fn relative_corpus_path_follows_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(&p, r#"{"corpus": {"path": "data"}}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.corpus_path().unwrap(), dir.path().join("data"));
        assert_eq!(cfg.hash(), RunConfig { base_dir: None, ..cfg.clone() }.hash());
        assert!(matches!(RunConfig::load(&dir.path().join("none.json")), Err(HarnessError::Io { .. })));
    }
}
