use std::fs;
use std::path::{Path, PathBuf};

use altq_core::eval::EvalConfig;
use altq_core::qbot::QBotConfig;
use altq_core::training::TrainConfig;
use altq_core::world::{SplitFractions, WorldConfig};
use altq_service::ServiceConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_ENV: &str = "ALTQ_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub dialogs: usize,
    pub rounds: usize,
    pub fractions: SplitFractions,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            dialogs: 2000,
            rounds: 5,
            fractions: SplitFractions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub pool_size: usize,
    pub show_guesses: bool,
    pub compare_models: Vec<String>,
    /// Session store; relative paths live under the run directory.
    pub data_dir: PathBuf,
    pub static_dir: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            pool_size: 20,
            show_guesses: false,
            compare_models: Vec::new(),
            data_dir: PathBuf::from("service"),
            static_dir: None,
        }
    }
}

/// Config file plus flag overrides; echoed into every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds world generation, the corpus and model initialisation.
    pub seed: u64,
    pub out: PathBuf,
    pub world: WorldConfig,
    pub corpus: CorpusConfig,
    pub qbot: QBotConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1234,
            out: PathBuf::from("runs"),
            world: WorldConfig::default(),
            corpus: CorpusConfig::default(),
            qbot: QBotConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Flags win over the file. `--seed` sets every seed in the run.
    pub fn apply(&mut self, seed: Option<u64>, out: Option<PathBuf>) {
        if let Some(s) = seed {
            self.seed = s;
            self.train.seed = s;
            self.eval.seed = s;
        }
        if let Some(o) = out {
            self.out = o;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.world.validate()?;
        self.qbot.validate(self.world.feature_dim)?;
        self.train.validate()?;
        self.corpus.fractions.counts(self.corpus.dialogs)?;
        if self.eval.games == 0 || self.eval.win_games == 0 || self.eval.pool_size == 0 || self.eval.win_pool == 0 {
            return Err(CliError::Config("eval game and pool counts must be positive".into()));
        }
        if self.serve.pool_size == 0 {
            return Err(CliError::Config("serve.pool_size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Resolved config for artifacts. The run directory is left out so the
    /// same run in two places writes the same bytes.
    pub fn echo(&self, command: &str) -> serde_json::Value {
        let mut config = serde_json::to_value(self).expect("config serializes");
        config.as_object_mut().expect("config is a table").remove("out");
        serde_json::json!({ "command": command, "config": config })
    }

    pub fn service(&self) -> ServiceConfig {
        let rel = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { self.out.join(p) };
        ServiceConfig {
            pool_size: self.serve.pool_size,
            show_guesses: self.serve.show_guesses,
            compare_models: self.serve.compare_models.clone(),
            data_dir: rel(&self.serve.data_dir),
            static_dir: self.serve.static_dir.clone(),
        }
    }
}
