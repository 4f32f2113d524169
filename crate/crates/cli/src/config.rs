//! Run configuration: paper-valued defaults, optional JSON config file,
//! CLI-flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use raggate_core::embedding::LossKind;
use raggate_core::error::{Error, Result};
use raggate_core::gate::GateMode;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Paths; `None` falls back to the bundled fixtures or `<out>/` artifacts.
    pub corpus: Option<PathBuf>,
    pub sessions: Option<PathBuf>,
    pub test_sessions: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub head: Option<PathBuf>,
    pub policy: Option<PathBuf>,
    pub out: PathBuf,

    // Pipeline constants (paper values).
    pub tau: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub threshold: f64,
    pub k: usize,
    pub mc_passes: usize,
    pub seed: u64,
    pub mode: GateMode,

    // Embedding training.
    pub dimension: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub margin: f64,
    pub per_faq: usize,
    pub eval_per_faq: usize,

    // Policy training.
    pub rounds: usize,
    pub samples: usize,
    pub policy_epochs: usize,
    pub policy_learning_rate: f64,
    pub policy_batch_size: usize,
    pub dropout_rate: f64,
    pub augment_shuffles: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            sessions: None,
            test_sessions: None,
            embeddings: None,
            head: None,
            policy: None,
            out: PathBuf::from("out"),
            tau: 0.1,
            batch_size: 8,
            gamma: 0.1,
            lambda: 0.1,
            threshold: 0.92,
            k: 3,
            mc_passes: 10,
            seed: 17,
            mode: GateMode::SimThrPolicy,
            dimension: 256,
            epochs: 600,
            learning_rate: 0.2,
            loss: LossKind::Infonce,
            margin: 0.2,
            per_faq: 12,
            eval_per_faq: 4,
            rounds: 3,
            samples: 3,
            policy_epochs: 60,
            policy_learning_rate: 0.2,
            policy_batch_size: 32,
            dropout_rate: 0.1,
            augment_shuffles: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Validation(format!("config: {what}")))
            }
        };
        check(self.tau > 0.0, "tau must be positive")?;
        check(self.batch_size >= 2, "batch_size must be at least 2")?;
        check((0.0..=1.0).contains(&self.gamma), "gamma must be in [0, 1]")?;
        check(self.lambda >= 0.0, "lambda must be non-negative")?;
        check(
            self.threshold > 0.0 && self.threshold <= 1.0,
            "threshold must be in (0, 1]",
        )?;
        check(self.k >= 1, "k must be at least 1")?;
        check(self.mc_passes >= 1, "mc_passes must be at least 1")?;
        check(self.dimension >= 8, "dimension must be at least 8")?;
        check(self.per_faq >= 1, "per_faq must be at least 1")?;
        check(self.eval_per_faq >= 1, "eval_per_faq must be at least 1")?;
        check(self.rounds >= 1, "rounds must be at least 1")?;
        check(self.samples >= 1, "samples must be at least 1")?;
        check(
            (0.0..1.0).contains(&self.dropout_rate),
            "dropout_rate must be in [0, 1)",
        )?;
        for path in [
            &self.corpus,
            &self.sessions,
            &self.test_sessions,
            &self.embeddings,
        ]
        .into_iter()
        .flatten()
        {
            check(
                path.exists(),
                &format!("path does not exist: {}", path.display()),
            )?;
        }
        Ok(())
    }

    pub fn head_path(&self) -> PathBuf {
        self.head
            .clone()
            .unwrap_or_else(|| self.out.join("head.json"))
    }

    pub fn policy_path(&self) -> PathBuf {
        self.policy
            .clone()
            .unwrap_or_else(|| self.out.join("policy.json"))
    }
}
