//! Experiment configuration: one strictly-validated JSON file per run.
//! Artifact names embed a hash of the effective config (after any
//! command-line seed override), so identical runs land on identical paths
//! and different experiments never collide.

use bctlab::datagen::SyntheticSpec;
use bctlab::gallery::Distance;
use bctlab::trainer::TrainRecipe;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed; the evaluation protocol falls back to it when its own
    /// section leaves `seed` unset.
    pub seed: u64,
    /// Dataset file (JSON lines, with its `.spec.json` sidecar next to it);
    /// consumed by every command except `gen`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub spec: Option<SyntheticSpec>,
    #[serde(default)]
    pub train: Option<TrainJob>,
    #[serde(default)]
    pub chain: Option<Vec<TrainRecipe>>,
    #[serde(default)]
    pub extract: Option<ExtractJob>,
    #[serde(default)]
    pub index: Option<IndexJob>,
    #[serde(default)]
    pub eval: Option<EvalJob>,
    #[serde(default)]
    pub compat: Option<CompatJob>,
    #[serde(default)]
    pub backfill_sweep: Option<BackfillJob>,
    /// Open-set split and operating points shared by the reporting commands.
    #[serde(default)]
    pub protocol: ProtocolSettings,
}

impl ExperimentConfig {
    /// Reads a config, applies the seed override, and returns it with the
    /// 12-hex-digit hash of its effective serialized form — the tag every
    /// artifact name embeds.
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<(ExperimentConfig, String)> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Config(format!("invalid config `{}`: {e}", path.display())))?;
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        let canonical = serde_json::to_vec(&cfg).expect("config reserializes");
        Ok((cfg, sha256_hex(&canonical)[..12].to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    pub recipe: TrainRecipe,
    /// Checkpoint stem of the frozen predecessor (the path its files were
    /// saved under, without `.json`/`.bin`); required by dependent modes.
    #[serde(default)]
    pub old_checkpoint_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractJob {
    /// Checkpoint stem to extract with.
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexJob {
    pub store: PathBuf,
    /// Feature version enrolled into the gallery (the refreshed one when
    /// sweeping a backfill).
    pub version: String,
    /// Older version left in place for the un-refreshed identities; requires
    /// `fraction`.
    #[serde(default)]
    pub old_version: Option<String>,
    /// Share of gallery identities re-extracted with `version`.
    #[serde(default)]
    pub fraction: Option<f64>,
    #[serde(default = "cosine")]
    pub distance: Distance,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Search,
    Verify,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalJob {
    pub mode: EvalMode,
    pub query_store: PathBuf,
    pub query_version: String,
    /// Enrolled side: gallery prototypes for search, reference features for
    /// verification.
    pub gallery_store: PathBuf,
    pub gallery_version: String,
    #[serde(default = "cosine")]
    pub distance: Distance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompatJob {
    pub old_store: PathBuf,
    pub old_version: String,
    pub new_store: PathBuf,
    pub new_version: String,
    /// Unconstrained retrain evaluated against its own gallery; enables the
    /// update-gain column.
    #[serde(default)]
    pub paragon_store: Option<PathBuf>,
    #[serde(default)]
    pub paragon_version: Option<String>,
    #[serde(default = "cosine")]
    pub distance: Distance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackfillJob {
    pub old_store: PathBuf,
    pub old_version: String,
    pub new_store: PathBuf,
    pub new_version: String,
    /// Number of sweep intervals; fractions are i/steps for i in 0..=steps.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "cosine")]
    pub distance: Distance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSettings {
    /// Share of open-set identities kept out of the gallery as unknowns.
    pub holdout_fraction: f64,
    pub far_target: f64,
    pub fpir_target: f64,
    pub genuine_pairs_per_class: usize,
    pub impostors_per_genuine: usize,
    /// Protocol-specific seed; falls back to the global one.
    pub seed: Option<u64>,
}

impl Default for ProtocolSettings {
    fn default() -> Self {
        ProtocolSettings {
            holdout_fraction: 0.25,
            far_target: 1e-2,
            fpir_target: 1e-1,
            genuine_pairs_per_class: 20,
            impostors_per_genuine: 1,
            seed: None,
        }
    }
}

fn cosine() -> Distance {
    Distance::Cosine
}

fn default_steps() -> usize {
    10
}

/// Unwraps the config section a command needs, naming it on failure.
pub fn section<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T> {
    section
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("config section `{name}` is required by this command")))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
