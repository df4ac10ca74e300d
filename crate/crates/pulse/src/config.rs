//! One strict JSON config drives every stage. Unknown keys are rejected so
//! a typo cannot silently fall back to a default, and the whole config is
//! hashable for experiment fingerprints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::synth::SynthSpec;
use crate::error::{PulseError, Result};
use crate::hashing::sha256_hex;
use crate::rationale::DEFAULT_IN_FLIGHT;
use crate::sft::{SelectionMethod, SftConfig};
use crate::thought::ThoughtSpaceConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub artifacts_dir: PathBuf,
    pub data: DataSection,
    pub backbone: BackboneConfig,
    pub rationale: RationaleSection,
    pub thought_space: ThoughtSpaceConfig,
    pub sft: SftSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            artifacts_dir: PathBuf::from("artifacts"),
            data: DataSection::default(),
            backbone: BackboneConfig::default(),
            rationale: RationaleSection::default(),
            thought_space: ThoughtSpaceConfig::default(),
            sft: SftSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Either a synthetic corpus (the default) or a JSONL interactions file with
/// inline item metadata; `catalog` optionally overrides item entries.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub synth: SynthSpec,
    pub interactions: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RationaleSection {
    pub backend: BackendKind,
    /// Generation endpoint, used only when `backend` is `http`.
    pub base_url: String,
    pub drift_base: f64,
    pub drift_refine: f64,
    pub tot_n: usize,
    pub tot_m: usize,
    /// How many similar users feed the second-phase prompt.
    pub k_similar: usize,
    pub in_flight: usize,
    /// Whether second-phase prompts list the candidate titles.
    pub include_candidates: bool,
}

impl Default for RationaleSection {
    fn default() -> Self {
        RationaleSection {
            backend: BackendKind::Mock,
            base_url: String::new(),
            drift_base: 0.25,
            drift_refine: 0.5,
            tot_n: 3,
            tot_m: 3,
            k_similar: 5,
            in_flight: DEFAULT_IN_FLIGHT,
            include_candidates: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftSection {
    pub selection: SelectionMethod,
    pub scorer: SftConfig,
}

impl Default for SftSection {
    fn default() -> Self {
        SftSection {
            selection: SelectionMethod::TotThoughtSpace,
            scorer: SftConfig::default(),
        }
    }
}

/// Which embedding space scores rationale agreement and feeds the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringSpace {
    /// The contrastively trained space.
    ThoughtSpace,
    /// Randomly initialized, never trained: the offline stand-in for an
    /// off-the-shelf encoder.
    FrozenGeneric,
    /// Frozen encoders whose token tables are loaded from a vector file.
    ExternalVectors,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub experiment: String,
    /// Dataset label for reports; derived from the synth spec when empty.
    pub dataset: String,
    pub scoring_space: ScoringSpace,
    /// Checkpoint with an "embedding" table, required by `external_vectors`.
    pub external_vectors: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            experiment: "main".into(),
            dataset: String::new(),
            scoring_space: ScoringSpace::ThoughtSpace,
            external_vectors: None,
        }
    }
}

impl RunConfig {
    /// Shallow cross-section checks; each stage still validates its own
    /// hyperparameters on entry.
    pub fn validate(&self) -> Result<()> {
        if self.rationale.tot_n == 0 || self.rationale.tot_m == 0 {
            return Err(PulseError::Config("tot_n and tot_m must be positive".into()));
        }
        if self.rationale.in_flight == 0 {
            return Err(PulseError::Config("in_flight must be positive".into()));
        }
        if self.rationale.backend == BackendKind::Http && self.rationale.base_url.is_empty() {
            return Err(PulseError::Config(
                "http backend requires rationale.base_url".into(),
            ));
        }
        if self.eval.scoring_space == ScoringSpace::ExternalVectors
            && self.eval.external_vectors.is_none()
        {
            return Err(PulseError::Config(
                "external_vectors scoring space requires eval.external_vectors".into(),
            ));
        }
        if self.data.interactions.is_none() && self.data.catalog.is_some() {
            return Err(PulseError::Config(
                "data.catalog without data.interactions has no effect".into(),
            ));
        }
        if self.backbone.embed_dim != self.thought_space.encoder.embed_dim {
            return Err(PulseError::Config(format!(
                "backbone embed_dim {} != encoder embed_dim {}",
                self.backbone.embed_dim, self.thought_space.encoder.embed_dim
            )));
        }
        Ok(())
    }

    /// Dataset label for reports.
    pub fn dataset_id(&self) -> String {
        if !self.eval.dataset.is_empty() {
            return self.eval.dataset.clone();
        }
        if self.data.interactions.is_some() {
            return "external".into();
        }
        let s = &self.data.synth;
        format!(
            "synthetic-u{}-i{}-eps{}-s{}",
            s.n_users, s.n_items, s.noise, s.seed
        )
    }

    /// Hash of the whole config (which includes every seed): two runs with
    /// equal fingerprints must produce identical artifacts.
    pub fn fingerprint(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)
            .map_err(|e| PulseError::Config(format!("config not serializable: {e}")))?;
        Ok(sha256_hex(&bytes))
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| PulseError::io(path, e))?;
    let config: RunConfig = serde_json::from_str(&text).map_err(|e| PulseError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn save_config(path: &Path, config: &RunConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(config)
        .map_err(|e| PulseError::Config(format!("config not serializable: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| PulseError::io(path, e))
}

/// Every config key with its JSON type and default, one line each, for the
/// `config-schema` subcommand.
pub fn schema_lines() -> Result<Vec<String>> {
    let value = serde_json::to_value(RunConfig::default())
        .map_err(|e| PulseError::Config(format!("config not serializable: {e}")))?;
    let mut lines = Vec::new();
    walk_schema("", &value, &mut lines);
    Ok(lines)
}

fn walk_schema(prefix: &str, value: &serde_json::Value, lines: &mut Vec<String>) {
    use serde_json::Value::*;
    match value {
        Object(map) => {
            for (key, child) in map {
                let path = if prefix.is_empty() {
                    key.clone()
                } else {
                    format!("{prefix}.{key}")
                };
                walk_schema(&path, child, lines);
            }
        }
        Null => lines.push(format!("{prefix}: optional = null")),
        Bool(b) => lines.push(format!("{prefix}: bool = {b}")),
        Number(n) => lines.push(format!("{prefix}: number = {n}")),
        String(s) => lines.push(format!("{prefix}: string = {s:?}")),
        Array(items) => lines.push(format!(
            "{prefix}: array = {}",
            serde_json::Value::Array(items.clone())
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_fingerprint_is_stable() {
        let config = RunConfig::default();
        config.validate().unwrap();
        let json = serde_json::to_string(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
        assert_eq!(config.fingerprint().unwrap(), back.fingerprint().unwrap());
        assert_ne!(
            config.fingerprint().unwrap(),
            {
                let mut other = config.clone();
                other.seed = 1;
                other.fingerprint().unwrap()
            },
            "seed must move the fingerprint"
        );
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        let top: std::result::Result<RunConfig, _> =
            serde_json::from_str(r#"{"sede": 3}"#);
        assert!(top.is_err());
        let nested: std::result::Result<RunConfig, _> =
            serde_json::from_str(r#"{"backbone": {"embed_dims": 64}}"#);
        assert!(nested.is_err());
        let partial: RunConfig =
            serde_json::from_str(r#"{"backbone": {"embed_dim": 32}, "thought_space": {"encoder": {"embed_dim": 32}}}"#)
                .unwrap();
        assert_eq!(partial.backbone.embed_dim, 32);
        assert_eq!(partial.backbone.n_layers, 2);
    }

    #[test]
    fn validate_catches_cross_section_mistakes() {
        let mut config = RunConfig::default();
        config.rationale.backend = BackendKind::Http;
        assert!(matches!(config.validate(), Err(PulseError::Config(_))));
        config = RunConfig::default();
        config.eval.scoring_space = ScoringSpace::ExternalVectors;
        assert!(config.validate().is_err());
        config = RunConfig::default();
        config.backbone.embed_dim = 32;
        assert!(config.validate().is_err());
    }

    #[test]
    fn load_reports_missing_file_and_bad_json() {
        let missing = load_config(Path::new("/nonexistent/config.json"));
        assert!(matches!(missing, Err(PulseError::Io { .. })));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_config(&path), Err(PulseError::Format { .. })));
        let config = RunConfig::default();
        save_config(&path, &config).unwrap();
        let loaded = load_config(&path).unwrap();
        assert_eq!(loaded.fingerprint().unwrap(), config.fingerprint().unwrap());
    }

    #[test]
    fn schema_covers_every_leaf_with_defaults() {
        let lines = schema_lines().unwrap();
        assert!(lines.iter().any(|l| l == "seed: number = 0"));
        assert!(lines.iter().any(|l| l == "backbone.embed_dim: number = 64"));
        assert!(lines.iter().any(|l| l.starts_with("sft.selection: string")));
        assert!(lines.iter().any(|l| l == "data.interactions: optional = null"));
        let value = serde_json::to_value(RunConfig::default()).unwrap();
        fn count_leaves(v: &serde_json::Value) -> usize {
            match v {
                serde_json::Value::Object(m) => m.values().map(count_leaves).sum(),
                _ => 1,
            }
        }
        assert_eq!(lines.len(), count_leaves(&value));
    }

    #[test]
    fn dataset_id_reflects_the_source() {
        let mut config = RunConfig::default();
        assert_eq!(config.dataset_id(), "synthetic-u100-i200-eps0.1-s0");
        config.eval.dataset = "beauty".into();
        assert_eq!(config.dataset_id(), "beauty");
    }
}
