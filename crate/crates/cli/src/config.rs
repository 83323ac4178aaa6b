//! Run configuration: one JSON document with a section per module, merged
//! over defaults and then patched by `--set dotted.path=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mcd::analysis::MineConfig;
use mcd::encoder::EncoderConfig;
use mcd::env::EnvSpec;
use mcd::fusion::PredictorConfig;
use mcd::policy::{PolicyConfig, PolicyTrainConfig};
use mcd::trainer::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds demonstration generation and evaluation episodes.
    pub seed: u64,
    pub env: EnvSpec,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub cmcn: PredictorConfig,
    pub mhfp: PredictorConfig,
    pub train: TrainConfig,
    pub policy: PolicySection,
    pub analysis: AnalysisConfig,
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            env: EnvSpec::default(),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            cmcn: PredictorConfig::default(),
            mhfp: PredictorConfig::default(),
            train: TrainConfig::default(),
            policy: PolicySection::default(),
            analysis: AnalysisConfig::default(),
            io: IoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub demos: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { demos: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub model: PolicyConfig,
    pub train: PolicyTrainConfig,
    pub eval_episodes: usize,
    pub sweep: SweepConfig,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            model: PolicyConfig::default(),
            train: PolicyTrainConfig::default(),
            eval_episodes: 100,
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub layers: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            layers: vec![0, 1, 2],
            lambdas: vec![0.0, 0.001, 0.01, 0.1, 1.0],
            seeds: vec![0],
        }
    }
}

pub const DATASET_FILE: &str = "dataset.mcds";
pub const LABELS_FILE: &str = "labels.mccl";

pub const ANALYSES: [&str; 6] = ["similarity", "motion", "cmi", "diversity", "hierarchy", "gallery"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Subset of the analysis names to run.
    pub which: Vec<String>,
    pub mine: MineConfig,
    pub cmi_samples: usize,
    pub hierarchy_eps: Vec<f64>,
    pub hierarchy_demos: Vec<usize>,
    pub diversity_eps: Vec<f64>,
    /// Timesteps pooled for the diversity sweep (evenly strided).
    pub diversity_samples: usize,
    pub gallery_demo: usize,
    pub gallery_eps: Vec<f64>,
    pub gallery_positions: Vec<usize>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            which: ANALYSES.iter().map(|s| s.to_string()).collect(),
            mine: MineConfig::default(),
            cmi_samples: 4000,
            hierarchy_eps: (0..=10).map(|i| i as f64 / 10.0).collect(),
            hierarchy_demos: vec![0, 1, 2, 3],
            diversity_eps: (1..=10).map(|i| i as f64 / 10.0).collect(),
            diversity_samples: 2000,
            gallery_demo: 0,
            gallery_eps: vec![0.0, 0.1, 0.3, 0.6],
            gallery_positions: vec![1, 5, 10, 15],
        }
    }
}

/// Output root and optional input overrides. Unset inputs default to where
/// the producing command writes under `out_dir`; outputs always go there.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Defaults to `$MCDS_OUT_DIR`, then `runs`.
    pub out_dir: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub concepts: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub policy: Option<PathBuf>,
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            cmcn: self.cmcn.clone(),
            mhfp: self.mhfp.clone(),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.io
            .out_dir
            .clone()
            .or_else(|| std::env::var_os("MCDS_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.io.dataset.clone().unwrap_or_else(|| self.out_dir().join("data").join(DATASET_FILE))
    }

    pub fn concepts_path(&self) -> PathBuf {
        self.io
            .concepts
            .clone()
            .unwrap_or_else(|| self.out_dir().join("concepts").join(mcd::trainer::CHECKPOINT_FILE))
    }

    pub fn labels_path(&self) -> PathBuf {
        self.io.labels.clone().unwrap_or_else(|| self.out_dir().join("labels").join(LABELS_FILE))
    }

    pub fn policy_path(&self) -> PathBuf {
        self.io
            .policy
            .clone()
            .unwrap_or_else(|| self.out_dir().join("policy").join(mcd::policy::POLICY_CHECKPOINT_FILE))
    }

    /// Defaults, then the optional config file, then each `--set` override.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let user: Value =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut doc, &user, "")?;
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.policy.model.validate()?;
        self.policy.train.validate()?;
        if self.data.demos == 0 {
            bail!("data.demos must be at least 1");
        }
        for w in &self.analysis.which {
            if !ANALYSES.contains(&w.as_str()) {
                bail!("unknown analysis {w:?}; expected one of {}", ANALYSES.join(", "));
            }
        }
        Ok(())
    }
}

/// Recursively overlays `user` onto `base`, rejecting keys `base` lacks.
pub fn merge(base: &mut Value, user: &Value, path: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| anyhow!("unknown config key {p}"))?;
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &p)?;
                } else {
                    *slot = v.clone();
                }
            }
            Ok(())
        }
        (b, u) => {
            *b = u.clone();
            Ok(())
        }
    }
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not of the form key=value"))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = &mut *doc;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| anyhow!("unknown config key {key}"))?;
    }
    *slot = value;
    Ok(())
}
