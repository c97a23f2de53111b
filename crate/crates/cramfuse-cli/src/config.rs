//! Experiment configuration: a JSON file deep-merged over defaults, then
//! dotted-path `--set key=value` overrides applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use cramfuse::config::PipelineConfig;
use cramfuse::error::{CramError, Result};
use cramfuse::fusion::DropoutLocation;
use cramfuse::learner::TrainConfig;
use cramfuse::pipeline::{default_train_config, Mode, RunOptions, TrainOptions};
use cramfuse::scene::SceneConfig;

/// Environment variable consulted when the config carries no seed.
pub const SEED_ENV: &str = "CRAMFUSE_SEED";

/// Everything a command needs: model variant switches, file locations, and
/// the nested pipeline / scene / training settings.
///
/// JSON schema: every field below, in snake_case; omitted fields take the
/// defaults shown by `cramfuse print-config`. `--set a.b=v` overrides any
/// key by dotted path; values parse as JSON first, falling back to strings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// fusion | camera_only | radar_only.
    pub mode: Mode,
    /// Ray-constrained attention on camera points at inference.
    pub attention: bool,
    /// Append per-point modality codes before voxelization.
    pub use_modality_code: bool,
    /// Sensor dropout during training: normal | input | point_cloud |
    /// point_feature, or null to train without dropout.
    pub dropout: Option<DropoutLocation>,
    /// Zero radar cells at or below this intensity before stage 1.
    pub rf_threshold: Option<f64>,
    /// Gaussian noise added to camera images at evaluation time.
    pub camera_sigma: f64,
    /// Dataset directory for evaluation commands (and `synth` output).
    pub dataset: PathBuf,
    /// Separate training dataset for commands that (re)train models.
    pub train_dataset: Option<PathBuf>,
    /// Trained model file (written by `train`, read by the run commands).
    pub model: Option<PathBuf>,
    /// Dropout-trained model file for the paired robustness commands.
    pub model_dropout: Option<PathBuf>,
    /// Root seed; falls back to $CRAMFUSE_SEED, then 0.
    pub seed: Option<u64>,
    /// Output directory for detections, tables, plots, and models.
    pub out_dir: PathBuf,
    /// Frames generated by `synth`.
    pub frames: usize,
    pub pipeline: PipelineConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub train_options: TrainOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Fusion,
            attention: true,
            use_modality_code: true,
            dropout: None,
            rf_threshold: None,
            camera_sigma: 0.0,
            dataset: PathBuf::from("dataset"),
            train_dataset: None,
            model: None,
            model_dropout: None,
            seed: None,
            out_dir: PathBuf::from("out"),
            frames: 50,
            pipeline: PipelineConfig::default(),
            scene: SceneConfig::default(),
            train: default_train_config(0),
            train_options: TrainOptions::default(),
        }
    }
}

impl ExperimentConfig {
    /// Root seed with the documented fallback chain: config value, then
    /// $CRAMFUSE_SEED, then 0.
    pub fn root_seed(&self) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .parse::<u64>()
                .map_err(|_| CramError::Config(format!("{SEED_ENV}='{v}' is not a u64"))),
            Err(_) => Ok(0),
        }
    }

    /// Inference switches implied by the variant fields.
    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            mode: self.mode,
            attention: self.attention,
            use_modality_code: self.use_modality_code,
            rf_threshold: self.rf_threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.scene.validate()?;
        if self.camera_sigma < 0.0 {
            return Err(CramError::Config("camera_sigma must be >= 0".into()));
        }
        if let Some(t) = self.rf_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(CramError::Config(format!("rf_threshold must be in [0,1], got {t}")));
            }
        }
        Ok(())
    }
}

/// Deep-merge `patch` over `base`: objects merge key-wise, everything else
/// is replaced by the patch value.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Set a dotted path inside a JSON tree, creating objects along the way.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CramError::Config(format!("empty path segment in '{path}'")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CramError::Config(format!("'{path}' descends into a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("parts is non-empty")
}

/// Parse one `key=value` override. The value is parsed as JSON when
/// possible (numbers, booleans, null, quoted strings, arrays) and treated
/// as a bare string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CramError::Config(format!("--set needs key=value, got '{s}'")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Load the experiment config: defaults, then the optional JSON file, then
/// the `--set` overrides, validated at the end.
pub fn load_config(file: Option<&Path>, sets: &[String]) -> Result<ExperimentConfig> {
    let mut tree = serde_json::to_value(ExperimentConfig::default())
        .map_err(|e| CramError::Config(format!("default config serialization: {e}")))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)?;
        let user: Value = serde_json::from_str(&text).map_err(|e| CramError::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        merge(&mut tree, user);
    }
    for s in sets {
        let (key, value) = parse_override(s)?;
        set_path(&mut tree, &key, value)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(tree)
        .map_err(|e| CramError::Config(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}
