//! Flat `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys are rejected. Lists are comma separated (`stage_factors = 4, 2, 2`).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::Precision;
use crate::model::{apply_preset, HierarchyPreset, ModelConfig};
use crate::training::{AdamWConfig, TrainOptions};

/// Synthetic data source settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub enabled: bool,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub difficulty: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            train_per_class: 50,
            test_per_class: 20,
            difficulty: 1.0,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainOptions,
    pub synth: SynthConfig,
    pub precision: Precision,
    /// Checkpoint to read in `eval`; defaults to `<out>/model.hafc`.
    pub checkpoint: Option<PathBuf>,
}

/// A config diagnostic with its line number.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigDiagnostic {
    pub line: usize,
    pub key: String,
    pub message: String,
}

impl std::fmt::Display for ConfigDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.line > 0 {
            write!(f, "line {}: ", self.line)?;
        }
        write!(f, "`{}`: {}", self.key, self.message)
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse::<T>()
        .map_err(|_| format!("cannot parse `{value}` for `{key}`"))
}

fn parse_list(key: &str, value: &str) -> std::result::Result<Vec<usize>, String> {
    value
        .split(',')
        .map(|v| parse_value::<usize>(key, v.trim()))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("cannot parse `{value}` for `{key}` as a boolean")),
    }
}

/// Splits text into `(line, key, value)` triples.
fn assignments(text: &str) -> std::result::Result<Vec<(usize, String, String)>, ConfigDiagnostic> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            return Err(ConfigDiagnostic {
                line,
                key: body.to_string(),
                message: "expected `key = value`".into(),
            });
        };
        let key = key.trim().to_string();
        if !seen.insert(key.clone()) {
            return Err(ConfigDiagnostic {
                line,
                key,
                message: "duplicate key".into(),
            });
        }
        out.push((line, key, value.trim().to_string()));
    }
    Ok(out)
}

/// Applies one model key. `Ok(false)` if the key is not a model key.
fn apply_model_key(cfg: &mut ModelConfig, key: &str, value: &str) -> std::result::Result<bool, String> {
    match key {
        "input_dim" => cfg.input_dim = parse_value(key, value)?,
        "seq_len" => cfg.seq_len = parse_value(key, value)?,
        "d_model" => cfg.d_model = parse_value(key, value)?,
        "proj_kernel" => cfg.proj_kernel = parse_value(key, value)?,
        "stage_factors" => cfg.stage_factors = parse_list(key, value)?,
        "stage_depths" => cfg.stage_depths = parse_list(key, value)?,
        "token_mixer" => cfg.token_mixer = value.parse().map_err(|e: Error| e.to_string())?,
        "channel_mixer" => cfg.channel_mixer = value.parse().map_err(|e: Error| e.to_string())?,
        "head_hidden" => cfg.head_hidden = parse_value(key, value)?,
        "num_classes" => cfg.num_classes = parse_value(key, value)?,
        "channel_residual" => cfg.channel_residual = parse_bool(key, value)?,
        "dw_kernel" => cfg.dw_kernel = parse_value(key, value)?,
        "seed" => cfg.seed = parse_value(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn apply_preset_key(
    cfg: &mut ModelConfig,
    preset: Option<(usize, String)>,
    explicit_stages: bool,
) -> std::result::Result<(), ConfigDiagnostic> {
    if let Some((line, value)) = preset {
        let diag = |message: String| ConfigDiagnostic {
            line,
            key: "preset".into(),
            message,
        };
        if explicit_stages {
            return Err(diag("cannot be combined with stage_factors/stage_depths".into()));
        }
        let p: HierarchyPreset = value.parse().map_err(|e: Error| diag(e.to_string()))?;
        *cfg = apply_preset(p, cfg).map_err(|e| diag(e.to_string()))?;
    }
    Ok(())
}

fn validation_diagnostic(e: Error) -> ConfigDiagnostic {
    match e {
        Error::Config { field, reason } => ConfigDiagnostic {
            line: 0,
            key: field,
            message: reason,
        },
        other => ConfigDiagnostic {
            line: 0,
            key: "config".into(),
            message: other.to_string(),
        },
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> std::result::Result<Self, ConfigDiagnostic> {
        let mut cfg = RunConfig::default();
        let mut preset = None;
        let mut explicit_stages = false;
        for (line, key, value) in assignments(text)? {
            let diag = |message: String| ConfigDiagnostic {
                line,
                key: key.clone(),
                message,
            };
            if key == "preset" {
                preset = Some((line, value));
                continue;
            }
            explicit_stages |= key == "stage_factors" || key == "stage_depths";
            if apply_model_key(&mut cfg.model, &key, &value).map_err(diag)? {
                continue;
            }
            let t = &mut cfg.train;
            let s = &mut cfg.synth;
            let r: std::result::Result<(), String> = (|| {
                match key.as_str() {
                    "epochs" => t.epochs = parse_value(&key, &value)?,
                    "batch_size" => t.batch_size = parse_value(&key, &value)?,
                    "lr" => t.adamw.lr = parse_value(&key, &value)?,
                    "weight_decay" => t.adamw.weight_decay = parse_value(&key, &value)?,
                    "beta1" => t.adamw.beta1 = parse_value(&key, &value)?,
                    "beta2" => t.adamw.beta2 = parse_value(&key, &value)?,
                    "adam_eps" => t.adamw.eps = parse_value(&key, &value)?,
                    "synthetic" => s.enabled = parse_bool(&key, &value)?,
                    "synth_train_per_class" => s.train_per_class = parse_value(&key, &value)?,
                    "synth_test_per_class" => s.test_per_class = parse_value(&key, &value)?,
                    "synth_difficulty" => s.difficulty = parse_value(&key, &value)?,
                    "synth_seed" => s.seed = parse_value(&key, &value)?,
                    "precision" => {
                        cfg.precision = match value.as_str() {
                            "f64" | "64" => Precision::F64,
                            "f32" | "32" => Precision::F32,
                            _ => return Err(format!("precision must be f64 or f32, got `{value}`")),
                        }
                    }
                    "checkpoint" => cfg.checkpoint = Some(PathBuf::from(&value)),
                    _ => return Err("unknown key".into()),
                }
                Ok(())
            })();
            r.map_err(diag)?;
        }
        apply_preset_key(&mut cfg.model, preset, explicit_stages)?;
        cfg.validate().map_err(validation_diagnostic)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let s = &self.synth;
        if s.enabled {
            if s.train_per_class == 0 {
                return Err(Error::config("synth_train_per_class", "must be at least 1"));
            }
            if !(s.difficulty > 0.0 && s.difficulty <= 1.0) {
                return Err(Error::config("synth_difficulty", "must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|d| {
            let at = if d.line > 0 { format!("line {}: ", d.line) } else { String::new() };
            Error::Config {
                field: d.key,
                reason: format!("{}: {at}{}", path.display(), d.message),
            }
        })
    }

    /// Default settings: MSDW + GEGLU, H3_1, paper-scale geometry.
    pub fn default_text() -> String {
        let mut s = model_config_to_text(&ModelConfig::default());
        let t = TrainOptions::default();
        let a = AdamWConfig::default();
        s.push_str(&format!(
            "epochs = {}\nbatch_size = {}\nlr = {}\nweight_decay = {}\n",
            t.epochs, t.batch_size, a.lr, a.weight_decay
        ));
        s
    }
}

/// Serializes every model field as `key = value` lines.
pub fn model_config_to_text(cfg: &ModelConfig) -> String {
    let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
    format!(
        "input_dim = {}\nseq_len = {}\nd_model = {}\nproj_kernel = {}\nstage_factors = {}\nstage_depths = {}\n\
         token_mixer = {}\nchannel_mixer = {}\nhead_hidden = {}\nnum_classes = {}\nchannel_residual = {}\n\
         dw_kernel = {}\nseed = {}\n",
        cfg.input_dim,
        cfg.seq_len,
        cfg.d_model,
        cfg.proj_kernel,
        list(&cfg.stage_factors),
        list(&cfg.stage_depths),
        cfg.token_mixer.key(),
        cfg.channel_mixer.key(),
        cfg.head_hidden,
        cfg.num_classes,
        cfg.channel_residual,
        cfg.dw_kernel,
        cfg.seed
    )
}

/// Inverse of [`model_config_to_text`]; only model keys are accepted.
pub fn model_config_from_text(text: &str) -> std::result::Result<ModelConfig, ConfigDiagnostic> {
    let mut cfg = ModelConfig::default();
    let mut preset = None;
    let mut explicit_stages = false;
    for (line, key, value) in assignments(text)? {
        if key == "preset" {
            preset = Some((line, value));
            continue;
        }
        explicit_stages |= key == "stage_factors" || key == "stage_depths";
        let handled = apply_model_key(&mut cfg, &key, &value).map_err(|message| ConfigDiagnostic {
            line,
            key: key.clone(),
            message,
        })?;
        if !handled {
            return Err(ConfigDiagnostic {
                line,
                key,
                message: "unknown key".into(),
            });
        }
    }
    apply_preset_key(&mut cfg, preset, explicit_stages)?;
    cfg.validate().map_err(validation_diagnostic)?;
    Ok(cfg)
}
