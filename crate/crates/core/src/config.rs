//! Line-oriented `key = value` run configuration.
//!
//! ```text
//! # comment
//! run.seed = 3
//! model.kind = conv_image
//! train.adapt_lr = 0.0002
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::data::{ShiftKind, ShiftSpec};
use crate::networks::{ArchitecturePreset, FeatureHandoff};
use crate::pipeline::TrainConfig;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{path}: cannot read config: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: {key}: {message}")]
    Field { line: usize, key: String, message: String },
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Task {
    TwoMoons { noise_sigma: f64 },
    Glyphs { image_size: usize, channels: usize },
    Idx {
        source_images: PathBuf,
        source_labels: PathBuf,
        target_images: PathBuf,
        target_labels: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub task: Task,
    /// Samples generated per domain (synthetic tasks only).
    pub samples: usize,
    pub split: (f64, f64, f64),
    /// Shifts applied in order to produce the target domain. Empty with
    /// `same_domain = false` still draws a fresh target sample.
    pub shifts: Vec<ShiftKind>,
    /// Target is literally the source dataset (no-shift control).
    pub same_domain: bool,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
    /// Cap on samples per label in embedding exports.
    pub export_per_label: usize,
}

impl RunConfig {
    /// Seed for dataset generation; defaults to the training seed.
    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.train.seed)
    }

    pub fn shift_specs(&self) -> Vec<ShiftSpec> {
        let base = self.data_seed();
        self.data
            .shifts
            .iter()
            .enumerate()
            .map(|(i, &k)| ShiftSpec::new(k, base.wrapping_mul(31).wrapping_add(1000 + i as u64)))
            .collect()
    }
}

struct Entry {
    line: usize,
    value: String,
    used: bool,
}

/// Parsed `key = value` pairs with usage tracking, so that unknown keys
/// can be reported.
struct Table {
    entries: BTreeMap<String, Entry>,
}

impl Table {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("expected `key = value`, found `{content}`"),
                });
            };
            let key = key.trim();
            let valid = !key.is_empty()
                && key.split('.').all(|part| !part.is_empty() && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'));
            if !valid {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("malformed key `{key}`"),
                });
            }
            let entry = Entry {
                line,
                value: value.trim().to_string(),
                used: false,
            };
            if let Some(prev) = entries.insert(key.to_string(), entry) {
                return Err(ConfigError::Field {
                    line,
                    key: key.to_string(),
                    message: format!("duplicate key (first set on line {})", prev.line),
                });
            }
        }
        Ok(Table { entries })
    }

    fn raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.get_mut(key).map(|e| {
            e.used = true;
            (e.line, e.value.clone())
        })
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e| ConfigError::Field {
                line,
                key: key.to_string(),
                message: format!("cannot parse `{v}`: {e}"),
            }),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<(), ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<usize>>, ConfigError> {
        let Some((line, v)) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(|p| {
                p.trim().parse::<usize>().map_err(|e| ConfigError::Field {
                    line,
                    key: key.to_string(),
                    message: format!("cannot parse `{}` in list: {e}", p.trim()),
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    fn choice<'a>(&mut self, key: &str, options: &[&'a str]) -> Result<Option<&'a str>, ConfigError> {
        let Some((line, v)) = self.raw(key) else { return Ok(None) };
        options.iter().find(|&&o| o == v).copied().map(Some).ok_or_else(|| ConfigError::Field {
            line,
            key: key.to_string(),
            message: format!("`{v}` is not one of {}", options.join(", ")),
        })
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.line)
    }

    fn field_error(&self, key: &str, message: impl Into<String>) -> ConfigError {
        match self.line_of(key) {
            0 => ConfigError::Invalid {
                key: key.to_string(),
                message: message.into(),
            },
            line => ConfigError::Field {
                line,
                key: key.to_string(),
                message: message.into(),
            },
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.entries.iter().find(|(_, e)| !e.used) {
            Some((k, e)) => Err(ConfigError::Field {
                line: e.line,
                key: k.clone(),
                message: "unknown key".into(),
            }),
            None => Ok(()),
        }
    }
}

fn parse_preset(t: &mut Table) -> Result<ArchitecturePreset, ConfigError> {
    let kind = t.choice("model.kind", &["conv_image", "mlp_vector"])?.unwrap_or("conv_image");
    let classes: usize = t.get("model.num_classes")?.unwrap_or(10);
    let input = t.list("model.input_shape")?;
    let mut p = match kind {
        "conv_image" => {
            let dims = input.unwrap_or(vec![16, 16, 1]);
            let &[h, w, c] = dims.as_slice() else {
                return Err(t.field_error("model.input_shape", "conv_image needs h,w,c"));
            };
            if h != w {
                return Err(t.field_error("model.input_shape", "images must be square"));
            }
            ArchitecturePreset::conv_image(h, c, classes)
        }
        _ => {
            let dims = input.unwrap_or(vec![2]);
            let &[d] = dims.as_slice() else {
                return Err(t.field_error("model.input_shape", "mlp_vector needs a single dimension"));
            };
            ArchitecturePreset::mlp_vector(d, classes)
        }
    };
    if let Some(w) = t.list("model.encoder_widths")? {
        p = p.with_encoder_widths(&w);
    }
    if let Some(w) = t.list("model.disc_widths")? {
        p.disc_widths = w;
    }
    t.set("model.classifier_hidden", &mut p.classifier_hidden)?;
    t.set("model.kernel_size", &mut p.kernel_size)?;
    t.set("model.leaky_alpha", &mut p.leaky_alpha)?;
    if let Some(h) = t.choice("model.handoff", &["flatten", "global_pool"])? {
        p.handoff = if h == "flatten" { FeatureHandoff::Flatten } else { FeatureHandoff::GlobalPool };
    }
    p.validate().map_err(|e| t.field_error("model.kind", e.to_string()))?;
    Ok(p)
}

fn parse_train(t: &mut Table, preset: ArchitecturePreset) -> Result<TrainConfig, ConfigError> {
    let mut c = TrainConfig::new(preset);
    t.set("run.seed", &mut c.seed)?;
    t.set("train.batch_size", &mut c.batch_size)?;
    t.set("train.pretrain_epochs", &mut c.pretrain_epochs)?;
    t.set("train.adapt_max_epochs", &mut c.adapt_max_epochs)?;
    t.set("train.pretrain_lr", &mut c.pretrain_lr)?;
    t.set("train.adapt_lr", &mut c.adapt_lr)?;
    c.adapt_disc_lr = t.get("train.adapt_disc_lr")?;
    t.set("train.beta1", &mut c.beta1)?;
    t.set("train.disc_steps_per_encoder_step", &mut c.disc_steps_per_encoder_step)?;
    t.set("train.disc_warmup_epochs", &mut c.disc_warmup_epochs)?;
    t.set("train.early_stop_window", &mut c.early_stop_window)?;
    t.set("train.early_stop_rel_change", &mut c.early_stop_rel_change)?;
    t.set("train.failure_loss_floor", &mut c.failure_loss_floor)?;
    t.set("train.sup_weight", &mut c.sup_weight)?;
    t.set("train.unsup_weight", &mut c.unsup_weight)?;
    if let Err(e) = c.validate() {
        let msg = e.to_string();
        let key = [
            "batch_size",
            "pretrain_lr",
            "adapt_disc_lr",
            "adapt_lr",
            "beta1",
            "disc_steps_per_encoder_step",
            "early_stop_window",
            "early_stop_rel_change",
            "failure_loss_floor",
        ]
        .iter()
        .find(|k| msg.contains(*k))
        .map_or("train".to_string(), |k| format!("train.{k}"));
        return Err(t.field_error(&key, msg));
    }
    Ok(c)
}

fn parse_shift(t: &mut Table, name: &str) -> Result<ShiftKind, ConfigError> {
    let mut num = |key: &str, default: f64| -> Result<f64, ConfigError> { Ok(t.get(key)?.unwrap_or(default)) };
    Ok(match name {
        "rotate" => ShiftKind::Rotate {
            degrees: num("shift.rotate_degrees", 30.0)?,
        },
        "translate" => ShiftKind::Translate {
            dx: num("shift.translate_dx", 2.0)?,
            dy: num("shift.translate_dy", 2.0)?,
        },
        "channel_colorize" => ShiftKind::ChannelColorize {
            tint_min: num("shift.tint_min", 0.3)?,
        },
        "background_noise" => ShiftKind::BackgroundNoise {
            sigma: num("shift.noise_sigma", 0.1)?,
            offset: num("shift.noise_offset", 0.3)?,
        },
        "intensity_invert" => ShiftKind::IntensityInvert,
        other => {
            return Err(t.field_error(
                "data.shift",
                format!("unknown shift `{other}` (rotate, translate, channel_colorize, background_noise, intensity_invert)"),
            ))
        }
    })
}

fn parse_data(t: &mut Table) -> Result<DataConfig, ConfigError> {
    let task = match t.choice("data.task", &["two_moons", "glyphs", "idx"])?.unwrap_or("two_moons") {
        "two_moons" => Task::TwoMoons {
            noise_sigma: t.get("data.noise_sigma")?.unwrap_or(0.1),
        },
        "glyphs" => Task::Glyphs {
            image_size: t.get("data.image_size")?.unwrap_or(16),
            channels: t.get("data.channels")?.unwrap_or(1),
        },
        _ => {
            let mut path = |key: &str| -> Result<PathBuf, ConfigError> {
                t.get::<String>(key)?
                    .map(PathBuf::from)
                    .ok_or_else(|| ConfigError::Invalid {
                        key: key.to_string(),
                        message: "required for data.task = idx".into(),
                    })
            };
            Task::Idx {
                source_images: path("data.source_images")?,
                source_labels: path("data.source_labels")?,
                target_images: path("data.target_images")?,
                target_labels: path("data.target_labels")?,
            }
        }
    };
    let samples = t.get("data.samples")?.unwrap_or(600);
    let split = match t.raw("data.split") {
        None => (0.6, 0.2, 0.2),
        Some((line, v)) => {
            let parts: Result<Vec<f64>, _> = v.split(',').map(|p| p.trim().parse::<f64>()).collect();
            match parts.as_deref() {
                Ok(&[a, b, c]) => (a, b, c),
                _ => {
                    return Err(ConfigError::Field {
                        line,
                        key: "data.split".into(),
                        message: format!("expected three fractions, found `{v}`"),
                    })
                }
            }
        }
    };
    let shift_list = t.raw("data.shift").map(|(_, v)| v).unwrap_or_default();
    let mut shifts = Vec::new();
    let mut same_domain = false;
    for name in shift_list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match name {
            "none" => {}
            "same" => same_domain = true,
            _ => shifts.push(parse_shift(t, name)?),
        }
    }
    if same_domain && !shifts.is_empty() {
        return Err(t.field_error("data.shift", "`same` cannot be combined with other shifts"));
    }
    for key in ["shift.rotate_degrees", "shift.translate_dx", "shift.translate_dy", "shift.tint_min", "shift.noise_sigma", "shift.noise_offset"] {
        // shift parameters of shifts that are not selected are still accepted
        let _ = t.raw(key);
    }
    Ok(DataConfig {
        task,
        samples,
        split,
        shifts,
        same_domain,
        seed: t.get("data.seed")?,
    })
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut t = Table::parse(text)?;
    let preset = parse_preset(&mut t)?;
    let train = parse_train(&mut t, preset)?;
    let data = parse_data(&mut t)?;
    let out_dir = t.get::<String>("run.out")?.map_or_else(|| PathBuf::from("out"), PathBuf::from);
    let export_per_label = t.get("export.per_label")?.unwrap_or(100);
    t.finish()?;
    for spec in shift_specs_for(&data) {
        spec.validate().map_err(|e| ConfigError::Invalid {
            key: "data.shift".into(),
            message: e.to_string(),
        })?;
    }
    Ok(RunConfig {
        train,
        data,
        out_dir,
        export_per_label,
    })
}

fn shift_specs_for(data: &DataConfig) -> Vec<ShiftSpec> {
    data.shifts.iter().map(|&k| ShiftSpec::new(k, 0)).collect()
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_config(&text)
}
