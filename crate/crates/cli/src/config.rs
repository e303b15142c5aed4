//! Run configuration: flat `section.key = value` text, overridable from the
//! command line, and snapshotted next to every run.

use std::path::{Path, PathBuf};

use hfcr::data::{generate_synthetic, load_image_folder, Dataset, DatasetSplit, SyntheticSpec};
use hfcr::encoder::Backbone;
use hfcr::hffp::Arrangement;
use hfcr::model::HfcrConfig;
use hfcr::trainer::{EvalConfig, TrainConfig};

use crate::CliError;

pub const OUTPUT_ROOT_ENV: &str = "HFCR_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    Folder(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Image side; also the encoder input side.
    pub side: usize,
    pub classes: usize,
    pub groups: usize,
    pub images_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Optional synthetic spec file; overrides the generator keys above.
    pub spec_file: Option<PathBuf>,
    /// Class counts for the base and validation splits; the rest is novel.
    /// `None` picks 60/20/20.
    pub base_classes: Option<usize>,
    pub val_classes: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            side: 32,
            classes: 40,
            groups: 4,
            images_per_class: 30,
            noise_std: 0.05,
            seed: 0,
            spec_file: None,
            base_classes: Some(24),
            val_classes: Some(8),
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: HfcrConfig,
    pub train: TrainConfig,
    /// `None` derives the decay period as a third of the epochs.
    pub lr_decay_period: Option<Option<usize>>,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = HfcrConfig::default();
        // raw distances start in the thousands; clipping keeps the first steps sane
        let train = TrainConfig {
            epochs: 20,
            validate_every: 5,
            grad_clip: Some(1.0),
            ..TrainConfig::default()
        };
        Self {
            model,
            train,
            lr_decay_period: None,
            eval: EvalConfig {
                way: 5,
                shot: 1,
                queries: 16,
                episodes: 1000,
                seed: 1,
            },
            data: DataConfig::default(),
            output_dir: PathBuf::from("run"),
        }
    }
}

fn on_off(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::config(format!("`{key}` expects on/off, got `{v}`"))),
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::config(format!("`{key}`: cannot parse `{v}`")))
}

fn opt_num(key: &str, v: &str) -> Result<Option<usize>, CliError> {
    match v {
        "auto" => Ok(None),
        _ => num(key, v).map(Some),
    }
}

fn opt_str(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |n| n.to_string())
}

impl RunConfig {
    /// Parses a config file body on top of the defaults.
    pub fn from_kv(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {}: expected `section.key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "model.backbone" => {
                m.encoder.backbone = match v {
                    "conv4" => Backbone::Conv4,
                    "resnet12" => Backbone::ResNet12,
                    _ => return Err(CliError::config(format!("unknown backbone `{v}`"))),
                }
            }
            "model.blocks" => m.encoder.blocks = num(key, v)?,
            "model.channels" => m.encoder.channels = num(key, v)?,
            "model.hffp" => m.hffp = on_off(key, v)?,
            "model.hfrp" => m.hfrp = on_off(key, v)?,
            "model.channel" => m.branches.channel = on_off(key, v)?,
            "model.spatial" => m.branches.spatial = on_off(key, v)?,
            "model.arrangement" => {
                m.arrangement =
                    Arrangement::parse(v).ok_or_else(|| CliError::config(format!("unknown arrangement `{v}`")))?
            }
            "model.pos_enc_sfo" => m.pos_enc_in_sfo = on_off(key, v)?,
            "model.pos_enc_hfrp" => m.pos_enc_in_hfrp = on_off(key, v)?,
            // informational; derived from the toggles
            "model.mode" => {}
            "head.normalize_distances" => m.head.normalize_distances = on_off(key, v)?,
            "head.clamp_lambdas" => m.head.clamp_lambdas = on_off(key, v)?,
            "head.lambda_init" => m.lambda_init = num(key, v)?,
            "head.log_tau_init" => m.log_tau_init = num(key, v)?,
            "train.lr0" => t.lr0 = num(key, v)?,
            "train.momentum" => t.momentum = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.lr_decay_factor" => t.lr_decay_factor = num(key, v)?,
            "train.lr_decay_period" => {
                self.lr_decay_period = match v {
                    "auto" => None,
                    "none" => Some(None),
                    _ => Some(Some(num(key, v)?)),
                }
            }
            "train.way" => t.train_way = num(key, v)?,
            "train.shot" => t.train_shot = num(key, v)?,
            "train.queries" => t.train_queries = num(key, v)?,
            "train.episodes_per_epoch" => t.episodes_per_epoch = num(key, v)?,
            "train.validate_every" => t.validate_every = num(key, v)?,
            "train.val_episodes" => t.val_episodes = num(key, v)?,
            "train.augment" => t.augment.enabled = on_off(key, v)?,
            "train.crop_scale_min" => t.augment.crop_scale_min = num(key, v)?,
            "train.flip_p" => t.augment.flip_p = num(key, v)?,
            "train.brightness" => t.augment.brightness = num(key, v)?,
            "train.saturation" => t.augment.saturation = num(key, v)?,
            "train.grad_clip" => {
                t.grad_clip = match v {
                    "none" => None,
                    _ => Some(num(key, v)?),
                }
            }
            "train.seed" => t.seed = num(key, v)?,
            "eval.way" => {
                self.eval.way = num(key, v)?;
                t.eval_way = self.eval.way;
            }
            "eval.shot" => {
                self.eval.shot = num(key, v)?;
                t.eval_shot = self.eval.shot;
            }
            "eval.queries" => {
                self.eval.queries = num(key, v)?;
                t.eval_queries = self.eval.queries;
            }
            "eval.episodes" => self.eval.episodes = num(key, v)?,
            "eval.seed" => self.eval.seed = num(key, v)?,
            "data.source" => {
                d.source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "folder" => DataSource::Folder(match &d.source {
                        DataSource::Folder(p) => p.clone(),
                        DataSource::Synthetic => PathBuf::new(),
                    }),
                    _ => return Err(CliError::config(format!("unknown data source `{v}`"))),
                }
            }
            "data.path" => d.source = DataSource::Folder(PathBuf::from(v)),
            "data.side" => d.side = num(key, v)?,
            "data.classes" => d.classes = num(key, v)?,
            "data.groups" => d.groups = num(key, v)?,
            "data.images_per_class" => d.images_per_class = num(key, v)?,
            "data.noise_std" => d.noise_std = num(key, v)?,
            "data.seed" => d.seed = num(key, v)?,
            "data.spec_file" => d.spec_file = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.base_classes" => d.base_classes = opt_num(key, v)?,
            "data.val_classes" => d.val_classes = opt_num(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(CliError::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// All keys in a stable order; parsing this reproduces the config.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let arrangement = m.arrangement.name();
        let decay = match self.lr_decay_period {
            None => "auto".to_string(),
            Some(None) => "none".to_string(),
            Some(Some(p)) => p.to_string(),
        };
        let (source, path) = match &d.source {
            DataSource::Synthetic => ("synthetic", String::new()),
            DataSource::Folder(p) => ("folder", p.display().to_string()),
        };
        let lines: Vec<(&str, String)> = vec![
            ("model.mode", m.scoring_mode().name().to_string()),
            (
                "model.backbone",
                match m.encoder.backbone {
                    Backbone::Conv4 => "conv4",
                    Backbone::ResNet12 => "resnet12",
                }
                .to_string(),
            ),
            ("model.blocks", m.encoder.blocks.to_string()),
            ("model.channels", m.encoder.channels.to_string()),
            ("model.hffp", flag(m.hffp).into()),
            ("model.hfrp", flag(m.hfrp).into()),
            ("model.channel", flag(m.branches.channel).into()),
            ("model.spatial", flag(m.branches.spatial).into()),
            ("model.arrangement", arrangement.into()),
            ("model.pos_enc_sfo", flag(m.pos_enc_in_sfo).into()),
            ("model.pos_enc_hfrp", flag(m.pos_enc_in_hfrp).into()),
            ("head.normalize_distances", flag(m.head.normalize_distances).into()),
            ("head.clamp_lambdas", flag(m.head.clamp_lambdas).into()),
            ("head.lambda_init", m.lambda_init.to_string()),
            ("head.log_tau_init", m.log_tau_init.to_string()),
            ("train.lr0", t.lr0.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.lr_decay_factor", t.lr_decay_factor.to_string()),
            ("train.lr_decay_period", decay),
            ("train.way", t.train_way.to_string()),
            ("train.shot", t.train_shot.to_string()),
            ("train.queries", t.train_queries.to_string()),
            ("train.episodes_per_epoch", t.episodes_per_epoch.to_string()),
            ("train.validate_every", t.validate_every.to_string()),
            ("train.val_episodes", t.val_episodes.to_string()),
            ("train.augment", flag(t.augment.enabled).into()),
            ("train.crop_scale_min", t.augment.crop_scale_min.to_string()),
            ("train.flip_p", t.augment.flip_p.to_string()),
            ("train.brightness", t.augment.brightness.to_string()),
            ("train.saturation", t.augment.saturation.to_string()),
            ("train.grad_clip", t.grad_clip.map_or_else(|| "none".to_string(), |c| c.to_string())),
            ("train.seed", t.seed.to_string()),
            ("eval.way", self.eval.way.to_string()),
            ("eval.shot", self.eval.shot.to_string()),
            ("eval.queries", self.eval.queries.to_string()),
            ("eval.episodes", self.eval.episodes.to_string()),
            ("eval.seed", self.eval.seed.to_string()),
            ("data.source", source.into()),
            ("data.path", path),
            ("data.side", d.side.to_string()),
            ("data.classes", d.classes.to_string()),
            ("data.groups", d.groups.to_string()),
            ("data.images_per_class", d.images_per_class.to_string()),
            ("data.noise_std", d.noise_std.to_string()),
            ("data.seed", d.seed.to_string()),
            (
                "data.spec_file",
                d.spec_file.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("data.base_classes", opt_str(d.base_classes)),
            ("data.val_classes", opt_str(d.val_classes)),
            ("output.dir", self.output_dir.display().to_string()),
        ];
        let mut out = String::new();
        for (k, v) in lines {
            // `data.path` is only meaningful for folders
            if k == "data.path" && v.is_empty() {
                continue;
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Model config with the encoder input tied to the data side.
    pub fn model_config(&self) -> HfcrConfig {
        let mut m = self.model.clone();
        m.encoder.input_side = self.data.side;
        m
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.eval_way = self.eval.way;
        t.eval_shot = self.eval.shot;
        t.eval_queries = self.eval.queries;
        t.lr_decay_period = match self.lr_decay_period {
            None => Some((t.epochs / 3).max(1)),
            Some(p) => p,
        };
        t
    }

    /// Checks toggle combinations and numeric ranges.
    pub fn validate(&self) -> Result<(), CliError> {
        let m = &self.model;
        if !m.branches.channel && !m.branches.spatial && (m.hfrp || m.hffp) {
            let stage = if m.hfrp { "HFRP" } else { "HFFP" };
            return Err(CliError::config(format!(
                "--channel off and --spatial off cannot both be set while {stage} is on \
                 (model.channel = off, model.spatial = off)"
            )));
        }
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.eval.episodes == 0 || self.eval.way < 2 || self.eval.shot == 0 || self.eval.queries == 0 {
            return Err(CliError::config(
                "eval.episodes, eval.shot and eval.queries must be positive and eval.way >= 2",
            ));
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec, CliError> {
        let d = &self.data;
        let spec = match &d.spec_file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("cannot read {}: {e}", p.display())))?;
                SyntheticSpec::from_kv(&text)?
            }
            None => SyntheticSpec::new(d.classes, d.groups, d.side, d.images_per_class, d.noise_std, d.seed),
        };
        spec.validate()?;
        if spec.side != d.side {
            return Err(CliError::config(format!(
                "synthetic spec side {} differs from data.side {}",
                spec.side, d.side
            )));
        }
        Ok(spec)
    }

    /// Loads or generates the dataset and its class split.
    pub fn load_data(&self) -> Result<(Dataset, DatasetSplit), CliError> {
        let data = match &self.data.source {
            DataSource::Synthetic => generate_synthetic(&self.synthetic_spec()?)?,
            DataSource::Folder(p) => {
                if p.as_os_str().is_empty() {
                    return Err(CliError::config("data.source = folder needs data.path"));
                }
                load_image_folder(p, self.data.side)?
            }
        };
        let n = data.num_classes();
        let split = match (self.data.base_classes, self.data.val_classes) {
            (Some(b), Some(v)) => DatasetSplit::contiguous(n, b, v),
            _ => DatasetSplit::proportional(n),
        }
        .map_err(|e| CliError::config(e.to_string()))?;
        if split.novel.len() < self.eval.way {
            return Err(CliError::config(format!(
                "{}-way evaluation needs {} novel classes, split has {}",
                self.eval.way,
                self.eval.way,
                split.novel.len()
            )));
        }
        Ok((data, split))
    }

    /// Output directory, resolved against `$HFCR_OUTPUT_ROOT` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

pub fn read_config_file(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    RunConfig::from_kv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("model.arrangement", "sfo_then_cfo").unwrap();
        cfg.set("data.path", "/tmp/birds").unwrap();
        cfg.set("train.lr_decay_period", "none").unwrap();
        let back = RunConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::from_kv("model.colour = blue").unwrap_err();
        assert_eq!(err.code, 2);
    }

    #[test]
    fn decay_period_defaults_to_a_third() {
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 30;
        assert_eq!(cfg.train_config().lr_decay_period, Some(10));
    }
}
