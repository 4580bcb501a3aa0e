//! Run configuration: flat UTF-8 `key=value` lines with `#` comments and
//! dotted keys. Every field has a default; unknown keys are rejected by
//! name so typos fail loudly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::HaploError;
use crate::model::ModelConfig;
use crate::training::{StageId, StagePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Synthetic dataset knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub n_und: usize,
    pub n_gen: usize,
    /// Latent amplitude multiplier for pre-scaling experiments.
    pub vision_scale: f64,
}

/// Per-stage hyperparameter overrides; `None` keeps the pinned default.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageOverrides {
    pub lr: Option<f64>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub warmup_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub teacher_seed: u64,
    pub out_dir: PathBuf,
    pub precision: Precision,
    pub data: DataConfig,
    pub stages: BTreeMap<&'static str, StageOverrides>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            seed: 42,
            teacher_seed: 7,
            out_dir: PathBuf::from("out"),
            precision: Precision::F32,
            data: DataConfig {
                seed: 1,
                n_und: 16,
                n_gen: 16,
                vision_scale: 1.0,
            },
            stages: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    /// The stage plan with this config's overrides applied.
    pub fn stage_plan(&self, stage: StageId) -> StagePlan {
        let mut plan = StagePlan::default_for(stage);
        if let Some(ov) = self.stages.get(stage.name()) {
            if let Some(lr) = ov.lr {
                plan.lr = lr;
            }
            if let Some(steps) = ov.steps {
                plan.steps = steps;
                plan.warmup_steps = steps / 10;
            }
            if let Some(b) = ov.batch_size {
                plan.batch_size = b;
            }
            if let Some(w) = ov.warmup_steps {
                plan.warmup_steps = w;
            }
        }
        plan
    }

    /// The seed, unless `HAPLO_SEED` overrides it.
    pub fn effective_seed(&self) -> Result<u64, HaploError> {
        match std::env::var("HAPLO_SEED") {
            Ok(s) => s
                .parse()
                .map_err(|_| HaploError::Config(format!("HAPLO_SEED is not an integer: '{s}'"))),
            Err(_) => Ok(self.seed),
        }
    }

    pub fn load(path: &Path) -> Result<Self, HaploError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, HaploError> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HaploError::Config(format!("line {}: expected key=value, got '{raw}'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), HaploError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HaploError> {
            value
                .parse()
                .map_err(|_| HaploError::Config(format!("bad value '{value}' for key '{key}'")))
        }
        match key {
            "model.d" => self.model.d = num(key, value)?,
            "model.heads" => self.model.heads = num(key, value)?,
            "model.d_ff" => self.model.d_ff = num(key, value)?,
            "model.d_t" => self.model.d_t = num(key, value)?,
            "model.n_pre" => self.model.n_pre = num(key, value)?,
            "model.n_base" => self.model.n_base = num(key, value)?,
            "model.n_post" => self.model.n_post = num(key, value)?,
            "model.vocab" => self.model.vocab = num(key, value)?,
            "model.image_size" => self.model.image_size = num(key, value)?,
            "model.patch_size" => self.model.patch_size = num(key, value)?,
            "model.frames" => self.model.frames = num(key, value)?,
            "model.channels" => self.model.channels = num(key, value)?,
            "model.adaln_groups" => self.model.adaln_groups = num(key, value)?,
            "model.t_max" => self.model.t_max = num(key, value)?,
            "model.beta_start" => self.model.beta_start = num(key, value)?,
            "model.beta_end" => self.model.beta_end = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "teacher.seed" => self.teacher_seed = num(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => {
                        return Err(HaploError::Config(format!(
                            "precision must be f32 or f64, got '{value}'"
                        )))
                    }
                }
            }
            "data.seed" => self.data.seed = num(key, value)?,
            "data.n_und" => self.data.n_und = num(key, value)?,
            "data.n_gen" => self.data.n_gen = num(key, value)?,
            "data.vision_scale" => self.data.vision_scale = num(key, value)?,
            _ => {
                if let Some(rest) = key.strip_prefix("stage.") {
                    return self.set_stage(key, rest, value);
                }
                return Err(HaploError::Config(format!("unknown config key '{key}'")));
            }
        }
        Ok(())
    }

    fn set_stage(&mut self, key: &str, rest: &str, value: &str) -> Result<(), HaploError> {
        let (stage_name, field) = rest.rsplit_once('.').ok_or_else(|| {
            HaploError::Config(format!("unknown config key '{key}'"))
        })?;
        let stage = StageId::parse(stage_name)
            .map_err(|_| HaploError::Config(format!("unknown stage in config key '{key}'")))?;
        let ov = self.stages.entry(stage.name()).or_default();
        let bad = || HaploError::Config(format!("bad value '{value}' for key '{key}'"));
        match field {
            "lr" => ov.lr = Some(value.parse().map_err(|_| bad())?),
            "steps" => ov.steps = Some(value.parse().map_err(|_| bad())?),
            "batch" => ov.batch_size = Some(value.parse().map_err(|_| bad())?),
            "warmup" => ov.warmup_steps = Some(value.parse().map_err(|_| bad())?),
            _ => return Err(HaploError::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Every field, one key per line, in a fixed order. Floats use the
    /// shortest lossless decimal form so parse(serialize(c)) == c.
    pub fn serialize(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        line("model.d", m.d.to_string());
        line("model.heads", m.heads.to_string());
        line("model.d_ff", m.d_ff.to_string());
        line("model.d_t", m.d_t.to_string());
        line("model.n_pre", m.n_pre.to_string());
        line("model.n_base", m.n_base.to_string());
        line("model.n_post", m.n_post.to_string());
        line("model.vocab", m.vocab.to_string());
        line("model.image_size", m.image_size.to_string());
        line("model.patch_size", m.patch_size.to_string());
        line("model.frames", m.frames.to_string());
        line("model.channels", m.channels.to_string());
        line("model.adaln_groups", m.adaln_groups.to_string());
        line("model.t_max", m.t_max.to_string());
        line("model.beta_start", format!("{:?}", m.beta_start));
        line("model.beta_end", format!("{:?}", m.beta_end));
        line("seed", self.seed.to_string());
        line("teacher.seed", self.teacher_seed.to_string());
        line("out_dir", self.out_dir.display().to_string());
        line("precision", self.precision.name().to_string());
        line("data.seed", self.data.seed.to_string());
        line("data.n_und", self.data.n_und.to_string());
        line("data.n_gen", self.data.n_gen.to_string());
        line("data.vision_scale", format!("{:?}", self.data.vision_scale));
        for (stage, ov) in &self.stages {
            if let Some(v) = ov.lr {
                line(&format!("stage.{stage}.lr"), format!("{v:?}"));
            }
            if let Some(v) = ov.steps {
                line(&format!("stage.{stage}.steps"), v.to_string());
            }
            if let Some(v) = ov.batch_size {
                line(&format!("stage.{stage}.batch"), v.to_string());
            }
            if let Some(v) = ov.warmup_steps {
                line(&format!("stage.{stage}.warmup"), v.to_string());
            }
        }
        out
    }
}
