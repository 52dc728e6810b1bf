//! Flat `section.key = value` run configuration.
//!
//! Parsing starts from the defaults and applies each line in order; unknown
//! keys are rejected. [`RunConfig::to_text`] writes every key, so an echoed
//! file alone reproduces a run.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use garmentfuse_core::diffusion::guidance::GuidanceConfig;
use garmentfuse_core::diffusion::sampler::{SamplerKind, DEFAULT_SAMPLING_STEPS};
use garmentfuse_core::diffusion::schedule::{
    make_schedule, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS,
};
use garmentfuse_core::diffusion::train::{TrainStage, TrainStageConfig, DESK_BATCH, DESK_EPOCHS, DESK_LR};
use garmentfuse_core::fusion::{FusionConfig, FusionMode};
use garmentfuse_core::optim::REFERENCE_LR;
use garmentfuse_core::rng::derive_seed;
use garmentfuse_core::synth::dataset::DEFAULT_COUNT;
use garmentfuse_core::unet::UNetConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub stages: Vec<TrainStage>,
    pub single_epochs: usize,
    pub multi_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Informational; the learning rate of the large-scale reference setup.
    pub reference_lr: f64,
    pub freeze_denoiser: bool,
    pub require_single: bool,
    pub smoke: bool,
    pub smoke_epochs: usize,
    pub smoke_count: usize,
    /// Batch size in smoke mode; small so two short epochs still take
    /// enough optimizer steps to move the loss.
    pub smoke_batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    /// Dataset root; `<run.out>/dataset` when unset.
    pub dir: Option<PathBuf>,
    pub single_count: usize,
    pub multi_count: usize,
    pub eval_count: usize,
    pub proportions: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSection {
    pub sampler: SamplerKind,
    pub steps: usize,
    pub checkpoint: Option<PathBuf>,
    pub garments: Option<PathBuf>,
    pub caption: String,
    /// One image per seed; `run.seed` alone when empty.
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub seeds_per_sample: usize,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub unet: UNetConfig,
    pub schedule: ScheduleSection,
    pub guidance: GuidanceConfig,
    pub fusion: FusionConfig,
    pub train: TrainSection,
    pub data: DataSection,
    pub sample: SampleSection,
    pub eval: EvalSection,
    pub ablate_modes: Vec<FusionMode>,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::desk(),
            schedule: ScheduleSection {
                steps: DEFAULT_STEPS,
                beta_start: DEFAULT_BETA_START,
                beta_end: DEFAULT_BETA_END,
            },
            guidance: GuidanceConfig::default(),
            fusion: FusionConfig::default(),
            train: TrainSection {
                stages: vec![TrainStage::Single, TrainStage::Multi],
                single_epochs: DESK_EPOCHS,
                multi_epochs: DESK_EPOCHS,
                batch_size: DESK_BATCH,
                lr: DESK_LR,
                reference_lr: REFERENCE_LR,
                freeze_denoiser: false,
                require_single: true,
                smoke: false,
                smoke_epochs: 2,
                smoke_count: 32,
                smoke_batch: 1,
            },
            data: DataSection {
                dir: None,
                single_count: DEFAULT_COUNT,
                multi_count: DEFAULT_COUNT,
                eval_count: 64,
                proportions: [1.0; 4],
            },
            sample: SampleSection {
                sampler: SamplerKind::Ddim,
                steps: DEFAULT_SAMPLING_STEPS,
                checkpoint: None,
                garments: None,
                caption: String::new(),
                seeds: Vec::new(),
            },
            eval: EvalSection {
                seeds_per_sample: 4,
                checkpoint: None,
            },
            ablate_modes: FusionMode::ALL.to_vec(),
            run: RunSection {
                seed: 7,
                out: PathBuf::from("runs/default"),
            },
        }
    }
}

fn parse_value<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| format!("cannot parse {value:?}: {e}"))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true or false, got {other:?}")),
    }
}

fn parse_list<T>(value: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| f(v.trim())).collect()
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn core_err(e: garmentfuse_core::Error) -> String {
    e.to_string()
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Config {
                line: i + 1,
                reason: format!("expected `section.key = value`, got {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|reason| CliError::Config { line: i + 1, reason })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "unet.in_channels" => self.unet.in_channels = parse_value(v)?,
            "unet.height" => self.unet.height = parse_value(v)?,
            "unet.width" => self.unet.width = parse_value(v)?,
            "unet.patch" => self.unet.patch = parse_value(v)?,
            "unet.base_width" => self.unet.base_width = parse_value(v)?,
            "unet.channel_mult" => self.unet.channel_mult = parse_list(v, parse_value)?,
            "unet.attention" => self.unet.attention = parse_list(v, parse_bool)?,
            "unet.heads" => self.unet.heads = parse_value(v)?,
            "unet.text_dim" => self.unet.text_dim = parse_value(v)?,
            "unet.time_dim" => self.unet.time_dim = parse_value(v)?,
            "unet.groups" => self.unet.groups = parse_value(v)?,
            "unet.max_garments" => self.unet.max_garments = parse_value(v)?,
            "schedule.steps" => self.schedule.steps = parse_value(v)?,
            "schedule.beta_start" => self.schedule.beta_start = parse_value(v)?,
            "schedule.beta_end" => self.schedule.beta_end = parse_value(v)?,
            "guidance.scale" => self.guidance.scale = parse_value(v)?,
            "guidance.p_text" => self.guidance.p_text = parse_value(v)?,
            "guidance.p_garment" => self.guidance.p_garment = parse_value(v)?,
            "guidance.p_drop_all" => self.guidance.p_drop_all = parse_value(v)?,
            "guidance.compositional" => self.guidance.compositional = parse_bool(v)?,
            "fusion.mode" => self.fusion.mode = FusionMode::parse(v).map_err(core_err)?,
            "fusion.normalize_terms" => self.fusion.normalize_terms = parse_bool(v)?,
            "fusion.per_garment_kv" => self.fusion.per_garment_kv = parse_bool(v)?,
            "train.stages" => {
                self.train.stages = parse_list(v, |s| TrainStage::parse(s).map_err(core_err))?
            }
            "train.single_epochs" => self.train.single_epochs = parse_value(v)?,
            "train.multi_epochs" => self.train.multi_epochs = parse_value(v)?,
            "train.batch_size" => self.train.batch_size = parse_value(v)?,
            "train.lr" => self.train.lr = parse_value(v)?,
            "train.reference_lr" => self.train.reference_lr = parse_value(v)?,
            "train.freeze_denoiser" => self.train.freeze_denoiser = parse_bool(v)?,
            "train.require_single" => self.train.require_single = parse_bool(v)?,
            "train.smoke" => self.train.smoke = parse_bool(v)?,
            "train.smoke_epochs" => self.train.smoke_epochs = parse_value(v)?,
            "train.smoke_count" => self.train.smoke_count = parse_value(v)?,
            "train.smoke_batch" => self.train.smoke_batch = parse_value(v)?,
            "data.dir" => self.data.dir = parse_path(v),
            "data.single_count" => self.data.single_count = parse_value(v)?,
            "data.multi_count" => self.data.multi_count = parse_value(v)?,
            "data.eval_count" => self.data.eval_count = parse_value(v)?,
            "data.proportions" => {
                let p: Vec<f64> = parse_list(v, parse_value)?;
                self.data.proportions = p
                    .try_into()
                    .map_err(|_| "data.proportions needs 4 values (upper, lower, dress, outer)".to_string())?;
            }
            "sample.sampler" => self.sample.sampler = SamplerKind::parse(v).map_err(core_err)?,
            "sample.steps" => self.sample.steps = parse_value(v)?,
            "sample.checkpoint" => self.sample.checkpoint = parse_path(v),
            "sample.garments" => self.sample.garments = parse_path(v),
            "sample.caption" => self.sample.caption = v.to_string(),
            "sample.seeds" => self.sample.seeds = parse_list(v, parse_value)?,
            "eval.seeds_per_sample" => self.eval.seeds_per_sample = parse_value(v)?,
            "eval.checkpoint" => self.eval.checkpoint = parse_path(v),
            "ablate.modes" => self.ablate_modes = parse_list(v, |s| FusionMode::parse(s).map_err(core_err))?,
            "run.seed" => self.run.seed = parse_value(v)?,
            "run.out" => self.run.out = PathBuf::from(v),
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |m: String| CliError::Usage(m);
        self.unet.validate().map_err(|e| usage(e.to_string()))?;
        self.guidance.validate().map_err(|e| usage(e.to_string()))?;
        self.noise_schedule().map_err(|e| usage(e.to_string()))?;
        if self.train.batch_size == 0 || self.train.smoke_batch == 0 {
            return Err(usage("train.batch_size and train.smoke_batch must be >= 1".into()));
        }
        if !(self.train.lr > 0.0) {
            return Err(usage("train.lr must be positive".into()));
        }
        if self.sample.steps == 0 || self.sample.steps > self.schedule.steps {
            return Err(usage(format!("sample.steps must lie in [1, {}]", self.schedule.steps)));
        }
        if self.eval.seeds_per_sample == 0 {
            return Err(usage("eval.seeds_per_sample must be >= 1".into()));
        }
        if self.ablate_modes.is_empty() {
            return Err(usage("ablate.modes is empty".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        let u = &self.unet;
        let t = &self.train;
        let rows: Vec<(&str, String)> = vec![
            ("unet.in_channels", u.in_channels.to_string()),
            ("unet.height", u.height.to_string()),
            ("unet.width", u.width.to_string()),
            ("unet.patch", u.patch.to_string()),
            ("unet.base_width", u.base_width.to_string()),
            ("unet.channel_mult", join(&u.channel_mult)),
            ("unet.attention", join(&u.attention)),
            ("unet.heads", u.heads.to_string()),
            ("unet.text_dim", u.text_dim.to_string()),
            ("unet.time_dim", u.time_dim.to_string()),
            ("unet.groups", u.groups.to_string()),
            ("unet.max_garments", u.max_garments.to_string()),
            ("schedule.steps", self.schedule.steps.to_string()),
            ("schedule.beta_start", self.schedule.beta_start.to_string()),
            ("schedule.beta_end", self.schedule.beta_end.to_string()),
            ("guidance.scale", self.guidance.scale.to_string()),
            ("guidance.p_text", self.guidance.p_text.to_string()),
            ("guidance.p_garment", self.guidance.p_garment.to_string()),
            ("guidance.p_drop_all", self.guidance.p_drop_all.to_string()),
            ("guidance.compositional", self.guidance.compositional.to_string()),
            ("fusion.mode", self.fusion.mode.to_string()),
            ("fusion.normalize_terms", self.fusion.normalize_terms.to_string()),
            ("fusion.per_garment_kv", self.fusion.per_garment_kv.to_string()),
            ("train.stages", join(&t.stages)),
            ("train.single_epochs", t.single_epochs.to_string()),
            ("train.multi_epochs", t.multi_epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.reference_lr", t.reference_lr.to_string()),
            ("train.freeze_denoiser", t.freeze_denoiser.to_string()),
            ("train.require_single", t.require_single.to_string()),
            ("train.smoke", t.smoke.to_string()),
            ("train.smoke_epochs", t.smoke_epochs.to_string()),
            ("train.smoke_count", t.smoke_count.to_string()),
            ("train.smoke_batch", t.smoke_batch.to_string()),
            ("data.dir", show_path(&self.data.dir)),
            ("data.single_count", self.data.single_count.to_string()),
            ("data.multi_count", self.data.multi_count.to_string()),
            ("data.eval_count", self.data.eval_count.to_string()),
            ("data.proportions", join(&self.data.proportions)),
            ("sample.sampler", self.sample.sampler.as_str().to_string()),
            ("sample.steps", self.sample.steps.to_string()),
            ("sample.checkpoint", show_path(&self.sample.checkpoint)),
            ("sample.garments", show_path(&self.sample.garments)),
            ("sample.caption", self.sample.caption.clone()),
            ("sample.seeds", join(&self.sample.seeds)),
            ("eval.seeds_per_sample", self.eval.seeds_per_sample.to_string()),
            ("eval.checkpoint", show_path(&self.eval.checkpoint)),
            ("ablate.modes", join(&self.ablate_modes)),
            ("run.seed", self.run.seed.to_string()),
            ("run.out", self.run.out.display().to_string()),
        ];
        let mut out = String::from("# resolved configuration\n");
        for (k, v) in rows {
            out += &format!("{k} = {v}\n");
        }
        out
    }

    pub fn noise_schedule(&self) -> garmentfuse_core::Result<NoiseSchedule> {
        make_schedule(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| self.run.out.join("dataset"))
    }

    pub fn fusion_for(&self, mode: FusionMode) -> FusionConfig {
        FusionConfig { mode, ..self.fusion }
    }

    /// Seed for parameter initialization.
    pub fn init_seed(&self) -> u64 {
        derive_seed(self.run.seed, &[1])
    }

    /// Seed for shuffling and noise draws during training.
    pub fn train_seed(&self) -> u64 {
        derive_seed(self.run.seed, &[2])
    }

    /// Seed of the `k`-th evaluation draw for a sample.
    pub fn eval_seed(&self, sample_id: u64, k: usize) -> u64 {
        derive_seed(self.run.seed, &[3, sample_id, k as u64])
    }

    /// Seed of the held-out evaluation split.
    pub fn eval_data_seed(&self) -> u64 {
        derive_seed(self.run.seed, &[4])
    }

    pub fn stage_epochs(&self, stage: TrainStage) -> usize {
        if self.train.smoke {
            return self.train.smoke_epochs;
        }
        match stage {
            TrainStage::Single => self.train.single_epochs,
            TrainStage::Multi => self.train.multi_epochs,
        }
    }

    pub fn stage_config(&self, stage: TrainStage, mode: FusionMode) -> TrainStageConfig {
        TrainStageConfig {
            stage,
            epochs: self.stage_epochs(stage),
            batch_size: if self.train.smoke { self.train.smoke_batch } else { self.train.batch_size },
            lr: self.train.lr,
            freeze_denoiser: self.train.freeze_denoiser,
            fusion_mode: mode,
            seed: self.train_seed(),
            require_single: self.train.require_single,
        }
    }
}
