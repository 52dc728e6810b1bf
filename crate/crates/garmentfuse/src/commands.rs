//! Command implementations shared by the binary and the test suites.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use garmentfuse_core::checkpoint::Record;
use garmentfuse_core::diffusion::model::{Conditioning, Models};
use garmentfuse_core::diffusion::sampler::{self, SamplerConfig};
use garmentfuse_core::diffusion::train::{
    train_stage, EpochRecord, StageProgress, TrainExample, TrainStage,
};
use garmentfuse_core::encoder::GarmentCategory;
use garmentfuse_core::fusion::FusionMode;
use garmentfuse_core::metrics::{ablation_report, score_sample, AblationReport, FidelityReport, ReportContext};
use garmentfuse_core::synth::dataset::{build_dataset, DatasetConfig, TripletSample};
use garmentfuse_core::synth::{BodyLayout, RgbImage};
use garmentfuse_core::unet::text;
use garmentfuse_core::Error;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{self, DatasetManifest, EVAL_SPLIT};
use crate::error::{CliError, CliResult};
use crate::features::{self, mode_code, mode_from_code};
use crate::io;

/// Progress sink; commands report one line per event.
pub type Log<'a> = &'a mut dyn FnMut(&str);

const MODE_RECORD: &str = "meta.fusion_mode";
const PROGRESS_PREFIX: &str = "progress.";

/// Which dataset splits `gen-data` writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Single,
    Multi,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Single, Split::Multi, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::Single => "single",
            Split::Multi => "multi",
            Split::Eval => EVAL_SPLIT,
        }
    }

    pub fn dataset_config(self, cfg: &RunConfig) -> DatasetConfig {
        let mut d = match self {
            Split::Single => DatasetConfig::new(TrainStage::Single, cfg.data.single_count, cfg.run.seed),
            Split::Multi => DatasetConfig::new(TrainStage::Multi, cfg.data.multi_count, cfg.run.seed),
            Split::Eval => DatasetConfig::new(TrainStage::Multi, cfg.data.eval_count, cfg.eval_data_seed()),
        };
        d.proportions = cfg.data.proportions;
        d
    }
}

/// Writes the resolved config next to a command's outputs.
pub fn echo_config(cfg: &RunConfig, command: &str) -> CliResult<PathBuf> {
    let path = cfg.run.out.join(format!("{command}.config"));
    io::write_atomic(&path, cfg.to_text().as_bytes())?;
    Ok(path)
}

/// Records a command's artifacts in `<out>/manifest.json`.
pub fn update_index(out: &Path, command: &str, files: &[PathBuf]) -> CliResult<()> {
    let path = out.join("manifest.json");
    let mut index: BTreeMap<String, Vec<String>> = if path.exists() { io::read_json(&path)? } else { BTreeMap::new() };
    let rel = files
        .iter()
        .map(|f| f.strip_prefix(out).unwrap_or(f).display().to_string())
        .collect();
    index.insert(command.into(), rel);
    io::write_json(&path, &index)
}

pub fn gen_data(cfg: &RunConfig, splits: &[Split], log: Log) -> CliResult<DatasetManifest> {
    let root = cfg.dataset_dir();
    let mut manifest = if dataset::manifest_path(&root).exists() {
        dataset::read_manifest(&root)?
    } else {
        DatasetManifest::default()
    };
    for &split in splits {
        let dc = split.dataset_config(cfg);
        let samples = build_dataset(&dc)?;
        let entry = dataset::write_split(&root, split.name(), &dc, &samples)?;
        log(&format!("{}: {} samples", split.name(), samples.len()));
        manifest.splits.retain(|s| s.name != entry.name);
        manifest.splits.push(entry);
    }
    manifest.splits.sort_by_key(|s| Split::ALL.iter().position(|x| x.name() == s.name));
    io::write_json(&dataset::manifest_path(&root), &manifest)?;
    let echo = echo_config(cfg, "gen-data")?;
    update_index(&cfg.run.out, "gen-data", &[echo, dataset::manifest_path(&root)])?;
    Ok(manifest)
}

/// Fresh models for `mode` from the run's initialization seed.
pub fn fresh_models(cfg: &RunConfig, mode: FusionMode) -> CliResult<Models<f32>> {
    Ok(Models::new(cfg.unet.clone(), cfg.fusion_for(mode), cfg.init_seed())?)
}

pub fn checkpoint_records(models: &Models<f32>) -> Vec<Record> {
    let mut r = models.records();
    r.push(Record {
        name: MODE_RECORD.into(),
        shape: vec![1],
        data: vec![mode_code(models.net.fusion.mode)],
    });
    r
}

pub fn write_checkpoint(path: &Path, models: &Models<f32>, progress: Option<&StageProgress<f32>>) -> CliResult<()> {
    let mut r = checkpoint_records(models);
    if let Some(p) = progress {
        r.extend(p.records(PROGRESS_PREFIX));
    }
    io::write_radf(path, &r)
}

fn checkpoint_mode(records: &[Record]) -> CliResult<FusionMode> {
    let r = records
        .iter()
        .find(|r| r.name == MODE_RECORD)
        .ok_or_else(|| Error::Architecture("checkpoint lacks its fusion mode".into()))?;
    Ok(mode_from_code(r.data[0])?)
}

/// Loads a checkpoint into models built from `cfg`; the checkpoint must have
/// been trained under `mode`.
pub fn load_checkpoint_records(cfg: &RunConfig, mode: FusionMode, records: &[Record]) -> CliResult<Models<f32>> {
    let saved = checkpoint_mode(records)?;
    if saved != mode {
        return Err(CliError::Usage(format!(
            "checkpoint was trained under fusion mode {saved}, requested {mode}"
        )));
    }
    let mut m = fresh_models(cfg, mode)?;
    m.load_records(records)?;
    Ok(m)
}

pub fn load_checkpoint(cfg: &RunConfig, mode: FusionMode, path: &Path) -> CliResult<Models<f32>> {
    load_checkpoint_records(cfg, mode, &io::read_radf(path)?)
}

fn examples(samples: &[TripletSample]) -> Vec<TrainExample<f32>> {
    samples.iter().map(|s| s.to_example()).collect()
}

/// Outcome of training one fusion mode through its stages.
pub struct TrainRun {
    pub models: Models<f32>,
    pub checkpoint: PathBuf,
    /// Loss curve across all stages, in order.
    pub curve: Vec<EpochRecord>,
    pub files: Vec<PathBuf>,
}

fn stage_dir(train_dir: &Path, stage: TrainStage) -> PathBuf {
    train_dir.join(stage.as_str())
}

fn write_curve(path: &Path, curve: &[EpochRecord]) -> CliResult<()> {
    let mut text = String::new();
    for r in curve {
        text += &serde_json::to_string(r).map_err(|source| CliError::Json {
            path: path.into(),
            source,
        })?;
        text.push('\n');
    }
    io::write_atomic(path, text.as_bytes())
}

fn stage_data(cfg: &RunConfig, stage: TrainStage) -> CliResult<Vec<TrainExample<f32>>> {
    let limit = cfg.train.smoke.then_some(cfg.train.smoke_count);
    Ok(examples(&dataset::load_split(&cfg.dataset_dir(), stage.as_str(), limit)?))
}

/// Trains `mode` through the configured stages under `train_dir`, resuming
/// from per-stage state files. Each epoch rewrites `state.radf` and
/// `loss.jsonl`; the first epoch also leaves `epoch_0.radf`; a finished
/// stage leaves `final.radf`.
pub fn train_mode(cfg: &RunConfig, mode: FusionMode, train_dir: &Path, log: Log) -> CliResult<TrainRun> {
    let schedule = cfg.noise_schedule()?;
    let mut models = fresh_models(cfg, mode)?;
    let mut curve = Vec::new();
    let mut files = Vec::new();
    let first = cfg.train.stages.first().copied();
    if first == Some(TrainStage::Multi) {
        let prior = stage_dir(train_dir, TrainStage::Single).join("final.radf");
        if prior.exists() {
            models = load_checkpoint(cfg, mode, &prior)?;
        }
    }
    let mut last = None;
    for &stage in &cfg.train.stages {
        let sc = cfg.stage_config(stage, mode);
        let dir = stage_dir(train_dir, stage);
        let state_path = dir.join("state.radf");
        let final_path = dir.join("final.radf");
        let curve_path = dir.join("loss.jsonl");
        let mut progress = if state_path.exists() {
            let records = io::read_radf(&state_path)?;
            models = load_checkpoint_records(cfg, mode, &records)?;
            let p = StageProgress::from_records(&sc, &models, PROGRESS_PREFIX, &records)?;
            log(&format!("{mode} {stage}: resuming after epoch {}", p.epochs_done));
            p
        } else {
            StageProgress::new(&sc, &models)
        };
        let data = stage_data(cfg, stage)?;
        log(&format!("{mode} {stage}: {} epochs on {} triplets", sc.epochs, data.len()));
        let mut stage_curve: Vec<EpochRecord> = progress
            .losses
            .iter()
            .enumerate()
            .map(|(epoch, &loss)| EpochRecord {
                epoch,
                loss,
                stage,
                fusion_mode: mode,
                seed: sc.seed,
            })
            .collect();
        let mut io_result: CliResult<()> = Ok(());
        let outcome = train_stage(
            &data,
            &sc,
            &mut models,
            &schedule,
            &cfg.guidance,
            &mut progress,
            |rec, m, p| {
                stage_curve.push(*rec);
                // Logged only once on disk, so a logged epoch survives a kill.
                let step = (|| {
                    write_checkpoint(&state_path, m, Some(p))?;
                    if rec.epoch == 0 {
                        write_checkpoint(&dir.join("epoch_0.radf"), m, None)?;
                    }
                    write_curve(&curve_path, &stage_curve)
                })();
                if step.is_ok() {
                    log(&format!("{mode} {stage} epoch {} loss {:.5}", rec.epoch, rec.loss));
                }
                step.map_err(|e| {
                    let msg = e.to_string();
                    io_result = Err(e);
                    Error::Invalid(msg)
                })
            },
        );
        io_result?;
        outcome?;
        write_checkpoint(&final_path, &models, None)?;
        write_curve(&curve_path, &stage_curve)?;
        curve.extend(stage_curve);
        files.extend([final_path.clone(), curve_path, dir.join("epoch_0.radf")]);
        last = Some(final_path);
    }
    let checkpoint = last.ok_or_else(|| CliError::Usage("train.stages is empty".into()))?;
    Ok(TrainRun {
        models,
        checkpoint,
        curve,
        files,
    })
}

pub fn train(cfg: &RunConfig, log: Log) -> CliResult<TrainRun> {
    let run = train_mode(cfg, cfg.fusion.mode, &cfg.run.out.join("train"), log)?;
    let echo = echo_config(cfg, "train")?;
    let mut files = run.files.clone();
    files.push(echo);
    update_index(&cfg.run.out, "train", &files)?;
    Ok(run)
}

/// One entry of a garment list file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarmentInput {
    pub category: String,
    /// PPM path, relative to the list file.
    pub image: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub seed: u64,
    pub file: String,
    pub checkpoint: String,
    pub fusion_mode: FusionMode,
    pub sampler: String,
    pub steps: usize,
    pub guidance_scale: f64,
    pub caption: String,
    pub garments: Vec<GarmentInput>,
}

pub fn caption_tokens(caption: &str) -> Vec<usize> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    if words.is_empty() {
        Vec::new()
    } else {
        text::tokenize(&words)
    }
}

fn sampler_config(cfg: &RunConfig) -> SamplerConfig {
    SamplerConfig {
        kind: cfg.sample.sampler,
        steps: cfg.sample.steps,
        guidance: cfg.guidance,
    }
}

/// Reads and validates a garment list before any model work.
pub fn read_garment_list(path: &Path) -> CliResult<Vec<(GarmentCategory, GarmentInput, RgbImage)>> {
    let list: Vec<GarmentInput> = io::read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let cats = list
        .iter()
        .map(|g| GarmentCategory::parse(&g.category))
        .collect::<garmentfuse_core::Result<Vec<_>>>()?;
    garmentfuse_core::fusion::canonical_reference_order(cats.clone())?;
    list.into_iter()
        .zip(cats)
        .map(|(g, c)| {
            let img = io::read_ppm(&base.join(&g.image))?;
            Ok((c, g, img))
        })
        .collect()
}

pub fn sample(cfg: &RunConfig, log: Log) -> CliResult<Vec<SampleRecord>> {
    let garments_path = cfg
        .sample
        .garments
        .as_ref()
        .ok_or_else(|| CliError::Usage("sample needs sample.garments (--garments)".into()))?;
    let ckpt_path = cfg
        .sample
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("sample needs sample.checkpoint (--checkpoint)".into()))?;
    let garments = read_garment_list(garments_path)?;
    let mode = cfg.fusion.mode;
    let models = load_checkpoint(cfg, mode, ckpt_path)?;
    let ckpt_id = models.checkpoint_id();
    let tensors: Vec<_> = garments.iter().map(|(c, _, img)| (*c, img.to_tensor::<f32>())).collect();
    let refs: Vec<_> = tensors.iter().map(|(c, t)| (*c, t)).collect();
    let out = cfg.run.out.join("samples");
    let set = features::encode_cached(&models, &ckpt_id, &cfg.run.out.join("features"), &refs)?;
    let cond = Conditioning::from_features(caption_tokens(&cfg.sample.caption), set, &models.net)?;
    let schedule = cfg.noise_schedule()?;
    let seeds = if cfg.sample.seeds.is_empty() { vec![cfg.run.seed] } else { cfg.sample.seeds.clone() };
    let sc = sampler_config(cfg);
    let mut records = Vec::new();
    let mut files = Vec::new();
    for seed in seeds {
        let x = sampler::sample(&models, &cond, &schedule, &sc, &models.net.input_shape(), seed)?;
        let file = out.join(format!("{ckpt_id}_{seed}.ppm"));
        io::write_ppm(&file, &RgbImage::from_tensor(&x)?)?;
        log(&format!("seed {seed}: {}", file.display()));
        records.push(SampleRecord {
            seed,
            file: file.strip_prefix(&cfg.run.out).unwrap_or(&file).display().to_string(),
            checkpoint: ckpt_id.clone(),
            fusion_mode: mode,
            sampler: sc.kind.as_str().into(),
            steps: sc.steps,
            guidance_scale: sc.guidance.scale,
            caption: cfg.sample.caption.clone(),
            garments: garments.iter().map(|g| g.1.clone()).collect(),
        });
        files.push(file);
    }
    let manifest = out.join("manifest.json");
    io::write_json(&manifest, &records)?;
    files.push(manifest);
    files.push(echo_config(cfg, "sample")?);
    update_index(&cfg.run.out, "sample", &files)?;
    Ok(records)
}

/// Generates `eval.seeds_per_sample` images per held-out sample and scores
/// them against the sample's garments. Images go under `image_dir`.
pub fn evaluate(cfg: &RunConfig, models: &Models<f32>, samples: &[TripletSample], image_dir: &Path, log: Log) -> CliResult<FidelityReport> {
    let schedule = cfg.noise_schedule()?;
    let sc = sampler_config(cfg);
    let ckpt_id = models.checkpoint_id();
    let layout = BodyLayout;
    let mut scores = Vec::new();
    for s in samples {
        let tensors: Vec<_> = s.garments.iter().map(|(img, spec)| (spec.category, img.to_tensor::<f32>())).collect();
        let refs: Vec<_> = tensors.iter().map(|(c, t)| (*c, t)).collect();
        let set = models.encode_garments_with_id(&ckpt_id, &refs)?;
        let cond = Conditioning::from_features(s.tokens.clone(), set, &models.net)?;
        for k in 0..cfg.eval.seeds_per_sample {
            let seed = cfg.eval_seed(s.id, k);
            let x = sampler::sample(models, &cond, &schedule, &sc, &models.net.input_shape(), seed)?;
            let img = RgbImage::from_tensor(&x)?;
            io::write_ppm(&image_dir.join(format!("{}_{k}.ppm", s.id)), &img)?;
            scores.push(score_sample(&img, &s.specs(), &layout, s.id, seed)?);
        }
    }
    let report = FidelityReport::new(
        ReportContext {
            mode: models.net.fusion.mode,
            checkpoint: ckpt_id,
            sampler: sc.kind.as_str().into(),
            sampling_steps: sc.steps,
            guidance_scale: sc.guidance.scale,
        },
        scores,
    );
    log(&format!(
        "{}: mean fidelity {:.3}, mean leakage {:.4}",
        report.mode, report.mean_fidelity, report.mean_leakage
    ));
    Ok(report)
}

/// `report.json` body: the report plus provenance of the guidance scale.
#[derive(Serialize, Deserialize)]
pub struct ReportFile {
    #[serde(flatten)]
    pub report: FidelityReport,
    pub guidance_scale_source: String,
}

pub fn write_report(path: &Path, report: &FidelityReport) -> CliResult<()> {
    io::write_json(
        path,
        &ReportFile {
            report: report.clone(),
            guidance_scale_source: "default (not tuned)".into(),
        },
    )
}

pub fn eval(cfg: &RunConfig, log: Log) -> CliResult<FidelityReport> {
    let path = cfg
        .eval
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("eval needs eval.checkpoint (--checkpoint)".into()))?;
    let models = load_checkpoint(cfg, cfg.fusion.mode, path)?;
    let samples = dataset::load_split(&cfg.dataset_dir(), EVAL_SPLIT, None)?;
    let dir = cfg.run.out.join("eval");
    let report = evaluate(cfg, &models, &samples, &dir.join("images"), log)?;
    let rp = dir.join("report.json");
    write_report(&rp, &report)?;
    update_index(&cfg.run.out, "eval", &[rp, echo_config(cfg, "eval")?])?;
    Ok(report)
}

pub struct AblationRun {
    pub report: AblationReport,
    pub runs: Vec<FidelityReport>,
    pub curves: Vec<(FusionMode, Vec<EpochRecord>)>,
}

/// Trains and evaluates every configured mode with identical seeds and
/// budgets, then compares them.
pub fn ablate(cfg: &RunConfig, log: Log) -> CliResult<AblationRun> {
    let root = cfg.run.out.join("ablation");
    let samples = dataset::load_split(&cfg.dataset_dir(), EVAL_SPLIT, None)?;
    let mut runs = Vec::new();
    let mut curves = Vec::new();
    let mut files = Vec::new();
    for &mode in &cfg.ablate_modes {
        let dir = root.join(mode.as_str());
        let run = train_mode(cfg, mode, &dir.join("train"), log)?;
        let report = evaluate(cfg, &run.models, &samples, &dir.join("images"), log)?;
        let rp = dir.join("report.json");
        write_report(&rp, &report)?;
        files.extend(run.files);
        files.push(rp);
        runs.push(report);
        curves.push((mode, run.curve));
    }
    let report = ablation_report(&runs)?;
    let json = root.join("report.json");
    io::write_json(&json, &report)?;
    let table = root.join("report.txt");
    io::write_atomic(&table, report.table().as_bytes())?;
    log(&report.table());
    files.extend([json, table, echo_config(cfg, "ablate")?]);
    update_index(&cfg.run.out, "ablate", &files)?;
    Ok(AblationRun { report, runs, curves })
}
