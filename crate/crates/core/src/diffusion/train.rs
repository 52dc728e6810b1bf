use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::guidance::GuidanceConfig;
use super::model::Models;
use super::schedule::{q_sample, NoiseSchedule};
use crate::checkpoint::Record;
use crate::encoder::{self, GarmentCategory, T_REF};
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::params::ParamStore;
use crate::rng::{derive_seed, normal_tensor, seeded};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::unet::Ctx;

/// Desk-scale training defaults.
pub const DESK_EPOCHS: usize = 40;
pub const DESK_BATCH: usize = 8;
pub const DESK_LR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    Single,
    Multi,
}

impl TrainStage {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainStage::Single => "single",
            TrainStage::Multi => "multi",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(TrainStage::Single),
            "multi" => Ok(TrainStage::Multi),
            other => Err(Error::Invalid(format!("unknown stage {other:?} (expected single or multi)"))),
        }
    }

    /// Garments per example this stage trains on.
    pub fn garments(self) -> usize {
        match self {
            TrainStage::Single => 1,
            TrainStage::Multi => 2,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            TrainStage::Single => 0,
            TrainStage::Multi => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(TrainStage::Single),
            1 => Ok(TrainStage::Multi),
            other => Err(Error::Invalid(format!("unknown stage code {other}"))),
        }
    }
}

impl core::fmt::Display for TrainStage {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One supervised triplet in tensor form.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample<E> {
    pub id: u64,
    pub tokens: Vec<usize>,
    pub garments: Vec<(GarmentCategory, Tensor<E>)>,
    pub target: Tensor<E>,
}

/// Which conditions were dropped for one training draw.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Drops {
    pub text: bool,
    /// Parallel to the example's garments.
    pub garments: Vec<bool>,
}

impl Drops {
    /// Draws a joint drop with `p_drop_all`, otherwise the text and each
    /// garment independently. Always consumes `2 + garments` uniforms.
    pub fn draw<R: Rng>(guidance: &GuidanceConfig, garments: usize, rng: &mut R) -> Self {
        let all = rng.random::<f64>() < guidance.p_drop_all;
        let text = rng.random::<f64>() < guidance.p_text;
        let per: Vec<bool> = (0..garments).map(|_| rng.random::<f64>() < guidance.p_garment).collect();
        if all {
            Self {
                text: true,
                garments: vec![true; garments],
            }
        } else {
            Self { text, garments: per }
        }
    }
}

/// An example after forward noising, as seen by the model under training.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedExample<'a, E> {
    pub example: &'a TrainExample<E>,
    pub t: usize,
    pub eps: Tensor<E>,
    pub x_t: Tensor<E>,
    pub drops: Drops,
}

impl<E> NoisedExample<'_, E> {
    /// Caption tokens after dropping (empty is the NULL caption).
    pub fn tokens(&self) -> &[usize] {
        if self.drops.text {
            &[]
        } else {
            &self.example.tokens
        }
    }

    /// Garments that survived dropping.
    pub fn kept_garments(&self) -> impl Iterator<Item = &(GarmentCategory, Tensor<E>)> {
        self.example
            .garments
            .iter()
            .zip(&self.drops.garments)
            .filter(|(_, &d)| !d)
            .map(|(g, _)| g)
    }
}

/// A differentiable epsilon predictor.
pub trait Denoiser<E: Scalar> {
    fn predict_on_tape(&mut self, tape: &mut Tape<E>, ex: &NoisedExample<E>) -> Result<Var>;

    /// Moves parameter gradients recorded on `tape` into the parameter stores.
    fn collect_grads(&mut self, _tape: &Tape<E>) {}
}

/// Mean epsilon-prediction MSE over `batch`. Each sample draws its step,
/// noise and drops from its own stream seeded off `rng`. Gradients of the
/// batch mean are accumulated through [`Denoiser::collect_grads`].
pub fn training_loss<E: Scalar, D: Denoiser<E> + ?Sized, R: RngCore>(
    batch: &[TrainExample<E>],
    model: &mut D,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    guidance.validate()?;
    let inv_b = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for example in batch {
        let mut r = seeded(rng.next_u64());
        let t = r.random_range(0..schedule.steps());
        let eps = normal_tensor::<E, _>(example.target.shape(), &mut r);
        let drops = Drops::draw(guidance, example.garments.len(), &mut r);
        let x_t = q_sample(&example.target, t, &eps, schedule)?;
        let noised = NoisedExample {
            example,
            t,
            eps,
            x_t,
            drops,
        };
        let mut tape = Tape::new();
        let pred = model.predict_on_tape(&mut tape, &noised)?;
        let target = tape.constant(noised.eps.clone())?;
        let loss = tape.mse(pred, target)?;
        let value = tape.value(loss).data()[0].to_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        total += value;
        if tape.requires_grad(loss) {
            tape.backward_with(loss, Tensor::scalar(E::from_f64(inv_b)))?;
            model.collect_grads(&tape);
        }
    }
    Ok(total * inv_b)
}

/// Training view over [`Models`]: garments run through the encoder on the
/// same tape, so the loss reaches the encoder and fusion parameters.
pub struct TrainModels<'a, E> {
    pub models: &'a mut Models<E>,
    pub freeze_denoiser: bool,
}

impl<E: Scalar> Denoiser<E> for TrainModels<'_, E> {
    fn predict_on_tape(&mut self, tape: &mut Tape<E>, ex: &NoisedExample<E>) -> Result<Var> {
        let m = &*self.models;
        let mut refs = Vec::new();
        for (category, image) in ex.kept_garments() {
            let x = tape.constant(image.clone())?;
            refs.push(encoder::encode_on_tape(&m.net, &m.encoder, tape, true, *category, x, T_REF)?);
        }
        let mut ctx = Ctx::new(tape, &m.denoiser, !self.freeze_denoiser);
        let x = ctx.tape.constant(ex.x_t.clone())?;
        let text = m.net.embed_caption(&mut ctx, ex.tokens())?;
        m.net.forward(&mut ctx, x, ex.t, text, &refs)
    }

    fn collect_grads(&mut self, tape: &Tape<E>) {
        if !self.freeze_denoiser {
            tape.accumulate_param_grads(&mut self.models.denoiser);
        }
        tape.accumulate_param_grads(&mut self.models.encoder);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStageConfig {
    pub stage: TrainStage,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub freeze_denoiser: bool,
    pub fusion_mode: FusionMode,
    pub seed: u64,
    /// Refuse a multi stage on models without a completed single stage.
    pub require_single: bool,
}

impl TrainStageConfig {
    pub fn desk(stage: TrainStage, fusion_mode: FusionMode, seed: u64) -> Self {
        Self {
            stage,
            epochs: DESK_EPOCHS,
            batch_size: DESK_BATCH,
            lr: DESK_LR,
            freeze_denoiser: false,
            fusion_mode,
            seed,
            require_single: true,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            ..AdamWConfig::default()
        }
    }
}

/// Optimizer state for both parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers<E> {
    pub denoiser: AdamWState<E>,
    pub encoder: AdamWState<E>,
}

/// Resumable state of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageProgress<E> {
    pub stage: TrainStage,
    pub epochs_done: usize,
    /// Mean loss per completed epoch.
    pub losses: Vec<f64>,
    pub opt: Optimizers<E>,
}

impl<E: Scalar> StageProgress<E> {
    pub fn new(cfg: &TrainStageConfig, models: &Models<E>) -> Self {
        Self {
            stage: cfg.stage,
            epochs_done: 0,
            losses: Vec::new(),
            opt: Optimizers {
                denoiser: AdamWState::new(cfg.adamw(), &models.denoiser),
                encoder: AdamWState::new(cfg.adamw(), &models.encoder),
            },
        }
    }

    /// Records for the loss curve and moment buffers, for resuming.
    pub fn records(&self, prefix: &str) -> Vec<Record> {
        let mut out = vec![
            Record {
                name: format!("{prefix}stage"),
                shape: vec![1],
                data: vec![self.stage.code() as f32],
            },
            Record {
                name: format!("{prefix}epochs_done"),
                shape: vec![1],
                data: vec![self.epochs_done as f32],
            },
            // Four 16-bit chunks per loss keep the f64 bits exact in f32 storage.
            Record {
                name: format!("{prefix}losses"),
                shape: vec![self.losses.len(), 4],
                data: self
                    .losses
                    .iter()
                    .flat_map(|l| {
                        let b = l.to_bits();
                        [48, 32, 16, 0].map(|s| ((b >> s) & 0xFFFF) as f32)
                    })
                    .collect(),
            },
        ];
        for (name, st) in [("denoiser", &self.opt.denoiser), ("encoder", &self.opt.encoder)] {
            out.push(Record {
                name: format!("{prefix}{name}.step"),
                shape: vec![2],
                data: vec![(st.step >> 20) as f32, (st.step & 0xF_FFFF) as f32],
            });
            for (i, (m, v)) in st.m.iter().zip(&st.v).enumerate() {
                for (kind, buf) in [("m", m), ("v", v)] {
                    out.push(Record {
                        name: format!("{prefix}{name}.{kind}.{i}"),
                        shape: vec![buf.len()],
                        data: buf.iter().map(|x| x.to_f64() as f32).collect(),
                    });
                }
            }
        }
        out
    }

    /// Restores state written by [`StageProgress::records`]; the optimizer
    /// configuration comes from `cfg`.
    pub fn from_records(cfg: &TrainStageConfig, models: &Models<E>, prefix: &str, records: &[Record]) -> Result<Self> {
        let get = |name: String| -> Result<&Record> {
            records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::Architecture(format!("progress lacks {name}")))
        };
        let mut p = Self::new(cfg, models);
        let stage = TrainStage::from_code(get(format!("{prefix}stage"))?.data[0] as u32)?;
        if stage != cfg.stage {
            return Err(Error::StageMismatch {
                stage: cfg.stage.as_str(),
                reason: format!("saved progress belongs to stage {stage}"),
            });
        }
        p.epochs_done = get(format!("{prefix}epochs_done"))?.data[0] as usize;
        p.losses = get(format!("{prefix}losses"))?
            .data
            .chunks_exact(4)
            .map(|c| f64::from_bits(c.iter().fold(0u64, |acc, &x| (acc << 16) | x as u64)))
            .collect();
        for (name, st) in [("denoiser", &mut p.opt.denoiser), ("encoder", &mut p.opt.encoder)] {
            let s = &get(format!("{prefix}{name}.step"))?.data;
            st.step = ((s[0] as u64) << 20) | s[1] as u64;
            for i in 0..st.m.len() {
                for (kind, buf) in [("m", &mut st.m[i]), ("v", &mut st.v[i])] {
                    let r = get(format!("{prefix}{name}.{kind}.{i}"))?;
                    if r.data.len() != buf.len() {
                        return Err(Error::Architecture(format!("{prefix}{name}.{kind}.{i} has the wrong length")));
                    }
                    for (d, &s) in buf.iter_mut().zip(&r.data) {
                        *d = E::from_f64(s as f64);
                    }
                }
            }
        }
        Ok(p)
    }
}

/// One completed epoch, as written to the loss curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub stage: TrainStage,
    pub fusion_mode: FusionMode,
    pub seed: u64,
}

fn check_stage<E: Scalar>(data: &[TrainExample<E>], cfg: &TrainStageConfig, models: &Models<E>) -> Result<()> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    if cfg.fusion_mode != models.net.fusion.mode {
        return Err(Error::FusionModeMismatch {
            cached: cfg.fusion_mode.as_str(),
            current: models.net.fusion.mode.as_str(),
        });
    }
    let want = cfg.stage.garments();
    if let Some(bad) = data.iter().find(|e| e.garments.len() != want) {
        return Err(Error::StageMismatch {
            stage: cfg.stage.as_str(),
            reason: format!("sample {} has {} garments, expected {want}", bad.id, bad.garments.len()),
        });
    }
    if cfg.stage == TrainStage::Multi && cfg.require_single && !models.stages_done.contains(&TrainStage::Single) {
        return Err(Error::StageMismatch {
            stage: cfg.stage.as_str(),
            reason: "models have not completed a single-garment stage".into(),
        });
    }
    Ok(())
}

/// Fisher-Yates permutation of `0..n`, a pure function of `seed`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeded(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn restore<E: Scalar>(models: &mut Models<E>, denoiser: ParamStore<E>, encoder: ParamStore<E>) {
    models.denoiser = denoiser;
    models.encoder = encoder;
}

/// Runs the remaining epochs of a stage, calling `on_epoch` after each one.
///
/// A non-finite loss or gradient aborts with [`Error::NonFiniteLoss`] and
/// leaves `models` and `progress` as they were after the last good epoch.
pub fn train_stage<E: Scalar, F>(
    data: &[TrainExample<E>],
    cfg: &TrainStageConfig,
    models: &mut Models<E>,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    progress: &mut StageProgress<E>,
    mut on_epoch: F,
) -> Result<()>
where
    F: FnMut(&EpochRecord, &Models<E>, &StageProgress<E>) -> Result<()>,
{
    check_stage(data, cfg, models)?;
    if progress.stage != cfg.stage {
        return Err(Error::StageMismatch {
            stage: cfg.stage.as_str(),
            reason: format!("progress belongs to stage {}", progress.stage),
        });
    }
    while progress.epochs_done < cfg.epochs {
        let epoch = progress.epochs_done;
        let saved = (models.denoiser.clone(), models.encoder.clone(), progress.opt.clone());
        let order = shuffled_indices(data.len(), derive_seed(cfg.seed, &[cfg.stage.code() as u64, epoch as u64]));
        let mut sum = 0.0;
        let mut batches = 0usize;
        let mut result = Ok(());
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainExample<E>> = chunk.iter().map(|&i| data[i].clone()).collect();
            let mut rng = seeded(derive_seed(cfg.seed, &[cfg.stage.code() as u64, epoch as u64, b as u64]));
            models.denoiser.zero_grad();
            models.encoder.zero_grad();
            let step = (|| {
                let mut view = TrainModels {
                    models: &mut *models,
                    freeze_denoiser: cfg.freeze_denoiser,
                };
                let loss = training_loss(&batch, &mut view, schedule, guidance, &mut rng)?;
                adamw_step(&mut models.encoder, &mut progress.opt.encoder)?;
                if !cfg.freeze_denoiser {
                    adamw_step(&mut models.denoiser, &mut progress.opt.denoiser)?;
                }
                Ok(loss)
            })();
            match step {
                Ok(l) => {
                    sum += l;
                    batches += 1;
                }
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        let mean = sum / batches.max(1) as f64;
        if let Err(e) = result.and_then(|()| {
            if mean.is_finite() {
                Ok(())
            } else {
                Err(Error::NonFinite { op: "epoch loss" })
            }
        }) {
            restore(models, saved.0, saved.1);
            progress.opt = saved.2;
            return Err(match e {
                Error::NonFinite { .. } | Error::NonFiniteGradient(_) => Error::NonFiniteLoss { epoch },
                other => other,
            });
        }
        progress.losses.push(mean);
        progress.epochs_done += 1;
        if progress.epochs_done == cfg.epochs && !models.stages_done.contains(&cfg.stage) {
            models.stages_done.push(cfg.stage);
        }
        let record = EpochRecord {
            epoch,
            loss: mean,
            stage: cfg.stage,
            fusion_mode: cfg.fusion_mode,
            seed: cfg.seed,
        };
        on_epoch(&record, models, progress)?;
    }
    Ok(())
}
