//! Guidance algebra, sampler identities and training-time invariants.

mod common;

use garmentfuse_core::diffusion::guidance::{cfg_predict, GuidanceConfig};
use garmentfuse_core::diffusion::model::{assert_same_params, Conditioning, Models};
use garmentfuse_core::diffusion::sampler::{ddim_sample, ddim_step, ddpm_sample, predict_x0, timesteps};
use garmentfuse_core::diffusion::schedule::{q_sample, NoiseSchedule};
use garmentfuse_core::diffusion::train::{
    train_stage, training_loss, StageProgress, TrainExample, TrainModels, TrainStage, TrainStageConfig,
};
use garmentfuse_core::fusion::FusionMode;
use garmentfuse_core::rng::{normal_tensor, seeded};
use garmentfuse_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn conditioned(models: &Models<f32>, seed: u64) -> Conditioning<f32> {
    let garments = common::two_garments::<f32>(seed);
    let refs: Vec<_> = garments.iter().map(|(c, t)| (*c, t)).collect();
    let set = models.encode_garments(&refs).unwrap();
    Conditioning::from_features(vec![2, 4, 6], set, &models.net).unwrap()
}

fn max_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.max_abs_diff(b)
}

fn examples(n: u64, seed: u64) -> Vec<TrainExample<f32>> {
    (0..n)
        .map(|id| TrainExample {
            id,
            tokens: vec![1, 3],
            garments: common::two_garments(seed + 10 * id),
            target: common::image(seed + 10 * id + 5),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn guidance_endpoints_and_affinity(seed in any::<u64>(), s1 in 0.0f64..8.0, s2 in 0.0f64..8.0, lambda in 0.0f64..1.0) {
        let models = common::tiny_models::<f32>(FusionMode::Addition, seed);
        let cond = conditioned(&models, seed);
        let x = common::image::<f32>(seed ^ 1);
        let t = seeded(seed).random_range(0..1000);
        let at = |s: f64| {
            let g = GuidanceConfig { scale: s, ..Default::default() };
            cfg_predict(&models, &x, t, &cond, &g).unwrap()
        };
        use garmentfuse_core::diffusion::model::EpsModel;
        prop_assert!(max_diff(&at(1.0), &models.predict(&x, t, &cond).unwrap()) <= 1e-6);
        prop_assert!(max_diff(&at(0.0), &models.predict(&x, t, &Conditioning::null()).unwrap()) <= 1e-6);
        let mix = at(lambda * s1 + (1.0 - lambda) * s2);
        let (a, b) = (at(s1), at(s2));
        let expected = a.scale(lambda as f32).axpy((1.0 - lambda) as f32, &b).unwrap();
        prop_assert!(max_diff(&mix, &expected) <= 1e-5);
    }

    /// With the true noise, the x0 estimate inverts q_sample and a DDIM step
    /// lands on q_sample at the previous step.
    #[test]
    fn ddim_inversion_with_oracle_noise(seed in any::<u64>(), steps in 1usize..50) {
        let schedule = NoiseSchedule::default();
        let mut rng = seeded(seed);
        let x0: Tensor<f64> = normal_tensor(&[1, 3, 4, 4], &mut rng);
        let eps: Tensor<f64> = normal_tensor(&[1, 3, 4, 4], &mut rng);
        let ts = timesteps(schedule.steps(), steps).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let x_t = q_sample(&x0, t, &eps, &schedule).unwrap();
            let x0_hat = predict_x0(&x_t, &eps, schedule.alpha_bars[t]).unwrap();
            prop_assert!(x0_hat.max_abs_diff(&x0) <= 1e-5);
            let prev = (i > 0).then(|| ts[i - 1]);
            let next = ddim_step(&x_t, &eps, schedule.alpha_bars[t], schedule.alpha_bar_at(prev)).unwrap();
            let expected = match prev {
                Some(p) => q_sample(&x0, p, &eps, &schedule).unwrap(),
                None => x0.clone(),
            };
            prop_assert!(next.max_abs_diff(&expected) <= 1e-5);
        }
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let models = common::tiny_models::<f32>(FusionMode::ConcatKv, 3);
    let cond = conditioned(&models, 3);
    let schedule = NoiseSchedule::default();
    let g = GuidanceConfig::default();
    let shape = models.net.input_shape();
    let a = ddim_sample(&models, &cond, &schedule, 5, &g, &shape, 11).unwrap();
    let b = ddim_sample(&models, &cond, &schedule, 5, &g, &shape, 11).unwrap();
    let c = ddim_sample(&models, &cond, &schedule, 5, &g, &shape, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let a = ddpm_sample(&models, &cond, &schedule, 5, &g, &shape, 11).unwrap();
    let b = ddpm_sample(&models, &cond, &schedule, 5, &g, &shape, 11).unwrap();
    assert_eq!(a, b);
}

/// Empirical mean and variance of `x_t` for fixed `x0` match
/// `√ᾱ·x0` and `1-ᾱ` within three standard errors over 10⁵ draws.
#[test]
fn q_sample_marginals_match_monte_carlo() {
    const N: usize = 100_000;
    let schedule = NoiseSchedule::default();
    for (i, &t) in [0usize, 250, 500, 999].iter().enumerate() {
        let x0 = Tensor::<f64>::full(&[N], 0.6);
        let eps: Tensor<f64> = normal_tensor(&[N], &mut seeded(40 + i as u64));
        let x = q_sample(&x0, t, &eps, &schedule).unwrap();
        let want_mean = schedule.sqrt_alpha_bars[t] * 0.6;
        let want_var = 1.0 - schedule.alpha_bars[t];
        let mean = x.data().iter().sum::<f64>() / N as f64;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (N - 1) as f64;
        let se_mean = (want_var / N as f64).sqrt();
        // Variance of a Gaussian sample variance: 2σ⁴/(N-1).
        let se_var = want_var * (2.0 / (N - 1) as f64).sqrt();
        assert!((mean - want_mean).abs() <= 3.0 * se_mean, "t={t}: mean {mean} vs {want_mean}");
        assert!((var - want_var).abs() <= 3.0 * se_var, "t={t}: var {var} vs {want_var}");
    }
}

#[test]
fn dropping_every_garment_leaves_encoder_gradients_zero() {
    let mut models = common::tiny_models::<f32>(FusionMode::Addition, 9);
    let data = examples(4, 70);
    let g = GuidanceConfig {
        p_garment: 1.0,
        ..Default::default()
    };
    let schedule = NoiseSchedule::default();
    models.encoder.zero_grad();
    models.denoiser.zero_grad();
    let mut tm = TrainModels {
        models: &mut models,
        freeze_denoiser: false,
    };
    training_loss(&data, &mut tm, &schedule, &g, &mut seeded(1)).unwrap();
    assert_eq!(models.encoder.grad_norm(), 0.0);
    assert!(models.denoiser.grad_norm() > 0.0);
    // The same batch with garments kept does reach the encoder.
    models.encoder.zero_grad();
    let mut tm = TrainModels {
        models: &mut models,
        freeze_denoiser: false,
    };
    let keep = GuidanceConfig {
        p_garment: 0.0,
        p_drop_all: 0.0,
        ..Default::default()
    };
    training_loss(&data, &mut tm, &schedule, &keep, &mut seeded(1)).unwrap();
    assert!(models.encoder.grad_norm() > 0.0);
}

fn stage_cfg(stage: TrainStage, mode: FusionMode) -> TrainStageConfig {
    TrainStageConfig {
        epochs: 2,
        batch_size: 2,
        ..TrainStageConfig::desk(stage, mode, 5)
    }
}

fn train_single(models: &mut Models<f32>, cfg: &TrainStageConfig, data: &[TrainExample<f32>]) -> Vec<f64> {
    let mut progress = StageProgress::new(cfg, models);
    let schedule = NoiseSchedule::default();
    train_stage(data, cfg, models, &schedule, &GuidanceConfig::default(), &mut progress, |_, _, _| Ok(())).unwrap();
    progress.losses
}

#[test]
fn frozen_denoiser_stays_bitwise_constant() {
    let data: Vec<_> = examples(4, 90).into_iter().map(|mut e| {
        e.garments.truncate(1);
        e
    }).collect();
    let mut models = common::tiny_models::<f32>(FusionMode::Addition, 4);
    let before = models.clone();
    let cfg = TrainStageConfig {
        freeze_denoiser: true,
        ..stage_cfg(TrainStage::Single, FusionMode::Addition)
    };
    train_single(&mut models, &cfg, &data);
    assert_same_params(&before.denoiser, &models.denoiser).unwrap();
    assert!(assert_same_params(&before.encoder, &models.encoder).is_err());
}

#[test]
fn training_is_bitwise_reproducible() {
    let data: Vec<_> = examples(4, 95).into_iter().map(|mut e| {
        e.garments.truncate(1);
        e
    }).collect();
    let cfg = stage_cfg(TrainStage::Single, FusionMode::Naive);
    let mut a = common::tiny_models::<f32>(FusionMode::Naive, 8);
    let mut b = a.clone();
    let la = train_single(&mut a, &cfg, &data);
    let lb = train_single(&mut b, &cfg, &data);
    assert_eq!(la, lb);
    assert_eq!(a, b);
    assert_eq!(a.checkpoint_id(), b.checkpoint_id());
}

#[test]
fn progress_records_round_trip_exactly() {
    let data: Vec<_> = examples(4, 97).into_iter().map(|mut e| {
        e.garments.truncate(1);
        e
    }).collect();
    let cfg = stage_cfg(TrainStage::Single, FusionMode::Addition);
    let mut models = common::tiny_models::<f32>(FusionMode::Addition, 9);
    let mut progress = StageProgress::new(&cfg, &models);
    let schedule = NoiseSchedule::default();
    train_stage(&data, &cfg, &mut models, &schedule, &GuidanceConfig::default(), &mut progress, |_, _, _| Ok(())).unwrap();
    // A loss whose f64 bits do not survive a round trip through f32.
    progress.losses.push(1.0 + f64::EPSILON);
    let back = StageProgress::from_records(&cfg, &models, "p.", &progress.records("p.")).unwrap();
    assert_eq!(back, progress);
}
