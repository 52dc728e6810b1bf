//! Acceptance suite. Prints one PASS/FAIL line per criterion with the
//! measured value and its pinned threshold.
//!
//! Criteria 7 and 8 are empirical outcomes of training. They are reported
//! but only fail the process when `GARMENTFUSE_ACCEPTANCE_STRICT=1`. Every
//! other criterion is a correctness property and always gates.
//!
//! The full desk ablation (criteria 7 and 8) runs under
//! `$CARGO_TARGET_TMPDIR/acceptance/full` and resumes from whatever is on
//! disk there; `GARMENTFUSE_ACCEPTANCE_FRESH=1` discards it first. Positional
//! arguments select criteria by number.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use garmentfuse::cli::main_with_args;
use garmentfuse::ppm::{read_ppm, write_ppm};
use garmentfuse_core::checkpoint::{self, Record};
use garmentfuse_core::diffusion::guidance::{cfg_predict, GuidanceConfig};
use garmentfuse_core::diffusion::model::{Conditioning, EpsModel, Models};
use garmentfuse_core::diffusion::sampler::{ddim_sample, ddim_step, ddpm_sample, predict_x0, timesteps};
use garmentfuse_core::diffusion::schedule::{q_sample, NoiseSchedule};
use garmentfuse_core::encoder::{encode_on_tape, GarmentCategory, T_REF};
use garmentfuse_core::fusion::{self, FusionConfig, FusionMode, FusionProjections, RefTokens};
use garmentfuse_core::gradcheck::{all_probes, grad_check, sample_probes, GradCheckReport};
use garmentfuse_core::params::ParamStore;
use garmentfuse_core::rng::{normal_tensor, seeded};
use garmentfuse_core::synth::image::RgbImage;
use garmentfuse_core::unet::{Ctx, UNetConfig};
use garmentfuse_core::{Result, Scalar, Tape, Tensor, Var};
use rand::{Rng, RngCore};

// Criterion 1.
const GRAD_H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(300);
// Criteria 2 to 6.
const PROPERTY_CASES: u64 = 64;
const PERMUTATION_TOL: f64 = 1e-6;
const LINEARITY_TOL: f64 = 1e-6;
const LSE_TOL: f64 = 1e-5;
const LOGIT_OFFSET: f64 = 10.0;
const COUPLING_MIN_SHIFT: f64 = 1e-3;
const GUIDANCE_ENDPOINT_TOL: f64 = 1e-6;
const GUIDANCE_AFFINE_TOL: f64 = 1e-5;
const MONTE_CARLO_DRAWS: usize = 100_000;
const MONTE_CARLO_SIGMAS: f64 = 3.0;
const DDIM_INVERSION_TOL: f64 = 1e-5;
// Criterion 7.
const SMOKE_REDUCTION: f64 = 0.30;
const FULL_REDUCTION: f64 = 0.50;
const TRAIN_BUDGET: Duration = Duration::from_secs(3600);
// Criterion 8.

fn mark(ok: bool) -> &'static str {
    if ok {
        "[met]"
    } else {
        "[missed]"
    }
}
const ABLATION_GAP: f64 = 0.10;
const ABLATION_BUDGET: Duration = Duration::from_secs(3 * 3600);
// Criterion 10.
const ROUND_TRIP_CASES: u64 = 128;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Number, name, whether a failure gates, and the check.
type Criterion = (usize, &'static str, bool, fn(&Path) -> Outcome);

fn main() {
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var("GARMENTFUSE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let criteria: [Criterion; 10] = [
        (1, "gradient correctness", true, gradients),
        (2, "fusion reduction", true, reduction),
        (3, "decoupling invariants", true, decoupling),
        (4, "coupling witness", true, coupling),
        (5, "guidance algebra", true, guidance),
        (6, "diffusion correctness", true, diffusion),
        (7, "training dynamics", false, training),
        (8, "ablation ranking", false, ablation),
        (9, "reproducibility", true, reproducibility),
        (10, "format round-trips", true, round_trips),
    ];
    let mut gating_failures = Vec::new();
    let mut reported_failures = Vec::new();
    for (n, name, gating, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let o = f(&root);
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n:>2} {verdict} {name}: {} [{:.1} s]",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass {
            if gating || strict {
                gating_failures.push(n);
            } else {
                reported_failures.push(n);
            }
        }
    }
    if !reported_failures.is_empty() {
        println!("empirical criteria below threshold (reported, not gating): {reported_failures:?}");
    }
    if !gating_failures.is_empty() {
        println!("gating criteria failed: {gating_failures:?}");
        std::process::exit(1);
    }
}

// Shared fixtures.

fn tiny_config() -> UNetConfig {
    UNetConfig {
        height: 8,
        width: 8,
        base_width: 8,
        channel_mult: vec![1, 2],
        attention: vec![true, true],
        groups: 4,
        text_dim: 4,
        time_dim: 8,
        ..Default::default()
    }
}

/// Every parameter jittered so zero-initialized output projections do not
/// hide the attention paths.
fn tiny_models<E: Scalar>(mode: FusionMode, seed: u64, jitter: f64) -> Models<E> {
    let fusion = FusionConfig {
        mode,
        ..Default::default()
    };
    let mut m = Models::new(tiny_config(), fusion, seed).unwrap();
    m.denoiser.jitter(jitter, &mut seeded(seed ^ 0xD));
    m.encoder.jitter(jitter, &mut seeded(seed ^ 0xE));
    m
}

fn image<E: Scalar>(seed: u64) -> Tensor<E> {
    let c = tiny_config();
    normal_tensor(&[1, c.in_channels, c.height, c.width], &mut seeded(seed))
}

fn two_garments<E: Scalar>(seed: u64) -> Vec<(GarmentCategory, Tensor<E>)> {
    vec![
        (GarmentCategory::Upper, image(seed)),
        (GarmentCategory::Lower, image(seed + 1)),
    ]
}

fn worst(r: &GradCheckReport) -> f64 {
    r.worst().map_or(0.0, |p| p.rel_error)
}

// Criterion 1.

/// Worst relative error of `sum(f(inputs) ⊙ r)` for a random `r`, so
/// constant-sum outputs such as softmax rows still carry signal.
fn check_op<F>(seed: u64, shapes: &[Vec<usize>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = seeded(seed);
    let mut store = ParamStore::new(0);
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("in{i}"), normal_tensor(s, &mut rng)))
        .collect();
    let out_shape = {
        let mut t = Tape::inference();
        let vars: Vec<_> = ids.iter().map(|&id| t.param(&store, id, false)).collect();
        let o = f(&mut t, &vars).unwrap();
        t.shape(o).to_vec()
    };
    let r: Tensor<f64> = normal_tensor(&out_shape, &mut rng);
    let probes = all_probes(&store);
    let report = grad_check(&mut store, &probes, GRAD_H, GRAD_TOL, |tape, s| {
        let vars: Vec<_> = ids.iter().map(|&id| tape.param(s, id, true)).collect();
        let o = f(tape, &vars)?;
        let rv = tape.constant(r.clone())?;
        let p = tape.mul(o, rv)?;
        tape.sum(p)
    })
    .unwrap();
    worst(&report)
}

fn kernel_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = seeded(seed ^ 0x5EED);
    let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
    let (c, o) = (2 * m, 2 * n);
    vec![
        ("matmul", check_op(seed, &[vec![m, k], vec![k, n]], |t, v| t.matmul(v[0], v[1]))),
        ("matmul_nt", check_op(seed, &[vec![m, k], vec![n, k]], |t, v| t.matmul_nt(v[0], v[1]))),
        ("add", check_op(seed, &[vec![m, n], vec![m, n]], |t, v| t.add(v[0], v[1]))),
        ("mul", check_op(seed, &[vec![m, n], vec![m, n]], |t, v| t.mul(v[0], v[1]))),
        ("add_row_bias", check_op(seed, &[vec![m, n], vec![n]], |t, v| t.add_row_bias(v[0], v[1]))),
        ("scale", check_op(seed, &[vec![m, n]], |t, v| t.scale(v[0], -1.7))),
        ("silu", check_op(seed, &[vec![m, n]], |t, v| t.silu(v[0]))),
        ("softmax", check_op(seed, &[vec![m, n + 1]], |t, v| t.softmax(v[0]))),
        ("mse", check_op(seed, &[vec![m, n], vec![m, n]], |t, v| t.mse(v[0], v[1]))),
        ("sum", check_op(seed, &[vec![m, n]], |t, v| t.sum(v[0]))),
        ("reshape", check_op(seed, &[vec![m, n]], |t, v| t.reshape(v[0], &[n, m]))),
        ("concat_rows", check_op(seed, &[vec![m, n], vec![k, n]], |t, v| t.concat_rows(&[v[0], v[1]]))),
        ("concat_cols", check_op(seed, &[vec![m, n], vec![m, k]], |t, v| t.concat_cols(&[v[0], v[1]]))),
        ("slice_rows", check_op(seed, &[vec![m + 2, n]], |t, v| t.slice_rows(v[0], 1, m))),
        ("slice_cols", check_op(seed, &[vec![m, n + 2]], |t, v| t.slice_cols(v[0], 1, n))),
        ("gather_rows", check_op(seed, &[vec![4, n]], |t, v| t.gather_rows(v[0], &[3, 0, 3, 1]))),
        (
            "concat_channels",
            check_op(seed, &[vec![1, m, 2, 3], vec![1, k, 2, 3]], |t, v| t.concat_channels(&[v[0], v[1]])),
        ),
        ("to_tokens", check_op(seed, &[vec![1, m, 2, n]], |t, v| t.to_tokens(v[0]))),
        ("from_tokens", check_op(seed, &[vec![2 * n, m]], |t, v| t.from_tokens(v[0], 2, n))),
        ("upsample2x", check_op(seed, &[vec![1, m, 2, n]], |t, v| t.upsample2x(v[0]))),
        ("space_to_depth", check_op(seed, &[vec![1, m, 4, 2 * n]], |t, v| t.space_to_depth(v[0], 2))),
        ("depth_to_space", check_op(seed, &[vec![1, 4 * m, 2, n]], |t, v| t.depth_to_space(v[0], 2))),
        (
            "conv2d",
            check_op(seed, &[vec![1, c, 5, 4], vec![o, c, 3, 3], vec![o]], |t, v| {
                t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
            }),
        ),
        (
            "conv2d stride 2",
            check_op(seed, &[vec![1, c, 5, 6], vec![o, c, 3, 3], vec![o]], |t, v| {
                t.conv2d(v[0], v[1], Some(v[2]), 2, 1)
            }),
        ),
        (
            "group_norm",
            check_op(seed, &[vec![1, c, 3, 2], vec![c], vec![c]], |t, v| t.group_norm(v[0], v[1], v[2], 2, 1e-5)),
        ),
        (
            "add_channel_bias",
            check_op(seed, &[vec![1, c, 2, 3], vec![1, c]], |t, v| t.add_channel_bias(v[0], v[1])),
        ),
        (
            "attend",
            check_op(seed, &[vec![n, 4], vec![m, 4], vec![m, 4]], |t, v| fusion::attend(t, v[0], v[1], v[2], 2)),
        ),
    ]
}

/// Noise-prediction loss through two encoded garments, every fusion layer
/// and the denoiser; returns the worst error over denoiser and encoder probes.
fn composite_error(seed: u64) -> f64 {
    let schedule = NoiseSchedule::default();
    let mode = FusionMode::ALL[seed as usize % 3];
    // Strong jitter keeps garment-path gradients above finite-difference roundoff.
    let models = tiny_models::<f64>(mode, seed, 0.3);
    let garments = two_garments::<f64>(100 + seed);
    let x0 = image::<f64>(200 + seed);
    let eps: Tensor<f64> = normal_tensor(x0.shape(), &mut seeded(300 + seed));
    let t = seeded(seed).random_range(0..schedule.steps());
    let x_t = q_sample(&x0, t, &eps, &schedule).unwrap();
    let net = &models.net;
    let loss = |tape: &mut Tape<f64>, den: &ParamStore<f64>, enc: &ParamStore<f64>| -> Result<Var> {
        let mut refs = Vec::new();
        for (c, img) in &garments {
            let x = tape.constant(img.clone())?;
            refs.push(encode_on_tape(net, enc, tape, true, *c, x, T_REF)?);
        }
        let mut ctx = Ctx::new(tape, den, true);
        let x = ctx.tape.constant(x_t.clone())?;
        let text = net.embed_caption(&mut ctx, &[3, 5, 7])?;
        let pred = net.forward(&mut ctx, x, t, text, &refs)?;
        let target = ctx.tape.constant(eps.clone())?;
        ctx.tape.mse(pred, target)
    };
    let mut rng = seeded(400 + seed);
    let mut den = models.denoiser.clone();
    let probes = sample_probes(&den, 2, &mut rng, |_| true);
    let a = grad_check(&mut den, &probes, GRAD_H, GRAD_TOL, |tape, s| loss(tape, s, &models.encoder)).unwrap();
    let mut enc = models.encoder.clone();
    let probes = sample_probes(&enc, 2, &mut rng, |_| true);
    let b = grad_check(&mut enc, &probes, GRAD_H, GRAD_TOL, |tape, s| loss(tape, &models.denoiser, s)).unwrap();
    worst(&a).max(worst(&b))
}

fn gradients(_: &Path) -> Outcome {
    let start = Instant::now();
    let mut worst_kernel = ("", 0.0f64);
    let mut worst_fusion = 0.0f64;
    let mut worst_composite = 0.0f64;
    for seed in 0..GRAD_SEEDS {
        for (name, e) in kernel_errors(seed) {
            if e > worst_kernel.1 {
                worst_kernel = (name, e);
            }
        }
        worst_fusion = worst_fusion.max(fusion_projection_error(seed));
        worst_composite = worst_composite.max(composite_error(seed));
    }
    let elapsed = start.elapsed();
    let worst = worst_kernel.1.max(worst_fusion).max(worst_composite);
    outcome(
        worst < GRAD_TOL && elapsed < GRAD_BUDGET,
        format!(
            "max relative error {worst:.2e} < {GRAD_TOL:e} over {GRAD_SEEDS} seeds (kernels {:.2e} at {}, fusion {worst_fusion:.2e}, composite {worst_composite:.2e}); {:.0} s < {} s",
            worst_kernel.1,
            worst_kernel.0,
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

/// All three modes through their learned projections with two garments.
fn fusion_projection_error(seed: u64) -> f64 {
    let mut worst_err = 0.0f64;
    for mode in FusionMode::ALL {
        let mut rng = seeded(seed);
        let (n, m, c) = (rng.random_range(1..5), rng.random_range(1..5), 4);
        let mut store = ParamStore::new(0);
        let proj = FusionProjections::register(&mut store, "blk", c, 1, false, &mut rng);
        store.jitter(0.3, &mut rng);
        let x: Tensor<f64> = normal_tensor(&[n, c], &mut rng);
        let g1: Tensor<f64> = normal_tensor(&[m, c], &mut rng);
        let g2: Tensor<f64> = normal_tensor(&[m + 1, c], &mut rng);
        let cfg = FusionConfig {
            mode,
            ..Default::default()
        };
        let probes = all_probes(&store);
        let report = grad_check(&mut store, &probes, GRAD_H, GRAD_TOL, |tape, s| {
            let p = proj.vars(tape, s, true);
            let xv = tape.constant(x.clone())?;
            let refs = [
                RefTokens {
                    category: GarmentCategory::Upper,
                    tokens: tape.constant(g1.clone())?,
                },
                RefTokens {
                    category: GarmentCategory::Lower,
                    tokens: tape.constant(g2.clone())?,
                },
            ];
            let o = fusion::fuse(tape, &p, &cfg, xv, &refs)?;
            let sq = tape.mul(o, o)?;
            tape.sum(sq)
        })
        .unwrap();
        worst_err = worst_err.max(worst(&report));
    }
    worst_err
}

// Criteria 2 to 4.

struct FusionCase<E> {
    store: ParamStore<E>,
    proj: FusionProjections,
    x: Tensor<E>,
    g1: Tensor<E>,
    g2: Tensor<E>,
}

fn fusion_case<E: Scalar>(seed: u64, per_garment_kv: bool) -> FusionCase<E> {
    let mut rng = seeded(seed);
    let c = [2, 4, 8][rng.random_range(0..3)];
    let (n, m1, m2) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..7));
    let mut store = ParamStore::new(0);
    let proj = FusionProjections::register(&mut store, "blk", c, 1, per_garment_kv, &mut rng);
    store.jitter(0.5, &mut rng);
    FusionCase {
        store,
        proj,
        x: normal_tensor(&[n, c], &mut rng),
        g1: normal_tensor(&[m1, c], &mut rng),
        g2: normal_tensor(&[m2, c], &mut rng),
    }
}

const U: GarmentCategory = GarmentCategory::Upper;
const L: GarmentCategory = GarmentCategory::Lower;

fn ref_tokens<E: Scalar>(tape: &mut Tape<E>, garments: &[(GarmentCategory, &Tensor<E>)]) -> Vec<RefTokens> {
    garments
        .iter()
        .map(|(category, t)| RefTokens {
            category: *category,
            tokens: tape.constant((*t).clone()).unwrap(),
        })
        .collect()
}

fn fused<E: Scalar>(k: &FusionCase<E>, mode: FusionMode, garments: &[(GarmentCategory, &Tensor<E>)]) -> Vec<E> {
    let mut tape = Tape::inference();
    let p = k.proj.vars(&mut tape, &k.store, false);
    let x = tape.constant(k.x.clone()).unwrap();
    let r = ref_tokens(&mut tape, garments);
    let cfg = FusionConfig {
        mode,
        ..Default::default()
    };
    let o = fusion::fuse(&mut tape, &p, &cfg, x, &r).unwrap();
    tape.value(o).data().to_vec()
}

fn addition_terms<E: Scalar>(k: &FusionCase<E>, garments: &[(GarmentCategory, &Tensor<E>)]) -> Vec<Vec<E>> {
    let mut tape = Tape::inference();
    let p = k.proj.vars(&mut tape, &k.store, false);
    let x = tape.constant(k.x.clone()).unwrap();
    let r = ref_tokens(&mut tape, garments);
    let terms = fusion::addition_terms(&mut tape, &p, x, &r).unwrap();
    terms.iter().map(|&t| tape.value(t).data().to_vec()).collect()
}

fn max_abs<E: Scalar>(a: &[E], b: &[E]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.to_f64() - y.to_f64()).abs()).fold(0.0, f64::max)
}

fn reduction(_: &Path) -> Outcome {
    let mut mismatches = 0;
    for seed in 0..PROPERTY_CASES {
        let k = fusion_case::<f32>(seed, false);
        let plain = {
            let mut tape = Tape::inference();
            let p = k.proj.vars(&mut tape, &k.store, false);
            let x = tape.constant(k.x.clone()).unwrap();
            let a = fusion::plain_self_attention(&mut tape, &p, x).unwrap();
            let o = tape.matmul(a, p.wout).unwrap();
            let o = tape.add_row_bias(o, p.bout).unwrap();
            tape.value(o).data().to_vec()
        };
        for mode in FusionMode::ALL {
            mismatches += usize::from(fused(&k, mode, &[]) != plain);
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} of {} mode/case pairs differ bitwise from plain self-attention", 3 * PROPERTY_CASES),
    )
}

fn decoupling(_: &Path) -> Outcome {
    let mut perm = 0.0f64;
    let mut term_changes = 0;
    let mut linear = 0.0f64;
    for seed in 0..PROPERTY_CASES {
        let k = fusion_case::<f32>(seed, true);
        let ab = fused(&k, FusionMode::Addition, &[(U, &k.g1), (L, &k.g2)]);
        let ba = fused(&k, FusionMode::Addition, &[(L, &k.g2), (U, &k.g1)]);
        perm = perm.max(max_abs(&ab, &ba));

        let mut rng = seeded(seed ^ 0xA11);
        let (scale, shift) = (rng.random_range(-50.0..50.0f32), rng.random_range(-5.0..5.0f32));
        let other = k.g2.map(|v| v * scale + shift);
        let base = addition_terms(&k, &[(U, &k.g1), (L, &k.g2)]);
        let moved = addition_terms(&k, &[(U, &k.g1), (L, &other)]);
        term_changes += usize::from(base[1] != moved[1]);

        // Scaling garment 1's value projection by alpha scales its term by alpha.
        let mut k64 = fusion_case::<f64>(seed, true);
        let alpha = rng.random_range(-4.0..4.0f64);
        let base = addition_terms(&k64, &[(U, &k64.g1), (L, &k64.g2)]);
        let wv = k64.proj.garment_kv[U.priority()].1;
        let scaled = k64.store.value(wv).map(|v| v * alpha);
        *k64.store.value_mut(wv) = scaled;
        let after = addition_terms(&k64, &[(U, &k64.g1), (L, &k64.g2)]);
        let expected: Vec<f64> = base[1].iter().map(|b| alpha * b).collect();
        linear = linear.max(max_abs(&after[1], &expected));
    }
    outcome(
        perm <= PERMUTATION_TOL && term_changes == 0 && linear <= LINEARITY_TOL,
        format!(
            "permutation {perm:.1e} <= {PERMUTATION_TOL:e}; garment-1 term changed in {term_changes} of {PROPERTY_CASES} cases; value-scaling {linear:.1e} <= {LINEARITY_TOL:e}"
        ),
    )
}

fn coupling(_: &Path) -> Outcome {
    let mut lse = 0.0f64;
    let mut weakest_shift = f64::INFINITY;
    for seed in 0..PROPERTY_CASES {
        let k = fusion_case::<f64>(seed, false);
        let mut tape = Tape::inference();
        let p = k.proj.vars(&mut tape, &k.store, false);
        let x = tape.constant(k.x.clone()).unwrap();
        let r = ref_tokens(&mut tape, &[(U, &k.g1), (L, &k.g2)]);
        let joint = fusion::fuse_concat_kv(&mut tape, &p, x, &r).unwrap();
        let (blocks, pw) = fusion::concat_kv_blocks(&mut tape, &p, x, &r).unwrap();
        let w = pw.weights();
        let joint = tape.value(joint).data().to_vec();
        let c = k.x.shape()[1];
        for row in 0..pw.rows() {
            for col in 0..c {
                let mix: f64 = blocks.iter().enumerate().map(|(j, &b)| w[row][j] * tape.value(b).data()[row * c + col]).sum();
                lse = lse.max((mix - joint[row * c + col]).abs());
            }
        }
        let after = pw.weights_with_offsets(&[0.0, 0.0, LOGIT_OFFSET]);
        let shift = (0..pw.rows()).map(|row| (w[row][1] - after[row][1]).abs()).fold(0.0, f64::max);
        weakest_shift = weakest_shift.min(shift);
    }
    outcome(
        lse <= LSE_TOL && weakest_shift > COUPLING_MIN_SHIFT,
        format!(
            "logsumexp decomposition {lse:.1e} <= {LSE_TOL:e}; garment-2 logits +{LOGIT_OFFSET} move garment-1 weight by at least {weakest_shift:.2e} > {COUPLING_MIN_SHIFT:e} in every case"
        ),
    )
}

// Criteria 5 and 6.

fn conditioned(models: &Models<f32>, seed: u64) -> Conditioning<f32> {
    let garments = two_garments::<f32>(seed);
    let refs: Vec<_> = garments.iter().map(|(c, t)| (*c, t)).collect();
    let set = models.encode_garments(&refs).unwrap();
    Conditioning::from_features(vec![2, 4, 6], set, &models.net).unwrap()
}

fn guidance(_: &Path) -> Outcome {
    let (mut endpoints, mut affine) = (0.0f64, 0.0f64);
    for seed in 0..16u64 {
        let models = tiny_models::<f32>(FusionMode::Addition, seed, 0.05);
        let cond = conditioned(&models, seed);
        let x = image::<f32>(seed ^ 1);
        let mut rng = seeded(seed ^ 0x6);
        let t = rng.random_range(0..1000);
        let at = |s: f64| {
            let g = GuidanceConfig {
                scale: s,
                ..Default::default()
            };
            cfg_predict(&models, &x, t, &cond, &g).unwrap()
        };
        endpoints = endpoints
            .max(at(1.0).max_abs_diff(&models.predict(&x, t, &cond).unwrap()))
            .max(at(0.0).max_abs_diff(&models.predict(&x, t, &Conditioning::null()).unwrap()));
        let (s1, s2, lambda) = (rng.random_range(0.0..8.0), rng.random_range(0.0..8.0), rng.random_range(0.0..1.0));
        let expected = at(s1).scale(lambda as f32).axpy((1.0 - lambda) as f32, &at(s2)).unwrap();
        affine = affine.max(at(lambda * s1 + (1.0 - lambda) * s2).max_abs_diff(&expected));
    }
    outcome(
        endpoints <= GUIDANCE_ENDPOINT_TOL && affine <= GUIDANCE_AFFINE_TOL,
        format!(
            "s=1 and s=0 endpoints {endpoints:.1e} <= {GUIDANCE_ENDPOINT_TOL:e}; affine in s {affine:.1e} <= {GUIDANCE_AFFINE_TOL:e}"
        ),
    )
}

fn diffusion(_: &Path) -> Outcome {
    let schedule = NoiseSchedule::default();
    // Monte-Carlo marginals of q_sample at fixed x0.
    let mut worst_z = 0.0f64;
    for (i, &t) in [0usize, 250, 500, 999].iter().enumerate() {
        let n = MONTE_CARLO_DRAWS;
        let x0 = Tensor::<f64>::full(&[n], 0.6);
        let eps: Tensor<f64> = normal_tensor(&[n], &mut seeded(40 + i as u64));
        let x = q_sample(&x0, t, &eps, &schedule).unwrap();
        let want_mean = schedule.sqrt_alpha_bars[t] * 0.6;
        let want_var = 1.0 - schedule.alpha_bars[t];
        let mean = x.data().iter().sum::<f64>() / n as f64;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // A Gaussian sample variance has standard error σ²·√(2/(n-1)).
        let z_mean = (mean - want_mean).abs() / (want_var / n as f64).sqrt();
        let z_var = (var - want_var).abs() / (want_var * (2.0 / (n - 1) as f64).sqrt());
        worst_z = worst_z.max(z_mean).max(z_var);
    }
    // x0 inversion and DDIM steps with the true noise.
    let mut inversion = 0.0f64;
    for seed in 0..PROPERTY_CASES {
        let mut rng = seeded(seed);
        let x0: Tensor<f64> = normal_tensor(&[1, 3, 4, 4], &mut rng);
        let eps: Tensor<f64> = normal_tensor(&[1, 3, 4, 4], &mut rng);
        let ts = timesteps(schedule.steps(), rng.random_range(1..50)).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let x_t = q_sample(&x0, t, &eps, &schedule).unwrap();
            inversion = inversion.max(predict_x0(&x_t, &eps, schedule.alpha_bars[t]).unwrap().max_abs_diff(&x0));
            let prev = (i > 0).then(|| ts[i - 1]);
            let next = ddim_step(&x_t, &eps, schedule.alpha_bars[t], schedule.alpha_bar_at(prev)).unwrap();
            let expected = match prev {
                Some(p) => q_sample(&x0, p, &eps, &schedule).unwrap(),
                None => x0.clone(),
            };
            inversion = inversion.max(next.max_abs_diff(&expected));
        }
    }
    // Same seed, config and weights give the same bytes.
    let models = tiny_models::<f32>(FusionMode::ConcatKv, 3, 0.05);
    let cond = conditioned(&models, 3);
    let g = GuidanceConfig::default();
    let shape = models.net.input_shape();
    let ddim = |seed| ddim_sample(&models, &cond, &schedule, 5, &g, &shape, seed).unwrap();
    let ddpm = |seed| ddpm_sample(&models, &cond, &schedule, 5, &g, &shape, seed).unwrap();
    let deterministic = ddim(11) == ddim(11) && ddpm(11) == ddpm(11) && ddim(11) != ddim(12);
    outcome(
        worst_z <= MONTE_CARLO_SIGMAS && inversion <= DDIM_INVERSION_TOL && deterministic,
        format!(
            "q_sample moments within {worst_z:.2} <= {MONTE_CARLO_SIGMAS} standard errors over {MONTE_CARLO_DRAWS} draws; DDIM inversion {inversion:.1e} <= {DDIM_INVERSION_TOL:e}; sampling bitwise deterministic: {deterministic}"
        ),
    )
}

// CLI helpers for criteria 7 to 9.

fn cli(args: &[&str], log: &mut dyn FnMut(&str)) -> std::result::Result<(), String> {
    let mut err = Vec::new();
    let mut argv = vec!["garmentfuse"];
    argv.extend_from_slice(args);
    match main_with_args(argv, log, &mut |l| err.push(l.to_string())) {
        0 => Ok(()),
        code => Err(format!("{args:?} exited {code}: {}", err.join("; "))),
    }
}

fn quiet(args: &[&str]) -> std::result::Result<(), String> {
    cli(args, &mut |_| {})
}

/// Mean epoch losses of `train_dir/<stage>/loss.jsonl`, single stage first.
fn curve(train_dir: &Path) -> Vec<f64> {
    let mut out = Vec::new();
    for stage in ["single", "multi"] {
        let Ok(text) = std::fs::read_to_string(train_dir.join(stage).join("loss.jsonl")) else {
            continue;
        };
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            out.push(v["loss"].as_f64().unwrap());
        }
    }
    out
}

fn reduction_of(c: &[f64]) -> f64 {
    match (c.first(), c.last()) {
        (Some(&a), Some(&b)) if c.len() > 1 => 1.0 - b / a,
        _ => 0.0,
    }
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&d) else { continue };
        for e in entries {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Paths under `a` and `b` that are missing on one side or differ.
fn tree_diff(a: &Path, b: &Path) -> Vec<PathBuf> {
    let (fa, fb) = (files(a), files(b));
    if fa.is_empty() {
        return vec![a.to_path_buf()];
    }
    let names = |f: &[(PathBuf, Vec<u8>)]| f.iter().map(|x| x.0.clone()).collect::<BTreeSet<_>>();
    let mut out: Vec<PathBuf> = names(&fa).symmetric_difference(&names(&fb)).cloned().collect();
    out.extend(fa.iter().zip(&fb).filter(|(x, y)| x.0 == y.0 && x.1 != y.1).map(|(x, _)| x.0.clone()));
    out
}

fn fresh_dir(p: &Path) -> PathBuf {
    let _ = std::fs::remove_dir_all(p);
    std::fs::create_dir_all(p).unwrap();
    p.to_path_buf()
}

// Criterion 7.

type AblationRun = std::result::Result<(PathBuf, Option<Duration>, Option<Duration>), String>;

/// The full desk ablation, run once per process and shared by criteria 7
/// and 8.
fn full_ablation(root: &Path) -> AblationRun {
    static RUN: OnceLock<AblationRun> = OnceLock::new();
    RUN.get_or_init(|| run_full_ablation(root)).clone()
}

/// Runs or resumes the full desk ablation. Returns total and addition
/// training wall time when the run was measured without resuming.
fn run_full_ablation(root: &Path) -> AblationRun {
    let dir = root.join("full");
    if std::env::var("GARMENTFUSE_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1") {
        fresh_dir(&dir);
    }
    std::fs::create_dir_all(&dir).unwrap();
    let timing = dir.join("timing.json");
    if let Ok(bytes) = std::fs::read(&timing) {
        let v: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
        if dir.join("ablation/report.json").exists() {
            let secs = |k: &str| v[k].as_f64().map(Duration::from_secs_f64);
            return Ok((dir, secs("ablate_seconds"), secs("addition_train_seconds")));
        }
    }
    let out = dir.display().to_string();
    quiet(&["gen-data", "--out", &out])?;
    let start = Instant::now();
    let mut resumed = false;
    let mut addition_start = None;
    let mut addition_end = None;
    let mut log = |l: &str| {
        let now = start.elapsed();
        resumed |= l.contains("resuming");
        if l.starts_with("addition single:") && addition_start.is_none() {
            addition_start = Some(now);
        }
        if l.starts_with("addition multi epoch") {
            addition_end = Some(now);
        }
        eprintln!("[{:>7.1} s] {l}", now.as_secs_f64());
    };
    cli(&["ablate", "--out", &out], &mut log)?;
    let total = start.elapsed();
    if resumed {
        return Ok((dir, None, None));
    }
    let addition = addition_start.zip(addition_end).map(|(a, b)| b - a);
    let record = serde_json::json!({
        "ablate_seconds": total.as_secs_f64(),
        "addition_train_seconds": addition.map(|d| d.as_secs_f64()),
    });
    std::fs::write(&timing, serde_json::to_vec_pretty(&record).unwrap()).unwrap();
    Ok((dir, Some(total), addition))
}

fn training(root: &Path) -> Outcome {
    let smoke = match smoke_run(root) {
        Ok(dir) => curve(&dir.join("train")),
        Err(e) => return outcome(false, e),
    };
    let (dir, _, train_time) = match full_ablation(root) {
        Ok(r) => r,
        Err(e) => return outcome(false, e),
    };
    let full = curve(&dir.join("ablation/addition/train"));
    let (s, f) = (reduction_of(&smoke), reduction_of(&full));
    let time_ok = train_time.is_some_and(|t| t < TRAIN_BUDGET);
    let time = train_time.map_or("not measured (resumed run)".to_string(), |t| format!("{:.0} s", t.as_secs_f64()));
    let (smoke_ok, full_ok) = (s >= SMOKE_REDUCTION, f >= FULL_REDUCTION);
    outcome(
        smoke_ok && full_ok && time_ok,
        format!(
            "smoke {:.1}% >= {:.0}% {} ({} epochs, {:.5} -> {:.5}); full {:.1}% >= {:.0}% {} ({} epochs, {:.5} -> {:.5}); full addition training {time} < {} s on one core {}",
            100.0 * s,
            100.0 * SMOKE_REDUCTION,
            mark(smoke_ok),
            smoke.len(),
            smoke.first().unwrap_or(&f64::NAN),
            smoke.last().unwrap_or(&f64::NAN),
            100.0 * f,
            100.0 * FULL_REDUCTION,
            mark(full_ok),
            full.len(),
            full.first().unwrap_or(&f64::NAN),
            full.last().unwrap_or(&f64::NAN),
            TRAIN_BUDGET.as_secs(),
            mark(time_ok)
        ),
    )
}

// Criterion 8.

fn ablation(root: &Path) -> Outcome {
    let (dir, total, _) = match full_ablation(root) {
        Ok(r) => r,
        Err(e) => return outcome(false, e),
    };
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("ablation/report.json")).unwrap()).unwrap();
    let summary = |mode: &str| {
        report["modes"]
            .as_array()
            .unwrap()
            .iter()
            .find(|m| m["mode"] == mode)
            .map(|m| (m["mean_fidelity"].as_f64().unwrap(), m["mean_leakage"].as_f64().unwrap(), m["n_samples"].as_u64().unwrap()))
    };
    let (Some(add), Some(naive), Some(ckv)) = (summary("addition"), summary("naive"), summary("concat_kv")) else {
        return outcome(false, "ablation report lacks a mode");
    };
    let gap = (naive.0 - add.0) / naive.0;
    let time_ok = total.is_some_and(|t| t < ABLATION_BUDGET);
    let time = total.map_or("not measured (resumed run)".to_string(), |t| format!("{:.0} s", t.as_secs_f64()));
    let (gap_ok, leak_ok) = (gap >= ABLATION_GAP, add.1 < naive.1);
    outcome(
        gap_ok && leak_ok && time_ok,
        format!(
            "fidelity addition {:.3} vs naive {:.3}: gap {:.1}% >= {:.0}% {}; leakage addition {:.4} < naive {:.4} {}; concat_kv fidelity {:.3} leakage {:.4} (reported); {} samples per mode; ablate {time} < {} s {}",
            add.0,
            naive.0,
            100.0 * gap,
            100.0 * ABLATION_GAP,
            mark(gap_ok),
            add.1,
            naive.1,
            mark(leak_ok),
            ckv.0,
            ckv.1,
            add.2,
            ABLATION_BUDGET.as_secs(),
            mark(time_ok)
        ),
    )
}

// Criterion 9.

const REPRO_SEEDS: &str = "3,4";

/// Dataset plus smoke training, the run whose echoes criterion 9 replays.
fn smoke_run(root: &Path) -> std::result::Result<PathBuf, String> {
    let dir = root.join("repro/original");
    if dir.join("train/multi/final.radf").exists() {
        return Ok(dir);
    }
    fresh_dir(&dir);
    let out = dir.display().to_string();
    quiet(&["gen-data", "--out", &out])?;
    quiet(&["train", "--smoke", "--out", &out])?;
    Ok(dir)
}

fn garment_list(dir: &Path) -> PathBuf {
    let p = dir.join("garments.json");
    std::fs::write(
        &p,
        r#"[{"category":"upper","image":"dataset/eval/0/garment_0.ppm"},{"category":"lower","image":"dataset/eval/0/garment_1.ppm"}]"#,
    )
    .unwrap();
    p
}

fn reproducibility(root: &Path) -> Outcome {
    let run = || -> std::result::Result<Vec<PathBuf>, String> {
        let a = smoke_run(root)?;
        let oa = a.display().to_string();
        let ck = a.join("train/multi/final.radf").display().to_string();
        let g = garment_list(&a).display().to_string();
        quiet(&["sample", "--checkpoint", &ck, "--garments", &g, "--seeds", REPRO_SEEDS, "--out", &oa])?;
        let b = fresh_dir(&root.join("repro/replay"));
        garment_list(&b);
        for cmd in ["gen-data", "train", "sample"] {
            let text = std::fs::read_to_string(a.join(format!("{cmd}.config"))).map_err(|e| e.to_string())?;
            let cfg = b.join(format!("{cmd}.replay"));
            std::fs::write(&cfg, text.replace(&oa, &b.display().to_string())).unwrap();
            quiet(&["--config", cfg.to_str().unwrap(), cmd])?;
        }
        let mut diffs = Vec::new();
        for sub in ["dataset", "samples"] {
            diffs.extend(tree_diff(&a.join(sub), &b.join(sub)));
        }
        for f in ["single/epoch_0.radf", "multi/epoch_0.radf", "multi/final.radf"] {
            let (x, y) = (std::fs::read(a.join("train").join(f)), std::fs::read(b.join("train").join(f)));
            if x.is_err() || x.ok() != y.ok() {
                diffs.push(PathBuf::from("train").join(f));
            }
        }
        Ok(diffs)
    };
    match run() {
        Ok(d) if d.is_empty() => outcome(
            true,
            "gen-data, train --smoke and sample replayed from their echoed configs: dataset, epoch-0 and final checkpoints and sampled images bitwise identical",
        ),
        Ok(d) => outcome(false, format!("replay differs in {d:?}")),
        Err(e) => outcome(false, e),
    }
}

// Criterion 10.

/// A record with random shape and arbitrary f32 bit patterns, NaNs included.
fn random_record(rng: &mut impl RngCore, i: usize) -> Record {
    let rank = (rng.next_u32() % 4) as usize;
    let shape: Vec<usize> = (0..rank).map(|_| 1 + (rng.next_u32() % 5) as usize).collect();
    let len = shape.iter().product();
    Record {
        name: format!("r{i}.{}", rng.next_u32()),
        shape,
        data: (0..len).map(|_| f32::from_bits(rng.next_u32())).collect(),
    }
}

fn bits(records: &[Record]) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    records
        .iter()
        .map(|r| (r.name.clone(), r.shape.clone(), r.data.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn round_trips(_: &Path) -> Outcome {
    let mut ppm_bad = 0;
    let mut radf_bad = 0;
    for case in 0..ROUND_TRIP_CASES {
        let mut rng = seeded(case);
        let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
        let mut data = vec![0u8; w * h * 3];
        rng.fill_bytes(&mut data);
        let img = RgbImage { width: w, height: h, data };
        ppm_bad += usize::from(read_ppm(&write_ppm(&img)).ok() != Some(img));

        let records: Vec<Record> = (0..rng.random_range(1..6)).map(|i| random_record(&mut rng, i)).collect();
        let bytes = checkpoint::encode(&records);
        let ok = checkpoint::decode(&bytes).is_ok_and(|back| bits(&back) == bits(&records) && checkpoint::encode(&back) == bytes);
        radf_bad += usize::from(!ok);
    }
    outcome(
        ppm_bad == 0 && radf_bad == 0,
        format!("{ROUND_TRIP_CASES} random PPM images and {ROUND_TRIP_CASES} random RADF files: {ppm_bad} and {radf_bad} not bitwise lossless"),
    )
}
