//! Texture fidelity, cross-garment leakage and the fusion-mode ablation.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoder::GarmentCategory;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::synth::garment::{GarmentSpec, Pattern};
use crate::synth::image::{rgb_distance, RgbImage};
use crate::synth::layout::{BodyLayout, Region};
use crate::synth::palette;

/// Agreement required between stored and recomputed aggregates.
pub const AGGREGATE_TOLERANCE: f64 = 1e-9;
/// Periods tried when deciding whether a region repeats at its spec period.
pub const PERIOD_CANDIDATES: core::ops::RangeInclusive<usize> = 2..=12;

fn phases(spec: &GarmentSpec) -> Vec<(usize, usize)> {
    let p = spec.period;
    match spec.pattern {
        Pattern::Solid => alloc::vec![(0, 0)],
        Pattern::Stripes => (0..p).map(|dy| (dy, 0)).collect(),
        Pattern::Checks | Pattern::Dots => (0..p).flat_map(|dy| (0..p).map(move |dx| (dy, dx))).collect(),
    }
}

fn error_at_phase(image: &RgbImage, spec: &GarmentSpec, region: &Region, phase: (usize, usize)) -> f64 {
    let (top, left) = region.origin();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (y, x) in region.pixels() {
        sum += rgb_distance(image.get(y, x), spec.texel_with_phase(y - top, x - left, phase));
        n += 1;
    }
    sum / n as f64
}

/// Mean per-pixel RGB L2 distance between `image` and the ideal texture of
/// `spec` inside `region`, minimized over pattern phase.
pub fn region_fidelity(image: &RgbImage, spec: &GarmentSpec, region: &Region) -> Result<f64> {
    if region.is_empty() {
        return Err(Error::Invalid("fidelity region is empty".into()));
    }
    Ok(phases(spec)
        .into_iter()
        .map(|ph| error_at_phase(image, spec, region, ph))
        .fold(f64::INFINITY, f64::min))
}

/// Whether the spec period explains the region strictly better than every
/// other candidate period. `None` for solid garments.
pub fn period_match(image: &RgbImage, spec: &GarmentSpec, region: &Region) -> Result<Option<bool>> {
    if spec.pattern == Pattern::Solid {
        return Ok(None);
    }
    let own = region_fidelity(image, spec, region)?;
    for q in PERIOD_CANDIDATES.filter(|&q| q != spec.period) {
        let alt = GarmentSpec {
            period: q,
            ..spec.clone()
        };
        if region_fidelity(image, &alt, region)? <= own {
            return Ok(Some(false));
        }
    }
    Ok(Some(true))
}

/// Share of each garment's region quantizing to another garment's palette
/// colors (and not its own), averaged over ordered garment pairs. Pixels
/// whose color belongs to both palettes are excluded.
pub fn leakage_score(image: &RgbImage, garments: &[GarmentSpec], regions: &[Region]) -> Result<f64> {
    if garments.len() < 2 {
        return Err(Error::Invalid(format!("leakage needs >= 2 garments, got {}", garments.len())));
    }
    if regions.len() != garments.len() {
        return Err(Error::Invalid(format!(
            "{} regions for {} garments",
            regions.len(),
            garments.len()
        )));
    }
    let palettes: Vec<Vec<usize>> = garments.iter().map(|g| g.palette_indices()).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..garments.len() {
        for b in 0..garments.len() {
            if a == b {
                continue;
            }
            let (mut hits, mut counted) = (0usize, 0usize);
            for (y, x) in regions[a].pixels() {
                let k = palette::nearest(image.get(y, x));
                let (in_a, in_b) = (palettes[a].contains(&k), palettes[b].contains(&k));
                if in_a && in_b {
                    continue;
                }
                counted += 1;
                if in_b {
                    hits += 1;
                }
            }
            total += if counted == 0 { 0.0 } else { hits as f64 / counted as f64 };
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarmentScore {
    pub category: GarmentCategory,
    pub error: f64,
    pub period_match: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: u64,
    pub seed: u64,
    pub garments: Vec<GarmentScore>,
    /// Present for samples with two or more garments.
    pub leakage: Option<f64>,
}

/// Scores one generated image against the garments it should show.
pub fn score_sample(image: &RgbImage, garments: &[GarmentSpec], layout: &BodyLayout, sample_id: u64, seed: u64) -> Result<SampleScore> {
    let regions: Vec<Region> = garments.iter().map(|g| layout.region(g.category)).collect();
    let scores = garments
        .iter()
        .zip(&regions)
        .map(|(g, r)| {
            Ok(GarmentScore {
                category: g.category,
                error: region_fidelity(image, g, r)?,
                period_match: period_match(image, g, r)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let leakage = if garments.len() >= 2 {
        Some(leakage_score(image, garments, &regions)?)
    } else {
        None
    };
    Ok(SampleScore {
        sample_id,
        seed,
        garments: scores,
        leakage,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub mode: FusionMode,
    pub checkpoint: String,
    pub n_samples: usize,
    pub mean_fidelity: f64,
    pub median_fidelity: f64,
    pub mean_leakage: f64,
    pub period_match_rate: f64,
    pub sampler: String,
    pub sampling_steps: usize,
    pub guidance_scale: f64,
    pub seeds: Vec<u64>,
    pub per_sample: Vec<SampleScore>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Aggregates {
    mean: f64,
    median: f64,
    leakage: f64,
    period: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn aggregates(per_sample: &[SampleScore]) -> Aggregates {
    let errors: Vec<f64> = per_sample.iter().flat_map(|s| s.garments.iter().map(|g| g.error)).collect();
    let leak: Vec<f64> = per_sample.iter().filter_map(|s| s.leakage).collect();
    let flags: Vec<f64> = per_sample
        .iter()
        .flat_map(|s| s.garments.iter().filter_map(|g| g.period_match))
        .map(|b| if b { 1.0 } else { 0.0 })
        .collect();
    Aggregates {
        mean: mean(&errors),
        median: median(&errors),
        leakage: mean(&leak),
        period: mean(&flags),
    }
}

/// Sampler settings echoed into a report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportContext {
    pub mode: FusionMode,
    pub checkpoint: String,
    pub sampler: String,
    pub sampling_steps: usize,
    pub guidance_scale: f64,
}

impl FidelityReport {
    pub fn new(ctx: ReportContext, per_sample: Vec<SampleScore>) -> Self {
        let a = aggregates(&per_sample);
        let seeds: BTreeSet<u64> = per_sample.iter().map(|s| s.seed).collect();
        Self {
            mode: ctx.mode,
            checkpoint: ctx.checkpoint,
            n_samples: per_sample.len(),
            mean_fidelity: a.mean,
            median_fidelity: a.median,
            mean_leakage: a.leakage,
            period_match_rate: a.period,
            sampler: ctx.sampler,
            sampling_steps: ctx.sampling_steps,
            guidance_scale: ctx.guidance_scale,
            seeds: seeds.into_iter().collect(),
            per_sample,
        }
    }

    /// Recomputes the aggregates from `per_sample` and checks the stored ones.
    pub fn verify(&self) -> Result<()> {
        let a = aggregates(&self.per_sample);
        let checks = [
            ("mean_fidelity", self.mean_fidelity, a.mean),
            ("median_fidelity", self.median_fidelity, a.median),
            ("mean_leakage", self.mean_leakage, a.leakage),
            ("period_match_rate", self.period_match_rate, a.period),
        ];
        for (name, stored, fresh) in checks {
            if !((stored - fresh).abs() <= AGGREGATE_TOLERANCE) {
                return Err(Error::Invalid(format!("{name}: stored {stored}, recomputed {fresh}")));
            }
        }
        if self.n_samples != self.per_sample.len() {
            return Err(Error::Invalid("n_samples disagrees with per_sample".into()));
        }
        if self.per_sample.iter().flat_map(|s| &s.garments).any(|g| !(g.error >= 0.0)) {
            return Err(Error::Invalid("negative fidelity error".into()));
        }
        Ok(())
    }

    fn pairing_key(&self) -> Vec<(u64, u64)> {
        self.per_sample.iter().map(|s| (s.sample_id, s.seed)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: FusionMode,
    pub n_samples: usize,
    pub mean_fidelity: f64,
    pub median_fidelity: f64,
    pub mean_leakage: f64,
    pub period_match_rate: f64,
}

/// `b - a` on each aggregate, plus the fidelity change relative to `a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeDelta {
    pub a: FusionMode,
    pub b: FusionMode,
    pub fidelity_delta: f64,
    pub fidelity_relative: f64,
    pub leakage_delta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Holds,
    Violated,
    Tie,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Holds => "holds",
            Verdict::Violated => "violated",
            Verdict::Tie => "tie",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub modes: Vec<ModeSummary>,
    pub deltas: Vec<ModeDelta>,
    /// Whether mean fidelity error orders addition < concat_kv < naive over
    /// the modes present.
    pub verdict: Verdict,
    pub verdict_line: String,
}

/// Expected rank, best first.
fn rank(mode: FusionMode) -> usize {
    match mode {
        FusionMode::Addition => 0,
        FusionMode::ConcatKv => 1,
        FusionMode::Naive => 2,
    }
}

/// Per-mode aggregates, pairwise deltas and the ordering verdict. Runs must
/// cover distinct modes on identical `(sample, seed)` lists.
pub fn ablation_report(runs: &[FidelityReport]) -> Result<AblationReport> {
    let modes: BTreeSet<FusionMode> = runs.iter().map(|r| r.mode).collect();
    if modes.len() < 2 || modes.len() != runs.len() {
        return Err(Error::Pairing(format!(
            "need runs for >= 2 distinct fusion modes, got {} runs over {} modes",
            runs.len(),
            modes.len()
        )));
    }
    let key = runs[0].pairing_key();
    for r in &runs[1..] {
        if r.pairing_key() != key {
            return Err(Error::Pairing(format!(
                "{} and {} were evaluated on different samples or seeds",
                runs[0].mode, r.mode
            )));
        }
    }
    for r in runs {
        r.verify()?;
    }
    let mut sorted: Vec<&FidelityReport> = runs.iter().collect();
    sorted.sort_by_key(|r| rank(r.mode));
    let summaries: Vec<ModeSummary> = sorted
        .iter()
        .map(|r| ModeSummary {
            mode: r.mode,
            n_samples: r.n_samples,
            mean_fidelity: r.mean_fidelity,
            median_fidelity: r.median_fidelity,
            mean_leakage: r.mean_leakage,
            period_match_rate: r.period_match_rate,
        })
        .collect();
    let mut deltas = Vec::new();
    for (i, a) in summaries.iter().enumerate() {
        for b in &summaries[i + 1..] {
            let d = b.mean_fidelity - a.mean_fidelity;
            deltas.push(ModeDelta {
                a: a.mode,
                b: b.mode,
                fidelity_delta: d,
                fidelity_relative: if a.mean_fidelity == 0.0 { 0.0 } else { d / a.mean_fidelity },
                leakage_delta: b.mean_leakage - a.mean_leakage,
            });
        }
    }
    let verdict = if summaries.windows(2).all(|w| w[0].mean_fidelity == w[1].mean_fidelity) {
        Verdict::Tie
    } else if summaries.windows(2).all(|w| w[0].mean_fidelity < w[1].mean_fidelity) {
        Verdict::Holds
    } else {
        Verdict::Violated
    };
    let order: Vec<&str> = summaries.iter().map(|s| s.mode.as_str()).collect();
    let verdict_line = format!("ordering {} on mean fidelity error: {}", order.join(" < "), verdict.as_str());
    Ok(AblationReport {
        modes: summaries,
        deltas,
        verdict,
        verdict_line,
    })
}

impl AblationReport {
    pub fn summary(&self, mode: FusionMode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>4} {:>14} {:>16} {:>13} {:>13}\n",
            "mode", "n", "mean_fidelity", "median_fidelity", "mean_leakage", "period_match"
        );
        for m in &self.modes {
            out += &format!(
                "{:<10} {:>4} {:>14.4} {:>16.4} {:>13.4} {:>13.4}\n",
                m.mode.as_str(),
                m.n_samples,
                m.mean_fidelity,
                m.median_fidelity,
                m.mean_leakage,
                m.period_match_rate
            );
        }
        for d in &self.deltas {
            out += &format!(
                "{} - {}: fidelity {:+.4} ({:+.2}%), leakage {:+.4}\n",
                d.b.as_str(),
                d.a.as_str(),
                d.fidelity_delta,
                100.0 * d.fidelity_relative,
                d.leakage_delta
            );
        }
        out += &self.verdict_line;
        out.push('\n');
        out
    }
}
