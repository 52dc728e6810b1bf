use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::compose::{compose_model_image, region_masks};
use super::garment::{make_garment, GarmentSpec, Pattern};
use super::image::{Rgb, RgbImage};
use super::layout::BodyLayout;
use super::palette::{self, PALETTE};
use crate::diffusion::train::{TrainExample, TrainStage};
use crate::encoder::GarmentCategory;
use crate::error::{Error, Result};
use crate::fusion::canonical_reference_order;
use crate::rng::{derive_seed, seeded};
use crate::tensor::Scalar;
use crate::unet::text;

/// Pattern periods the generator draws from.
pub const PERIODS: [usize; 3] = [4, 6, 8];
/// Per-channel jitter applied around palette colors.
pub const COLOR_JITTER: i32 = 40;
/// Default dataset size per stage.
pub const DEFAULT_COUNT: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    pub stage: TrainStage,
    /// Relative frequency of upper, lower, dress and outer in single-garment
    /// datasets.
    pub proportions: [f64; 4],
}

impl DatasetConfig {
    pub fn new(stage: TrainStage, count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            stage,
            proportions: [1.0; 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Invalid("dataset count must be >= 1".into()));
        }
        if self.proportions.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) || self.proportions.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Invalid(format!("invalid category proportions {:?}", self.proportions)));
        }
        Ok(())
    }
}

/// One garment image/spec pair, a caption, the composite and its masks.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletSample {
    pub id: u64,
    pub seed: u64,
    pub stage: TrainStage,
    /// In canonical category order.
    pub garments: Vec<(RgbImage, GarmentSpec)>,
    pub caption: Vec<String>,
    pub tokens: Vec<usize>,
    pub background_seed: u64,
    pub target: RgbImage,
    pub masks: RgbImage,
}

impl TripletSample {
    pub fn specs(&self) -> Vec<GarmentSpec> {
        self.garments.iter().map(|(_, s)| s.clone()).collect()
    }

    pub fn to_example<E: Scalar>(&self) -> TrainExample<E> {
        TrainExample {
            id: self.id,
            tokens: self.tokens.clone(),
            garments: self
                .garments
                .iter()
                .map(|(img, s)| (s.category, img.to_tensor()))
                .collect(),
            target: self.target.to_tensor(),
        }
    }
}

/// `model wearing <pattern> <color> <category> [and …]`, garments in
/// canonical order.
pub fn caption_for(specs: &[GarmentSpec]) -> Result<Vec<&'static str>> {
    let ordered = canonical_reference_order(specs.to_vec())?;
    let mut words = vec!["model", "wearing"];
    for (i, s) in ordered.iter().enumerate() {
        if i > 0 {
            words.push("and");
        }
        words.push(s.pattern.as_str());
        words.push(s.color_name());
        words.push(s.category.as_str());
    }
    Ok(words)
}

/// Integer counts proportional to `weights` summing to `total`: floors
/// first, then remaining units to the largest fractional parts (ties to the
/// lower index).
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| libm::floor(*e) as usize).collect();
    let mut rest = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - libm::floor(exact[a]);
        let fb = exact[b] - libm::floor(exact[b]);
        fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

fn jitter<R: Rng>(c: Rgb, rng: &mut R) -> Rgb {
    c.map(|v| (v as i32 + rng.random_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0, 255) as u8)
}

/// Distinct palette indices, `n <= 8`.
fn distinct_colors<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..PALETTE.len()).collect();
    for i in 0..n {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx
}

fn random_spec<R: Rng>(category: GarmentCategory, colors: [usize; 2], rng: &mut R) -> GarmentSpec {
    let pattern = Pattern::ALL[rng.random_range(0..Pattern::ALL.len())];
    let period = PERIODS[rng.random_range(0..PERIODS.len())];
    let primary = jitter(palette::palette_color(colors[0]), rng);
    let secondary = if pattern == Pattern::Solid {
        primary
    } else {
        jitter(palette::palette_color(colors[1]), rng)
    };
    GarmentSpec {
        category,
        pattern,
        primary,
        secondary,
        period,
        seed: rng.next_u64(),
    }
}

/// Seed of sample `id`: the stage stream seed XOR the id.
pub fn sample_seed(seed: u64, stage: TrainStage, id: u64) -> u64 {
    derive_seed(seed, &[stage.code() as u64]) ^ id
}

/// Category assignment for a single-garment dataset: exact proportional
/// counts in a seeded order.
pub fn single_categories(config: &DatasetConfig) -> Vec<GarmentCategory> {
    let counts = largest_remainder(&config.proportions, config.count);
    let mut cats: Vec<GarmentCategory> = GarmentCategory::ALL
        .iter()
        .zip(&counts)
        .flat_map(|(&c, &n)| core::iter::repeat_n(c, n))
        .collect();
    let mut r = seeded(derive_seed(config.seed, &[config.stage.code() as u64, u64::MAX]));
    for i in (1..cats.len()).rev() {
        let j = r.random_range(0..=i);
        cats.swap(i, j);
    }
    cats
}

/// Builds sample `id`; single-garment samples take `category`.
pub fn make_sample(config: &DatasetConfig, id: u64, category: GarmentCategory) -> Result<TripletSample> {
    let seed = sample_seed(config.seed, config.stage, id);
    let mut r = seeded(seed);
    let specs = match config.stage {
        TrainStage::Single => {
            let c = distinct_colors(2, &mut r);
            vec![random_spec(category, [c[0], c[1]], &mut r)]
        }
        TrainStage::Multi => {
            let c = distinct_colors(4, &mut r);
            vec![
                random_spec(GarmentCategory::Upper, [c[0], c[1]], &mut r),
                random_spec(GarmentCategory::Lower, [c[2], c[3]], &mut r),
            ]
        }
    };
    let background_seed = r.next_u64();
    let layout = BodyLayout;
    let caption = caption_for(&specs)?;
    let garments = specs
        .iter()
        .map(|s| Ok((make_garment(s)?.0, s.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(TripletSample {
        id,
        seed,
        stage: config.stage,
        tokens: text::tokenize(&caption),
        caption: caption.iter().map(|w| String::from(*w)).collect(),
        target: compose_model_image(&specs, &layout, background_seed)?,
        masks: region_masks(&specs, &layout)?,
        background_seed,
        garments,
    })
}

/// All samples of a dataset, ids `0..count`.
pub fn build_dataset(config: &DatasetConfig) -> Result<Vec<TripletSample>> {
    config.validate()?;
    let cats = match config.stage {
        TrainStage::Single => single_categories(config),
        TrainStage::Multi => vec![GarmentCategory::Upper; config.count],
    };
    cats.iter()
        .enumerate()
        .map(|(id, &c)| make_sample(config, id as u64, c))
        .collect()
}
