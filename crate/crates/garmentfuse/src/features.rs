//! `.rfs` reference-feature cache: one RADF file per
//! `(checkpoint, garment image, category)`.

use std::path::{Path, PathBuf};

use garmentfuse_core::checkpoint::Record;
use garmentfuse_core::diffusion::model::Models;
use garmentfuse_core::encoder::{image_hash, GarmentCategory, GarmentFeatures, ReferenceFeatureSet};
use garmentfuse_core::fusion::{canonical_reference_order, FusionMode};
use garmentfuse_core::{Error, Tensor};

use crate::error::CliResult;
use crate::io;

const MODE_RECORD: &str = "meta.fusion_mode";

pub fn mode_code(mode: FusionMode) -> f32 {
    FusionMode::ALL.iter().position(|&m| m == mode).unwrap_or(0) as f32
}

pub fn mode_from_code(code: f32) -> garmentfuse_core::Result<FusionMode> {
    FusionMode::ALL
        .get(code as usize)
        .copied()
        .ok_or_else(|| Error::Invalid(format!("unknown fusion mode code {code}")))
}

pub fn cache_path(dir: &Path, checkpoint_id: &str, image_hash: &str, category: GarmentCategory) -> PathBuf {
    dir.join(format!("{checkpoint_id}-{image_hash}-{}.rfs", category.as_str()))
}

pub fn feature_records(f: &GarmentFeatures<f32>, mode: FusionMode) -> Vec<Record> {
    let mut out = vec![Record {
        name: MODE_RECORD.into(),
        shape: vec![1],
        data: vec![mode_code(mode)],
    }];
    out.extend(f.layers.iter().enumerate().map(|(i, t)| Record::from_tensor(format!("layer.{i}"), t)));
    out
}

pub fn features_from_records(
    records: &[Record],
    category: GarmentCategory,
    image_hash: &str,
) -> garmentfuse_core::Result<(GarmentFeatures<f32>, FusionMode)> {
    let mode = records
        .iter()
        .find(|r| r.name == MODE_RECORD)
        .ok_or_else(|| Error::Architecture("feature file lacks its fusion mode".into()))
        .and_then(|r| mode_from_code(r.data[0]))?;
    let mut layers = Vec::new();
    while let Some(r) = records.iter().find(|r| r.name == format!("layer.{}", layers.len())) {
        layers.push(r.to_tensor::<f32>()?);
    }
    Ok((
        GarmentFeatures {
            category,
            image_hash: image_hash.into(),
            layers,
        },
        mode,
    ))
}

/// Encodes each garment, reusing cached features for the same checkpoint,
/// image and category. Cached entries are checked against the model before
/// use.
pub fn encode_cached(
    models: &Models<f32>,
    checkpoint_id: &str,
    cache_dir: &Path,
    garments: &[(GarmentCategory, &Tensor<f32>)],
) -> CliResult<ReferenceFeatureSet<f32>> {
    let max = models.net.config().max_garments;
    if garments.is_empty() || garments.len() > max {
        return Err(Error::TooManyGarments {
            got: garments.len(),
            max,
        }
        .into());
    }
    canonical_reference_order(garments.iter().map(|g| g.0).collect())?;
    let mut set = ReferenceFeatureSet::empty(checkpoint_id, models.net.fusion.mode);
    let mut fresh: Vec<usize> = Vec::new();
    for (i, &(category, image)) in garments.iter().enumerate() {
        let path = cache_path(cache_dir, checkpoint_id, &image_hash(image), category);
        if path.exists() {
            let (f, mode) = features_from_records(&io::read_radf(&path)?, category, &image_hash(image))?;
            let one = ReferenceFeatureSet {
                checkpoint_id: checkpoint_id.into(),
                fusion_mode: mode,
                entries: vec![f.clone()],
            };
            one.validate(&models.net)?;
            set.entries.push(f);
        } else {
            fresh.push(i);
            set.entries.push(GarmentFeatures {
                category,
                image_hash: String::new(),
                layers: Vec::new(),
            });
        }
    }
    if !fresh.is_empty() {
        let todo: Vec<(GarmentCategory, &Tensor<f32>)> = fresh.iter().map(|&i| garments[i]).collect();
        let encoded = models.encode_garments_with_id(checkpoint_id, &todo)?;
        for (&i, f) in fresh.iter().zip(encoded.entries) {
            let path = cache_path(cache_dir, checkpoint_id, &f.image_hash, f.category);
            io::write_radf(&path, &feature_records(&f, models.net.fusion.mode))?;
            set.entries[i] = f;
        }
    }
    set.validate(&models.net)?;
    Ok(set)
}
