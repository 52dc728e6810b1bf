//! On-disk triplet datasets.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<split>/<id>/garment_<k>.ppm
//! <root>/<split>/<id>/target.ppm
//! <root>/<split>/<id>/masks.ppm
//! <root>/<split>/<id>/meta.json
//! ```

use std::path::{Path, PathBuf};

use garmentfuse_core::diffusion::train::TrainStage;
use garmentfuse_core::synth::dataset::{DatasetConfig, TripletSample};
use garmentfuse_core::synth::GarmentSpec;
use garmentfuse_core::unet::text;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io;

/// Held-out split of two-garment samples.
pub const EVAL_SPLIT: &str = "eval";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: u64,
    pub seed: u64,
    pub stage: TrainStage,
    pub caption: Vec<String>,
    pub tokens: Vec<usize>,
    pub background_seed: u64,
    pub garments: Vec<GarmentSpec>,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: String,
    pub config: DatasetConfig,
    pub samples: Vec<SampleMeta>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub splits: Vec<SplitManifest>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Option<&SplitManifest> {
        self.splits.iter().find(|s| s.name == name)
    }
}

fn sample_dir(root: &Path, split: &str, id: u64) -> PathBuf {
    root.join(split).join(id.to_string())
}

fn garment_file(k: usize) -> String {
    format!("garment_{k}.ppm")
}

pub fn meta_for(sample: &TripletSample, split: &str) -> SampleMeta {
    let mut files: Vec<String> = (0..sample.garments.len()).map(garment_file).collect();
    files.extend(["target.ppm", "masks.ppm", "meta.json"].map(String::from));
    SampleMeta {
        id: sample.id,
        seed: sample.seed,
        stage: sample.stage,
        caption: sample.caption.clone(),
        tokens: sample.tokens.clone(),
        background_seed: sample.background_seed,
        garments: sample.specs(),
        files: files.iter().map(|f| format!("{split}/{}/{f}", sample.id)).collect(),
    }
}

/// Writes one split and returns its manifest entry.
pub fn write_split(root: &Path, name: &str, config: &DatasetConfig, samples: &[TripletSample]) -> CliResult<SplitManifest> {
    let mut metas = Vec::with_capacity(samples.len());
    for s in samples {
        let dir = sample_dir(root, name, s.id);
        for (k, (img, _)) in s.garments.iter().enumerate() {
            io::write_ppm(&dir.join(garment_file(k)), img)?;
        }
        io::write_ppm(&dir.join("target.ppm"), &s.target)?;
        io::write_ppm(&dir.join("masks.ppm"), &s.masks)?;
        let meta = meta_for(s, name);
        io::write_json(&dir.join("meta.json"), &meta)?;
        metas.push(meta);
    }
    Ok(SplitManifest {
        name: name.into(),
        config: config.clone(),
        samples: metas,
    })
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.json")
}

pub fn read_manifest(root: &Path) -> CliResult<DatasetManifest> {
    let path = manifest_path(root);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "no dataset at {} (run gen-data first)",
            root.display()
        )));
    }
    io::read_json(&path)
}

/// Loads the first `limit` samples of a split.
pub fn load_split(root: &Path, name: &str, limit: Option<usize>) -> CliResult<Vec<TripletSample>> {
    let manifest = read_manifest(root)?;
    let split = manifest
        .split(name)
        .ok_or_else(|| CliError::Usage(format!("dataset at {} has no {name} split", root.display())))?;
    let n = limit.unwrap_or(split.samples.len()).min(split.samples.len());
    split.samples[..n]
        .iter()
        .map(|m| {
            let dir = sample_dir(root, name, m.id);
            let meta: SampleMeta = io::read_json(&dir.join("meta.json"))?;
            let garments = meta
                .garments
                .iter()
                .enumerate()
                .map(|(k, spec)| Ok((io::read_ppm(&dir.join(garment_file(k)))?, spec.clone())))
                .collect::<CliResult<Vec<_>>>()?;
            let words: Vec<&str> = meta.caption.iter().map(String::as_str).collect();
            if text::tokenize(&words) != meta.tokens {
                return Err(CliError::Usage(format!("{}: tokens disagree with caption", dir.display())));
            }
            Ok(TripletSample {
                id: meta.id,
                seed: meta.seed,
                stage: meta.stage,
                garments,
                caption: meta.caption,
                tokens: meta.tokens,
                background_seed: meta.background_seed,
                target: io::read_ppm(&dir.join("target.ppm"))?,
                masks: io::read_ppm(&dir.join("masks.ppm"))?,
            })
        })
        .collect()
}
