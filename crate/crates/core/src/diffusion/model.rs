use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::train::TrainStage;
use crate::checkpoint::{self, Record};
use crate::encoder::{self, GarmentCategory, GarmentFeatures, ReferenceFeatureSet, DENOISER_TAG, T_REF};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::params::ParamStore;
use crate::rng::seeded;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::unet::{Ctx, UNet, UNetConfig};

/// Caption tokens plus encoded garments for one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning<E> {
    /// Empty means the NULL caption.
    pub tokens: Vec<usize>,
    pub garments: Vec<GarmentFeatures<E>>,
}

impl<E: Scalar> Conditioning<E> {
    /// NULL caption, no garments.
    pub fn null() -> Self {
        Self {
            tokens: Vec::new(),
            garments: Vec::new(),
        }
    }

    pub fn text_only(&self) -> Self {
        Self {
            tokens: self.tokens.clone(),
            garments: Vec::new(),
        }
    }

    /// Validates `features` against `net` before accepting them.
    pub fn from_features(tokens: Vec<usize>, features: ReferenceFeatureSet<E>, net: &UNet) -> Result<Self> {
        features.validate(net)?;
        Ok(Self {
            tokens,
            garments: features.entries,
        })
    }
}

/// Anything that predicts the noise in `x_t`.
pub trait EpsModel<E: Scalar> {
    fn predict(&self, x_t: &Tensor<E>, t: usize, cond: &Conditioning<E>) -> Result<Tensor<E>>;
}

/// Denoiser and garment encoder parameters over one shared layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Models<E> {
    pub net: UNet,
    pub denoiser: ParamStore<E>,
    pub encoder: ParamStore<E>,
    /// Training stages completed so far, in order.
    pub stages_done: Vec<TrainStage>,
}

const STAGES_RECORD: &str = "meta.stages_done";

impl<E: Scalar> Models<E> {
    /// Fresh denoiser from `seed`, encoder initialized as its copy.
    pub fn new(config: UNetConfig, fusion: FusionConfig, seed: u64) -> Result<Self> {
        let mut denoiser = ParamStore::new(DENOISER_TAG);
        let net = UNet::new(config, fusion, &mut denoiser, &mut seeded(seed))?;
        let encoder = encoder::init_from_denoiser(&net, &denoiser)?;
        Ok(Self {
            net,
            denoiser,
            encoder,
            stages_done: Vec::new(),
        })
    }

    pub fn records(&self) -> Vec<Record> {
        let mut out = checkpoint::store_records(&self.denoiser, "denoiser.");
        out.extend(checkpoint::store_records(&self.encoder, "encoder."));
        let stages: Vec<f32> = self.stages_done.iter().map(|s| s.code() as f32).collect();
        out.push(Record {
            name: STAGES_RECORD.into(),
            shape: vec![stages.len().max(1)],
            data: if stages.is_empty() { vec![-1.0] } else { stages },
        });
        out
    }

    /// Loads parameters from records produced by [`Models::records`].
    pub fn load_records(&mut self, records: &[Record]) -> Result<()> {
        checkpoint::load_store(&mut self.denoiser, "denoiser.", records)?;
        checkpoint::load_store(&mut self.encoder, "encoder.", records)?;
        self.stages_done = match records.iter().find(|r| r.name == STAGES_RECORD) {
            Some(r) => r
                .data
                .iter()
                .filter(|&&v| v >= 0.0)
                .map(|&v| TrainStage::from_code(v as u32))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        Ok(())
    }

    /// Short content hash of the serialized parameters.
    pub fn checkpoint_id(&self) -> String {
        encoder::short_hash(&checkpoint::encode(&self.records()))
    }

    /// Garment features for sampling, tagged with this checkpoint.
    pub fn encode_garments(&self, garments: &[(GarmentCategory, &Tensor<E>)]) -> Result<ReferenceFeatureSet<E>> {
        encoder::encode_garments(&self.net, &self.encoder, &self.checkpoint_id(), garments, T_REF)
    }

    pub fn encode_garments_with_id(
        &self,
        checkpoint_id: &str,
        garments: &[(GarmentCategory, &Tensor<E>)],
    ) -> Result<ReferenceFeatureSet<E>> {
        encoder::encode_garments(&self.net, &self.encoder, checkpoint_id, garments, T_REF)
    }
}

impl<E: Scalar> EpsModel<E> for Models<E> {
    fn predict(&self, x_t: &Tensor<E>, t: usize, cond: &Conditioning<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &self.denoiser, false);
        let x = ctx.tape.constant(x_t.clone())?;
        let text = self.net.embed_caption(&mut ctx, &cond.tokens)?;
        let set = ReferenceFeatureSet {
            checkpoint_id: String::new(),
            fusion_mode: self.net.fusion.mode,
            entries: cond.garments.clone(),
        };
        if !set.is_empty() {
            set.validate(&self.net)?;
        }
        let refs = set.to_tokens(ctx.tape)?;
        let y = self.net.forward(&mut ctx, x, t, text, &refs)?;
        let out = tape.value(y).clone();
        if !out.all_finite() {
            return Err(Error::NonFinite { op: "eps prediction" });
        }
        Ok(out)
    }
}

/// Fails unless the two parameter sets are bitwise equal.
pub fn assert_same_params<E: Scalar>(a: &ParamStore<E>, b: &ParamStore<E>) -> Result<()> {
    if !a.same_layout(b) {
        return Err(Error::Architecture("parameter layouts differ".into()));
    }
    for id in a.ids() {
        if a.value(id) != b.value(id) {
            return Err(Error::Architecture(format!("parameter {} differs", a.name(id))));
        }
    }
    Ok(())
}
