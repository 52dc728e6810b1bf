//! Garment encoder: a second parameter set for the denoiser architecture
//! that runs once per garment on the clean image, prompted with the garment
//! category, and exposes the normalized input of every self-attention block.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{canonical_reference_order, Categorized, FusionMode};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::unet::{text, Ctx, GarmentTokens, UNet};
use crate::Var;

pub const DENOISER_TAG: u32 = 0;
pub const ENCODER_TAG: u32 = 1;

/// Reference pass timestep; the garment image is never noised.
pub const T_REF: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GarmentCategory {
    Upper,
    Lower,
    Dress,
    Outer,
}

impl GarmentCategory {
    /// Priority order.
    pub const ALL: [GarmentCategory; 4] = [Self::Upper, Self::Lower, Self::Dress, Self::Outer];

    pub fn priority(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Upper => "upper",
            Self::Lower => "lower",
            Self::Dress => "dress",
            Self::Outer => "outer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::UnknownCategory(s.into()))
    }
}

impl core::fmt::Display for GarmentCategory {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The single-word caption the encoder sees for a garment.
pub fn category_prompt(category: GarmentCategory) -> Vec<&'static str> {
    vec![category.as_str()]
}

/// [`category_prompt`] for a category given by name.
pub fn category_prompt_for(name: &str) -> Result<Vec<&'static str>> {
    GarmentCategory::parse(name).map(category_prompt)
}

pub fn category_tokens(category: GarmentCategory) -> Vec<usize> {
    text::tokenize(&category_prompt(category))
}

/// Lowercase hex SHA-256 of arbitrary bytes, truncated to 16 characters.
pub fn short_hash(bytes: &[u8]) -> String {
    use core::fmt::Write;
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(16);
    for b in &digest[..8] {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Content hash of an image tensor (its values as little-endian `f32`).
pub fn image_hash<E: Scalar>(image: &Tensor<E>) -> String {
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .flat_map(|v| (v.to_f64() as f32).to_le_bytes())
        .collect();
    short_hash(&bytes)
}

/// Deep copy of the denoiser parameters under the encoder tag. Fails if the
/// store does not have the layout `net` expects.
pub fn init_from_denoiser<E: Scalar>(net: &UNet, denoiser: &ParamStore<E>) -> Result<ParamStore<E>> {
    net.check_store(denoiser)?;
    Ok(denoiser.clone_with_tag(ENCODER_TAG))
}

/// Captured token matrices for one garment.
#[derive(Clone, Debug, PartialEq)]
pub struct GarmentFeatures<E> {
    pub category: GarmentCategory,
    pub image_hash: String,
    /// `[tokens × channels]` per attention layer id.
    pub layers: Vec<Tensor<E>>,
}

impl<E> Categorized for GarmentFeatures<E> {
    fn category(&self) -> GarmentCategory {
        self.category
    }
}

/// Encoder output for all garments of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceFeatureSet<E> {
    pub checkpoint_id: String,
    pub fusion_mode: FusionMode,
    pub entries: Vec<GarmentFeatures<E>>,
}

impl<E: Scalar> ReferenceFeatureSet<E> {
    pub fn empty(checkpoint_id: impl Into<String>, fusion_mode: FusionMode) -> Self {
        Self {
            checkpoint_id: checkpoint_id.into(),
            fusion_mode,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries sorted by category priority.
    pub fn into_canonical(mut self) -> Result<Self> {
        self.entries = canonical_reference_order(self.entries)?;
        Ok(self)
    }

    /// Checks layer coverage, channel counts, garment count and fusion mode
    /// against the model that will consume the features.
    pub fn validate(&self, net: &UNet) -> Result<()> {
        if self.fusion_mode != net.fusion.mode {
            return Err(Error::FusionModeMismatch {
                cached: self.fusion_mode.as_str(),
                current: net.fusion.mode.as_str(),
            });
        }
        let max = net.config().max_garments;
        if self.entries.len() > max {
            return Err(Error::TooManyGarments {
                got: self.entries.len(),
                max,
            });
        }
        let layers = net.attention_layers();
        for e in &self.entries {
            if e.layers.len() < layers.len() {
                return Err(Error::MissingLayer(e.layers.len()));
            }
            if e.layers.len() > layers.len() {
                return Err(Error::Architecture(format!(
                    "{} captured layers for a model with {}",
                    e.layers.len(),
                    layers.len()
                )));
            }
            for (m, l) in e.layers.iter().zip(layers) {
                if m.shape() != [l.tokens(), l.channels] {
                    return Err(Error::Geometry {
                        expected: vec![l.tokens(), l.channels],
                        got: m.shape().to_vec(),
                    });
                }
            }
        }
        canonical_reference_order(self.entries.iter().map(|e| e.category).collect::<Vec<_>>())?;
        Ok(())
    }

    /// Places the captured matrices on `tape` as constants.
    pub fn to_tokens(&self, tape: &mut Tape<E>) -> Result<Vec<GarmentTokens>> {
        self.entries
            .iter()
            .map(|e| {
                let layers = e
                    .layers
                    .iter()
                    .map(|m| tape.constant(m.clone()))
                    .collect::<Result<Vec<_>>>()?;
                Ok(GarmentTokens {
                    category: e.category,
                    layers,
                })
            })
            .collect()
    }
}

impl Categorized for GarmentCategory {
    fn category(&self) -> GarmentCategory {
        *self
    }
}

fn check_garments<E: Scalar>(net: &UNet, garments: &[(GarmentCategory, &Tensor<E>)]) -> Result<()> {
    let max = net.config().max_garments;
    if garments.is_empty() || garments.len() > max {
        return Err(Error::TooManyGarments {
            got: garments.len(),
            max,
        });
    }
    canonical_reference_order(garments.iter().map(|g| g.0).collect::<Vec<_>>())?;
    let expected = net.input_shape();
    for (_, img) in garments {
        if img.shape() != expected {
            return Err(Error::Geometry {
                expected: expected.to_vec(),
                got: img.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Encoder pass for one garment on an existing tape; differentiable with
/// respect to the encoder parameters when `trainable`.
pub fn encode_on_tape<E: Scalar>(
    net: &UNet,
    encoder: &ParamStore<E>,
    tape: &mut Tape<E>,
    trainable: bool,
    category: GarmentCategory,
    image: Var,
    t_ref: usize,
) -> Result<GarmentTokens> {
    let mut ctx = Ctx::new(tape, encoder, trainable);
    let prompt = net.embed_caption(&mut ctx, &category_tokens(category))?;
    let layers = net.capture(&mut ctx, image, t_ref, prompt)?;
    Ok(GarmentTokens { category, layers })
}

/// Runs every garment through the encoder, each on its own tape, so no
/// garment can influence another's features.
pub fn encode_garments<E: Scalar>(
    net: &UNet,
    encoder: &ParamStore<E>,
    checkpoint_id: &str,
    garments: &[(GarmentCategory, &Tensor<E>)],
    t_ref: usize,
) -> Result<ReferenceFeatureSet<E>> {
    check_garments(net, garments)?;
    let mut entries = Vec::with_capacity(garments.len());
    for &(category, image) in garments {
        let mut tape = Tape::inference();
        let x = tape.constant(image.clone())?;
        let g = encode_on_tape(net, encoder, &mut tape, false, category, x, t_ref)?;
        entries.push(GarmentFeatures {
            category,
            image_hash: image_hash(image),
            layers: g.layers.iter().map(|&v| tape.value(v).clone()).collect(),
        });
    }
    Ok(ReferenceFeatureSet {
        checkpoint_id: checkpoint_id.into(),
        fusion_mode: net.fusion.mode,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionConfig;
    use crate::rng::{normal_tensor, seeded};
    use crate::unet::UNetConfig;

    fn setup() -> (UNet, ParamStore<f64>) {
        let cfg = UNetConfig {
            height: 8,
            width: 8,
            base_width: 8,
            channel_mult: vec![1, 2],
            attention: vec![true, true],
            groups: 4,
            text_dim: 4,
            time_dim: 8,
            ..Default::default()
        };
        let mut store = ParamStore::new(DENOISER_TAG);
        let net = UNet::new(cfg, FusionConfig::default(), &mut store, &mut seeded(5)).unwrap();
        store.jitter(0.05, &mut seeded(6));
        (net, store)
    }

    #[test]
    fn category_prompts() {
        assert_eq!(category_prompt(GarmentCategory::Upper), ["upper"]);
        assert_eq!(category_prompt(GarmentCategory::Dress), ["dress"]);
        assert_eq!(category_prompt_for("hat"), Err(Error::UnknownCategory("hat".into())));
        for c in GarmentCategory::ALL {
            assert_eq!(GarmentCategory::parse(c.as_str()).unwrap(), c);
            assert!(category_tokens(c)[0] > text::OOV_TOKEN);
        }
    }

    #[test]
    fn init_copies_bitwise() {
        let (net, store) = setup();
        let enc = init_from_denoiser(&net, &store).unwrap();
        assert_eq!(enc.tag(), ENCODER_TAG);
        for id in store.ids() {
            assert_eq!(store.value(id), enc.value(id));
        }
        let mut wrong = ParamStore::<f64>::new(0);
        wrong.add("w", Tensor::zeros(&[1]));
        assert!(matches!(init_from_denoiser(&net, &wrong), Err(Error::Architecture(_))));
    }

    #[test]
    fn single_garment_shapes() {
        let (net, store) = setup();
        let img = normal_tensor(&net.input_shape(), &mut seeded(1));
        let f = encode_garments(&net, &store, "ck", &[(GarmentCategory::Upper, &img)], T_REF).unwrap();
        assert_eq!(f.entries.len(), 1);
        let layers = net.attention_layers();
        assert_eq!(f.entries[0].layers.len(), layers.len());
        for (m, l) in f.entries[0].layers.iter().zip(layers) {
            assert_eq!(m.shape(), [l.height * l.width, l.channels]);
        }
        f.validate(&net).unwrap();
    }

    #[test]
    fn duplicate_and_geometry_errors() {
        let (net, store) = setup();
        let img = normal_tensor(&net.input_shape(), &mut seeded(1));
        let dup = [(GarmentCategory::Lower, &img), (GarmentCategory::Lower, &img)];
        assert_eq!(
            encode_garments(&net, &store, "ck", &dup, T_REF),
            Err(Error::DuplicateCategory("lower"))
        );
        let small = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        assert!(matches!(
            encode_garments(&net, &store, "ck", &[(GarmentCategory::Upper, &small)], T_REF),
            Err(Error::Geometry { .. })
        ));
    }

    #[test]
    fn category_changes_features() {
        let (net, store) = setup();
        let img = normal_tensor(&net.input_shape(), &mut seeded(1));
        let a = encode_garments(&net, &store, "ck", &[(GarmentCategory::Upper, &img)], T_REF).unwrap();
        let b = encode_garments(&net, &store, "ck", &[(GarmentCategory::Lower, &img)], T_REF).unwrap();
        let last = a.entries[0].layers.len() - 1;
        assert!(a.entries[0].layers[last].max_abs_diff(&b.entries[0].layers[last]) > 1e-9);
    }

    #[test]
    fn garments_are_encoded_independently() {
        let (net, store) = setup();
        let a = normal_tensor(&net.input_shape(), &mut seeded(1));
        let b = normal_tensor(&net.input_shape(), &mut seeded(2));
        let alone = encode_garments(&net, &store, "ck", &[(GarmentCategory::Upper, &a)], T_REF).unwrap();
        let both = encode_garments(
            &net,
            &store,
            "ck",
            &[(GarmentCategory::Lower, &b), (GarmentCategory::Upper, &a)],
            T_REF,
        )
        .unwrap();
        assert_eq!(alone.entries[0], both.entries[1]);
        let swapped = encode_garments(
            &net,
            &store,
            "ck",
            &[(GarmentCategory::Upper, &a), (GarmentCategory::Lower, &b)],
            T_REF,
        )
        .unwrap();
        assert_eq!(both.into_canonical().unwrap(), swapped.into_canonical().unwrap());
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let (net, store) = setup();
        let img = normal_tensor(&net.input_shape(), &mut seeded(1));
        let mut f = encode_garments(&net, &store, "ck", &[(GarmentCategory::Upper, &img)], T_REF).unwrap();
        f.fusion_mode = FusionMode::Naive;
        assert!(matches!(f.validate(&net), Err(Error::FusionModeMismatch { .. })));
    }
}
