use alloc::format;

use serde::{Deserialize, Serialize};

use super::model::{Conditioning, EpsModel};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Guidance scale used when none is configured.
pub const DEFAULT_GUIDANCE_SCALE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub scale: f64,
    /// Training-time probability of replacing the caption by the NULL token.
    pub p_text: f64,
    /// Training-time probability of removing each garment, independently.
    pub p_garment: f64,
    /// Training-time probability of dropping every condition at once.
    pub p_drop_all: f64,
    /// Sum per-garment guidance terms instead of one joint term.
    pub compositional: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: DEFAULT_GUIDANCE_SCALE,
            p_text: 0.1,
            p_garment: 0.1,
            p_drop_all: 0.05,
            compositional: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(Error::Invalid(format!("guidance scale must be >= 0, got {}", self.scale)));
        }
        for (name, p) in [
            ("p_text", self.p_text),
            ("p_garment", self.p_garment),
            ("p_drop_all", self.p_drop_all),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// `u + s·(c - u)` elementwise.
pub fn guide<E: Scalar>(uncond: &Tensor<E>, cond: &Tensor<E>, scale: f64) -> Result<Tensor<E>> {
    let diff = cond.sub(uncond)?;
    uncond.axpy(E::from_f64(scale), &diff)
}

/// Classifier-free guided epsilon: `eps(∅) + s·(eps(c) - eps(∅))`, two model
/// evaluations. With `compositional`, each garment `g` adds its own
/// `s·(eps(text, g) - eps(text))` on top of the text term instead.
pub fn cfg_predict<E: Scalar, M: EpsModel<E> + ?Sized>(
    model: &M,
    x_t: &Tensor<E>,
    t: usize,
    cond: &Conditioning<E>,
    guidance: &GuidanceConfig,
) -> Result<Tensor<E>> {
    guidance.validate()?;
    let uncond = model.predict(x_t, t, &Conditioning::null())?;
    if !guidance.compositional || cond.garments.is_empty() {
        let c = model.predict(x_t, t, cond)?;
        return guide(&uncond, &c, guidance.scale);
    }
    let text_only = cond.text_only();
    let eps_text = model.predict(x_t, t, &text_only)?;
    let mut out = guide(&uncond, &eps_text, guidance.scale)?;
    for g in &cond.garments {
        let single = Conditioning {
            tokens: cond.tokens.clone(),
            garments: alloc::vec![g.clone()],
        };
        let eps_g = model.predict(x_t, t, &single)?;
        out = out.axpy(E::from_f64(guidance.scale), &eps_g.sub(&eps_text)?)?;
    }
    Ok(out)
}
