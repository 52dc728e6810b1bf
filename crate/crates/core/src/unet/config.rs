use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denoiser geometry. The garment encoder always uses the same value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Side of the square pixel blocks folded into channels before the first
    /// convolution (1 = work on raw pixels).
    pub patch: usize,
    pub base_width: usize,
    pub channel_mult: Vec<usize>,
    pub attention: Vec<bool>,
    pub heads: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
    pub max_garments: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            height: 64,
            width: 48,
            patch: 1,
            base_width: 32,
            channel_mult: vec![1, 2, 4],
            attention: vec![false, true, true],
            heads: 1,
            text_dim: 32,
            time_dim: 64,
            groups: 8,
            max_garments: 3,
        }
    }
}

impl UNetConfig {
    /// Geometry that trains on a single CPU core: 4×4 pixel blocks, with the
    /// first level at least as wide as the 48 values a block carries.
    pub fn desk() -> Self {
        Self {
            patch: 4,
            base_width: 48,
            channel_mult: vec![1, 1, 2],
            ..Self::default()
        }
    }
}

/// Where in the UNet an attention block sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Down,
    Mid,
    Up,
}

/// One self-attention block in depth-first (down, mid, up) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayer {
    pub id: usize,
    pub stage: Stage,
    pub level: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl AttentionLayer {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_width * self.channel_mult[level]
    }

    /// Spatial size of the feature maps at `level`.
    pub fn level_size(&self, level: usize) -> (usize, usize) {
        let f = self.patch << level;
        (self.height / f, self.width / f)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::Invalid(msg));
        if self.levels() == 0 || self.attention.len() != self.levels() {
            return bad(format!(
                "channel_mult ({}) and attention ({}) must have the same non-zero length",
                self.levels(),
                self.attention.len()
            ));
        }
        if self.in_channels == 0 || self.base_width == 0 || self.patch == 0 {
            return bad("in_channels, base_width and patch must be positive".into());
        }
        let f = self.patch << (self.levels() - 1);
        if !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) || self.height < f || self.width < f {
            return bad(format!(
                "{}x{} is not divisible by patch·2^(levels-1) = {f}",
                self.height, self.width
            ));
        }
        if self.heads == 0 {
            return bad("heads must be positive".into());
        }
        for l in 0..self.levels() {
            let c = self.level_channels(l);
            if !c.is_multiple_of(self.groups) {
                return bad(format!("level {l}: {c} channels not divisible by {} groups", self.groups));
            }
            if self.attention[l] && !c.is_multiple_of(self.heads) {
                return bad(format!("level {l}: {c} channels not divisible by {} heads", self.heads));
            }
            if l + 1 < self.levels() && !(c + self.level_channels(l + 1)).is_multiple_of(self.groups) {
                return bad(format!("level {l}: skip concat not divisible by {} groups", self.groups));
            }
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) || self.text_dim == 0 {
            return bad("time_dim must be even and >= 2, text_dim positive".into());
        }
        if self.max_garments == 0 {
            return bad("max_garments must be positive".into());
        }
        Ok(())
    }

    /// Attention blocks in forward execution order.
    pub fn attention_layers(&self) -> Vec<AttentionLayer> {
        let mut out = Vec::new();
        let levels = self.levels();
        let push = |stage, level: usize, out: &mut Vec<AttentionLayer>| {
            let (h, w) = self.level_size(level);
            out.push(AttentionLayer {
                id: out.len(),
                stage,
                level,
                channels: self.level_channels(level),
                height: h,
                width: w,
            });
        };
        for l in 0..levels {
            if self.attention[l] {
                push(Stage::Down, l, &mut out);
            }
        }
        if self.attention[levels - 1] {
            push(Stage::Mid, levels - 1, &mut out);
        }
        for l in (0..levels).rev() {
            if self.attention[l] {
                push(Stage::Up, l, &mut out);
            }
        }
        out
    }
}
