use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::fusion::{self, FusionConfig, FusionProjections, RefTokens};
use crate::params::{ParamId, ParamStore};
use crate::rng::uniform_tensor;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub(crate) const NORM_EPS: f64 = 1e-5;

/// A tape plus the parameter store a model's ids refer to.
pub struct Ctx<'a, E: Scalar> {
    pub tape: &'a mut Tape<E>,
    pub store: &'a ParamStore<E>,
    pub trainable: bool,
}

impl<'a, E: Scalar> Ctx<'a, E> {
    pub fn new(tape: &'a mut Tape<E>, store: &'a ParamStore<E>, trainable: bool) -> Self {
        Self {
            tape,
            store,
            trainable,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id, self.trainable)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        Self {
            w: store.add(format!("{name}.weight"), uniform_tensor(&[fan_in, fan_out], bound, rng)),
            b: store.add(format!("{name}.bias"), uniform_tensor(&[fan_out], bound, rng)),
        }
    }

    pub fn forward<E: Scalar>(&self, ctx: &mut Ctx<E>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add_row_bias(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn register<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        Self {
            w: store.add(
                format!("{name}.weight"),
                uniform_tensor(&[c_out, c_in, kernel, kernel], bound, rng),
            ),
            b: store.add(format!("{name}.bias"), uniform_tensor(&[c_out], bound, rng)),
            stride,
            pad: (kernel - 1) / 2,
        }
    }

    pub fn forward<E: Scalar>(&self, ctx: &mut Ctx<E>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        ctx.tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl Norm {
    pub fn register<E: Scalar>(store: &mut ParamStore<E>, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], E::ONE)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward<E: Scalar>(&self, ctx: &mut Ctx<E>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.tape.group_norm(x, g, b, self.groups, NORM_EPS)
    }
}

/// Two 3×3 convolutions with a timestep-conditioned channel shift and a
/// residual (1×1 projected when the width changes).
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn register<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        time_dim: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: Norm::register(store, &format!("{name}.norm1"), c_in, groups),
            conv1: Conv::register(store, &format!("{name}.conv1"), c_in, c_out, 3, 1, rng),
            time: Linear::register(store, &format!("{name}.time"), time_dim, c_out, rng),
            norm2: Norm::register(store, &format!("{name}.norm2"), c_out, groups),
            conv2: Conv::register(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, rng),
            skip: (c_in != c_out)
                .then(|| Conv::register(store, &format!("{name}.skip"), c_in, c_out, 1, 1, rng)),
        }
    }

    /// `temb` is the already-activated `[1 × time_dim]` timestep embedding.
    pub fn forward<E: Scalar>(&self, ctx: &mut Ctx<E>, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(ctx, x)?;
        let h = ctx.tape.silu(h)?;
        let h = self.conv1.forward(ctx, h)?;
        let shift = self.time.forward(ctx, temb)?;
        let h = ctx.tape.add_channel_bias(h, shift)?;
        let h = self.norm2.forward(ctx, h)?;
        let h = ctx.tape.silu(h)?;
        let h = self.conv2.forward(ctx, h)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(ctx, x)?,
            None => x,
        };
        ctx.tape.add(skip, h)
    }
}

/// Text cross-attention projections: queries from image tokens, keys and
/// values from caption embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wout: ParamId,
    bout: ParamId,
    heads: usize,
}

impl CrossAttention {
    pub fn register<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        name: &str,
        channels: usize,
        text_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let bq = 1.0 / libm::sqrt(channels as f64);
        let bt = 1.0 / libm::sqrt(text_dim as f64);
        Self {
            wq: store.add(format!("{name}.to_q"), uniform_tensor(&[channels, channels], bq, rng)),
            wk: store.add(format!("{name}.to_k"), uniform_tensor(&[text_dim, channels], bt, rng)),
            wv: store.add(format!("{name}.to_v"), uniform_tensor(&[text_dim, channels], bt, rng)),
            wout: store.add(format!("{name}.to_out"), Tensor::zeros(&[channels, channels])),
            bout: store.add(format!("{name}.to_out_bias"), Tensor::zeros(&[channels])),
            heads,
        }
    }

    pub fn value_projection(&self) -> ParamId {
        self.wv
    }

    pub fn output_projection(&self) -> ParamId {
        self.wout
    }

    /// Attention output for `tokens [N×C]` over `text [L×text_dim]`, after the
    /// output projection.
    pub fn forward<E: Scalar>(&self, ctx: &mut Ctx<E>, tokens: Var, text: Var) -> Result<Var> {
        let (wq, wk, wv, wout, bout) = (
            ctx.p(self.wq),
            ctx.p(self.wk),
            ctx.p(self.wv),
            ctx.p(self.wout),
            ctx.p(self.bout),
        );
        let q = ctx.tape.matmul(tokens, wq)?;
        let k = ctx.tape.matmul(text, wk)?;
        let v = ctx.tape.matmul(text, wv)?;
        let a = fusion::attend(ctx.tape, q, k, v, self.heads)?;
        let o = ctx.tape.matmul(a, wout)?;
        ctx.tape.add_row_bias(o, bout)
    }
}

/// Self-attention with reference fusion, then text cross-attention; each
/// sublayer is residual with a zero-initialized output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnBlock {
    pub layer: usize,
    pub channels: usize,
    norm: Norm,
    pub proj: FusionProjections,
    text_norm: Norm,
    pub text: CrossAttention,
}

impl AttnBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn register<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        name: &str,
        layer: usize,
        channels: usize,
        text_dim: usize,
        heads: usize,
        groups: usize,
        per_garment_kv: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            layer,
            channels,
            norm: Norm::register(store, &format!("{name}.norm"), channels, groups),
            proj: FusionProjections::register(store, &format!("{name}.attn"), channels, heads, per_garment_kv, rng),
            text_norm: Norm::register(store, &format!("{name}.text_norm"), channels, groups),
            text: CrossAttention::register(store, &format!("{name}.text"), channels, text_dim, heads, rng),
        }
    }

    /// The normalized token matrix the block's self-attention reads; this is
    /// what the garment encoder captures.
    pub fn normalized_tokens<E: Scalar>(&self, ctx: &mut Ctx<E>, x: Var) -> Result<Var> {
        let h = self.norm.forward(ctx, x)?;
        ctx.tape.to_tokens(h)
    }

    /// `x + fuse(norm(x), refs)` on a `[1, C, h, w]` map.
    pub fn self_attention<E: Scalar>(
        &self,
        ctx: &mut Ctx<E>,
        x: Var,
        refs: &[RefTokens],
        cfg: &FusionConfig,
        capture: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let (h, w) = {
            let s = ctx.tape.shape(x);
            (s[2], s[3])
        };
        let tokens = self.normalized_tokens(ctx, x)?;
        if let Some(c) = capture {
            c.push(tokens);
        }
        let p = self.proj.vars(ctx.tape, ctx.store, ctx.trainable);
        let a = fusion::fuse(ctx.tape, &p, cfg, tokens, refs)?;
        let a = ctx.tape.from_tokens(a, h, w)?;
        ctx.tape.add(x, a)
    }

    /// `x + cross_attn(norm(x), text)`.
    pub fn cross_attention<E: Scalar>(&self, ctx: &mut Ctx<E>, x: Var, text: Var) -> Result<Var> {
        let (h, w) = {
            let s = ctx.tape.shape(x);
            (s[2], s[3])
        };
        let n = self.text_norm.forward(ctx, x)?;
        let tokens = ctx.tape.to_tokens(n)?;
        let a = self.text.forward(ctx, tokens, text)?;
        let a = ctx.tape.from_tokens(a, h, w)?;
        ctx.tape.add(x, a)
    }

    pub fn forward<E: Scalar>(
        &self,
        ctx: &mut Ctx<E>,
        x: Var,
        text: Var,
        refs: &[RefTokens],
        cfg: &FusionConfig,
        capture: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let x = self.self_attention(ctx, x, refs, cfg, capture)?;
        self.cross_attention(ctx, x, text)
    }
}
