//! The denoiser UNet and its building blocks.
//!
//! Every model works on a single `[1, C, H, W]` sample; batches are iterated
//! by the training loop. With `patch > 1` the input is folded into
//! `C·patch²` channels before the first convolution and unfolded after the
//! last one.

pub mod blocks;
pub mod config;
pub mod text;
pub mod timestep;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

pub use blocks::{AttnBlock, Conv, CrossAttention, Ctx, Linear, Norm, ResBlock};
pub use config::{AttentionLayer, Stage, UNetConfig};
pub use timestep::TimeEmbedding;

use crate::encoder::GarmentCategory;
use crate::error::{Error, Result};
use crate::fusion::{canonical_reference_order, Categorized, FusionConfig, RefTokens};
use crate::params::{ParamId, ParamStore};
use crate::rng::normal_tensor;
use crate::tape::Var;
use crate::tensor::Scalar;

/// One garment's captured token matrices, indexed by attention layer id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GarmentTokens {
    pub category: GarmentCategory,
    pub layers: Vec<Var>,
}

impl Categorized for GarmentTokens {
    fn category(&self) -> GarmentCategory {
        self.category
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DownLevel {
    res: ResBlock,
    attn: Option<AttnBlock>,
    down: Option<Conv>,
}

#[derive(Clone, Debug, PartialEq)]
struct UpLevel {
    res: ResBlock,
    attn: Option<AttnBlock>,
    up: Option<Conv>,
}

/// Parameter layout and forward pass of the denoiser. The same value serves
/// the garment encoder, bound to a different [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    config: UNetConfig,
    pub fusion: FusionConfig,
    text_table: ParamId,
    time: TimeEmbedding,
    conv_in: Conv,
    down: Vec<DownLevel>,
    mid_res: ResBlock,
    mid_attn: Option<AttnBlock>,
    up: Vec<UpLevel>,
    out_norm: Norm,
    conv_out: Conv,
    layers: Vec<AttentionLayer>,
}

impl UNet {
    /// Registers all parameters into `store` (which must be empty) and
    /// returns the layout.
    pub fn new<E: Scalar, R: Rng>(
        config: UNetConfig,
        fusion: FusionConfig,
        store: &mut ParamStore<E>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if !store.is_empty() {
            return Err(Error::Architecture("parameter store is not empty".into()));
        }
        let c = &config;
        let levels = c.levels();
        let pix = c.in_channels * c.patch * c.patch;
        let mut next_layer = 0usize;
        let mut attn = |store: &mut ParamStore<E>, name: &str, ch: usize, rng: &mut R| {
            let id = next_layer;
            next_layer += 1;
            AttnBlock::register(store, name, id, ch, c.text_dim, c.heads, c.groups, fusion.per_garment_kv, rng)
        };

        let text_table = store.add(
            "text.embedding",
            normal_tensor(&[text::vocab_size(), c.text_dim], rng),
        );
        let time = TimeEmbedding::register(store, c.time_dim, rng);
        let conv_in = Conv::register(store, "conv_in", pix, c.level_channels(0), 3, 1, rng);

        let mut down = Vec::with_capacity(levels);
        for l in 0..levels {
            let ch = c.level_channels(l);
            let c_in = if l == 0 { ch } else { c.level_channels(l - 1) };
            let name = format!("down.{l}");
            let res = ResBlock::register(store, &format!("{name}.res"), c_in, ch, c.time_dim, c.groups, rng);
            let a = c.attention[l].then(|| attn(store, &format!("{name}.attn"), ch, rng));
            let d = (l + 1 < levels).then(|| Conv::register(store, &format!("{name}.down"), ch, ch, 3, 2, rng));
            down.push(DownLevel { res, attn: a, down: d });
        }

        let top = c.level_channels(levels - 1);
        let mid_res = ResBlock::register(store, "mid.res", top, top, c.time_dim, c.groups, rng);
        let mid_attn = c.attention[levels - 1].then(|| attn(store, "mid.attn", top, rng));

        let mut up = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            let ch = c.level_channels(l);
            let below = if l + 1 == levels { top } else { c.level_channels(l + 1) };
            let name = format!("up.{l}");
            let res = ResBlock::register(store, &format!("{name}.res"), below + ch, ch, c.time_dim, c.groups, rng);
            let a = c.attention[l].then(|| attn(store, &format!("{name}.attn"), ch, rng));
            let u = (l > 0).then(|| Conv::register(store, &format!("{name}.up"), ch, ch, 3, 1, rng));
            up.push(UpLevel { res, attn: a, up: u });
        }

        let c0 = c.level_channels(0);
        let out_norm = Norm::register(store, "out.norm", c0, c.groups);
        let conv_out = Conv::register(store, "conv_out", c0, pix, 3, 1, rng);
        let layers = c.attention_layers();
        debug_assert_eq!(layers.len(), next_layer);
        Ok(Self {
            config,
            fusion,
            text_table,
            time,
            conv_in,
            down,
            mid_res,
            mid_attn,
            up,
            out_norm,
            conv_out,
            layers,
        })
    }

    /// Fails unless `store` has exactly the parameter names and shapes this
    /// layout registers.
    pub fn check_store<E: Scalar>(&self, store: &ParamStore<E>) -> Result<()> {
        let mut template = ParamStore::<E>::new(store.tag());
        UNet::new(self.config.clone(), self.fusion, &mut template, &mut crate::rng::seeded(0))?;
        if template.same_layout(store) {
            Ok(())
        } else {
            Err(Error::Architecture(format!(
                "store has {} parameters, layout expects {}",
                store.len(),
                template.len()
            )))
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Attention layers in depth-first order; index = layer id.
    pub fn attention_layers(&self) -> &[AttentionLayer] {
        &self.layers
    }

    pub fn text_table(&self) -> ParamId {
        self.text_table
    }

    pub fn attention_blocks(&self) -> Vec<&AttnBlock> {
        let mut out: Vec<&AttnBlock> = self.down.iter().filter_map(|d| d.attn.as_ref()).collect();
        out.extend(self.mid_attn.as_ref());
        out.extend(self.up.iter().filter_map(|u| u.attn.as_ref()));
        out
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [1, self.config.in_channels, self.config.height, self.config.width]
    }

    /// Rows of the embedding table for `tokens`; empty input yields the NULL row.
    pub fn embed_caption<E: Scalar>(&self, ctx: &mut Ctx<E>, tokens: &[usize]) -> Result<Var> {
        let vocab = text::vocab_size();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let table = ctx.p(self.text_table);
        let ids = if tokens.is_empty() { vec![text::NULL_TOKEN] } else { tokens.to_vec() };
        ctx.tape.gather_rows(table, &ids)
    }

    pub fn timestep_embedding<E: Scalar>(&self, ctx: &mut Ctx<E>, t: usize) -> Result<Var> {
        self.time.forward(ctx, t)
    }

    /// Epsilon prediction for `x` `[1, C, H, W]` at step `t`.
    pub fn forward<E: Scalar>(
        &self,
        ctx: &mut Ctx<E>,
        x: Var,
        t: usize,
        text: Var,
        refs: &[GarmentTokens],
    ) -> Result<Var> {
        if refs.len() > self.config.max_garments {
            return Err(Error::TooManyGarments {
                got: refs.len(),
                max: self.config.max_garments,
            });
        }
        if let Some(g) = refs.iter().find(|g| g.layers.len() != self.layers.len()) {
            return Err(Error::MissingLayer(g.layers.len().min(self.layers.len())));
        }
        let refs = canonical_reference_order(refs.to_vec())?;
        self.run(ctx, x, t, text, &refs, None)?
            .ok_or_else(|| Error::Architecture("forward pass produced no output".into()))
    }

    /// Normalized self-attention inputs at every attention layer, stopping
    /// after the last one.
    pub fn capture<E: Scalar>(&self, ctx: &mut Ctx<E>, x: Var, t: usize, text: Var) -> Result<Vec<Var>> {
        let mut captured = Vec::with_capacity(self.layers.len());
        if !self.layers.is_empty() {
            self.run(ctx, x, t, text, &[], Some(&mut captured))?;
        }
        Ok(captured)
    }

    fn check_input<E: Scalar>(&self, ctx: &Ctx<E>, x: Var, text: Var) -> Result<()> {
        let expected = self.input_shape();
        if ctx.tape.shape(x) != expected {
            return Err(Error::Geometry {
                expected: expected.to_vec(),
                got: ctx.tape.shape(x).to_vec(),
            });
        }
        let ts = ctx.tape.shape(text);
        if ts.len() != 2 || ts[1] != self.config.text_dim {
            return Err(Error::Shape {
                op: "text embedding",
                lhs: ts.to_vec(),
                rhs: vec![self.config.text_dim],
            });
        }
        Ok(())
    }

    fn run<E: Scalar>(
        &self,
        ctx: &mut Ctx<E>,
        x: Var,
        t: usize,
        text: Var,
        refs: &[GarmentTokens],
        mut capture: Option<&mut Vec<Var>>,
    ) -> Result<Option<Var>> {
        self.check_input(ctx, x, text)?;
        let n_layers = self.layers.len();
        let layer_refs = |block: &AttnBlock| -> Vec<RefTokens> {
            refs.iter()
                .map(|g| RefTokens {
                    category: g.category,
                    tokens: g.layers[block.layer],
                })
                .collect()
        };
        let done = |c: &Option<&mut Vec<Var>>| c.as_ref().is_some_and(|c| c.len() == n_layers);

        let temb = self.time.forward(ctx, t)?;
        let temb = ctx.tape.silu(temb)?;
        let mut h = ctx.tape.space_to_depth(x, self.config.patch)?;
        h = self.conv_in.forward(ctx, h)?;

        let mut skips = Vec::with_capacity(self.down.len());
        for level in &self.down {
            h = level.res.forward(ctx, h, temb)?;
            if let Some(a) = &level.attn {
                h = a.forward(ctx, h, text, &layer_refs(a), &self.fusion, capture.as_deref_mut())?;
                if done(&capture) {
                    return Ok(None);
                }
            }
            skips.push(h);
            if let Some(d) = &level.down {
                h = d.forward(ctx, h)?;
            }
        }

        h = self.mid_res.forward(ctx, h, temb)?;
        if let Some(a) = &self.mid_attn {
            h = a.forward(ctx, h, text, &layer_refs(a), &self.fusion, capture.as_deref_mut())?;
            if done(&capture) {
                return Ok(None);
            }
        }

        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = ctx.tape.concat_channels(&[h, skip])?;
            h = level.res.forward(ctx, h, temb)?;
            if let Some(a) = &level.attn {
                h = a.forward(ctx, h, text, &layer_refs(a), &self.fusion, capture.as_deref_mut())?;
                if done(&capture) {
                    return Ok(None);
                }
            }
            if let Some(u) = &level.up {
                h = ctx.tape.upsample2x(h)?;
                h = u.forward(ctx, h)?;
            }
        }

        h = self.out_norm.forward(ctx, h)?;
        h = ctx.tape.silu(h)?;
        h = self.conv_out.forward(ctx, h)?;
        Ok(Some(ctx.tape.depth_to_space(h, self.config.patch)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    fn tiny() -> UNetConfig {
        UNetConfig {
            height: 8,
            width: 8,
            patch: 1,
            base_width: 8,
            channel_mult: vec![1, 2],
            attention: vec![false, true],
            groups: 4,
            text_dim: 4,
            time_dim: 8,
            ..Default::default()
        }
    }

    fn build(cfg: UNetConfig, seed: u64) -> (UNet, ParamStore<f64>) {
        let mut store = ParamStore::new(0);
        let net = UNet::new(cfg, FusionConfig::default(), &mut store, &mut seeded(seed)).unwrap();
        store.jitter(0.05, &mut seeded(seed + 1));
        (net, store)
    }

    #[test]
    fn output_shape_matches_input() {
        for patch in [1, 2] {
            let (net, store) = build(UNetConfig { patch, ..tiny() }, 1);
            let mut tape = Tape::inference();
            let mut ctx = Ctx::new(&mut tape, &store, false);
            let x = ctx.tape.constant(normal_tensor(&net.input_shape(), &mut seeded(2))).unwrap();
            let text = net.embed_caption(&mut ctx, &[]).unwrap();
            let y = net.forward(&mut ctx, x, 5, text, &[]).unwrap();
            assert_eq!(ctx.tape.shape(y), &net.input_shape());
        }
    }

    #[test]
    fn geometry_mismatch_is_reported() {
        let (net, store) = build(tiny(), 1);
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &store, false);
        let x = ctx.tape.constant(Tensor::zeros(&[1, 3, 8, 6])).unwrap();
        let text = net.embed_caption(&mut ctx, &[]).unwrap();
        assert!(matches!(net.forward(&mut ctx, x, 0, text, &[]), Err(Error::Geometry { .. })));
    }

    #[test]
    fn missing_layer_is_reported() {
        let (net, store) = build(tiny(), 1);
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &store, false);
        let x = ctx.tape.constant(Tensor::zeros(&net.input_shape())).unwrap();
        let text = net.embed_caption(&mut ctx, &[]).unwrap();
        let refs = [GarmentTokens {
            category: GarmentCategory::Upper,
            layers: vec![],
        }];
        assert!(matches!(net.forward(&mut ctx, x, 0, text, &refs), Err(Error::MissingLayer(0))));
    }

    #[test]
    fn capture_covers_every_attention_layer() {
        let (net, store) = build(tiny(), 3);
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &store, false);
        let x = ctx.tape.constant(normal_tensor(&net.input_shape(), &mut seeded(4))).unwrap();
        let text = net.embed_caption(&mut ctx, &[text::token_id("upper")]).unwrap();
        let caps = net.capture(&mut ctx, x, 0, text).unwrap();
        assert_eq!(caps.len(), net.attention_layers().len());
        for (v, l) in caps.iter().zip(net.attention_layers()) {
            assert_eq!(ctx.tape.shape(*v), &[l.tokens(), l.channels]);
        }
    }

    #[test]
    fn embed_caption_is_table_lookup() {
        let (net, store) = build(tiny(), 1);
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &store, false);
        let words = ["upper", "striped", "red"];
        let ids = text::tokenize(&words);
        assert_eq!(ids[1], text::OOV_TOKEN);
        let e = net.embed_caption(&mut ctx, &ids).unwrap();
        let table = store.value(net.text_table());
        let d = net.config().text_dim;
        for (r, &id) in ids.iter().enumerate() {
            assert_eq!(&ctx.tape.value(e).data()[r * d..(r + 1) * d], &table.data()[id * d..(id + 1) * d]);
        }
        let null = net.embed_caption(&mut ctx, &[]).unwrap();
        assert_eq!(ctx.tape.shape(null), &[1, d]);
    }

    #[test]
    fn distinct_steps_embed_differently() {
        let (net, store) = build(tiny(), 1);
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &store, false);
        let a = net.timestep_embedding(&mut ctx, 10).unwrap();
        let b = net.timestep_embedding(&mut ctx, 11).unwrap();
        assert!(ctx.tape.value(a).max_abs_diff(ctx.tape.value(b)) > 0.0);
    }
}
