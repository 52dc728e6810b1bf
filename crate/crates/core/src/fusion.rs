//! Injection of garment reference tokens into a self-attention block.
//!
//! Three mechanisms share one set of projections:
//!
//! * [`FusionMode::Naive`]: self-attention over `[x; G_1; …; G_k]`, keeping
//!   the first `N` output rows.
//! * [`FusionMode::ConcatKv`]: queries from `x` only, keys and values from the
//!   concatenation, one softmax over all `N + ΣM_i` keys.
//! * [`FusionMode::Addition`]: one attention term per key source, each with
//!   its own softmax, summed in canonical category order.
//!
//! With no references all three run the same plain self-attention path.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::GarmentCategory;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::uniform_tensor;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Naive,
    ConcatKv,
    Addition,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Naive, FusionMode::ConcatKv, FusionMode::Addition];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Naive => "naive",
            FusionMode::ConcatKv => "concat_kv",
            FusionMode::Addition => "addition",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(FusionMode::Naive),
            "concat_kv" => Ok(FusionMode::ConcatKv),
            "addition" => Ok(FusionMode::Addition),
            other => Err(Error::Invalid(format!(
                "unknown fusion mode {other:?} (expected naive, concat_kv or addition)"
            ))),
        }
    }
}

impl core::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Divide the summed garment terms by the garment count (Addition only).
    pub normalize_terms: bool,
    /// Separate key/value projections per garment category.
    pub per_garment_kv: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Addition,
            normalize_terms: false,
            per_garment_kv: false,
        }
    }
}

/// Something tagged with a garment category.
pub trait Categorized {
    fn category(&self) -> GarmentCategory;
}

/// Sort references by category priority. Duplicate categories are rejected.
pub fn canonical_reference_order<T: Categorized>(mut refs: Vec<T>) -> Result<Vec<T>> {
    refs.sort_by_key(|r| r.category().priority());
    for pair in refs.windows(2) {
        if pair[0].category() == pair[1].category() {
            return Err(Error::DuplicateCategory(pair[0].category().as_str()));
        }
    }
    Ok(refs)
}

/// One garment's reference tokens for a single attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefTokens {
    pub category: GarmentCategory,
    pub tokens: Var,
}

impl Categorized for RefTokens {
    fn category(&self) -> GarmentCategory {
        self.category
    }
}

/// Parameter ids of one attention block's projections. Token matrices
/// multiply on the left: `q = x · W_q`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionProjections {
    pub channels: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wout: ParamId,
    pub bout: ParamId,
    /// Per-category `(W_k, W_v)`, indexed by category priority, when enabled.
    pub garment_kv: Vec<(ParamId, ParamId)>,
}

impl FusionProjections {
    pub fn register<E: Scalar, R: Rng>(
        store: &mut ParamStore<E>,
        prefix: &str,
        channels: usize,
        heads: usize,
        per_garment_kv: bool,
        rng: &mut R,
    ) -> Self {
        let c = channels;
        let bound = 1.0 / libm::sqrt(c as f64);
        let wq = store.add(format!("{prefix}.to_q"), uniform_tensor(&[c, c], bound, rng));
        let wk = store.add(format!("{prefix}.to_k"), uniform_tensor(&[c, c], bound, rng));
        let wv = store.add(format!("{prefix}.to_v"), uniform_tensor(&[c, c], bound, rng));
        let wout = store.add(format!("{prefix}.to_out"), Tensor::zeros(&[c, c]));
        let bout = store.add(format!("{prefix}.to_out_bias"), Tensor::zeros(&[c]));
        let garment_kv = if per_garment_kv {
            GarmentCategory::ALL
                .iter()
                .map(|cat| {
                    let k = store.add(
                        format!("{prefix}.garment_{}.to_k", cat.as_str()),
                        uniform_tensor(&[c, c], bound, rng),
                    );
                    let v = store.add(
                        format!("{prefix}.garment_{}.to_v", cat.as_str()),
                        uniform_tensor(&[c, c], bound, rng),
                    );
                    (k, v)
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            channels,
            heads,
            wq,
            wk,
            wv,
            wout,
            bout,
            garment_kv,
        }
    }

    pub fn vars<E: Scalar>(&self, tape: &mut Tape<E>, store: &ParamStore<E>, trainable: bool) -> ProjVars {
        let mut p = |id| tape.param(store, id, trainable);
        ProjVars {
            channels: self.channels,
            heads: self.heads,
            wq: p(self.wq),
            wk: p(self.wk),
            wv: p(self.wv),
            wout: p(self.wout),
            bout: p(self.bout),
            garment_kv: self.garment_kv.iter().map(|&(k, v)| (p(k), p(v))).collect(),
        }
    }
}

/// Projection weights materialized on a tape.
#[derive(Clone, Debug)]
pub struct ProjVars {
    pub channels: usize,
    pub heads: usize,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wout: Var,
    pub bout: Var,
    pub garment_kv: Vec<(Var, Var)>,
}

impl ProjVars {
    fn garment_kv_for(&self, category: GarmentCategory) -> (Var, Var) {
        match self.garment_kv.get(category.priority()) {
            Some(&kv) => kv,
            None => (self.wk, self.wv),
        }
    }
}

fn check_channels<E: Scalar>(tape: &Tape<E>, p: &ProjVars, x: Var, refs: &[RefTokens]) -> Result<()> {
    let sx = tape.shape(x);
    if sx.len() != 2 || sx[1] != p.channels {
        return Err(Error::Shape {
            op: "fusion tokens",
            lhs: sx.to_vec(),
            rhs: alloc::vec![p.channels],
        });
    }
    for r in refs {
        let s = tape.shape(r.tokens);
        if s.len() != 2 || s[1] != p.channels {
            return Err(Error::Shape {
                op: "fusion reference tokens",
                lhs: s.to_vec(),
                rhs: alloc::vec![p.channels],
            });
        }
    }
    Ok(())
}

/// Scaled dot-product attention `softmax(q kᵀ / √d) v`, split into `heads`.
pub fn attend<E: Scalar>(tape: &mut Tape<E>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let c = tape.shape(q)[1];
    if heads <= 1 {
        return attend_head(tape, q, k, v);
    }
    let d = c / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d, d)?;
        let kh = tape.slice_cols(k, h * d, d)?;
        let vh = tape.slice_cols(v, h * d, d)?;
        outs.push(attend_head(tape, qh, kh, vh)?);
    }
    tape.concat_cols(&outs)
}

fn attend_head<E: Scalar>(tape: &mut Tape<E>, q: Var, k: Var, v: Var) -> Result<Var> {
    Ok(attend_with_lse(tape, q, k, v)?.0)
}

/// Single-head attention, also returning each query row's logsumexp of the
/// scaled logits.
pub fn attend_with_lse<E: Scalar>(tape: &mut Tape<E>, q: Var, k: Var, v: Var) -> Result<(Var, Vec<E>)> {
    let d = tape.shape(q)[1];
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, E::from_f64(1.0 / libm::sqrt(d as f64)))?;
    let (weights, lse) = tape.softmax_with_lse(logits)?;
    Ok((tape.matmul(weights, v)?, lse))
}

/// Plain self-attention over `x` (pre output projection).
pub fn plain_self_attention<E: Scalar>(tape: &mut Tape<E>, p: &ProjVars, x: Var) -> Result<Var> {
    let q = tape.matmul(x, p.wq)?;
    let k = tape.matmul(x, p.wk)?;
    let v = tape.matmul(x, p.wv)?;
    attend(tape, q, k, v, p.heads)
}

/// Self-attention over `[x; G_1; …; G_k]`, first `N` rows (pre output projection).
pub fn fuse_naive<E: Scalar>(tape: &mut Tape<E>, p: &ProjVars, x: Var, refs: &[RefTokens]) -> Result<Var> {
    check_channels(tape, p, x, refs)?;
    if refs.is_empty() {
        return plain_self_attention(tape, p, x);
    }
    let refs = ordered(refs)?;
    let n = tape.shape(x)[0];
    let mut parts = Vec::with_capacity(refs.len() + 1);
    parts.push(x);
    parts.extend(refs.iter().map(|r| r.tokens));
    let all = tape.concat_rows(&parts)?;
    let full = plain_self_attention(tape, p, all)?;
    tape.slice_rows(full, 0, n)
}

fn ordered(refs: &[RefTokens]) -> Result<Vec<RefTokens>> {
    canonical_reference_order(refs.to_vec())
}

fn garment_kv<E: Scalar>(tape: &mut Tape<E>, p: &ProjVars, r: &RefTokens) -> Result<(Var, Var)> {
    let (wk, wv) = p.garment_kv_for(r.category);
    Ok((tape.matmul(r.tokens, wk)?, tape.matmul(r.tokens, wv)?))
}

/// Queries from `x`, keys/values from `[x; G_1; …; G_k]` (pre output projection).
pub fn fuse_concat_kv<E: Scalar>(tape: &mut Tape<E>, p: &ProjVars, x: Var, refs: &[RefTokens]) -> Result<Var> {
    check_channels(tape, p, x, refs)?;
    if refs.is_empty() {
        return plain_self_attention(tape, p, x);
    }
    let refs = ordered(refs)?;
    let q = tape.matmul(x, p.wq)?;
    let mut ks = Vec::with_capacity(refs.len() + 1);
    let mut vs = Vec::with_capacity(refs.len() + 1);
    ks.push(tape.matmul(x, p.wk)?);
    vs.push(tape.matmul(x, p.wv)?);
    for r in &refs {
        let (k, v) = garment_kv(tape, p, r)?;
        ks.push(k);
        vs.push(v);
    }
    let k = tape.concat_rows(&ks)?;
    let v = tape.concat_rows(&vs)?;
    attend(tape, q, k, v, p.heads)
}

/// The separate terms of Addition mode: `[Attn(Q_x,K_x,V_x), Attn(Q_x,K_G1,V_G1), …]`,
/// garments in canonical order.
pub fn addition_terms<E: Scalar>(
    tape: &mut Tape<E>,
    p: &ProjVars,
    x: Var,
    refs: &[RefTokens],
) -> Result<Vec<Var>> {
    check_channels(tape, p, x, refs)?;
    let refs = ordered(refs)?;
    let q = tape.matmul(x, p.wq)?;
    let kx = tape.matmul(x, p.wk)?;
    let vx = tape.matmul(x, p.wv)?;
    let mut terms = Vec::with_capacity(refs.len() + 1);
    terms.push(attend(tape, q, kx, vx, p.heads)?);
    for r in &refs {
        let (k, v) = garment_kv(tape, p, r)?;
        terms.push(attend(tape, q, k, v, p.heads)?);
    }
    Ok(terms)
}

/// Self term plus one independently normalized term per garment, summed in
/// canonical category order (pre output projection).
pub fn fuse_addition<E: Scalar>(
    tape: &mut Tape<E>,
    p: &ProjVars,
    x: Var,
    refs: &[RefTokens],
    normalize_terms: bool,
) -> Result<Var> {
    if refs.is_empty() {
        check_channels(tape, p, x, refs)?;
        return plain_self_attention(tape, p, x);
    }
    let terms = addition_terms(tape, p, x, refs)?;
    let mut garments = terms[1];
    for &t in &terms[2..] {
        garments = tape.add(garments, t)?;
    }
    if normalize_terms {
        garments = tape.scale(garments, E::from_f64(1.0 / refs.len() as f64))?;
    }
    tape.add(terms[0], garments)
}

/// Mode dispatch (pre output projection).
pub fn fuse_tokens<E: Scalar>(
    tape: &mut Tape<E>,
    p: &ProjVars,
    cfg: &FusionConfig,
    x: Var,
    refs: &[RefTokens],
) -> Result<Var> {
    if refs.is_empty() {
        check_channels(tape, p, x, refs)?;
        return plain_self_attention(tape, p, x);
    }
    match cfg.mode {
        FusionMode::Naive => fuse_naive(tape, p, x, refs),
        FusionMode::ConcatKv => fuse_concat_kv(tape, p, x, refs),
        FusionMode::Addition => fuse_addition(tape, p, x, refs, cfg.normalize_terms),
    }
}

/// Fused attention followed by the output projection `· W_out + b_out`.
pub fn fuse<E: Scalar>(
    tape: &mut Tape<E>,
    p: &ProjVars,
    cfg: &FusionConfig,
    x: Var,
    refs: &[RefTokens],
) -> Result<Var> {
    let a = fuse_tokens(tape, p, cfg, x, refs)?;
    let o = tape.matmul(a, p.wout)?;
    tape.add_row_bias(o, p.bout)
}

/// Softmax partition weights of ConcatKV attention, per query row and key block.
///
/// Block 0 is the self block, block `i` garment `i`. `w[row][j] = Z_j / ΣZ`
/// where `Z_j` is the row's partition function over block `j`'s keys. Single
/// head only.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionWeights {
    /// Per-row logsumexp of each block: `lse[j][row]`.
    pub lse: Vec<Vec<f64>>,
}

impl PartitionWeights {
    pub fn rows(&self) -> usize {
        self.lse[0].len()
    }

    /// Weights with `offsets[j]` added to every logit of block `j`.
    pub fn weights_with_offsets(&self, offsets: &[f64]) -> Vec<Vec<f64>> {
        (0..self.rows())
            .map(|r| {
                let shifted: Vec<f64> = self
                    .lse
                    .iter()
                    .enumerate()
                    .map(|(j, l)| l[r] + offsets.get(j).copied().unwrap_or(0.0))
                    .collect();
                let m = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: Vec<f64> = shifted.iter().map(|&s| libm::exp(s - m)).collect();
                let total: f64 = z.iter().sum();
                z.iter().map(|&v| v / total).collect()
            })
            .collect()
    }

    pub fn weights(&self) -> Vec<Vec<f64>> {
        self.weights_with_offsets(&[])
    }
}

/// Per-block attention outputs and partition statistics for ConcatKV.
pub fn concat_kv_blocks<E: Scalar>(
    tape: &mut Tape<E>,
    p: &ProjVars,
    x: Var,
    refs: &[RefTokens],
) -> Result<(Vec<Var>, PartitionWeights)> {
    check_channels(tape, p, x, refs)?;
    if p.heads > 1 {
        return Err(Error::Invalid("partition decomposition is single-head".into()));
    }
    let refs = ordered(refs)?;
    let q = tape.matmul(x, p.wq)?;
    let mut outs = Vec::new();
    let mut lse = Vec::new();
    let kx = tape.matmul(x, p.wk)?;
    let vx = tape.matmul(x, p.wv)?;
    let (o, l) = attend_with_lse(tape, q, kx, vx)?;
    outs.push(o);
    lse.push(l.iter().map(|v| v.to_f64()).collect());
    for r in &refs {
        let (k, v) = garment_kv(tape, p, r)?;
        let (o, l) = attend_with_lse(tape, q, k, v)?;
        outs.push(o);
        lse.push(l.iter().map(|v| v.to_f64()).collect());
    }
    Ok((outs, PartitionWeights { lse }))
}
