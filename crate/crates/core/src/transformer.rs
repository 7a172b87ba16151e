//! Encode blocks over AU tokens with configurable attention drop.
//!
//! Each block is pre-norm: `x + proj(Ā·V)` followed by `x + MLP(LN(x))`.
//! `Ā` is the attention map after the drop rule selected by [`DropMode`]:
//!
//! * `Full` keeps `A` as is.
//! * `RowDrop` keeps the `⌈N/2⌉` largest entries of each row.
//! * `ColDrop` keeps the `⌈N/2⌉` largest entries of each column.
//! * `Learnable` multiplies column `j` by a binary `M_j = 1[σ(m_j) > 0.5]`,
//!   trained with a straight-through gradient.
//!
//! Dropped entries are zeroed without renormalising the rows.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DropMode {
    Full,
    RowDrop,
    ColDrop,
    Learnable,
}

impl DropMode {
    pub const ALL: [DropMode; 4] = [DropMode::Full, DropMode::RowDrop, DropMode::ColDrop, DropMode::Learnable];

    pub fn name(self) -> &'static str {
        match self {
            DropMode::Full => "full",
            DropMode::RowDrop => "row",
            DropMode::ColDrop => "col",
            DropMode::Learnable => "learnable",
        }
    }
}

impl fmt::Display for DropMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DropMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown drop mode '{s}' (expected full, row, col, learnable)")))
    }
}

/// Number of attention heads for width `d`: `d / 64`, at least one.
pub fn head_count(d: usize) -> usize {
    (d / 64).max(1)
}

/// Entries kept per row/column by the row and column drop rules.
pub fn keep_count(n_au: usize) -> usize {
    n_au.div_ceil(2)
}

/// Applies the drop rule to attention maps `a` of shape `[.., N, N]`.
pub fn apply_attention_drop(g: &mut Graph, a: Var, mode: DropMode, mask_logits: Option<Var>) -> Result<Var> {
    let rank = g.shape(a).len();
    if rank < 2 || g.shape(a)[rank - 1] != g.shape(a)[rank - 2] {
        return Err(Error::dim(format!("attention map must be [.., N, N], got {:?}", g.shape(a))));
    }
    let n = g.shape(a)[rank - 1];
    match mode {
        DropMode::Full => Ok(a),
        DropMode::RowDrop => g.topk_mask(a, keep_count(n), rank - 1),
        DropMode::ColDrop => g.topk_mask(a, keep_count(n), rank - 2),
        DropMode::Learnable => {
            let logits = mask_logits.ok_or_else(|| Error::usage("learnable attention drop needs mask logits"))?;
            if g.shape(logits) != [n] {
                return Err(Error::dim(format!("mask logits must be [{n}], got {:?}", g.shape(logits))));
            }
            let m = g.ste_binarize(logits)?;
            g.mul(a, m)
        }
    }
}

/// Parameters of one encode block.
#[derive(Clone, Debug)]
pub struct TransBlock {
    ln1: (ParamId, ParamId),
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: (ParamId, ParamId),
    fc1: Linear,
    fc2: Linear,
    mask_logits: Option<ParamId>,
    heads: usize,
    d: usize,
}

/// Attention maps recorded by one block, each `[B·heads, N, N]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    pub pre_drop: Var,
    pub post_drop: Var,
}

fn layer_norm_params(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.gamma"), Tensor::ones(&[d]), false),
        store.add(format!("{name}.beta"), Tensor::zeros(&[d]), false),
    )
}

impl TransBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, n_au: usize, mode: DropMode, mask_init_std: f64) -> Self {
        let hidden = 4 * d;
        let ln1 = layer_norm_params(store, &format!("{name}.ln1"), d);
        let q = Linear::new(store, rng, &format!("{name}.q"), d, d, INIT_STD, true);
        let k = Linear::new(store, rng, &format!("{name}.k"), d, d, INIT_STD, true);
        let v = Linear::new(store, rng, &format!("{name}.v"), d, d, INIT_STD, true);
        let proj = Linear::new(store, rng, &format!("{name}.proj"), d, d, INIT_STD, true);
        let ln2 = layer_norm_params(store, &format!("{name}.ln2"), d);
        let fc1 = Linear::new(store, rng, &format!("{name}.fc1"), d, hidden, INIT_STD, true);
        let fc2 = Linear::new(store, rng, &format!("{name}.fc2"), hidden, d, INIT_STD, true);
        let mask_logits = (mode == DropMode::Learnable).then(|| {
            store.add_normal(format!("{name}.mask_logits"), &[n_au], mask_init_std, rng)
        });
        TransBlock {
            ln1,
            q,
            k,
            v,
            proj,
            ln2,
            fc1,
            fc2,
            mask_logits,
            heads: head_count(d),
            d,
        }
    }

    pub fn mask_logits(&self) -> Option<ParamId> {
        self.mask_logits
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Splits `[B, N, D]` into `[B·h, N, D/h]`.
    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, n) = (s[0], s[1]);
        let dh = self.d / self.heads;
        let x = g.reshape(x, &[b, n, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * self.heads, n, dh])
    }

    fn merge_heads(&self, g: &mut Graph, x: Var, b: usize) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (n, dh) = (s[1], s[2]);
        let x = g.reshape(x, &[b, self.heads, n, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b, n, self.heads * dh])
    }

    /// `softmax(QKᵀ/√d_head)` per head, plus `V`; `f` is `[B, N, D]`.
    /// Returns `A` as `[B·h, N, N]` and `V` as `[B·h, N, D/h]`.
    pub fn mhsa_attention(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<(Var, Var)> {
        let q = self.q.apply(g, store, f)?;
        let k = self.k.apply(g, store, f)?;
        let v = self.v.apply(g, store, f)?;
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;
        let kt = g.transpose(k)?;
        let scores = g.bmm(q, kt)?;
        let dh = self.d / self.heads;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let a = g.softmax(scores, 2)?;
        Ok((a, v))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: DropMode) -> Result<(Var, AttentionTrace)> {
        let b = g.shape(x)[0];
        let (gamma, beta) = (g.param(store, self.ln1.0), g.param(store, self.ln1.1));
        let h = g.layer_norm(x, gamma, beta)?;
        let (a, v) = self.mhsa_attention(g, store, h)?;
        let mask = self.mask_logits.map(|id| g.param(store, id));
        let a_bar = apply_attention_drop(g, a, mode, mask)?;
        let ctx = g.bmm(a_bar, v)?;
        let ctx = self.merge_heads(g, ctx, b)?;
        let attn_out = self.proj.apply(g, store, ctx)?;
        let x = g.add(x, attn_out)?;

        let (gamma, beta) = (g.param(store, self.ln2.0), g.param(store, self.ln2.1));
        let h = g.layer_norm(x, gamma, beta)?;
        let h = self.fc1.apply(g, store, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.apply(g, store, h)?;
        let out = g.add(x, h)?;
        Ok((
            out,
            AttentionTrace {
                pre_drop: a,
                post_drop: a_bar,
            },
        ))
    }
}

/// Learnable position embedding followed by `depth` encode blocks.
#[derive(Clone, Debug)]
pub struct AuTransformer {
    pos: ParamId,
    blocks: Vec<TransBlock>,
    mode: DropMode,
}

impl AuTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        n_au: usize,
        d: usize,
        depth: usize,
        mode: DropMode,
        mask_init_std: f64,
    ) -> Result<Self> {
        if depth < 1 {
            return Err(Error::config("transformer depth must be at least 1"));
        }
        let pos = store.add_normal(format!("{name}.pos_embed"), &[n_au, d], INIT_STD, rng);
        let blocks = (0..depth)
            .map(|i| TransBlock::new(store, rng, &format!("{name}.block{i}"), d, n_au, mode, mask_init_std))
            .collect();
        Ok(AuTransformer { pos, blocks, mode })
    }

    pub fn blocks(&self) -> &[TransBlock] {
        &self.blocks
    }

    pub fn mode(&self) -> DropMode {
        self.mode
    }

    /// `[B, N, D] → [B, N, D]`, with the attention maps of every block.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_au: Var) -> Result<(Var, Vec<AttentionTrace>)> {
        let pos = g.param(store, self.pos);
        let mut x = g.add(f_au, pos)?;
        let mut traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, t) = block.forward(g, store, x, self.mode)?;
            x = y;
            traces.push(t);
        }
        Ok((x, traces))
    }
}
