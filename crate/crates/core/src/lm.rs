//! Decoder-only transformer over mixed streams of tokens, patch features and
//! region features.
//!
//! Stream layout: `[BOS, N^2 projected patches, one row per sequence element]`.
//! Word and communication tokens use the (tied) token embedding; ROI slots use
//! a projection of their pooled feature plus a learned slot embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{CommSequence, Element, Vocab};
use crate::numerics::{NumericsError, ParamId, ParamStore, Scalar, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("config: {0}")]
    Config(String),
    #[error("no region feature supplied for slot {0}")]
    MissingRoi(usize),
    #[error("stream length {len} exceeds maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("no positions contribute to the loss")]
    NoTargets,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl LmConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        Self { layers: 4, heads: 4, dim: 64, ffn: 256, max_len: 256, vocab_size }
    }

    pub fn check(&self) -> Result<(), LmError> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(LmError::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.layers == 0 || self.ffn == 0 || self.max_len == 0 || self.vocab_size == 0 {
            return Err(LmError::Config("layers, ffn, max_len and vocab_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub cfg: LmConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    patch_w: ParamId,
    patch_b: ParamId,
    roi_w: ParamId,
    roi_b: ParamId,
    roi_slot: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

/// Logits `[L, V]` and final hidden states `[L, D]` (after the last layer
/// norm, before unembedding).
#[derive(Clone, Copy, Debug)]
pub struct LmOutput {
    pub logits: Var,
    pub hidden: Var,
}

impl LanguageModel {
    /// `feature_dim` is the width of patch and region features handed in.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: LmConfig,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, LmError> {
        cfg.check()?;
        let d = cfg.dim;
        let lin = (1.0 / d as f64).sqrt();
        let out_std = lin / (2.0 * cfg.layers as f64).sqrt();
        let fin = (1.0 / feature_dim as f64).sqrt();
        let tok_emb = store.normal("lm.tok_emb", vec![cfg.vocab_size, d], 0.02, rng);
        let pos_emb = store.normal("lm.pos_emb", vec![cfg.max_len, d], 0.02, rng);
        let patch_w = store.normal("lm.patch_proj.w", vec![feature_dim, d], fin, rng);
        let patch_b = store.constant("lm.patch_proj.b", vec![d], 0.0);
        let roi_w = store.normal("lm.roi_proj.w", vec![feature_dim, d], fin, rng);
        let roi_b = store.constant("lm.roi_proj.b", vec![d], 0.0);
        let roi_slot = store.normal("lm.roi_slot", vec![d], 0.02, rng);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let name = |s: &str| format!("lm.blocks.{i}.{s}");
                Block {
                    ln1_g: store.constant(&name("ln1.g"), vec![d], 1.0),
                    ln1_b: store.constant(&name("ln1.b"), vec![d], 0.0),
                    wq: store.normal(&name("attn.wq"), vec![d, d], lin, rng),
                    wk: store.normal(&name("attn.wk"), vec![d, d], lin, rng),
                    wv: store.normal(&name("attn.wv"), vec![d, d], lin, rng),
                    wo: store.normal(&name("attn.wo"), vec![d, d], out_std, rng),
                    ln2_g: store.constant(&name("ln2.g"), vec![d], 1.0),
                    ln2_b: store.constant(&name("ln2.b"), vec![d], 0.0),
                    w1: store.normal(&name("ffn.w1"), vec![d, cfg.ffn], lin, rng),
                    b1: store.constant(&name("ffn.b1"), vec![cfg.ffn], 0.0),
                    w2: store.normal(&name("ffn.w2"), vec![cfg.ffn, d], out_std * (d as f64 / cfg.ffn as f64).sqrt(), rng),
                    b2: store.constant(&name("ffn.b2"), vec![d], 0.0),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            tok_emb,
            pos_emb,
            patch_w,
            patch_b,
            roi_w,
            roi_b,
            roi_slot,
            blocks,
            lnf_g: store.constant("lm.ln_f.g", vec![d], 1.0),
            lnf_b: store.constant("lm.ln_f.b", vec![d], 0.0),
        })
    }

    /// Stream length for a sequence over an `n_patches` grid.
    pub fn stream_len(n_patches: usize, seq: &CommSequence) -> usize {
        1 + n_patches + seq.len()
    }

    /// Stream rows before positional embeddings are added.
    ///
    /// `rois` holds one feature row per slot of `seq`.
    pub fn embed_content<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        seq: &CommSequence,
        grid: Var,
        rois: Option<Var>,
    ) -> Result<Var, LmError> {
        let n_patches = tape.shape(grid)[0];
        let len = Self::stream_len(n_patches, seq);
        let n_rois = rois.map_or(0, |r| tape.shape(r)[0]);
        let body = 1 + n_patches;

        let mut tok_idx = vec![None; len];
        tok_idx[0] = Some(Vocab::BOS_ID);
        let mut roi_idx = vec![None; len];
        for (j, e) in seq.elements.iter().enumerate() {
            match *e {
                Element::Word(w) => tok_idx[body + j] = Some(w.index()),
                Element::Comm(t) => tok_idx[body + j] = Some(Vocab::comm_id(t).index()),
                Element::Roi(k) => {
                    if k >= n_rois {
                        return Err(LmError::MissingRoi(k));
                    }
                    roi_idx[body + j] = Some(k);
                }
            }
        }
        let mut x = tape.gather_rows(params[self.tok_emb.0], tok_idx)?;

        let patches = tape.matmul(grid, params[self.patch_w.0])?;
        let patches = tape.add_row(patches, params[self.patch_b.0])?;
        let patch_idx = (0..len).map(|i| (1..body).contains(&i).then(|| i - 1)).collect();
        let patches = tape.gather_rows(patches, patch_idx)?;
        x = tape.add(x, patches)?;

        if let Some(r) = rois.filter(|_| roi_idx.iter().any(Option::is_some)) {
            let r = tape.matmul(r, params[self.roi_w.0])?;
            let r = tape.add_row(r, params[self.roi_b.0])?;
            let r = tape.add_row(r, params[self.roi_slot.0])?;
            let r = tape.gather_rows(r, roi_idx)?;
            x = tape.add(x, r)?;
        }
        Ok(x)
    }

    pub fn embed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        seq: &CommSequence,
        grid: Var,
        rois: Option<Var>,
    ) -> Result<Var, LmError> {
        let x = self.embed_content(tape, params, seq, grid, rois)?;
        let len = tape.shape(x)[0];
        if len > self.cfg.max_len {
            return Err(LmError::TooLong { len, max: self.cfg.max_len });
        }
        let pos = tape.slice_rows(params[self.pos_emb.0], 0, len)?;
        Ok(tape.add(x, pos)?)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var], stream: Var) -> Result<LmOutput, LmError> {
        let len = tape.shape(stream)[0];
        if len > self.cfg.max_len {
            return Err(LmError::TooLong { len, max: self.cfg.max_len });
        }
        let d = self.cfg.dim;
        let dh = d / self.cfg.heads;
        let att_scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut x = stream;
        for b in &self.blocks {
            let h = tape.layernorm(x, params[b.ln1_g.0], params[b.ln1_b.0], LN_EPS)?;
            let q = tape.matmul(h, params[b.wq.0])?;
            let k = tape.matmul(h, params[b.wk.0])?;
            let v = tape.matmul(h, params[b.wv.0])?;
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for hi in 0..self.cfg.heads {
                let (s, e) = (hi * dh, (hi + 1) * dh);
                let qh = tape.slice_cols(q, s, e)?;
                let kh = tape.slice_cols(k, s, e)?;
                let vh = tape.slice_cols(v, s, e)?;
                let scores = tape.matmul_t(qh, kh)?;
                let scores = tape.scale(scores, att_scale)?;
                let att = tape.causal_softmax(scores)?;
                heads.push(tape.matmul(att, vh)?);
            }
            let cat = tape.concat_cols(&heads)?;
            let o = tape.matmul(cat, params[b.wo.0])?;
            x = tape.add(x, o)?;

            let h = tape.layernorm(x, params[b.ln2_g.0], params[b.ln2_b.0], LN_EPS)?;
            let f = tape.matmul(h, params[b.w1.0])?;
            let f = tape.add_row(f, params[b.b1.0])?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, params[b.w2.0])?;
            let f = tape.add_row(f, params[b.b2.0])?;
            x = tape.add(x, f)?;
        }
        let hidden = tape.layernorm(x, params[self.lnf_g.0], params[self.lnf_b.0], LN_EPS)?;
        let logits = tape.matmul_t(hidden, params[self.tok_emb.0])?;
        Ok(LmOutput { logits, hidden })
    }
}

/// Next-token targets for every stream position. A position is scored when
/// the element after it is a word or communication token, or (for the last
/// position, when `with_eos`) end of sequence. Positions followed by a patch
/// or a ROI slot carry no target.
pub fn lm_targets(n_patches: usize, seq: &CommSequence, with_eos: bool) -> Vec<Option<usize>> {
    let body = 1 + n_patches;
    let mut t = vec![None; body + seq.len()];
    for (j, e) in seq.elements.iter().enumerate() {
        t[body + j - 1] = match *e {
            Element::Word(w) => Some(w.index()),
            Element::Comm(c) => Some(Vocab::comm_id(c).index()),
            Element::Roi(_) => None,
        };
    }
    if with_eos {
        let last = t.len() - 1;
        t[last] = Some(Vocab::EOS_ID);
    }
    t
}

/// Mean NLL over positions carrying a target.
pub fn lm_loss<T: Scalar>(tape: &mut Tape<T>, out: &LmOutput, targets: Vec<Option<usize>>) -> Result<Var, LmError> {
    if targets.iter().all(Option::is_none) {
        return Err(LmError::NoTargets);
    }
    Ok(tape.cross_entropy(out.logits, targets)?)
}

/// Row-wise log-softmax of a logits row.
pub fn log_softmax(row: &[f32]) -> Vec<f32> {
    let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = row.iter().map(|&x| ((x - mx) as f64).exp()).sum::<f64>().ln() as f32 + mx;
    row.iter().map(|&x| x - lse).collect()
}
