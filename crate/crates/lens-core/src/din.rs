//! Target-attention baseline: the candidate scores each history token
//! directly through a small MLP over (token, target, token*target,
//! token-target) interaction features, and the weighted token sum feeds the
//! prediction head.


use crate::config::DinConfig;
use crate::data::SequenceBatch;
use crate::embed::{self, EmbeddingLayout};
use crate::error::Result;
use crate::params::{BoundParams, Init, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

pub struct DinModel {
    pub cfg: DinConfig,
}

pub struct DinForward {
    pub logits: Var,
    pub probs: Var,
    /// Attention weights [B, L+1] (last column is the null token).
    pub attn: Var,
}

impl DinModel {
    pub fn new(cfg: DinConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(DinModel { cfg })
    }

    pub fn init_params(&self, seed: u64) -> ParameterStore {
        let cfg = &self.cfg;
        let mut store = ParameterStore::new();
        let mut rng = crate::params::init_rng(seed, "din");
        let layout = EmbeddingLayout {
            item_vocab: cfg.item_vocab,
            n_cat_fields: cfg.n_cat_fields,
            cat_vocab: cfg.cat_vocab,
            n_dense_fields: cfg.n_dense_fields,
            d: cfg.d,
        };
        layout.register(&mut store, &mut rng);

        let mut in_dim = 4 * cfg.d;
        for (i, &out_dim) in cfg.attn_mlp.iter().enumerate() {
            store.insert(&format!("din.attn.{i}.w"), &[in_dim, out_dim], Init::Normal { std: xavier(in_dim, out_dim) }, &mut rng);
            store.insert(&format!("din.attn.{i}.b"), &[out_dim], Init::Zeros, &mut rng);
            in_dim = out_dim;
        }

        let ns_tokens = cfg.n_cat_fields + usize::from(cfg.n_dense_fields > 0);
        let mut head_in = 2 * cfg.d + if cfg.full_side { ns_tokens * cfg.d } else { 0 };
        for (i, &out_dim) in cfg.mlp_head.iter().enumerate() {
            store.insert(&format!("din.head.{i}.w"), &[head_in, out_dim], Init::Normal { std: xavier(head_in, out_dim) }, &mut rng);
            store.insert(&format!("din.head.{i}.b"), &[out_dim], Init::Zeros, &mut rng);
            head_in = out_dim;
        }
        store
    }

    /// Attention-weighted history summary [B, D]. Empty histories produce
    /// the zero vector (all weight lands on the zero-valued null token).
    fn attention(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        batch: &SequenceBatch,
        target: Var,
        tokens: Var,
    ) -> Result<(Var, Var)> {
        let cfg = &self.cfg;
        let (b, l, d) = (batch.batch, batch.l_max, cfg.d);

        let target3 = tape.reshape(target, &[b, 1, d])?;
        let zeros = tape.constant(&Tensor::zeros(&[b, l, d]));
        let target_b = tape.add(zeros, target3)?;
        let prod = tape.mul(tokens, target_b)?;
        let diff = tape.sub(tokens, target_b)?;
        let feats = tape.concat(&[tokens, target_b, prod, diff], 2)?;

        let mut h = feats;
        let n = cfg.attn_mlp.len();
        for i in 0..n {
            let w = bound.var(&format!("din.attn.{i}.w"))?;
            let bv = bound.var(&format!("din.attn.{i}.b"))?;
            h = tape.affine3(h, w, bv)?;
            if i + 1 < n {
                h = tape.relu(h)?;
            }
        }
        let scores = tape.reshape(h, &[b, l])?;
        let null_col = tape.constant(&Tensor::zeros(&[b, 1]));
        let scores_ext = tape.concat(&[scores, null_col], 1)?;

        let mut mask = vec![true; b * (l + 1)];
        for (bi, &v) in batch.valid_len.iter().enumerate() {
            for j in v..l {
                mask[bi * (l + 1) + j] = false;
            }
            mask[bi * (l + 1) + l] = v == 0;
        }
        let attn = tape.softmax_masked(scores_ext, &mask)?;

        let token_zeros = tape.constant(&Tensor::zeros(&[b, 1, d]));
        let tokens_ext = tape.concat(&[tokens, token_zeros], 1)?;
        let attn3 = tape.reshape(attn, &[b, 1, l + 1])?;
        let ctx = tape.bmm(attn3, tokens_ext)?;
        let out = tape.reshape(ctx, &[b, d])?;
        Ok((out, attn))
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, batch: &SequenceBatch) -> Result<DinForward> {
        let cfg = &self.cfg;
        let b = batch.batch;

        let mask_t = embed::validity_mask(batch);
        let mask = tape.constant(&mask_t);
        let target = embed::lookup_target(tape, bound, batch)?;
        let raw_seq = embed::sequence_raw(tape, bound, batch, mask)?;
        let tokens = embed::fuse_typed_tokens(tape, bound, batch, raw_seq, mask)?;

        let (summary, attn) = self.attention(tape, bound, batch, target, tokens)?;

        let mut parts = vec![summary, target];
        if cfg.full_side {
            parts.extend(embed::nonseq_field_vars(tape, bound, batch)?);
        }
        let mut h = tape.concat(&parts, 1)?;
        let n = cfg.mlp_head.len();
        for i in 0..n {
            let w = bound.var(&format!("din.head.{i}.w"))?;
            let bv = bound.var(&format!("din.head.{i}.b"))?;
            h = tape.affine2(h, w, bv)?;
            if i + 1 < n {
                h = tape.relu(h)?;
            }
        }
        let logits = tape.reshape(h, &[b])?;
        let probs = tape.sigmoid(logits)?;
        Ok(DinForward { logits, probs, attn })
    }
}
