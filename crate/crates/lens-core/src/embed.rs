//! Embedding tables and sequence-side feature construction.
//!
//! Item and action ids are 1-based in records; row 0 of every sequence table
//! is the padding row. Padding positions are zeroed by mask multiplication,
//! which both excludes them from the masked mean and keeps their table rows
//! gradient-free.

use rand_chacha::ChaCha12Rng;

use crate::config::ModelConfig;
use crate::data::{SequenceBatch, N_ACTIONS};
use crate::error::Result;
use crate::params::{BoundParams, Init, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const EMBED_STD: f64 = 0.02;

/// Shared embedding layout for every model family (fair-input protocol):
/// one item table, one action table, one table per categorical field, and an
/// affine for the dense block.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingLayout {
    pub item_vocab: usize,
    pub n_cat_fields: usize,
    pub cat_vocab: usize,
    pub n_dense_fields: usize,
    pub d: usize,
}

impl EmbeddingLayout {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        EmbeddingLayout {
            item_vocab: cfg.item_vocab,
            n_cat_fields: cfg.n_cat_fields,
            cat_vocab: cfg.cat_vocab,
            n_dense_fields: cfg.n_dense_fields,
            d: cfg.d,
        }
    }

    pub fn register(&self, store: &mut ParameterStore, rng: &mut ChaCha12Rng) {
        let d = self.d;
        store.insert("embed.item", &[self.item_vocab + 1, d], Init::Normal { std: EMBED_STD }, rng);
        store.insert("embed.action", &[N_ACTIONS + 1, d], Init::Normal { std: EMBED_STD }, rng);
        for i in 0..self.n_cat_fields {
            store.insert(
                &format!("embed.cat.{i}"),
                &[self.cat_vocab, d],
                Init::Normal { std: EMBED_STD },
                rng,
            );
        }
        if self.n_dense_fields > 0 {
            store.insert("embed.dense_w", &[self.n_dense_fields, d], Init::Normal { std: EMBED_STD }, rng);
            store.insert("embed.dense_b", &[d], Init::Zeros, rng);
        }
        // Padding rows start at zero and stay there (masking removes their gradient).
        for name in ["embed.item", "embed.action"] {
            let t = store.get_mut(name).unwrap();
            let d = self.d;
            t.data[..d].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn param_count(&self) -> usize {
        let d = self.d;
        let mut n = (self.item_vocab + 1) * d + (N_ACTIONS + 1) * d + self.n_cat_fields * self.cat_vocab * d;
        if self.n_dense_fields > 0 {
            n += self.n_dense_fields * d + d;
        }
        n
    }
}

/// 0/1 mask over sequence positions, shaped [B, L, 1] for broadcasting.
pub fn validity_mask(batch: &SequenceBatch) -> Tensor {
    let mut mask = Tensor::zeros(&[batch.batch, batch.l_max, 1]);
    for (b, &v) in batch.valid_len.iter().enumerate() {
        for p in 0..v {
            mask.data[b * batch.l_max + p] = 1.0;
        }
    }
    mask
}

/// Target item embedding, [B, D].
pub fn lookup_target(tape: &mut Tape, bound: &BoundParams, batch: &SequenceBatch) -> Result<Var> {
    let table = bound.var("embed.item")?;
    tape.gather_rows(table, &batch.candidate_ids)
}

/// Raw sequence-item embeddings with padding zeroed, [B, L, D].
pub fn sequence_raw(tape: &mut Tape, bound: &BoundParams, batch: &SequenceBatch, mask: Var) -> Result<Var> {
    let table = bound.var("embed.item")?;
    let flat = tape.gather_rows(table, &batch.item_ids)?;
    let d = tape.shape(flat)[1];
    let shaped = tape.reshape(flat, &[batch.batch, batch.l_max, d])?;
    tape.mul(shaped, mask)
}

/// Typed-exposure token fusion: item embedding + action embedding at valid
/// positions, exact zeros at padding.
pub fn fuse_typed_tokens(
    tape: &mut Tape,
    bound: &BoundParams,
    batch: &SequenceBatch,
    raw_seq: Var,
    mask: Var,
) -> Result<Var> {
    let action_table = bound.var("embed.action")?;
    let flat = tape.gather_rows(action_table, &batch.action_types)?;
    let d = tape.shape(flat)[1];
    let shaped = tape.reshape(flat, &[batch.batch, batch.l_max, d])?;
    let masked_action = tape.mul(shaped, mask)?;
    tape.add(raw_seq, masked_action)
}

/// Masked mean over valid positions, [B, D]. Empty sequences produce the
/// zero vector so cold users stay scoreable.
pub fn masked_mean(tape: &mut Tape, tokens: Var, batch: &SequenceBatch) -> Result<Var> {
    let mut weights = Tensor::zeros(&[batch.batch, batch.l_max, 1]);
    for (b, &v) in batch.valid_len.iter().enumerate() {
        if v > 0 {
            let w = 1.0 / v as f64;
            for p in 0..v {
                weights.data[b * batch.l_max + p] = w;
            }
        }
    }
    let w = tape.constant(&weights);
    let weighted = tape.mul(tokens, w)?;
    tape.sum_axis(weighted, 1)
}

/// Per-field embeddings, each [B, D]: one per categorical field, then one
/// projected dense block when dense fields exist.
pub fn nonseq_field_vars(
    tape: &mut Tape,
    bound: &BoundParams,
    batch: &SequenceBatch,
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(batch.n_cat_fields + 1);
    for i in 0..batch.n_cat_fields {
        let table = bound.var(&format!("embed.cat.{i}"))?;
        out.push(tape.gather_rows(table, &batch.cat_fields[i])?);
    }
    if batch.n_dense_fields > 0 {
        let mut dense = Tensor::zeros(&[batch.batch, batch.n_dense_fields]);
        for f in 0..batch.n_dense_fields {
            for b in 0..batch.batch {
                dense.data[b * batch.n_dense_fields + f] = batch.dense_fields[f][b];
            }
        }
        let x = tape.constant(&dense);
        let w = bound.var("embed.dense_w")?;
        let bvar = bound.var("embed.dense_b")?;
        out.push(tape.affine2(x, w, bvar)?);
    }
    Ok(out)
}

/// Full-side feature vector, [B, F]: canonical order (target, non-sequential
/// fields, sequence mean).
pub fn build_fullside_vector(
    tape: &mut Tape,
    target: Var,
    fields: &[Var],
    seq_mean: Var,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(fields.len() + 2);
    parts.push(target);
    parts.extend_from_slice(fields);
    parts.push(seq_mean);
    tape.concat(&parts, 1)
}
