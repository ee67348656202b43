//! Latent-query decoder: QueryGen, cross-attention over the behaviour
//! sequence with pluggable additive bias providers, query boosting, the
//! capacity switches, and the MLP prediction head.
//!
//! Layer structure (pre-LayerNorm residual blocks):
//!
//! ```text
//! Q <- Q + CrossAttn(LN(Q), S, S)        logits = content/sqrt(d_h) + biases
//! Q <- Q + SelfAttn(LN(Q ∪ ns_tokens))   (query boosting, queries emitted)
//! Q <- Q + FFN(LN(Q))
//! ```
//!
//! Bias matrices are shared across attention heads: one bias per
//! (layer, query, position). Empty sequences attend to a sentinel null token
//! whose value vector is zero, so cold-start users score instead of erroring.

use rand_chacha::ChaCha12Rng;

use crate::config::{ConditionSource, ModelConfig};
use crate::data::SequenceBatch;
use crate::embed::{self, EmbeddingLayout};
use crate::error::Result;
use crate::lens;
use crate::params::{BoundParams, Init, ParameterStore};
use crate::posbias;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Hidden width of the boosting FFN relative to D.
const FFN_MULT: usize = 2;

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

pub struct LatentQueryModel {
    pub cfg: ModelConfig,
    pub condition: ConditionSource,
}

/// Captured forward internals for diagnostics and invariant tests.
#[derive(Default)]
pub struct Trace {
    /// Per layer: attention weights [B*heads, q_total, L+1] (last column is
    /// the null token).
    pub attn: Vec<Tensor>,
    pub heads: usize,
    /// TCQG gate [B, q, D] when active.
    pub gate: Option<Tensor>,
    /// Per layer, storage-aligned [B, q, L_max].
    pub static_bias: Vec<Option<Tensor>>,
    pub tc_bias: Vec<Option<Tensor>>,
}

pub struct Forward {
    pub logits: Var,
    pub probs: Var,
}

pub(crate) struct MhaWeights {
    pub(crate) wq: Var,
    pub(crate) bq: Var,
    pub(crate) wk: Var,
    pub(crate) bk: Var,
    pub(crate) wv: Var,
    pub(crate) bv: Var,
    pub(crate) wo: Var,
    pub(crate) bo: Var,
}

impl MhaWeights {
    pub(crate) fn bind(bound: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(MhaWeights {
            wq: bound.var(&format!("{prefix}.wq"))?,
            bq: bound.var(&format!("{prefix}.bq"))?,
            wk: bound.var(&format!("{prefix}.wk"))?,
            bk: bound.var(&format!("{prefix}.bk"))?,
            wv: bound.var(&format!("{prefix}.wv"))?,
            bv: bound.var(&format!("{prefix}.bv"))?,
            wo: bound.var(&format!("{prefix}.wo"))?,
            bo: bound.var(&format!("{prefix}.bo"))?,
        })
    }
}

pub(crate) fn register_mha(store: &mut ParameterStore, prefix: &str, d: usize, rng: &mut ChaCha12Rng) {
    let std = xavier(d, d);
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(&format!("{prefix}.{w}"), &[d, d], Init::Normal { std }, rng);
    }
    for b in ["bq", "bk", "bv", "bo"] {
        store.insert(&format!("{prefix}.{b}"), &[d], Init::Zeros, rng);
    }
}

fn register_ln(store: &mut ParameterStore, prefix: &str, d: usize, rng: &mut ChaCha12Rng) {
    store.insert(&format!("{prefix}.g"), &[d], Init::Zeros, rng);
    store.insert(&format!("{prefix}.b"), &[d], Init::Zeros, rng);
    // gamma starts at 1
    store.get_mut(&format!("{prefix}.g")).unwrap().data.iter_mut().for_each(|v| *v = 1.0);
}

/// Split [B,T,D] into heads: [B*h, T, d_h].
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let r = tape.reshape(x, &[b, t, heads, dh])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[b * heads, t, dh])
}

/// Merge [B*h, T, d_h] back to [B,T,D].
fn merge_heads(tape: &mut Tape, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (t, dh) = (s[1], s[2]);
    let r = tape.reshape(x, &[batch, heads, t, dh])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[batch, t, heads * dh])
}

/// Multi-head attention from `x_q` [B,T,D] over `kv` [B,L,D].
///
/// `key_valid`: per-sample count of valid kv positions; `None` means every
/// position is valid (boosting). With `null_token`, a zero key/value column
/// is appended and is attendable only for samples with no valid positions.
/// `bias` is [B,T,L], shared across heads, added to the scaled content logits.
pub(crate) fn mha(
    tape: &mut Tape,
    w: &MhaWeights,
    heads: usize,
    x_q: Var,
    kv: Var,
    bias: Option<Var>,
    key_valid: Option<&[usize]>,
    null_token: bool,
) -> Result<(Var, Var)> {
    let (b, t, d) = {
        let s = tape.shape(x_q);
        (s[0], s[1], s[2])
    };
    let l = tape.shape(kv)[1];
    let dh = d / heads;

    let q = tape.affine3(x_q, w.wq, w.bq)?;
    let k = tape.affine3(kv, w.wk, w.bk)?;
    let v = tape.affine3(kv, w.wv, w.bv)?;
    let qh = split_heads(tape, q, heads)?;
    let mut kh = split_heads(tape, k, heads)?;
    let mut vh = split_heads(tape, v, heads)?;

    let lk = if null_token {
        let zeros = tape.constant(&Tensor::zeros(&[b * heads, 1, dh]));
        kh = tape.concat(&[kh, zeros], 1)?;
        vh = tape.concat(&[vh, zeros], 1)?;
        l + 1
    } else {
        l
    };

    let kt = tape.permute(kh, &[0, 2, 1])?;
    let content = tape.bmm(qh, kt)?;
    let mut logits = tape.scale(content, 1.0 / (dh as f64).sqrt())?;

    if let Some(bias) = bias {
        let padded = if null_token {
            let zeros = tape.constant(&Tensor::zeros(&[b, t, 1]));
            tape.concat(&[bias, zeros], 2)?
        } else {
            bias
        };
        let b4 = tape.reshape(padded, &[b, 1, t, lk])?;
        let l4 = tape.reshape(logits, &[b, heads, t, lk])?;
        let sum = tape.add(l4, b4)?;
        logits = tape.reshape(sum, &[b * heads, t, lk])?;
    }

    let mut mask = vec![true; b * heads * t * lk];
    if let Some(valid) = key_valid {
        for bi in 0..b {
            let vl = valid[bi];
            for h in 0..heads {
                for ti in 0..t {
                    let base = ((bi * heads + h) * t + ti) * lk;
                    for j in vl..l {
                        mask[base + j] = false;
                    }
                    if null_token {
                        mask[base + l] = vl == 0;
                    }
                }
            }
        }
    } else if null_token {
        for m in mask.iter_mut().skip(l).step_by(lk) {
            *m = false;
        }
    }

    let attn = tape.softmax_masked(logits, &mask)?;
    let ctx = tape.bmm(attn, vh)?;
    let merged = merge_heads(tape, ctx, b, heads)?;
    let out = tape.affine3(merged, w.wo, w.bo)?;
    Ok((out, attn))
}

impl LatentQueryModel {
    pub fn new(cfg: ModelConfig, condition: ConditionSource) -> Result<Self> {
        cfg.validate()?;
        Ok(LatentQueryModel { cfg, condition })
    }

    /// Parameters in declaration order. LENS projections are registered
    /// last so that a LENS-enabled store shares every backbone draw with the
    /// reference store for the same seed.
    pub fn init_params(&self, seed: u64) -> ParameterStore {
        let cfg = &self.cfg;
        let mut store = ParameterStore::new();
        let mut rng = crate::params::init_rng(seed, "latent-query");
        EmbeddingLayout::from_model(cfg).register(&mut store, &mut rng);

        let f_dim = cfg.fullside_dim();
        store.insert("qgen.w", &[f_dim, cfg.q * cfg.d], Init::Normal { std: xavier(f_dim, cfg.q * cfg.d) }, &mut rng);
        store.insert("qgen.b", &[cfg.q * cfg.d], Init::Zeros, &mut rng);

        if cfg.switches.seq_pooling_tokens {
            for i in 0..cfg.k_pool {
                store.insert(&format!("pool.{i}.w"), &[cfg.d, cfg.d], Init::Normal { std: xavier(cfg.d, cfg.d) }, &mut rng);
                store.insert(&format!("pool.{i}.b"), &[cfg.d], Init::Zeros, &mut rng);
            }
        }

        let ffn_hidden = FFN_MULT * cfg.d;
        for layer in 0..cfg.n_layers {
            register_ln(&mut store, &format!("ca.{layer}.ln"), cfg.d, &mut rng);
            register_mha(&mut store, &format!("ca.{layer}"), cfg.d, &mut rng);
            register_ln(&mut store, &format!("boost.{layer}.ln"), cfg.d, &mut rng);
            register_mha(&mut store, &format!("boost.{layer}"), cfg.d, &mut rng);
            register_ln(&mut store, &format!("boost.{layer}.ffn_ln"), cfg.d, &mut rng);
            if cfg.switches.per_query_ffn {
                for qi in 0..cfg.q_total() {
                    store.insert(&format!("boost.{layer}.ffn.{qi}.w1"), &[cfg.d, ffn_hidden], Init::Normal { std: xavier(cfg.d, ffn_hidden) }, &mut rng);
                    store.insert(&format!("boost.{layer}.ffn.{qi}.b1"), &[ffn_hidden], Init::Zeros, &mut rng);
                    store.insert(&format!("boost.{layer}.ffn.{qi}.w2"), &[ffn_hidden, cfg.d], Init::Normal { std: xavier(ffn_hidden, cfg.d) }, &mut rng);
                    store.insert(&format!("boost.{layer}.ffn.{qi}.b2"), &[cfg.d], Init::Zeros, &mut rng);
                }
            } else {
                store.insert(&format!("boost.{layer}.ffn.w1"), &[cfg.d, ffn_hidden], Init::Normal { std: xavier(cfg.d, ffn_hidden) }, &mut rng);
                store.insert(&format!("boost.{layer}.ffn.b1"), &[ffn_hidden], Init::Zeros, &mut rng);
                store.insert(&format!("boost.{layer}.ffn.w2"), &[ffn_hidden, cfg.d], Init::Normal { std: xavier(ffn_hidden, cfg.d) }, &mut rng);
                store.insert(&format!("boost.{layer}.ffn.b2"), &[cfg.d], Init::Zeros, &mut rng);
            }
        }

        posbias::register_params(cfg, &mut store, &mut rng);

        let mut in_dim = cfg.q * cfg.d + f_dim;
        for (i, &out_dim) in cfg.mlp_head.iter().enumerate() {
            store.insert(&format!("head.{i}.w"), &[in_dim, out_dim], Init::Normal { std: xavier(in_dim, out_dim) }, &mut rng);
            store.insert(&format!("head.{i}.b"), &[out_dim], Init::Zeros, &mut rng);
            in_dim = out_dim;
        }

        lens::register_params(cfg, self.condition, &mut store, &mut rng);
        store
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, batch: &SequenceBatch) -> Result<Forward> {
        self.forward_impl(tape, bound, batch, None)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        batch: &SequenceBatch,
        trace: &mut Trace,
    ) -> Result<Forward> {
        self.forward_impl(tape, bound, batch, Some(trace))
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        batch: &SequenceBatch,
        mut trace: Option<&mut Trace>,
    ) -> Result<Forward> {
        let cfg = &self.cfg;
        let b = batch.batch;
        if let Some(t) = trace.as_deref_mut() {
            t.heads = cfg.heads;
        }

        // Sequence-side and full-side features.
        let mask_t = embed::validity_mask(batch);
        let mask = tape.constant(&mask_t);
        let target = embed::lookup_target(tape, bound, batch)?;
        let raw_seq = embed::sequence_raw(tape, bound, batch, mask)?;
        let seq_mean = embed::masked_mean(tape, raw_seq, batch)?;
        let mut tokens = embed::fuse_typed_tokens(tape, bound, batch, raw_seq, mask)?;
        if let Some(pos_tokens) = posbias::abs_emb_tokens(tape, bound, cfg, &batch.valid_len)? {
            let masked = tape.mul(pos_tokens, mask)?;
            tokens = tape.add(tokens, masked)?;
        }
        let fields = embed::nonseq_field_vars(tape, bound, batch)?;
        let f = embed::build_fullside_vector(tape, target, &fields, seq_mean)?;

        // QueryGen, gated when TCQG is active.
        let qgen_w = bound.var("qgen.w")?;
        let qgen_b = bound.var("qgen.b")?;
        let q_flat = tape.affine2(f, qgen_w, qgen_b)?;
        let q_raw = tape.reshape(q_flat, &[b, cfg.q, cfg.d])?;

        let condition = if cfg.lens.enabled && (cfg.lens.tcqg || cfg.lens.tcpb) {
            Some(lens::condition_vector(tape, target, seq_mean, self.condition)?)
        } else {
            None
        };

        let mut q_work = if cfg.lens.enabled && cfg.lens.tcqg {
            let gate = lens::tcqg_gate(tape, bound, cfg, condition.unwrap())?;
            if let Some(t) = trace.as_deref_mut() {
                t.gate = Some(tape.to_tensor(gate));
            }
            tape.mul(q_raw, gate)?
        } else {
            q_raw
        };

        // Pooled tokens join the query set before layer 1.
        if cfg.switches.seq_pooling_tokens && cfg.k_pool > 0 {
            let pool_mean = embed::masked_mean(tape, tokens, batch)?;
            let mut pooled = Vec::with_capacity(cfg.k_pool);
            for i in 0..cfg.k_pool {
                let w = bound.var(&format!("pool.{i}.w"))?;
                let bv = bound.var(&format!("pool.{i}.b"))?;
                let p = tape.affine2(pool_mean, w, bv)?;
                pooled.push(tape.reshape(p, &[b, 1, cfg.d])?);
            }
            let mut parts = vec![q_work];
            parts.extend(pooled);
            q_work = tape.concat(&parts, 1)?;
        }
        let q_total = cfg.q_total();

        // Non-sequential tokens for boosting.
        let ns_tokens = if cfg.switches.ns_tokens_in_boosting && !fields.is_empty() {
            let shaped: Vec<Var> = fields
                .iter()
                .map(|&fv| tape.reshape(fv, &[b, 1, cfg.d]))
                .collect::<Result<_>>()?;
            Some(tape.concat(&shaped, 1)?)
        } else {
            None
        };

        for layer in 0..cfg.n_layers {
            // Query decoding: cross-attention over the sequence.
            let ln_g = bound.var(&format!("ca.{layer}.ln.g"))?;
            let ln_b = bound.var(&format!("ca.{layer}.ln.b"))?;
            let normed = tape.layer_norm(q_work, ln_g, ln_b, 1e-5)?;

            let static_bias = posbias::static_bias(tape, bound, cfg, layer, &batch.valid_len)?;
            let tc_bias = if cfg.lens.enabled && cfg.lens.tcpb {
                Some(lens::tcpb_bias(tape, bound, cfg, layer, condition.unwrap(), &batch.valid_len)?)
            } else {
                None
            };
            if let Some(t) = trace.as_deref_mut() {
                t.static_bias.push(static_bias.map(|v| tape.to_tensor(v)));
                t.tc_bias.push(tc_bias.map(|v| tape.to_tensor(v)));
            }
            let combined = match (static_bias, tc_bias) {
                (Some(s), Some(tc)) => Some(tape.add(s, tc)?),
                (Some(s), None) => Some(s),
                (None, Some(tc)) => Some(tc),
                (None, None) => None,
            };
            // Pooled query slots carry no position bias rows.
            let bias_full = match combined {
                Some(bias) if q_total > cfg.q => {
                    let zeros = tape.constant(&Tensor::zeros(&[b, q_total - cfg.q, cfg.l_max]));
                    Some(tape.concat(&[bias, zeros], 1)?)
                }
                other => other,
            };

            let ca = MhaWeights::bind(bound, &format!("ca.{layer}"))?;
            let (attn_out, attn) = mha(
                tape,
                &ca,
                cfg.heads,
                normed,
                tokens,
                bias_full,
                Some(&batch.valid_len),
                true,
            )?;
            if let Some(t) = trace.as_deref_mut() {
                t.attn.push(tape.to_tensor(attn));
            }
            q_work = tape.add(q_work, attn_out)?;

            // Query boosting: token mixing among queries (+ ns tokens).
            let bln_g = bound.var(&format!("boost.{layer}.ln.g"))?;
            let bln_b = bound.var(&format!("boost.{layer}.ln.b"))?;
            let mixed_in = match ns_tokens {
                Some(ns) => tape.concat(&[q_work, ns], 1)?,
                None => q_work,
            };
            let normed_all = tape.layer_norm(mixed_in, bln_g, bln_b, 1e-5)?;
            let q_in = tape.slice_axis(normed_all, 1, 0, q_total)?;
            let bw = MhaWeights::bind(bound, &format!("boost.{layer}"))?;
            let (boost_out, _) = mha(tape, &bw, cfg.heads, q_in, normed_all, None, None, false)?;
            q_work = tape.add(q_work, boost_out)?;

            // FFN, shared across query slots unless per-query weights are on.
            let fln_g = bound.var(&format!("boost.{layer}.ffn_ln.g"))?;
            let fln_b = bound.var(&format!("boost.{layer}.ffn_ln.b"))?;
            let ffn_in = tape.layer_norm(q_work, fln_g, fln_b, 1e-5)?;
            let ffn_out = if cfg.switches.per_query_ffn {
                let mut slots = Vec::with_capacity(q_total);
                for qi in 0..q_total {
                    let x = tape.slice_axis(ffn_in, 1, qi, qi + 1)?;
                    let w1 = bound.var(&format!("boost.{layer}.ffn.{qi}.w1"))?;
                    let b1 = bound.var(&format!("boost.{layer}.ffn.{qi}.b1"))?;
                    let w2 = bound.var(&format!("boost.{layer}.ffn.{qi}.w2"))?;
                    let b2 = bound.var(&format!("boost.{layer}.ffn.{qi}.b2"))?;
                    let h = tape.affine3(x, w1, b1)?;
                    let h = tape.relu(h)?;
                    slots.push(tape.affine3(h, w2, b2)?);
                }
                tape.concat(&slots, 1)?
            } else {
                let w1 = bound.var(&format!("boost.{layer}.ffn.w1"))?;
                let b1 = bound.var(&format!("boost.{layer}.ffn.b1"))?;
                let w2 = bound.var(&format!("boost.{layer}.ffn.w2"))?;
                let b2 = bound.var(&format!("boost.{layer}.ffn.b2"))?;
                let h = tape.affine3(ffn_in, w1, b1)?;
                let h = tape.relu(h)?;
                tape.affine3(h, w2, b2)?
            };
            q_work = tape.add(q_work, ffn_out)?;
        }

        // Head: flattened queries (pooled slots stripped) concatenated with f.
        let q_final = if q_total > cfg.q {
            tape.slice_axis(q_work, 1, 0, cfg.q)?
        } else {
            q_work
        };
        let q_flat = tape.reshape(q_final, &[b, cfg.q * cfg.d])?;
        let mut h = tape.concat(&[q_flat, f], 1)?;
        let n_head = cfg.mlp_head.len();
        for i in 0..n_head {
            let w = bound.var(&format!("head.{i}.w"))?;
            let bv = bound.var(&format!("head.{i}.b"))?;
            h = tape.affine2(h, w, bv)?;
            if i + 1 < n_head {
                h = tape.relu(h)?;
            }
        }
        let logits = tape.reshape(h, &[b])?;
        let probs = tape.sigmoid(logits)?;
        Ok(Forward { logits, probs })
    }
}
