//! Target-conditioned query routing: TCQG, TCPB, the density-driven
//! condition-source rule, and parameter-cost accounting.
//!
//! Both modules are zero-initialised residuals on the query-specific
//! position-bias reference: with `W_t = 0` the gate is exactly 1 and with
//! every `W_tau = 0` the conditioned bias is exactly 0, so enabling them
//! changes nothing until training moves the projections.

use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::config::{ConditionMode, ConditionSource, ModelConfig, PositionMechanism};
use crate::embed::EMBED_STD;
use crate::error::Result;
use crate::params::{BoundParams, Init, ParameterStore};
use crate::tape::{Tape, Var};

/// Density threshold for the condition-source rule, in samples per item.
/// Strictly above selects item-only; at or below selects item+sequence
/// (the sparse-side rule is the safer default near the crossover).
pub const CONDITION_DENSITY_THRESHOLD: f64 = 50.0;

pub fn select_condition(samples_per_item: f64, mode: ConditionMode) -> ConditionSource {
    match mode {
        ConditionMode::Item => ConditionSource::Item,
        ConditionMode::ItemSeq => ConditionSource::ItemSeq,
        ConditionMode::Auto => {
            if samples_per_item > CONDITION_DENSITY_THRESHOLD {
                ConditionSource::Item
            } else {
                ConditionSource::ItemSeq
            }
        }
    }
}

pub fn register_params(
    cfg: &ModelConfig,
    source: ConditionSource,
    store: &mut ParameterStore,
    rng: &mut ChaCha12Rng,
) {
    if !cfg.lens.enabled {
        return;
    }
    let d_c = cfg.condition_dim(source);
    if cfg.lens.tcqg {
        store.insert("lens.w_t", &[cfg.q * cfg.d, d_c], Init::Zeros, rng);
    }
    if cfg.lens.tcpb {
        for l in 0..cfg.n_layers {
            store.insert(&format!("lens.w_tau.{l}"), &[cfg.q * cfg.lens.rank, d_c], Init::Zeros, rng);
            // Nonzero position factors keep the zero-product init off the
            // saddle where both factors vanish.
            store.insert(
                &format!("lens.pos_emb.{l}"),
                &[cfg.l_max, cfg.lens.rank],
                Init::Normal { std: EMBED_STD },
                rng,
            );
        }
    }
}

/// Condition vector [B, d_c]: the target embedding, optionally concatenated
/// with the masked sequence mean.
pub fn condition_vector(
    tape: &mut Tape,
    target: Var,
    seq_mean: Var,
    source: ConditionSource,
) -> Result<Var> {
    match source {
        ConditionSource::Item => Ok(target),
        ConditionSource::ItemSeq => tape.concat(&[target, seq_mean], 1),
    }
}

/// TCQG gate, [B, q, D]: 2 * sigmoid(reshape(W_t c, q x D)). Entries live in
/// (0, 2) and the zero-condition gate is exactly 1.
pub fn tcqg_gate(tape: &mut Tape, bound: &BoundParams, cfg: &ModelConfig, c: Var) -> Result<Var> {
    let w_t = bound.var("lens.w_t")?;
    let w = tape.permute(w_t, &[1, 0])?; // [d_c, qD]
    let logits = tape.matmul(c, w)?; // [B, qD]
    let b = tape.shape(c)[0];
    let shaped = tape.reshape(logits, &[b, cfg.q, cfg.d])?;
    let sig = tape.sigmoid(shaped)?;
    tape.scale(sig, 2.0)
}

/// TCPB bias for one layer in bias coordinates (column L_max-1 = most
/// recent), [B, q, L_max]: M = reshape(W_tau c, q x r), bias[i, j] = <M_i, P_j>.
pub fn tcpb_bias_unaligned(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    layer: usize,
    c: Var,
) -> Result<Var> {
    let r = cfg.lens.rank;
    let w_tau = bound.var(&format!("lens.w_tau.{layer}"))?;
    let w = tape.permute(w_tau, &[1, 0])?; // [d_c, q*r]
    let m_flat = tape.matmul(c, w)?; // [B, q*r]
    let b = tape.shape(c)[0];
    let m = tape.reshape(m_flat, &[b * cfg.q, r])?;
    let pos = bound.var(&format!("lens.pos_emb.{layer}"))?; // [L_max, r]
    let pos_t = tape.permute(pos, &[1, 0])?; // [r, L_max]
    let bias_flat = tape.matmul(m, pos_t)?; // [B*q, L_max]
    tape.reshape(bias_flat, &[b, cfg.q, cfg.l_max])
}

/// Same bias shifted into storage coordinates for the attention logits.
pub fn tcpb_bias(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    layer: usize,
    c: Var,
    valid: &[usize],
) -> Result<Var> {
    let bias = tcpb_bias_unaligned(tape, bound, cfg, layer, c)?;
    tape.right_align_shift(bias, valid)
}

// ── Parameter accounting ─────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct ParamCountReport {
    pub query_pos: usize,
    pub tcqg: usize,
    pub tcpb: usize,
    pub lens_total: usize,
    pub embedding: usize,
    pub condition_dim: usize,
    /// (query_pos + lens_total) / embedding
    pub added_fraction_of_embedding: f64,
}

/// Exact per-component counts. TCPB is N_L * (q * r * d_c + L_max * r); for
/// item-only conditioning (d_c = D) this coincides with the common
/// N_L * (q * D * r + L_max * r) form.
pub fn param_count(cfg: &ModelConfig, source: ConditionSource) -> ParamCountReport {
    let d_c = cfg.condition_dim(source);
    let query_pos = if cfg.position_mechanism == PositionMechanism::QuerySpecific {
        cfg.n_layers * cfg.q * cfg.l_max
    } else {
        0
    };
    let tcqg = if cfg.lens.enabled && cfg.lens.tcqg { cfg.q * cfg.d * d_c } else { 0 };
    let tcpb = if cfg.lens.enabled && cfg.lens.tcpb {
        cfg.n_layers * (cfg.q * cfg.lens.rank * d_c + cfg.l_max * cfg.lens.rank)
    } else {
        0
    };
    let embedding = crate::embed::EmbeddingLayout::from_model(cfg).param_count();
    let lens_total = tcqg + tcpb;
    ParamCountReport {
        query_pos,
        tcqg,
        tcpb,
        lens_total,
        embedding,
        condition_dim: d_c,
        added_fraction_of_embedding: (query_pos + lens_total) as f64 / embedding as f64,
    }
}
