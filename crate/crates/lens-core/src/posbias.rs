//! Static position mechanisms for cross-attention.
//!
//! Three candidates: a global per-layer recency curve shared by all queries,
//! absolute position embeddings added to sequence tokens before key/value
//! projection, and the adopted query-specific bias (one learnable curve per
//! layer per query, zero-initialised).
//!
//! Bias columns are right-aligned: column L_max-1 is the most recent
//! behaviour, so prepending padding never moves a valid token's bias value.

use std::ops::Range;

use rand_chacha::ChaCha12Rng;

use crate::config::{ModelConfig, PositionMechanism};
use crate::embed::EMBED_STD;
use crate::error::{CoreError, Result};
use crate::params::{BoundParams, Init, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Bias columns occupied by a sequence of length `valid_len`: the suffix
/// [L_max - valid_len, L_max), most recent behaviour last.
pub fn right_align_columns(valid_len: usize, l_max: usize) -> Result<Range<usize>> {
    if valid_len > l_max {
        return Err(CoreError::ValidLenOutOfRange { valid_len, l_max });
    }
    Ok(l_max - valid_len..l_max)
}

pub fn register_params(cfg: &ModelConfig, store: &mut ParameterStore, rng: &mut ChaCha12Rng) {
    match cfg.position_mechanism {
        PositionMechanism::None => {}
        PositionMechanism::Global => {
            store.insert("pos.global", &[cfg.n_layers, cfg.l_max], Init::Zeros, rng);
        }
        PositionMechanism::AbsEmb => {
            store.insert("pos.abs_emb", &[cfg.l_max, cfg.d], Init::Normal { std: EMBED_STD }, rng);
        }
        PositionMechanism::QuerySpecific => {
            store.insert("pos.query", &[cfg.n_layers, cfg.q, cfg.l_max], Init::Zeros, rng);
        }
    }
}

pub fn param_count(cfg: &ModelConfig) -> usize {
    match cfg.position_mechanism {
        PositionMechanism::None => 0,
        PositionMechanism::Global => cfg.n_layers * cfg.l_max,
        PositionMechanism::AbsEmb => cfg.l_max * cfg.d,
        PositionMechanism::QuerySpecific => cfg.n_layers * cfg.q * cfg.l_max,
    }
}

/// Additive logit bias for one layer, already shifted into storage
/// coordinates: [B, q, L_max]. `None` when the mechanism contributes through
/// token addition (abs_emb) or not at all.
pub fn static_bias(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    layer: usize,
    valid: &[usize],
) -> Result<Option<Var>> {
    let b = valid.len();
    let broadcast = |tape: &mut Tape, row: Var| -> Result<Var> {
        let zeros = tape.constant(&Tensor::zeros(&[b, cfg.q, cfg.l_max]));
        tape.add(zeros, row)
    };
    let bias = match cfg.position_mechanism {
        PositionMechanism::None | PositionMechanism::AbsEmb => return Ok(None),
        PositionMechanism::Global => {
            let table = bound.var("pos.global")?;
            let layer_row = tape.slice_axis(table, 0, layer, layer + 1)?; // [1, L]
            let shaped = tape.reshape(layer_row, &[1, 1, cfg.l_max])?;
            broadcast(tape, shaped)?
        }
        PositionMechanism::QuerySpecific => {
            let table = bound.var("pos.query")?;
            let layer_rows = tape.slice_axis(table, 0, layer, layer + 1)?; // [1, q, L]
            broadcast(tape, layer_rows)?
        }
    };
    Ok(Some(tape.right_align_shift(bias, valid)?))
}

/// Absolute position embeddings gathered per token at right-aligned indices,
/// [B, L, D]; added into the token stream before masking.
pub fn abs_emb_tokens(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    valid: &[usize],
) -> Result<Option<Var>> {
    if cfg.position_mechanism != PositionMechanism::AbsEmb {
        return Ok(None);
    }
    let b = valid.len();
    let mut ids = vec![0usize; b * cfg.l_max];
    for (bi, &v) in valid.iter().enumerate() {
        let cols = right_align_columns(v, cfg.l_max)?;
        for (p, col) in cols.enumerate() {
            ids[bi * cfg.l_max + p] = col;
        }
    }
    let table = bound.var("pos.abs_emb")?;
    let flat = tape.gather_rows(table, &ids)?;
    Ok(Some(tape.reshape(flat, &[b, cfg.l_max, cfg.d])?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{LensConfig, Switches};
    use crate::params::init_rng;

    fn cfg(mechanism: PositionMechanism) -> ModelConfig {
        ModelConfig {
            q: 3,
            d: 4,
            n_layers: 2,
            heads: 2,
            l_max: 4,
            mlp_head: vec![8, 1],
            switches: Switches::default(),
            position_mechanism: mechanism,
            lens: LensConfig::default(),
            item_vocab: 5,
            n_cat_fields: 0,
            cat_vocab: 16,
            n_dense_fields: 0,
            k_pool: 2,
        }
    }

    #[test]
    fn right_align_definition() {
        assert_eq!(right_align_columns(3, 5).unwrap(), 2..5);
        assert_eq!(right_align_columns(5, 5).unwrap(), 0..5);
        assert!(right_align_columns(0, 5).unwrap().is_empty());
        assert!(right_align_columns(6, 5).is_err());
    }

    #[test]
    fn query_specific_starts_at_zero() {
        let cfg = cfg(PositionMechanism::QuerySpecific);
        let mut store = ParameterStore::new();
        let mut rng = init_rng(0, "posbias");
        register_params(&cfg, &mut store, &mut rng);
        assert!(store.get("pos.query").unwrap().data.iter().all(|&v| v == 0.0));
        let mut tape = Tape::new();
        let bound = BoundParams::bind_all(&store, &mut tape);
        let bias = static_bias(&mut tape, &bound, &cfg, 0, &[2, 4]).unwrap().unwrap();
        assert!(tape.value(bias).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn global_broadcasts_one_curve_per_layer() {
        let cfg = cfg(PositionMechanism::Global);
        let mut store = ParameterStore::new();
        let mut rng = init_rng(0, "posbias");
        register_params(&cfg, &mut store, &mut rng);
        store.get_mut("pos.global").unwrap().data = vec![
            0.1, 0.2, 0.3, 0.4, // layer 0
            1.0, 2.0, 3.0, 4.0, // layer 1
        ];
        let mut tape = Tape::new();
        let bound = BoundParams::bind_all(&store, &mut tape);
        let bias = static_bias(&mut tape, &bound, &cfg, 1, &[4]).unwrap().unwrap();
        let v = tape.value(bias);
        for qi in 0..3 {
            assert_eq!(&v[qi * 4..(qi + 1) * 4], &[1.0, 2.0, 3.0, 4.0], "row {qi} differs");
        }
    }

    #[test]
    fn hand_set_bias_lands_on_right_aligned_columns() {
        // valid_len = 2, L_max = 4: storage positions {0,1} read bias columns {2,3}.
        let cfg = cfg(PositionMechanism::QuerySpecific);
        let mut store = ParameterStore::new();
        let mut rng = init_rng(0, "posbias");
        register_params(&cfg, &mut store, &mut rng);
        {
            let t = store.get_mut("pos.query").unwrap();
            for qi in 0..3 {
                for col in 0..4 {
                    t.data[qi * 4 + col] = (qi * 10 + col) as f64 + 1.0;
                }
            }
        }
        let mut tape = Tape::new();
        let bound = BoundParams::bind_all(&store, &mut tape);
        let bias = static_bias(&mut tape, &bound, &cfg, 0, &[2]).unwrap().unwrap();
        let v = tape.value(bias);
        for qi in 0..3 {
            let row = &v[qi * 4..(qi + 1) * 4];
            assert_eq!(row[0], (qi * 10 + 2) as f64 + 1.0);
            assert_eq!(row[1], (qi * 10 + 3) as f64 + 1.0);
            assert_eq!(&row[2..], &[0.0, 0.0], "untouched storage stays zero");
        }
    }

    #[test]
    fn bias_gradient_only_reaches_touched_columns() {
        let cfg = cfg(PositionMechanism::QuerySpecific);
        let mut store = ParameterStore::new();
        let mut rng = init_rng(0, "posbias");
        register_params(&cfg, &mut store, &mut rng);
        let mut tape = Tape::new();
        let bound = BoundParams::bind_all(&store, &mut tape);
        let bias = static_bias(&mut tape, &bound, &cfg, 0, &[2]).unwrap().unwrap();
        let loss = tape.mean_all(bias).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(bound.var("pos.query").unwrap());
        for qi in 0..3 {
            let row = &g.data[qi * 4..(qi + 1) * 4];
            assert_eq!(row[0], 0.0);
            assert_eq!(row[1], 0.0);
            assert!(row[2] != 0.0 && row[3] != 0.0);
        }
        // layer 1 untouched entirely
        assert!(g.data[12..].iter().all(|&v| v == 0.0));
    }
}
