//! CSV exports of learned attention-bias structure: the static per-query
//! position curves, sample-averaged target-conditioned bias maps, and
//! per-sample gate profiles.

use std::io::Write;
use std::path::Path;

use crate::config::{ModelConfig, PositionMechanism};
use crate::data::{SampleRecord, SequenceBatch};
use crate::embed;
use crate::error::{CoreError, Result};
use crate::lens;
use crate::params::{BoundParams, ParameterStore};
use crate::tape::Tape;

/// Static query-specific position bias, one CSV per layer:
/// rows = queries, columns = right-aligned positions.
pub fn export_static_bias(store: &ParameterStore, cfg: &ModelConfig, out_dir: &Path) -> Result<Vec<String>> {
    if cfg.position_mechanism != PositionMechanism::QuerySpecific {
        return Err(CoreError::InvalidConfig(
            "static bias export requires position_mechanism = query_specific".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let table = store.get("pos.query")?;
    let (q, l) = (cfg.q, cfg.l_max);
    let mut written = Vec::new();
    for layer in 0..cfg.n_layers {
        let name = format!("bias_pos_layer{layer}.csv");
        let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join(&name))?);
        let header: Vec<String> = (0..l).map(|j| format!("pos_{j}")).collect();
        writeln!(f, "query,{}", header.join(","))?;
        for qi in 0..q {
            let row: Vec<String> = (0..l)
                .map(|j| format!("{:.6}", table.data[(layer * q + qi) * l + j]))
                .collect();
            writeln!(f, "{qi},{}", row.join(","))?;
        }
        f.flush()?;
        written.push(name);
    }
    Ok(written)
}

/// Target-conditioned exports over a sample of records: per-sample TCQG gate
/// profiles (mean gate per query) and per-layer sample-averaged TCPB bias in
/// bias coordinates (column L_max-1 = most recent).
pub fn export_tc_bias(
    store: &ParameterStore,
    cfg: &ModelConfig,
    condition: crate::config::ConditionSource,
    records: &[&SampleRecord],
    out_dir: &Path,
) -> Result<Vec<String>> {
    if !cfg.lens.enabled {
        return Err(CoreError::InvalidConfig("target-conditioned export requires lens.enabled".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let batch = SequenceBatch::from_records(records, cfg.l_max)?;
    let mut tape = Tape::new();
    let bound = BoundParams::bind_all(store, &mut tape);
    let mask_t = embed::validity_mask(&batch);
    let mask = tape.constant(&mask_t);
    let target = embed::lookup_target(&mut tape, &bound, &batch)?;
    let raw = embed::sequence_raw(&mut tape, &bound, &batch, mask)?;
    let seq_mean = embed::masked_mean(&mut tape, raw, &batch)?;
    let c = lens::condition_vector(&mut tape, target, seq_mean, condition)?;

    let mut written = Vec::new();
    if cfg.lens.tcqg {
        let gate = lens::tcqg_gate(&mut tape, &bound, cfg, c)?;
        let g = tape.value(gate);
        let name = "tcqg_gate.csv".to_string();
        let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join(&name))?);
        let header: Vec<String> = (0..cfg.q).map(|qi| format!("q{qi}_mean_gate")).collect();
        writeln!(f, "sample,item_id,{}", header.join(","))?;
        for b in 0..batch.batch {
            let mut row = Vec::with_capacity(cfg.q);
            for qi in 0..cfg.q {
                let base = (b * cfg.q + qi) * cfg.d;
                let mean: f64 = g[base..base + cfg.d].iter().sum::<f64>() / cfg.d as f64;
                row.push(format!("{mean:.6}"));
            }
            writeln!(f, "{},{},{}", b, batch.candidate_ids[b], row.join(","))?;
        }
        f.flush()?;
        written.push(name);
    }
    if cfg.lens.tcpb {
        for layer in 0..cfg.n_layers {
            let bias = lens::tcpb_bias_unaligned(&mut tape, &bound, cfg, layer, c)?;
            let v = tape.value(bias);
            let name = format!("tcpb_bias_layer{layer}.csv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(out_dir.join(&name))?);
            let header: Vec<String> = (0..cfg.l_max).map(|j| format!("pos_{j}")).collect();
            writeln!(f, "query,{}", header.join(","))?;
            for qi in 0..cfg.q {
                let mut row = Vec::with_capacity(cfg.l_max);
                for j in 0..cfg.l_max {
                    let mut acc = 0.0;
                    for b in 0..batch.batch {
                        acc += v[(b * cfg.q + qi) * cfg.l_max + j];
                    }
                    row.push(format!("{:.6}", acc / batch.batch as f64));
                }
                writeln!(f, "{qi},{}", row.join(","))?;
            }
            f.flush()?;
            written.push(name);
        }
    }
    Ok(written)
}
