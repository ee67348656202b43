//! Staged ablation grid: backbone switches, static position mechanisms,
//! condition sources, module knockouts, and the delta summary.
//!
//! One CSV row per (cell, seed); a summary file adds per-cell mean ± std and
//! the three delta rows. Cell failures are logged and the grid continues.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::config::{ConditionMode, DinConfig, ModelConfig, PositionMechanism, TrainConfig};
use crate::backbone::LatentQueryModel;
use crate::data::{Manifest, SampleRecord};
use crate::din::DinModel;
use crate::error::Result;
use crate::lens::{param_count, select_condition};
use crate::train::train;

#[derive(Debug, Clone)]
pub enum CellModel {
    Latent(ModelConfig),
    Din(DinConfig),
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub cell_id: String,
    pub part: String,
    pub model: CellModel,
}

#[derive(Debug, Clone)]
pub struct ResultRow {
    pub cell_id: String,
    pub part: String,
    pub seed: u64,
    pub auc: f64,
    pub logloss: f64,
    pub params_total: usize,
    pub params_lens: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub cell_id: String,
    pub part: String,
    pub n_seeds: usize,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub mean_logloss: f64,
}

pub struct AblationOutput {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub failures: Vec<String>,
}

/// The staged grid over a base configuration. The downstream reference is
/// the seq-pooling backbone variant; position and conditioning stages build
/// on it in order.
pub fn build_grid(base: &ModelConfig, parts: &[String]) -> Vec<Cell> {
    let mut cells = Vec::new();
    let has = |p: &str| parts.iter().any(|x| x == p);

    let plain = |mut cfg: ModelConfig| {
        cfg.switches = Default::default();
        cfg.position_mechanism = PositionMechanism::None;
        cfg.lens.enabled = false;
        cfg
    };
    let reference = |base: &ModelConfig| {
        let mut cfg = plain(base.clone());
        cfg.switches.seq_pooling_tokens = true;
        cfg
    };
    let querypos = |base: &ModelConfig| {
        let mut cfg = reference(base);
        cfg.position_mechanism = PositionMechanism::QuerySpecific;
        cfg
    };
    let lens_on = |base: &ModelConfig, cond: ConditionMode, tcqg: bool, tcpb: bool| {
        let mut cfg = querypos(base);
        cfg.lens.enabled = true;
        cfg.lens.tcqg = tcqg;
        cfg.lens.tcpb = tcpb;
        cfg.lens.condition_source = cond;
        cfg
    };

    if has("I") {
        cells.push(Cell {
            cell_id: "din_full_side".into(),
            part: "I".into(),
            model: CellModel::Din(DinConfig::from_model(base, true)),
        });
        cells.push(Cell { cell_id: "backbone_no_switches".into(), part: "I".into(), model: CellModel::Latent(plain(base.clone())) });
        cells.push(Cell { cell_id: "backbone_seq_pooling".into(), part: "I".into(), model: CellModel::Latent(reference(base)) });
        let mut ns = plain(base.clone());
        ns.switches.ns_tokens_in_boosting = true;
        cells.push(Cell { cell_id: "backbone_ns_tokens".into(), part: "I".into(), model: CellModel::Latent(ns) });
        let mut pq = plain(base.clone());
        pq.switches.per_query_ffn = true;
        cells.push(Cell { cell_id: "backbone_per_query_ffn".into(), part: "I".into(), model: CellModel::Latent(pq) });
        let mut full = plain(base.clone());
        full.switches =
            crate::config::Switches { seq_pooling_tokens: true, ns_tokens_in_boosting: true, per_query_ffn: true };
        cells.push(Cell { cell_id: "backbone_full_switches".into(), part: "I".into(), model: CellModel::Latent(full) });
    }
    if has("II") {
        let mut global = reference(base);
        global.position_mechanism = PositionMechanism::Global;
        cells.push(Cell { cell_id: "pos_global".into(), part: "II".into(), model: CellModel::Latent(global) });
        let mut abs = reference(base);
        abs.position_mechanism = PositionMechanism::AbsEmb;
        cells.push(Cell { cell_id: "pos_abs_emb".into(), part: "II".into(), model: CellModel::Latent(abs) });
        cells.push(Cell { cell_id: "pos_query_specific".into(), part: "II".into(), model: CellModel::Latent(querypos(base)) });
    }
    if has("III") {
        cells.push(Cell {
            cell_id: "lens_item".into(),
            part: "III".into(),
            model: CellModel::Latent(lens_on(base, ConditionMode::Item, true, true)),
        });
        cells.push(Cell {
            cell_id: "lens_item_seq".into(),
            part: "III".into(),
            model: CellModel::Latent(lens_on(base, ConditionMode::ItemSeq, true, true)),
        });
        cells.push(Cell {
            cell_id: "lens_selected".into(),
            part: "III".into(),
            model: CellModel::Latent(lens_on(base, ConditionMode::Auto, true, true)),
        });
    }
    if has("IV") {
        cells.push(Cell {
            cell_id: "lens_wo_tcpb".into(),
            part: "IV".into(),
            model: CellModel::Latent(lens_on(base, ConditionMode::Auto, true, false)),
        });
        cells.push(Cell {
            cell_id: "lens_wo_tcqg".into(),
            part: "IV".into(),
            model: CellModel::Latent(lens_on(base, ConditionMode::Auto, false, true)),
        });
    }
    cells
}

fn run_one(
    cell: &Cell,
    seed: u64,
    records: &[SampleRecord],
    manifest: &Manifest,
    base_train: &TrainConfig,
) -> Result<ResultRow> {
    let mut tc = base_train.clone();
    tc.seed = seed;
    let started = Instant::now();
    let (outcome, params_total, params_lens) = match &cell.model {
        CellModel::Latent(cfg) => {
            let source =
                select_condition(manifest.realised.samples_per_item, cfg.lens.condition_source);
            let model = LatentQueryModel::new(cfg.clone(), source)?;
            let report = param_count(cfg, source);
            let outcome = train(&model, records, &tc, &cell.cell_id)?;
            let total = outcome.store.total_params();
            (outcome, total, report.lens_total)
        }
        CellModel::Din(cfg) => {
            let model = DinModel::new(cfg.clone())?;
            let outcome = train(&model, records, &tc, &cell.cell_id)?;
            let total = outcome.store.total_params();
            (outcome, total, 0)
        }
    };
    Ok(ResultRow {
        cell_id: cell.cell_id.clone(),
        part: cell.part.clone(),
        seed,
        auc: outcome.metrics.auc,
        logloss: outcome.metrics.logloss,
        params_total,
        params_lens,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn run_ablation(
    cells: &[Cell],
    records: &[SampleRecord],
    manifest: &Manifest,
    base_train: &TrainConfig,
    seeds: &[u64],
    include_deltas: bool,
) -> AblationOutput {
    let jobs: Vec<(usize, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, _)| seeds.iter().map(move |&s| (i, s)))
        .collect();

    let results: Vec<(usize, u64, Result<ResultRow>)> = jobs
        .par_iter()
        .map(|&(i, seed)| (i, seed, run_one(&cells[i], seed, records, manifest, base_train)))
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, seed, res) in results {
        match res {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(format!("cell={} seed={}: {}", cells[i].cell_id, seed, e)),
        }
    }
    rows.sort_by(|a, b| (&a.cell_id, a.seed).cmp(&(&b.cell_id, b.seed)));
    // Re-sort into grid order for readability.
    let order: std::collections::HashMap<&str, usize> =
        cells.iter().enumerate().map(|(i, c)| (c.cell_id.as_str(), i)).collect();
    rows.sort_by_key(|r| (order.get(r.cell_id.as_str()).copied().unwrap_or(usize::MAX), r.seed));

    let mut summary = Vec::new();
    for cell in cells {
        let aucs: Vec<f64> =
            rows.iter().filter(|r| r.cell_id == cell.cell_id).map(|r| r.auc).collect();
        if aucs.is_empty() {
            continue;
        }
        let lls: Vec<f64> =
            rows.iter().filter(|r| r.cell_id == cell.cell_id).map(|r| r.logloss).collect();
        let (mean_auc, std_auc) = mean_std(&aucs);
        let (mean_logloss, _) = mean_std(&lls);
        summary.push(SummaryRow {
            cell_id: cell.cell_id.clone(),
            part: cell.part.clone(),
            n_seeds: aucs.len(),
            mean_auc,
            std_auc,
            mean_logloss,
        });
    }

    if include_deltas {
        let deltas = [
            ("delta_modules_over_querypos", "lens_selected", "pos_query_specific"),
            ("delta_final_lens_vs_backbone_ref", "lens_selected", "backbone_seq_pooling"),
            ("delta_final_lens_vs_din", "lens_selected", "din_full_side"),
        ];
        for (name, a, b) in deltas {
            let mean_of = |id: &str| summary.iter().find(|s| s.cell_id == id).map(|s| s.mean_auc);
            if let (Some(x), Some(y)) = (mean_of(a), mean_of(b)) {
                summary.push(SummaryRow {
                    cell_id: name.into(),
                    part: "V".into(),
                    n_seeds: seeds.len(),
                    mean_auc: x - y,
                    std_auc: 0.0,
                    mean_logloss: 0.0,
                });
            }
        }
    }

    AblationOutput { rows, summary, failures }
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "cell_id,part,seed,auc,logloss,params_total,params_lens,wall_seconds")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{:.6},{:.6},{},{},{:.3}",
            r.cell_id, r.part, r.seed, r.auc, r.logloss, r.params_total, r.params_lens, r.wall_seconds
        )?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "cell_id,part,n_seeds,mean_auc,std_auc,mean_logloss")?;
    for s in summary {
        writeln!(
            f,
            "{},{},{},{:.6},{:.6},{:.6}",
            s.cell_id, s.part, s.n_seeds, s.mean_auc, s.std_auc, s.mean_logloss
        )?;
    }
    f.flush()?;
    Ok(())
}
