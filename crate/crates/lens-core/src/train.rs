//! Training loop, evaluation, and checkpointing.
//!
//! Training is deterministic given (seed, config, dataset): parameter init,
//! epoch shuffles, and every numeric op are seeded and sequential, so
//! identical reruns produce identical metrics and checkpoint bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::backbone::LatentQueryModel;
use crate::config::{ConditionSource, TrainConfig};
use crate::data::{shuffled_indices, SampleRecord, SequenceBatch, Split};
use crate::din::DinModel;
use crate::error::{CoreError, Result};
use crate::metrics::{evaluate_auc, logloss_from_logits};
use crate::params::{BoundParams, ParameterStore};
use crate::tape::{Tape, Var};

/// A trainable CTR scorer: parameter init plus a logit head over batches.
pub trait CtrModel: Sync {
    fn init_params(&self, seed: u64) -> ParameterStore;
    fn logits(&self, tape: &mut Tape, bound: &BoundParams, batch: &SequenceBatch) -> Result<Var>;
    fn family(&self) -> &'static str;
    fn l_max(&self) -> usize;
    fn config_json(&self) -> serde_json::Value;
    fn condition(&self) -> Option<ConditionSource> {
        None
    }
}

impl CtrModel for LatentQueryModel {
    fn init_params(&self, seed: u64) -> ParameterStore {
        LatentQueryModel::init_params(self, seed)
    }

    fn logits(&self, tape: &mut Tape, bound: &BoundParams, batch: &SequenceBatch) -> Result<Var> {
        Ok(self.forward(tape, bound, batch)?.logits)
    }

    fn family(&self) -> &'static str {
        "latent"
    }

    fn l_max(&self) -> usize {
        self.cfg.l_max
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg).expect("config serialises")
    }

    fn condition(&self) -> Option<ConditionSource> {
        Some(self.condition)
    }
}

impl CtrModel for DinModel {
    fn init_params(&self, seed: u64) -> ParameterStore {
        DinModel::init_params(self, seed)
    }

    fn logits(&self, tape: &mut Tape, bound: &BoundParams, batch: &SequenceBatch) -> Result<Var> {
        Ok(self.forward(tape, bound, batch)?.logits)
    }

    fn family(&self) -> &'static str {
        "din"
    }

    fn l_max(&self) -> usize {
        self.cfg.l_max
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg).expect("config serialises")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub logloss: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    pub epoch: usize,
    pub auc: f64,
    pub logloss: f64,
}

pub struct TrainOutcome {
    pub metrics: MetricsReport,
    pub store: ParameterStore,
    pub history: Vec<EvalPoint>,
    pub steps: usize,
}

pub fn split_records(records: &[SampleRecord]) -> (Vec<&SampleRecord>, Vec<&SampleRecord>) {
    let train = records.iter().filter(|r| r.split == Split::Train).collect();
    let eval = records.iter().filter(|r| r.split == Split::Eval).collect();
    (train, eval)
}

/// Forward-only evaluation; returns (auc, logloss, n_pos, n_neg).
pub fn evaluate(
    model: &dyn CtrModel,
    store: &ParameterStore,
    eval: &[&SampleRecord],
    batch_size: usize,
) -> Result<(f64, f64, usize, usize)> {
    let mut logits = Vec::with_capacity(eval.len());
    let mut labels = Vec::with_capacity(eval.len());
    for chunk in eval.chunks(batch_size) {
        let batch = SequenceBatch::from_records(chunk, model.l_max())?;
        let mut tape = Tape::new();
        let bound = BoundParams::bind_all(store, &mut tape);
        let z = model.logits(&mut tape, &bound, &batch)?;
        logits.extend_from_slice(tape.value(z));
        labels.extend_from_slice(&batch.labels);
    }
    let auc = evaluate_auc(&logits, &labels)?;
    let logloss = logloss_from_logits(&logits, &labels);
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    Ok((auc, logloss, n_pos, labels.len() - n_pos))
}

pub fn train(
    model: &dyn CtrModel,
    records: &[SampleRecord],
    cfg: &TrainConfig,
    config_hash: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_recs, eval_recs) = split_records(records);
    let mut store = model.init_params(cfg.seed);
    let mut adam = Adam::new(cfg);
    let mut history = Vec::new();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(train_recs.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let batch_records: Vec<&SampleRecord> = chunk.iter().map(|&i| train_recs[i]).collect();
            let batch = SequenceBatch::from_records(&batch_records, model.l_max())?;
            let mut tape = Tape::new();
            let bound = BoundParams::bind_all(&store, &mut tape);
            let z = model.logits(&mut tape, &bound, &batch)?;
            let loss = tape.bce_with_logits(z, &batch.labels)?;
            if !tape.scalar_value(loss).is_finite() {
                return Err(CoreError::NonFiniteLoss { step });
            }
            tape.backward(loss)?;
            store.zero_grads();
            store.accumulate_from(&tape, &bound)?;
            drop(tape);
            adam.step(&mut store)?;
            step += 1;
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 && !eval_recs.is_empty() {
                let (auc, logloss, _, _) = evaluate(model, &store, &eval_recs, cfg.batch_size)?;
                history.push(EvalPoint { step, epoch, auc, logloss });
            }
        }
    }

    let (auc, logloss, n_pos, n_neg) = evaluate(model, &store, &eval_recs, cfg.batch_size)?;
    history.push(EvalPoint { step, epoch: cfg.epochs.saturating_sub(1), auc, logloss });
    Ok(TrainOutcome {
        metrics: MetricsReport { auc, logloss, n_pos, n_neg, seed: cfg.seed, config_hash: config_hash.to_string() },
        store,
        history,
        steps: step,
    })
}

// ── Checkpointing ────────────────────────────────────────────────────

pub const CHECKPOINT_META: &str = "checkpoint.meta.json";
pub const CHECKPOINT_BIN: &str = "checkpoint.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub family: String,
    pub model: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<ConditionSource>,
    pub params: Vec<ParamMeta>,
}

/// Manifest plus flat little-endian f64 values in declared parameter order.
pub fn save_checkpoint(dir: &Path, model: &dyn CtrModel, store: &ParameterStore, config_hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        config_hash: config_hash.to_string(),
        family: model.family().to_string(),
        model: model.config_json(),
        condition: model.condition(),
        params: store
            .entries()
            .iter()
            .map(|e| ParamMeta { name: e.name.clone(), shape: e.value.shape.clone() })
            .collect(),
    };
    let mut f = std::fs::File::create(dir.join(CHECKPOINT_META))?;
    serde_json::to_writer_pretty(&mut f, &meta)?;
    f.write_all(b"\n")?;
    let mut bin = std::io::BufWriter::new(std::fs::File::create(dir.join(CHECKPOINT_BIN))?);
    for e in store.entries() {
        for v in &e.value.data {
            bin.write_all(&v.to_le_bytes())?;
        }
    }
    bin.flush()?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointMeta, ParameterStore)> {
    let meta: CheckpointMeta = serde_json::from_reader(std::fs::File::open(dir.join(CHECKPOINT_META))?)?;
    let mut bytes = Vec::new();
    std::fs::File::open(dir.join(CHECKPOINT_BIN))?.read_to_end(&mut bytes)?;
    let expected: usize = meta.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if bytes.len() != expected * 8 {
        return Err(CoreError::Checkpoint(format!(
            "binary holds {} bytes, manifest declares {} values",
            bytes.len(),
            expected
        )));
    }
    let mut store = ParameterStore::new();
    let mut rng = crate::params::init_rng(0, "checkpoint-load");
    let mut offset = 0usize;
    for p in &meta.params {
        store.insert(&p.name, &p.shape, crate::params::Init::Zeros, &mut rng);
        let t = store.get_mut(&p.name)?;
        for v in t.data.iter_mut() {
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&bytes[offset..offset + 8]);
            *v = f64::from_le_bytes(buf);
            offset += 8;
        }
    }
    Ok((meta, store))
}
