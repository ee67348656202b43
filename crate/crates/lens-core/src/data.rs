//! Dataset records, line-delimited file I/O, and batch assembly.
//!
//! File format: one record per line, tab-separated fields in this order:
//!
//! ```text
//! user_id  item_id  label  split  time_index  seq_items  seq_actions  cat_fields  dense_fields  oracle_score
//! ```
//!
//! `seq_items`/`seq_actions` are comma-separated and hold only the valid
//! prefix (no padding is written; `valid_len` is the token count). Action
//! codes on disk are the behaviour category + 1 so that 0 stays the universal
//! padding id. `oracle_score` is the generator's true log-odds for the
//! record, kept for planted-signal diagnostics; models never read it.
//! A JSON manifest sits next to the data file and carries the generating
//! spec, the schema version, and realised statistics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::config::DatasetSpec;
use crate::error::{CoreError, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const DATA_FILE: &str = "data.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Behaviour categories carried by typed histories.
pub const ACTION_SKIP: u8 = 0;
pub const ACTION_CLICK: u8 = 1;
pub const ACTION_STRONG: u8 = 2;
pub const ACTION_HATE: u8 = 3;
pub const N_ACTIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub user_id: u32,
    pub item_id: u32,
    pub label: u8,
    pub split: Split,
    pub time_index: u32,
    /// Valid tokens only; ids are 1-based (0 is padding when batched).
    pub seq_items: Vec<u32>,
    /// Stored as category + 1; same length as `seq_items`.
    pub seq_actions: Vec<u8>,
    pub cat_fields: Vec<u32>,
    pub dense_fields: Vec<f64>,
    pub oracle_score: f64,
}

impl SampleRecord {
    pub fn valid_len(&self) -> usize {
        self.seq_items.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealisedStats {
    pub n_records: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub positive_rate: f64,
    /// n_samples / number of distinct candidate items observed.
    pub samples_per_item: f64,
    pub distinct_candidates: usize,
    pub base_logit: f64,
    /// AUC of the true generative score on the eval split.
    pub oracle_eval_auc: f64,
    pub mean_valid_len: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub spec: DatasetSpec,
    pub realised: RealisedStats,
}

// ── Writing ──────────────────────────────────────────────────────────

fn join_u32(xs: &[u32]) -> String {
    xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn join_u8(xs: &[u8]) -> String {
    xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn join_f64(xs: &[f64]) -> String {
    xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn write_dataset(dir: &Path, records: &[SampleRecord], manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(DATA_FILE))?);
    for r in records {
        let split = match r.split {
            Split::Train => "train",
            Split::Eval => "eval",
        };
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.user_id,
            r.item_id,
            r.label,
            split,
            r.time_index,
            join_u32(&r.seq_items),
            join_u8(&r.seq_actions),
            join_u32(&r.cat_fields),
            join_f64(&r.dense_fields),
            r.oracle_score,
        )?;
    }
    w.flush()?;
    let mut m = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(&mut m, manifest)?;
    m.write_all(b"\n")?;
    m.flush()?;
    Ok(())
}

// ── Reading ──────────────────────────────────────────────────────────

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let f = File::open(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_reader(BufReader::new(f))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(CoreError::SchemaMismatch(format!(
            "manifest schema version {} (reader supports {})",
            manifest.schema_version, SCHEMA_VERSION
        )));
    }
    Ok(manifest)
}

/// Streams records in file order, tracking byte offsets for error reports.
pub struct DatasetReader {
    lines: std::io::Lines<BufReader<File>>,
    offset: u64,
}

impl DatasetReader {
    pub fn open(dir: &Path) -> Result<Self> {
        // Opening through the manifest enforces the schema check up front.
        let _ = read_manifest(dir)?;
        let f = File::open(dir.join(DATA_FILE))?;
        Ok(DatasetReader { lines: BufReader::new(f).lines(), offset: 0 })
    }
}

impl Iterator for DatasetReader {
    type Item = Result<SampleRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = match self.lines.next()? {
            Ok(l) => l,
            Err(e) => return Some(Err(e.into())),
        };
        let at = self.offset;
        self.offset += line.len() as u64 + 1;
        Some(parse_record(&line, at))
    }
}

fn parse_record(line: &str, offset: u64) -> Result<SampleRecord> {
    let bad = |reason: &str| CoreError::MalformedRecord { offset, reason: reason.to_string() };
    let mut fields = line.split('\t');
    let mut next = |name: &str| fields.next().ok_or_else(|| bad(&format!("missing field {name}")));

    let user_id: u32 = next("user_id")?.parse().map_err(|_| bad("user_id not an integer"))?;
    let item_id: u32 = next("item_id")?.parse().map_err(|_| bad("item_id not an integer"))?;
    let label: u8 = next("label")?.parse().map_err(|_| bad("label not an integer"))?;
    if label > 1 {
        return Err(bad("label must be 0 or 1"));
    }
    let split = match next("split")? {
        "train" => Split::Train,
        "eval" => Split::Eval,
        other => return Err(bad(&format!("unknown split '{other}'"))),
    };
    let time_index: u32 = next("time_index")?.parse().map_err(|_| bad("time_index not an integer"))?;
    let seq_items = parse_u32_list(next("seq_items")?).map_err(|_| bad("seq_items malformed"))?;
    let seq_actions = parse_u8_list(next("seq_actions")?).map_err(|_| bad("seq_actions malformed"))?;
    if seq_items.len() != seq_actions.len() {
        return Err(bad("seq_items and seq_actions lengths differ"));
    }
    let cat_fields = parse_u32_list(next("cat_fields")?).map_err(|_| bad("cat_fields malformed"))?;
    let dense_fields = parse_f64_list(next("dense_fields")?).map_err(|_| bad("dense_fields malformed"))?;
    let oracle_score: f64 = next("oracle_score")?.parse().map_err(|_| bad("oracle_score not a number"))?;
    if fields.next().is_some() {
        return Err(bad("trailing fields"));
    }
    Ok(SampleRecord {
        user_id,
        item_id,
        label,
        split,
        time_index,
        seq_items,
        seq_actions,
        cat_fields,
        dense_fields,
        oracle_score,
    })
}

fn parse_u32_list(s: &str) -> std::result::Result<Vec<u32>, std::num::ParseIntError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(str::parse).collect()
}

fn parse_u8_list(s: &str) -> std::result::Result<Vec<u8>, std::num::ParseIntError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(str::parse).collect()
}

fn parse_f64_list(s: &str) -> std::result::Result<Vec<f64>, std::num::ParseFloatError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(str::parse).collect()
}

pub fn read_all(dir: &Path) -> Result<Vec<SampleRecord>> {
    DatasetReader::open(dir)?.collect()
}

// ── Batching ─────────────────────────────────────────────────────────

/// Padded, right-ready batch view of a set of records.
///
/// Sequences stay left-aligned in storage (token p of sample b lives at
/// `b * l_max + p` for p < valid_len); right alignment applies only to bias
/// column indexing.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub batch: usize,
    pub l_max: usize,
    pub candidate_ids: Vec<usize>,
    pub labels: Vec<f64>,
    pub item_ids: Vec<usize>,
    pub action_types: Vec<usize>,
    pub valid_len: Vec<usize>,
    pub cat_fields: Vec<Vec<usize>>,
    pub dense_fields: Vec<Vec<f64>>,
    pub n_cat_fields: usize,
    pub n_dense_fields: usize,
}

impl SequenceBatch {
    pub fn from_records(records: &[&SampleRecord], l_max: usize) -> Result<Self> {
        let b = records.len();
        let mut item_ids = vec![0usize; b * l_max];
        let mut action_types = vec![0usize; b * l_max];
        let mut valid_len = vec![0usize; b];
        let mut candidate_ids = Vec::with_capacity(b);
        let mut labels = Vec::with_capacity(b);
        let n_cat = records.first().map_or(0, |r| r.cat_fields.len());
        let n_dense = records.first().map_or(0, |r| r.dense_fields.len());
        let mut cat_fields = vec![Vec::with_capacity(b); n_cat];
        let mut dense_fields = vec![Vec::with_capacity(b); n_dense];
        for (bi, r) in records.iter().enumerate() {
            let v = r.valid_len();
            if v > l_max {
                return Err(CoreError::ValidLenOutOfRange { valid_len: v, l_max });
            }
            valid_len[bi] = v;
            for p in 0..v {
                item_ids[bi * l_max + p] = r.seq_items[p] as usize;
                action_types[bi * l_max + p] = r.seq_actions[p] as usize;
            }
            candidate_ids.push(r.item_id as usize);
            labels.push(r.label as f64);
            for (f, out) in r.cat_fields.iter().zip(cat_fields.iter_mut()) {
                out.push(*f as usize);
            }
            for (f, out) in r.dense_fields.iter().zip(dense_fields.iter_mut()) {
                out.push(*f);
            }
        }
        Ok(SequenceBatch {
            batch: b,
            l_max,
            candidate_ids,
            labels,
            item_ids,
            action_types,
            valid_len,
            cat_fields,
            dense_fields,
            n_cat_fields: n_cat,
            n_dense_fields: n_dense,
        })
    }
}

/// Seeded epoch shuffle over record indices.
pub fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(epoch as u64));
    idx.shuffle(&mut rng);
    idx
}
