//! Synthetic exposure-log generator with controllable samples-per-item
//! density and planted click mechanisms.
//!
//! Each user is simulated as a stream of exposures. Items carry a latent
//! type, a position profile, and a metadata code; users carry preferred
//! types, an attention-focus level, and an attribute code. The click
//! log-odds of an exposure decompose into three planted terms:
//!
//! - recency: recency-weighted type-match score over the recent window.
//!   The decay sharpens when the window is concentrated on one type, so the
//!   useful retrieval horizon depends on the history state.
//! - target profile: type-match score inside the position band selected by
//!   the candidate's profile, so where to look depends on the candidate.
//! - metadata: user-attribute / item-metadata alignment, observable only
//!   through the non-sequential fields.
//!
//! Matches are signed by behaviour: clicked or strongly engaged history
//! items count positively, exposed-but-skipped mildly negatively, hated
//! strongly negatively. History protocols change only which tokens are
//! written into each record, never the simulated world, so the same seed
//! yields identical labels across protocols.

use rand::distributions::Uniform;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::config::{DatasetSpec, HistoryProtocol};
use crate::data::{
    Manifest, RealisedStats, SampleRecord, Split, ACTION_CLICK, ACTION_HATE, ACTION_SKIP,
    ACTION_STRONG, SCHEMA_VERSION,
};
use crate::error::Result;
use crate::metrics::evaluate_auc;
use crate::params::init_rng;

pub const N_TYPES: usize = 8;
pub const CAT_VOCAB: usize = 16;
/// Dense fields emitted per record (history saturation).
pub const N_DENSE_FIELDS: usize = 1;

const GAMMA_SHARP: f64 = 0.6;
const GAMMA_LONG: f64 = 0.95;
const CONCENTRATION_THRESHOLD: f64 = 0.5;
const MATCH_SKIP: f64 = -0.5;
const MATCH_HATE: f64 = -1.5;
const MATCH_POSITIVE: f64 = 2.0;

struct ItemCatalog {
    /// popularity cdf over item ids 1..=n (index 0 unused)
    cdf: Vec<f64>,
    item_type: Vec<usize>,
    item_profile: Vec<usize>,
    item_meta: Vec<u32>,
    /// per type: (item ids, popularity cdf within type)
    by_type: Vec<(Vec<u32>, Vec<f64>)>,
}

fn build_catalog(spec: &DatasetSpec, rng: &mut ChaCha12Rng) -> ItemCatalog {
    let n = spec.n_items;
    let mut weights = Vec::with_capacity(n + 1);
    weights.push(0.0);
    let mut total = 0.0;
    for i in 1..=n {
        let w = (i as f64).powf(-spec.zipf_exponent);
        total += w;
        weights.push(w);
    }
    let mut cdf = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    cdf.push(0.0);
    for w in &weights[1..] {
        acc += w / total;
        cdf.push(acc);
    }
    let profile_count = spec.planted_signal.position_profile_count;
    let mut item_type = vec![0usize; n + 1];
    let mut item_profile = vec![0usize; n + 1];
    let mut item_meta = vec![0u32; n + 1];
    for i in 1..=n {
        item_type[i] = rng.gen_range(0..N_TYPES);
        item_profile[i] = rng.gen_range(0..profile_count);
        item_meta[i] = rng.gen_range(0..CAT_VOCAB as u32);
    }
    let mut by_type: Vec<(Vec<u32>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); N_TYPES];
    for i in 1..=n {
        by_type[item_type[i]].0.push(i as u32);
    }
    for (ids, tcdf) in by_type.iter_mut() {
        let sum: f64 = ids.iter().map(|&i| weights[i as usize]).sum();
        let mut acc = 0.0;
        for &i in ids.iter() {
            acc += weights[i as usize] / sum;
            tcdf.push(acc);
        }
    }
    ItemCatalog { cdf, item_type, item_profile, item_meta, by_type }
}

fn draw_from_cdf(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|&c| c < u)
}

struct UserProfile {
    preferred: [usize; 2],
    focus: f64,
    attr: u32,
}

#[derive(Clone, Copy)]
struct Event {
    item: u32,
    action: u8,
}

fn action_match_weight(action: u8) -> f64 {
    match action {
        ACTION_CLICK | ACTION_STRONG => MATCH_POSITIVE,
        ACTION_HATE => MATCH_HATE,
        _ => MATCH_SKIP,
    }
}

/// Planted log-odds contribution of one exposure given the recent window.
/// `window` is ordered oldest-first; ages count back from its end.
fn planted_signal(
    spec: &DatasetSpec,
    catalog: &ItemCatalog,
    user: &UserProfile,
    window: &[Event],
    candidate: usize,
) -> f64 {
    let ps = &spec.planted_signal;
    let cand_type = catalog.item_type[candidate];
    let mut signal = 0.0;

    if ps.recency_weight != 0.0 && !window.is_empty() {
        // Concentration decides the decay horizon.
        let mut counts = [0usize; N_TYPES];
        for e in window {
            counts[catalog.item_type[e.item as usize]] += 1;
        }
        let conc = counts.iter().copied().max().unwrap() as f64 / window.len() as f64;
        let gamma = if conc >= CONCENTRATION_THRESHOLD { GAMMA_SHARP } else { GAMMA_LONG };
        let mut num = 0.0;
        let mut den = 0.0;
        let mut decay = 1.0;
        for e in window.iter().rev() {
            den += decay;
            if catalog.item_type[e.item as usize] == cand_type {
                num += decay * action_match_weight(e.action);
            }
            decay *= gamma;
        }
        signal += ps.recency_weight * num / den;
    }

    if ps.target_match_weight != 0.0 && !window.is_empty() {
        let band = catalog.item_profile[candidate];
        let band_len = spec.l_max / ps.position_profile_count;
        let lo = band * band_len;
        let hi = if band + 1 == ps.position_profile_count { spec.l_max } else { lo + band_len };
        let mut num = 0.0;
        let mut count = 0usize;
        for (age, e) in window.iter().rev().enumerate() {
            if age >= lo && age < hi {
                count += 1;
                if catalog.item_type[e.item as usize] == cand_type {
                    num += action_match_weight(e.action);
                }
            }
        }
        if count > 0 {
            signal += ps.target_match_weight * num / count as f64;
        }
    }

    if ps.metadata_weight != 0.0 && spec.n_nonseq_fields >= 2 {
        let meta = catalog.item_meta[candidate];
        if meta == user.attr {
            signal += ps.metadata_weight;
        }
    }
    signal
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

struct SimulationOut {
    records: Vec<SampleRecord>,
    n_pos: usize,
}

fn simulate(spec: &DatasetSpec, catalog: &ItemCatalog, users: &[UserProfile], base: f64) -> SimulationOut {
    let per_user = spec.n_samples / spec.n_users;
    let remainder = spec.n_samples % spec.n_users;
    let unit = Uniform::new(0.0f64, 1.0);
    let mut records = Vec::with_capacity(spec.n_samples);
    let mut n_pos = 0usize;

    for (u, user) in users.iter().enumerate() {
        // Per-user stream so the output is independent of scheduling.
        let mut rng = init_rng(spec.seed, &format!("user.{u}"));
        let n_events = per_user + usize::from(u < remainder);
        let mut history: Vec<Event> = Vec::with_capacity(n_events);
        let n_eval = n_events / 5;

        for k in 0..n_events {
            // Candidate: user-preferred type with probability `focus`.
            let candidate = if rng.sample(unit) < user.focus {
                let t = user.preferred[usize::from(rng.sample(unit) < 0.5)];
                let (ids, tcdf) = &catalog.by_type[t];
                if ids.is_empty() {
                    draw_from_cdf(&catalog.cdf, rng.sample(unit))
                } else {
                    ids[draw_from_cdf(tcdf, rng.sample(unit)).min(ids.len() - 1)] as usize
                }
            } else {
                draw_from_cdf(&catalog.cdf, rng.sample(unit)).min(spec.n_items).max(1)
            };

            let window_start = history.len().saturating_sub(spec.l_max);
            let window = &history[window_start..];
            let s = base + planted_signal(spec, catalog, user, window, candidate);
            let p = 1.0 / (1.0 + (-s).exp());
            let label = u8::from(rng.sample(unit) < p);
            let action = if label == 1 {
                if rng.sample(unit) < 0.3 {
                    ACTION_STRONG
                } else {
                    ACTION_CLICK
                }
            } else if rng.sample(unit) < 0.1 {
                ACTION_HATE
            } else {
                ACTION_SKIP
            };
            n_pos += usize::from(label == 1);

            // Observation window per protocol; +1 shifts actions off the padding id.
            let (seq_items, seq_actions): (Vec<u32>, Vec<u8>) = match spec.history_protocol {
                HistoryProtocol::TypedExposure => {
                    (window.iter().map(|e| e.item).collect(), window.iter().map(|e| e.action + 1).collect())
                }
                HistoryProtocol::AllExposure => {
                    (window.iter().map(|e| e.item).collect(), window.iter().map(|_| ACTION_CLICK + 1).collect())
                }
                HistoryProtocol::ClickOnly => {
                    let kept: Vec<&Event> = window
                        .iter()
                        .filter(|e| e.action == ACTION_CLICK || e.action == ACTION_STRONG)
                        .collect();
                    (kept.iter().map(|e| e.item).collect(), kept.iter().map(|e| e.action + 1).collect())
                }
            };

            let mut cat_fields = Vec::with_capacity(spec.n_nonseq_fields);
            if spec.n_nonseq_fields >= 1 {
                cat_fields.push(user.attr);
            }
            if spec.n_nonseq_fields >= 2 {
                cat_fields.push(catalog.item_meta[candidate]);
            }
            for _ in 2..spec.n_nonseq_fields {
                cat_fields.push(rng.gen_range(0..CAT_VOCAB as u32));
            }
            let saturation = (history.len() as f64 / spec.l_max as f64).min(1.0);

            records.push(SampleRecord {
                user_id: u as u32,
                item_id: candidate as u32,
                label,
                split: if k >= n_events - n_eval { Split::Eval } else { Split::Train },
                time_index: k as u32,
                seq_items,
                seq_actions,
                cat_fields,
                dense_fields: vec![saturation],
                oracle_score: s,
            });
            history.push(Event { item: candidate as u32, action });
        }
    }
    SimulationOut { records, n_pos }
}

/// Generates a dataset and its manifest. Deterministic in the spec.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<(Vec<SampleRecord>, Manifest)> {
    spec.validate()?;
    let mut static_rng = init_rng(spec.seed, "items");
    let catalog = build_catalog(spec, &mut static_rng);
    let mut user_rng = init_rng(spec.seed, "users");
    let users: Vec<UserProfile> = (0..spec.n_users)
        .map(|_| {
            let a = user_rng.gen_range(0..N_TYPES);
            let mut b = user_rng.gen_range(0..N_TYPES);
            if b == a {
                b = (b + 1) % N_TYPES;
            }
            UserProfile {
                preferred: [a, b],
                focus: user_rng.gen_range(0.2..0.9),
                attr: user_rng.gen_range(0..CAT_VOCAB as u32),
            }
        })
        .collect();

    // Three deterministic passes: each pilot measures the realised rate and
    // shifts the base logit toward the target; the last pass is kept.
    let mut base = logit(spec.positive_rate);
    let mut out = simulate(spec, &catalog, &users, base);
    for _ in 0..2 {
        let r = (out.n_pos as f64 / spec.n_samples as f64)
            .clamp(1.0 / spec.n_samples as f64, 1.0 - 1.0 / spec.n_samples as f64);
        base += logit(spec.positive_rate) - logit(r);
        out = simulate(spec, &catalog, &users, base);
    }

    let mut seen = vec![false; spec.n_items + 1];
    for r in &out.records {
        seen[r.item_id as usize] = true;
    }
    let distinct = seen.iter().filter(|&&s| s).count();
    let eval: Vec<&SampleRecord> = out.records.iter().filter(|r| r.split == Split::Eval).collect();
    let oracle_eval_auc = {
        let scores: Vec<f64> = eval.iter().map(|r| r.oracle_score).collect();
        let labels: Vec<f64> = eval.iter().map(|r| r.label as f64).collect();
        evaluate_auc(&scores, &labels).unwrap_or(f64::NAN)
    };
    let mean_valid_len =
        out.records.iter().map(|r| r.valid_len() as f64).sum::<f64>() / out.records.len().max(1) as f64;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        spec: spec.clone(),
        realised: RealisedStats {
            n_records: out.records.len(),
            n_train: out.records.len() - eval.len(),
            n_eval: eval.len(),
            positive_rate: out.n_pos as f64 / out.records.len().max(1) as f64,
            samples_per_item: out.records.len() as f64 / distinct.max(1) as f64,
            distinct_candidates: distinct,
            base_logit: base,
            oracle_eval_auc,
            mean_valid_len,
        },
    };
    Ok((out.records, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PlantedSignal;

    fn spec(
        n_items: usize,
        n_samples: usize,
        protocol: HistoryProtocol,
        signal: PlantedSignal,
    ) -> DatasetSpec {
        DatasetSpec {
            n_items,
            n_users: 40,
            n_samples,
            l_max: 30,
            n_nonseq_fields: 2,
            target_samples_per_item: n_samples as f64 / n_items as f64,
            positive_rate: 0.1,
            zipf_exponent: 1.1,
            planted_signal: signal,
            history_protocol: protocol,
            seed: 11,
        }
    }

    fn recency_signal() -> PlantedSignal {
        PlantedSignal {
            recency_weight: 10.0,
            target_match_weight: 0.0,
            position_profile_count: 4,
            metadata_weight: 1.0,
        }
    }

    #[test]
    fn density_lands_near_target() {
        let spec = spec(100, 5000, HistoryProtocol::TypedExposure, recency_signal());
        let (_, manifest) = gen_dataset(&spec).unwrap();
        let spi = manifest.realised.samples_per_item;
        assert!((42.5..=57.5).contains(&spi), "samples/item {spi}");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = spec(50, 2000, HistoryProtocol::TypedExposure, recency_signal());
        let (a, ma) = gen_dataset(&spec).unwrap();
        let (b, mb) = gen_dataset(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma.realised.positive_rate, mb.realised.positive_rate);
    }

    #[test]
    fn click_only_tokens_come_from_earlier_positive_records() {
        let spec = spec(50, 2000, HistoryProtocol::ClickOnly, recency_signal());
        let (records, _) = gen_dataset(&spec).unwrap();
        use std::collections::HashSet;
        let mut positives_so_far: std::collections::HashMap<u32, HashSet<u32>> = Default::default();
        for r in &records {
            let seen = positives_so_far.entry(r.user_id).or_default();
            for &item in &r.seq_items {
                assert!(seen.contains(&item), "token {item} was never an earlier positive");
            }
            if r.label == 1 {
                seen.insert(r.item_id);
            }
        }
    }

    #[test]
    fn protocols_share_world_and_click_only_is_subset() {
        let typed = spec(50, 2000, HistoryProtocol::TypedExposure, recency_signal());
        let mut all = typed.clone();
        all.history_protocol = HistoryProtocol::AllExposure;
        let mut click = typed.clone();
        click.history_protocol = HistoryProtocol::ClickOnly;
        let (rt, _) = gen_dataset(&typed).unwrap();
        let (ra, _) = gen_dataset(&all).unwrap();
        let (rc, _) = gen_dataset(&click).unwrap();
        for ((t, a), c) in rt.iter().zip(&ra).zip(&rc) {
            assert_eq!(t.label, a.label);
            assert_eq!(t.label, c.label);
            assert_eq!(t.item_id, a.item_id);
            // typed and all-exposure share the token set exactly
            assert_eq!(t.seq_items, a.seq_items);
            // all-exposure collapses behaviour to one category
            assert!(a.seq_actions.iter().all(|&x| x == ACTION_CLICK + 1));
            // click-only is an ordered subset of the typed tokens
            let mut it = t.seq_items.iter();
            for tok in &c.seq_items {
                assert!(it.any(|x| x == tok), "click-only token missing from typed window");
            }
        }
    }

    #[test]
    fn positive_rate_is_calibrated() {
        let spec = spec(100, 8000, HistoryProtocol::TypedExposure, recency_signal());
        let (_, manifest) = gen_dataset(&spec).unwrap();
        let rate = manifest.realised.positive_rate;
        assert!((0.06..=0.16).contains(&rate), "positive rate {rate}");
    }

    #[test]
    fn oracle_auc_clears_floor_on_planted_signals() {
        for signal in [
            recency_signal(),
            PlantedSignal {
                recency_weight: 0.0,
                target_match_weight: 10.0,
                position_profile_count: 4,
                metadata_weight: 1.0,
            },
        ] {
            let spec = spec(50, 6000, HistoryProtocol::TypedExposure, signal);
            let (_, manifest) = gen_dataset(&spec).unwrap();
            assert!(
                manifest.realised.oracle_eval_auc >= 0.75,
                "oracle AUC {} too weak for {:?}",
                manifest.realised.oracle_eval_auc,
                signal
            );
        }
    }

    #[test]
    fn density_sweep_is_strictly_decreasing() {
        let mut last = f64::INFINITY;
        for &target in &[500.0, 50.0, 5.0, 1.5] {
            let n_samples = 3000;
            let n_items = (n_samples as f64 / target).round() as usize;
            let spec = spec(n_items, n_samples, HistoryProtocol::TypedExposure, recency_signal());
            let (_, manifest) = gen_dataset(&spec).unwrap();
            assert!(manifest.realised.samples_per_item < last);
            last = manifest.realised.samples_per_item;
        }
    }
}
