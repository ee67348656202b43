// temporary probe: time one training run at criterion-6 scale
use lens_core::backbone::LatentQueryModel;
use lens_core::config::*;
use lens_core::synth::{gen_dataset, CAT_VOCAB, N_DENSE_FIELDS};
use lens_core::train::train;
use std::time::Instant;

fn main() {
    let spec = DatasetSpec {
        n_items: 48, n_users: 120, n_samples: 24000, l_max: 200, n_nonseq_fields: 2,
        target_samples_per_item: 500.0, positive_rate: 0.1, zipf_exponent: 1.1,
        planted_signal: PlantedSignal { recency_weight: 10.0, target_match_weight: 0.0, position_profile_count: 4, metadata_weight: 1.0 },
        history_protocol: HistoryProtocol::TypedExposure, seed: 60,
    };
    let t0 = Instant::now();
    let (records, m) = gen_dataset(&spec).unwrap();
    println!("gen: {:.1}s oracle {:.4} pos {:.3} mean_len {:.1}", t0.elapsed().as_secs_f64(), m.realised.oracle_eval_auc, m.realised.positive_rate, m.realised.mean_valid_len);
    let cfg = ModelConfig {
        q: 8, d: 16, n_layers: 2, heads: 2, l_max: spec.l_max, mlp_head: vec![256, 128, 1],
        switches: Switches { seq_pooling_tokens: true, ..Default::default() },
        position_mechanism: PositionMechanism::QuerySpecific,
        lens: LensConfig::default(),
        item_vocab: spec.n_items, n_cat_fields: 2, cat_vocab: CAT_VOCAB, n_dense_fields: N_DENSE_FIELDS, k_pool: 2,
    };
    let model = LatentQueryModel::new(cfg, ConditionSource::Item).unwrap();
    let tc = TrainConfig { batch_size: 256, epochs: 2, seed: 42, ..TrainConfig::default() };
    let t1 = Instant::now();
    let out = train(&model, &records, &tc, "h").unwrap();
    println!("train 2 epochs: {:.1}s auc {:.4} steps {}", t1.elapsed().as_secs_f64(), out.metrics.auc, out.steps);
}
