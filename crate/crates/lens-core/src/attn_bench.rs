//! Wall-clock scaling of one cross-attention decode layer in sequence
//! length, at fixed query count. Latent-query decoding costs O(qL), so
//! doubling L should roughly double the time.

use std::time::Instant;

use rand::Rng;

use crate::backbone::{mha, register_mha, MhaWeights};
use crate::error::Result;
use crate::params::{init_rng, BoundParams, ParameterStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const BENCH_BATCH: usize = 8;
pub const BENCH_D: usize = 32;
pub const BENCH_HEADS: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct BenchPoint {
    pub l: usize,
    pub median_seconds: f64,
}

/// Times `runs` forward passes per length (after one warmup) and reports the
/// median.
pub fn bench_cross_attention(q: usize, lengths: &[usize], runs: usize) -> Result<Vec<BenchPoint>> {
    let mut store = ParameterStore::new();
    let mut rng = init_rng(7, "attn-bench");
    register_mha(&mut store, "bench", BENCH_D, &mut rng);

    let mut out = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let queries = Tensor::randn(&[BENCH_BATCH, q, BENCH_D], 1.0, &mut rng);
        let seq = Tensor::randn(&[BENCH_BATCH, l, BENCH_D], 1.0, &mut rng);
        let valid: Vec<usize> = (0..BENCH_BATCH).map(|_| rng.gen_range(l / 2..=l)).collect();

        let one_pass = || -> Result<f64> {
            let start = Instant::now();
            let mut tape = Tape::new();
            let bound = BoundParams::bind_all(&store, &mut tape);
            let w = MhaWeights::bind(&bound, "bench")?;
            let qv = tape.constant(&queries);
            let sv = tape.constant(&seq);
            let (attn_out, _) = mha(&mut tape, &w, BENCH_HEADS, qv, sv, None, Some(&valid), true)?;
            std::hint::black_box(tape.value(attn_out));
            Ok(start.elapsed().as_secs_f64())
        };

        one_pass()?; // warmup
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            times.push(one_pass()?);
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.push(BenchPoint { l, median_seconds: times[times.len() / 2] });
    }
    Ok(out)
}
