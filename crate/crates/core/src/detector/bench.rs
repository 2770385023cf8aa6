use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::DetectorConfig;
use super::model::Detector;
use crate::autodiff::{Tape, Tensor};
use crate::error::{ensure, Result};

#[derive(Clone, Debug, Serialize)]
pub struct LatencyReport {
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub trials: usize,
    pub baseline_ms: f64,
    pub moca_ms: f64,
    /// `(moca − baseline) / baseline`.
    pub overhead: f64,
}

/// Mean wall-clock time of the decoder stack plus heads, with and without the
/// token row, on shared weights and a shared precomputed memory. Trials
/// alternate between the two modes so drift affects both equally.
pub fn latency_bench(config: &DetectorConfig, image_size: usize, trials: usize, seed: u64) -> Result<LatencyReport> {
    ensure!(trials >= 100, Validation, "latency bench needs at least 100 trials, got {trials}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let det = Detector::init(config.clone(), &mut rng)?;
    let image = Tensor::matrix(
        image_size,
        image_size,
        (0..image_size * image_size).map(|_| rng.random::<f64>()).collect(),
    )?;
    let token = Tensor::row((0..config.d_model).map(|_| rng.random_range(-1.0..1.0)).collect());
    let memory = {
        let mut tape = Tape::new();
        let b = det.bind(&mut tape, false);
        let m = det.memory(&mut tape, &b, &image)?;
        tape.value(m).clone()
    };

    let run = |moca: bool| -> Result<f64> {
        let start = Instant::now();
        let mut tape = Tape::new();
        let b = det.bind(&mut tape, false);
        let mem = tape.constant(memory.clone());
        let token_row = if moca {
            let t = tape.constant(token.clone());
            Some(det.project_token_row(&mut tape, &b, t)?)
        } else {
            None
        };
        let mut q = b.vars[det.layout_query_content()];
        for l in 0..config.decoder_layers {
            q = det.decoder_layer(&mut tape, &b, l, q, mem, token_row, false)?;
            det.heads(&mut tape, &b, q)?;
        }
        std::hint::black_box(tape.value(q));
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };

    run(false)?;
    run(true)?;
    let (mut base, mut moca) = (0.0, 0.0);
    for _ in 0..trials {
        base += run(false)?;
        moca += run(true)?;
    }
    let baseline_ms = base / trials as f64;
    let moca_ms = moca / trials as f64;
    Ok(LatencyReport {
        num_queries: config.num_queries,
        decoder_layers: config.decoder_layers,
        trials,
        baseline_ms,
        moca_ms,
        overhead: (moca_ms - baseline_ms) / baseline_ms,
    })
}
