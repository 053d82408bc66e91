//! Single-sample latency benchmark. Runs on a one-thread pool so float and
//! quantized numbers are comparable across machines with different core
//! counts.

use std::path::Path;
use std::time::Instant;

use qdnet::int8::quantized_forward;
use qdnet::io::{self, LoadedModel};
use qdnet::{QdError, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub const WARMUP_ITERS: usize = 50;

fn bench_input() -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data: Vec<f32> = (0..32 * 32).map(|_| rng.gen::<f32>()).collect();
    Tensor::new(vec![1, 1, 32, 32], data).expect("fixed shape")
}

/// Nearest-rank percentile of an already sorted sample.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn time_forwards<F>(iterations: usize, mut forward: F) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let input = bench_input();
    for _ in 0..WARMUP_ITERS {
        forward(&input)?;
    }
    let mut latencies_ms = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t0 = Instant::now();
        let out = forward(&input)?;
        latencies_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        // keep the result observable so the forward pass cannot be elided
        std::hint::black_box(out);
    }
    Ok(latencies_ms)
}

pub fn run_bench(model_path: &Path, iterations: usize) -> Result<Value> {
    if iterations == 0 {
        return Err(QdError::Config("bench iterations must be positive".into()));
    }
    let size_bytes = std::fs::metadata(model_path)?.len();
    let model = io::load(model_path)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| QdError::Config(format!("thread pool: {e}")))?;
    let (latencies, quantized) = pool.install(|| match &model {
        LoadedModel::Float(m) => Ok::<_, QdError>((
            time_forwards(iterations, |x| m.forward_eval(x))?,
            false,
        )),
        LoadedModel::Quantized(m) => Ok((
            time_forwards(iterations, |x| quantized_forward(m, x))?,
            true,
        )),
    })?;
    let mut sorted = latencies.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mean_latency_ms = latencies.iter().sum::<f64>() / latencies.len() as f64;
    Ok(json!({
        "command": "bench",
        "model_path": model_path.display().to_string(),
        "quantized": quantized,
        "iterations": iterations,
        "warmup": WARMUP_ITERS,
        "size_bytes": size_bytes,
        "mean_latency_ms": mean_latency_ms,
        "fps": 1000.0 / mean_latency_ms,
        "p50_latency_ms": percentile(&sorted, 50.0),
        "p95_latency_ms": percentile(&sorted, 95.0),
    }))
}
