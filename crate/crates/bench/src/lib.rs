//! Shared fixtures for the scoring benchmarks.

use melmatch::events::{quantize_target_sequence, QuantizationConfig, QuantizedEvent};
use melmatch::simulate::{generate_database, sample_query, CorpusStats, SimulationConfig};
use melmatch::training::TrainingPair;
use melmatch::ErrorModelParams;

pub fn config() -> QuantizationConfig {
    QuantizationConfig::default()
}

pub fn params() -> ErrorModelParams {
    ErrorModelParams::default()
}

/// A deterministic synthetic database of `size` targets around 20 notes.
pub fn database(size: usize, seed: u64) -> Vec<Vec<QuantizedEvent>> {
    let cfg = config();
    let stats = CorpusStats::builtin_default(cfg.q);
    let sim = SimulationConfig {
        seed,
        database_size: size,
        target_len: (20, 22),
        query_len: (8, 10),
    };
    generate_database(&stats, &cfg, &sim)
        .unwrap()
        .iter()
        .map(|t| quantize_target_sequence(t, &cfg).unwrap())
        .collect()
}

/// Queries sampled from the generative model against the given targets.
pub fn queries(
    targets: &[Vec<QuantizedEvent>],
    count: usize,
    length: usize,
    seed: u64,
) -> Vec<(Vec<QuantizedEvent>, usize)> {
    let p = params();
    let cfg = config();
    let mut out = Vec::new();
    for i in 0..count {
        let target_id = (i * 7919) % targets.len();
        let sampled =
            sample_query(&targets[target_id], &p, &cfg, 0, length, seed + i as u64).unwrap();
        out.push((sampled.events, target_id));
    }
    out
}

/// Training pairs for the expectation-step benchmark.
pub fn training_pairs(count: usize, seed: u64) -> Vec<TrainingPair> {
    let targets = database(count, seed);
    queries(&targets, count, 10, seed + 1)
        .into_iter()
        .map(|(query, target_id)| TrainingPair {
            target: targets[target_id].clone(),
            query,
            start: 0,
        })
        .collect()
}
