//! Shared fixtures for the benchmarks.

use hail_core::corpus::split_leave_one_out;
use hail_core::masking::{MaskedBatch, MaskedSample};
use hail_core::synthetic::{generate, SyntheticSpec};
use hail_core::{DualModel, ModelShape, SplitSet, TrainConfig};

/// A two-peer model at the benchmark size.
pub fn bench_config() -> TrainConfig {
    TrainConfig {
        d: 32,
        d_hidden: 64,
        layers: 1,
        max_len: 24,
        batch_size: 64,
        duplication: 1,
        epochs: 1,
        warmup_steps: 50,
        ..TrainConfig::default()
    }
}

pub fn synthetic_split() -> (SplitSet, usize) {
    let spec = SyntheticSpec::default();
    let corpus = generate(&spec).expect("default spec is valid");
    (split_leave_one_out(&corpus.sequences), spec.elements + 2)
}

pub fn model(shape: ModelShape) -> DualModel {
    DualModel::new(shape, 0).expect("valid shape")
}

/// `rows` sequences masked at every fifth position.
pub fn masked_batch(split: &SplitSet, shape: ModelShape, rows: usize) -> MaskedBatch {
    let mask_id = shape.vocab_rows as u32 - 1;
    let samples: Vec<MaskedSample> = split
        .train
        .iter()
        .take(rows)
        .map(|s| {
            let elems = &s.elements[s.elements.len().saturating_sub(shape.max_len)..];
            let positions = (0..elems.len()).step_by(5).collect();
            MaskedSample::with_positions(elems, mask_id, positions)
        })
        .collect();
    let refs: Vec<&MaskedSample> = samples.iter().collect();
    MaskedBatch::from_samples(&refs, shape.max_len, 0).expect("batch fits")
}
