//! Shared builders for integration tests.

#![allow(dead_code)]

use scenediff::dataset::{Dataset, TaskMix};
use scenediff::net::{AttentionMode, Params};
use scenediff::recipe::ModelShape;
use scenediff::scenegen::{GenSpec, Task};

pub fn dataset(mix: &[(Task, f64)], size: usize, seed: u64) -> Dataset {
    Dataset::generate(&GenSpec::default(), seed, size, &TaskMix::new(mix), 100).unwrap()
}

pub fn mixed(size: usize, seed: u64) -> Dataset {
    dataset(&[(Task::Caption, 0.25), (Task::Detect, 0.25), (Task::Ground, 0.25), (Task::Classify, 0.25)], size, seed)
}

pub fn model(ds: &Dataset, d_model: usize, n_layers: usize, mode: AttentionMode, seed: u64) -> Params<f32> {
    Params::init(&ModelShape { d_model, n_layers, n_heads: 2 }.config(ds, mode), seed).unwrap()
}

/// Randomly initialized weights are nearly uniform over the vocabulary;
/// scaling them up gives decodes with varied, input-dependent confidences.
pub fn sharpened(mut p: Params<f32>, factor: f32) -> Params<f32> {
    for t in &mut p.tensors {
        for v in &mut t.data {
            *v *= factor;
        }
    }
    p
}
