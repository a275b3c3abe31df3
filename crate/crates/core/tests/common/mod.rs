#![allow(dead_code)]

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pen::imagecore::{DatasetIndex, ImageTensor};
use pen::pipeline::{PenConfig, Stage, TrainConfig};
use pen::synthgen::{generate_toy_dataset, procedural_background, SynthOptions};

/// Writes `n` synthetic 64×64 pairs under `root` from procedural backgrounds.
pub fn synth_dataset(root: &Path, n: usize, seed: u64) -> DatasetIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = SynthOptions::default();
    let bgs: Vec<ImageTensor> = (0..4)
        .map(|_| procedural_background(opts.size, opts.size, &mut rng))
        .collect();
    generate_toy_dataset(&bgs, n, root, &opts, &mut rng).expect("synthetic dataset")
}

/// Toy-profile stage config with explicit step count and batch size.
pub fn toy_config(stage: Stage, steps: usize, batch: usize, seed: u64) -> TrainConfig {
    let mut pc = PenConfig::profile("toy").expect("toy profile");
    pc.seed = seed;
    let mut cfg = pc.train_config(stage);
    cfg.steps = steps;
    cfg.batch_size = batch;
    cfg
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
