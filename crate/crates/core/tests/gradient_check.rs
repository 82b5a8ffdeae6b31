//! Hand-written backward pass against central finite differences, in f64.

use genda::dataset::{build_dataset, sample_batch};
use genda::diffusion::NoiseSchedule;
use genda::lorenz96::ModelConfig;
use genda::nn::{init_params, loss_and_grads, ArchConfig, DenoiserParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;

fn check(arch: ArchConfig, n: usize, p_drop: f64, seed: u64) {
    let sched = NoiseSchedule::default();
    let cfg = ModelConfig::new(8.0, 0.05, n).unwrap();
    let ds = build_dataset(1, 16, &cfg, 2, 1.0, seed).unwrap();
    let batch = sample_batch(&ds, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut params: DenoiserParams<f64> = init_params(&arch, n, &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap()
        .cast();
    // give biases, norm offsets and the label non-trivial values so every path is exercised
    let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
    for v in params.values.iter_mut() {
        *v += 0.05 * rand::Rng::random_range(&mut r, -1.0..1.0);
    }
    let loss = |p: &DenoiserParams<f64>| {
        loss_and_grads(p, &batch, &sched, &mut ChaCha8Rng::seed_from_u64(99), p_drop)
            .unwrap()
            .0
    };
    let (_, grads) = loss_and_grads(&params, &batch, &sched, &mut ChaCha8Rng::seed_from_u64(99), p_drop).unwrap();
    let blocks = params.layout().blocks.clone();
    for blk in &blocks {
        let mut num = Vec::with_capacity(blk.len);
        for k in blk.offset..blk.offset + blk.len {
            let orig = params.values[k];
            params.values[k] = orig + H;
            let up = loss(&params);
            params.values[k] = orig - H;
            let down = loss(&params);
            params.values[k] = orig;
            num.push((up - down) / (2.0 * H));
        }
        let ana = &grads[blk.offset..blk.offset + blk.len];
        let diff: f64 = ana.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na: f64 = ana.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(1e-10);
        assert!(rel <= 1e-4, "block {}: relative error {rel:e} (|g| = {na:e})", blk.name);
        assert!(
            na > 0.0 || blk.name == "uncond_label",
            "block {} has zero gradient",
            blk.name
        );
    }
}

#[test]
fn every_block_matches_finite_differences() {
    let arch = ArchConfig {
        base_channels: 4,
        level_multipliers: vec![1, 2, 4],
        time_embed_dim: 8,
        groups: 2,
    };
    // drop the condition for some samples so the label receives gradient
    check(arch, 8, 0.5, 3);
}

#[test]
fn channel_changes_and_dropped_condition() {
    let arch = ArchConfig {
        base_channels: 2,
        level_multipliers: vec![1, 3],
        time_embed_dim: 4,
        groups: 1,
    };
    check(arch.clone(), 12, 1.0, 5);
    check(arch, 12, 0.0, 6);
}
