//! Behavioural properties of the per-pair fit and of network training.

use relit_core::dataset::{synthesize_scene, DatasetConfig};
use relit_core::fit::{fit_pair, FitConfig};
use relit_core::losses::LossWeights;
use relit_core::nn::{AdamConfig, TrainConfig, TrainData, Trainer};
use relit_core::synth::{MultiLitSample, PairMode};

fn scene(size: usize, k: usize, seed: u64) -> MultiLitSample {
    let cfg = DatasetConfig {
        scenes: 1,
        k,
        size,
        seed,
        ..Default::default()
    };
    synthesize_scene(&cfg, 0).unwrap().1
}

fn moving_average(v: &[f64], n: usize) -> Vec<f64> {
    v.windows(n).map(|w| w.iter().sum::<f64>() / n as f64).collect()
}

#[test]
fn fit_loss_trace_decreases_after_smoothing() {
    for seed in 0..3 {
        let s = scene(32, 2, 60 + seed);
        let w = LossWeights::self_supervised(1.0, 1.0);
        let cfg = FitConfig {
            iterations: 150,
            ..Default::default()
        };
        let f = fit_pair(&s.images[0], &s.images[1], &s.mask, &w, &cfg).unwrap();
        let totals: Vec<f64> = f.trace.iter().map(|l| l.total).collect();
        let smooth = moving_average(&totals, 10);
        for (i, pair) in smooth.windows(2).enumerate() {
            // Adam may wobble a little; allow 1% of the starting loss
            assert!(pair[1] <= pair[0] + 0.01 * totals[0], "seed {seed} window {i}: {} -> {}", pair[0], pair[1]);
        }
        assert!(f.best_loss.total <= totals[0]);
    }
}

#[test]
fn fit_is_roughly_symmetric_in_the_pair_order() {
    let w = LossWeights::self_supervised(1.0, 1.0);
    let cfg = FitConfig {
        iterations: 150,
        ..Default::default()
    };
    for seed in 0..3 {
        let s = scene(32, 2, 80 + seed);
        let ab = fit_pair(&s.images[0], &s.images[1], &s.mask, &w, &cfg).unwrap().best_loss.total;
        let ba = fit_pair(&s.images[1], &s.images[0], &s.mask, &w, &cfg).unwrap().best_loss.total;
        let ratio = ab.max(ba) / ab.min(ba);
        assert!(ratio <= 2.0, "seed {seed}: {ab} vs {ba}");
    }
}

#[test]
fn default_model_overfits_one_scene() {
    let s = scene(32, 3, 5);
    let data = TrainData::new(vec![s], PairMode::All).unwrap();
    let cfg = TrainConfig {
        batch_pairs: 4,
        steps: 200,
        seed: 1,
        adam: AdamConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut t = Trainer::new(cfg).unwrap();
    let losses: Vec<f64> = (0..200).map(|_| t.train_step(&data).unwrap().loss.total).collect();
    // batches are resampled each step, so average the tail
    let last = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(last <= 0.1 * losses[0], "loss {} -> {last}", losses[0]);
}
