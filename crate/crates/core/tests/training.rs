//! Smoke-scale training regressions.

use btgperm::model::{evaluate, train, Model, Reorder, TrainConfig, Variant};
use btgperm::tasks::ArithExample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random token strings of length 2..=4 paired with their reversal.
fn inversion_pairs(count: usize, seed: u64) -> Vec<ArithExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(2..=4);
            let infix: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
            let postfix = infix.iter().rev().copied().collect();
            ArithExample { infix, postfix, depth: 1 }
        })
        .collect()
}

fn smoke_config(variant: Variant) -> TrainConfig {
    let mut c = TrainConfig::new(variant);
    c.scorer.embed_dim = 8;
    c.scorer.hidden = 8;
    c.scorer.mlp_hidden = 16;
    c.tagger.embed_dim = 8;
    c
}

#[test]
fn hard_variant_fits_inversions() {
    let data = inversion_pairs(200, 1);
    let mut c = smoke_config(Variant::Hard);
    c.epochs = 200;
    c.stop_at_dev_exact_match = Some(1.0);
    let out = train(&c, &data, &data).unwrap();
    assert_eq!(evaluate(&out.model, &data).unwrap(), 1.0, "best epoch {}", out.best_epoch);
}

#[test]
fn first_batch_loss_decreases() {
    let data = inversion_pairs(32, 2);
    let mut c = smoke_config(Variant::Soft);
    c.batch_size = 32;
    c.epochs = 50;
    c.lag_steps = 0;
    let before = Model::init(&c).unwrap();
    let out = train(&c, &data, &data).unwrap();
    let mean = |m: &Model| {
        data.iter().map(|e| m.loss_and_gradients(&e.infix, &e.postfix, Reorder::Marginal).unwrap().0).sum::<f64>()
            / data.len() as f64
    };
    assert_eq!(out.steps, 50);
    // recorded run: 1.928 -> 1.278
    let (b, a) = (mean(&before), mean(&out.model));
    assert!(a < 0.8 * b, "first batch loss {b} -> {a}");
}
