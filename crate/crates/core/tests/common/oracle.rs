//! Hand-loop metric reference.

use promptst::checkpoint::{Checkpoint, Provenance};
use promptst::data::WindowSet;
use promptst::metrics::evaluate;
use promptst::model::{forward, ModelConfig, ModelParameters};
use promptst::train::Strategy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn naive_metrics(ckpt: &Checkpoint, data: &WindowSet) -> Vec<[f64; 4]> {
    let c = ckpt.config.attributes;
    let mut sums = vec![[0.0f64; 4]; c];
    let mut count = 0usize;
    for w in &data.windows {
        let pred = forward(&ckpt.config, &ckpt.params, ckpt.prompts.as_ref(), &w.x).unwrap();
        for h in 0..data.horizon {
            for r in 0..data.regions {
                for (a, sum) in sums.iter_mut().enumerate() {
                    let (p, y) = (pred.at(&[h, r, a]), w.y.at(&[h, r, a]));
                    let scale = ckpt.normalizer.max[a] - ckpt.normalizer.min[a] + 1e-8;
                    let (pd, yd) = (
                        p * scale + ckpt.normalizer.min[a],
                        y * scale + ckpt.normalizer.min[a],
                    );
                    sum[0] += (pd - yd).powi(2);
                    sum[1] += (pd - yd).abs();
                    sum[2] += (p - y).powi(2);
                    sum[3] += (p - y).abs();
                }
                count += 1;
            }
        }
    }
    let n = count as f64;
    sums.iter()
        .map(|s| [(s[0] / n).sqrt(), s[1] / n, (s[2] / n).sqrt(), s[3] / n])
        .collect()
}

/// Largest deviation of `evaluate` from the hand loop on a perturbed
/// random model over three attributes.
pub fn evaluate_error(seed: u64) -> f64 {
    let data = super::tiny(3, 80, seed);
    let config = ModelConfig::new(4, 3, data.regions(), 3, 8, 1, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParameters::init(&config, seed);
    params.visit_mut(&mut |_, t| {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-0.3..0.3))
    });
    let ckpt = Checkpoint {
        config,
        params,
        prompts: None,
        normalizer: data.normalizer.clone(),
        attribute_names: data.names.clone(),
        provenance: Provenance {
            strategy: Strategy::Full,
            seed,
            epochs_run: 0,
            steps: 0,
            final_val_loss: None,
            target_attribute: None,
            trainable_count: 0,
        },
    };
    let report = evaluate(&ckpt, &data.test).unwrap();
    let mut worst = 0.0f64;
    for (row, oracle) in report
        .attributes
        .iter()
        .zip(naive_metrics(&ckpt, &data.test))
    {
        let got = [row.rmse, row.mae, row.rmse_normalized, row.mae_normalized];
        for (g, o) in got.iter().zip(oracle) {
            worst = worst.max((g - o).abs());
        }
    }
    worst
}
