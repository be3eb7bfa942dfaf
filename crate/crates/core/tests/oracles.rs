//! Hand-computed references for individual ops, the loss and the metrics.

mod common;

use promptst::checkpoint::{Checkpoint, Provenance};
use promptst::metrics::evaluate;
use promptst::model::{multi_head_attention, EncoderLayer, ModelConfig, ModelParameters};
use promptst::tensor::{Tape, Tensor};
use promptst::train::{loss_value, Strategy};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_matches_triple_loop() {
    let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
    let b: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos()).collect();
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(t(&[3, 4], &a)), tape.constant(t(&[4, 2], &b)));
    let c = tape.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for p in 0..4 {
                s += a[i * 4 + p] * b[p * 2 + j];
            }
            assert!((tape.value(c).at(&[i, j]) - s).abs() < 1e-14);
        }
    }
}

#[test]
fn softmax_of_one_two_three() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let y = tape.softmax_lastaxis(x).unwrap();
    let z = 1.0 + 1f64.exp() + 2f64.exp();
    let expected = [1.0 / z, 1f64.exp() / z, 2f64.exp() / z];
    for (got, want) in tape.value(y).data().iter().zip(expected) {
        assert!((got - want).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_of_five_values() {
    let v = [2.0, -1.0, 0.5, 4.0, 3.5];
    let mean = v.iter().sum::<f64>() / 5.0;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
    let gain = [1.0, 2.0, 0.5, -1.0, 1.5];
    let bias = [0.0, 0.1, -0.2, 0.3, 0.0];
    let mut tape = Tape::new();
    let x = tape.constant(t(&[5], &v));
    let g = tape.constant(t(&[5], &gain));
    let b = tape.constant(t(&[5], &bias));
    let y = tape.layer_norm(x, g, b).unwrap();
    for i in 0..5 {
        let want = gain[i] * (v[i] - mean) / (var + 1e-5).sqrt() + bias[i];
        assert!((tape.value(y).data()[i] - want).abs() < 1e-14);
    }
}

#[test]
fn single_head_attention_unrolled() {
    let x = [[0.3, -0.7], [1.1, 0.4]];
    let wq = [[0.5, -0.2], [0.1, 0.9]];
    let wk = [[-0.3, 0.8], [0.6, 0.2]];
    let wv = [[1.0, 0.5], [-0.4, 0.3]];
    let wo = [[0.7, -0.1], [0.2, 1.2]];
    let mm = |a: [[f64; 2]; 2], b: [[f64; 2]; 2]| {
        [
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ]
    };
    let (q, k, v) = (mm(x, wq), mm(x, wk), mm(x, wv));
    let scale = 1.0 / 2f64.sqrt();
    let mut attended = [[0.0; 2]; 2];
    for i in 0..2 {
        let s0 = (q[i][0] * k[0][0] + q[i][1] * k[0][1]) * scale;
        let s1 = (q[i][0] * k[1][0] + q[i][1] * k[1][1]) * scale;
        let (e0, e1) = (s0.exp(), s1.exp());
        let (w0, w1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        for j in 0..2 {
            attended[i][j] = w0 * v[0][j] + w1 * v[1][j];
        }
    }
    let expected = mm(attended, wo);

    let mut tape = Tape::new();
    let flat = |m: [[f64; 2]; 2]| t(&[2, 2], &[m[0][0], m[0][1], m[1][0], m[1][1]]);
    let unused = tape.constant(Tensor::zeros(&[2]));
    let layer = EncoderLayer {
        wq: tape.constant(flat(wq)),
        wk: tape.constant(flat(wk)),
        wv: tape.constant(flat(wv)),
        wo: tape.constant(flat(wo)),
        attn_norm_gain: unused,
        attn_norm_bias: unused,
        ff_w1: unused,
        ff_b1: unused,
        ff_w2: unused,
        ff_b2: unused,
        ff_norm_gain: unused,
        ff_norm_bias: unused,
    };
    let xv = tape.constant(flat(x));
    let out = multi_head_attention(&mut tape, xv, &layer, 1).unwrap();
    for (i, row) in expected.iter().enumerate() {
        for (j, want) in row.iter().enumerate() {
            assert!((tape.value(out).at(&[i, j]) - want).abs() < 1e-14);
        }
    }
}

#[test]
fn loss_two_point_fixture() {
    let got = loss_value(&t(&[2], &[0.0, 2.0]), &t(&[2], &[0.0, 0.0])).unwrap();
    assert!((got - (2f64.sqrt() + 1.0)).abs() < 1e-12);
}

#[test]
fn evaluate_matches_hand_loop() {
    for seed in 0..3 {
        let err = common::oracle::evaluate_error(seed);
        assert!(err < 1e-10, "seed {seed}: {err:e}");
    }
}

#[test]
fn constant_half_predictor_matches_hand_loop() {
    let data = common::tiny(2, 80, 5);
    let config = ModelConfig::new(4, 3, data.regions(), 2, 8, 1, 2);
    let mut params = ModelParameters::init(&config, 0);
    params.head.weight = Tensor::zeros(params.head.weight.shape());
    let ckpt = Checkpoint {
        config,
        params,
        prompts: None,
        normalizer: data.normalizer.clone(),
        attribute_names: data.names.clone(),
        provenance: Provenance {
            strategy: Strategy::Full,
            seed: 0,
            epochs_run: 0,
            steps: 0,
            final_val_loss: None,
            target_attribute: None,
            trainable_count: 0,
        },
    };
    let report = evaluate(&ckpt, &data.test).unwrap();
    for (a, row) in report.attributes.iter().enumerate() {
        let (mut sq, mut ab, mut n) = (0.0, 0.0, 0.0);
        for w in &data.test.windows {
            for (i, &y) in w.y.data().iter().enumerate() {
                if i % 2 == a {
                    sq += (0.5 - y) * (0.5 - y);
                    ab += (0.5 - y).abs();
                    n += 1.0;
                }
            }
        }
        assert!((row.rmse_normalized - (sq / n).sqrt()).abs() < 1e-10);
        assert!((row.mae_normalized - ab / n).abs() < 1e-10);
    }
    let mean = report.attributes.iter().map(|r| r.rmse).sum::<f64>() / 2.0;
    assert!((report.average.rmse - mean).abs() < 1e-15);
}
