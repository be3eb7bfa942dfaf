//! Central finite-difference checks shared by the gradient suite and the
//! acceptance run.

use promptst::model::{forward_sequences, Backbone, Head, ModelConfig, ModelParameters};
use promptst::prompt::{PromptSet, PromptVariant};
use promptst::tensor::{Tape, Tensor, Var};
use promptst::train::rmse_mae;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;
type Op = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct Case {
    pub group: &'static str,
    pub name: &'static str,
    shapes: Vec<Vec<usize>>,
    lo: f64,
    hi: f64,
    op: Op,
}

fn case(
    group: &'static str,
    name: &'static str,
    shapes: &[&[usize]],
    range: (f64, f64),
    op: impl Fn(&mut Tape, &[Var]) -> Var + 'static,
) -> Case {
    Case {
        group,
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        lo: range.0,
        hi: range.1,
        op: Box::new(op),
    }
}

pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn evaluate(inputs: &[Tensor], build: &Build<'_>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.value(out).item().expect("scalar")
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)` over the inputs.
pub fn max_relative_error(inputs: &[Tensor], build: &Build<'_>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[j] += STEP;
            let up = evaluate(&shifted, build);
            shifted[i].data_mut()[j] -= 2.0 * STEP;
            let down = evaluate(&shifted, build);
            *slot = (up - down) / (2.0 * STEP);
        }
        let diff: Vec<f64> = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| a - n)
            .collect();
        let scale = norm(analytic.data()).max(norm(&numeric));
        let rel = if scale == 0.0 {
            norm(&diff)
        } else {
            norm(&diff) / scale
        };
        worst = worst.max(rel);
    }
    worst
}

/// Reduces a tensor to a scalar through fixed random weights, so every
/// output element contributes a distinct amount.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(tape.shape(out), -1.0, 1.0, &mut rng));
    let prod = tape.mul(out, w).unwrap();
    tape.sum_all(prod).unwrap()
}

impl Case {
    pub fn error(&self) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.name.len() as u64 * 7919);
        let inputs: Vec<Tensor> = self
            .shapes
            .iter()
            .map(|s| random(s, self.lo, self.hi, &mut rng))
            .collect();
        let build = |tape: &mut Tape, v: &[Var]| {
            let out = (self.op)(tape, v);
            weighted_sum(tape, out, 17)
        };
        max_relative_error(&inputs, &build)
    }
}

pub fn op_cases() -> Vec<Case> {
    let unit = (-1.0, 1.0);
    vec![
        case("matmul", "matmul", &[&[3, 4], &[4, 2]], unit, |t, v| {
            t.matmul(v[0], v[1]).unwrap()
        }),
        case(
            "matmul",
            "matmul_batched",
            &[&[2, 3, 4], &[2, 4, 5]],
            unit,
            |t, v| t.matmul(v[0], v[1]).unwrap(),
        ),
        case(
            "matmul",
            "matmul_shared_right",
            &[&[2, 3, 3, 4], &[4, 2]],
            unit,
            |t, v| t.matmul(v[0], v[1]).unwrap(),
        ),
        case(
            "matmul",
            "matmul_broadcast_left",
            &[&[3, 4], &[2, 4, 2]],
            unit,
            |t, v| t.matmul(v[0], v[1]).unwrap(),
        ),
        case(
            "elementwise",
            "add_broadcast",
            &[&[2, 3, 4], &[4]],
            unit,
            |t, v| t.add(v[0], v[1]).unwrap(),
        ),
        case(
            "elementwise",
            "add_middle_broadcast",
            &[&[2, 3, 4], &[2, 1, 4]],
            unit,
            |t, v| t.add(v[0], v[1]).unwrap(),
        ),
        case("elementwise", "sub", &[&[3, 4], &[3, 4]], unit, |t, v| {
            t.sub(v[0], v[1]).unwrap()
        }),
        case(
            "elementwise",
            "mul_broadcast",
            &[&[3, 4], &[3, 1]],
            unit,
            |t, v| t.mul(v[0], v[1]).unwrap(),
        ),
        case("elementwise", "scale", &[&[5]], unit, |t, v| {
            t.scale(v[0], -2.5).unwrap()
        }),
        case("elementwise", "relu", &[&[4, 5]], unit, |t, v| {
            t.relu(v[0]).unwrap()
        }),
        case("elementwise", "sigmoid", &[&[4, 5]], (-4.0, 4.0), |t, v| {
            t.sigmoid(v[0]).unwrap()
        }),
        case("elementwise", "sqrt", &[&[6]], (0.2, 3.0), |t, v| {
            t.sqrt(v[0]).unwrap()
        }),
        case("elementwise", "abs", &[&[6]], (-2.0, 2.0), |t, v| {
            t.abs(v[0]).unwrap()
        }),
        case("reduction", "sum_all", &[&[3, 4]], unit, |t, v| {
            t.sum_all(v[0]).unwrap()
        }),
        case("reduction", "mean_all", &[&[3, 4]], unit, |t, v| {
            t.mean_all(v[0]).unwrap()
        }),
        case("reduction", "sum_axis", &[&[2, 3, 4]], unit, |t, v| {
            t.sum_axis(v[0], 1).unwrap()
        }),
        case(
            "normalization",
            "softmax",
            &[&[3, 5]],
            (-2.0, 2.0),
            |t, v| t.softmax_lastaxis(v[0]).unwrap(),
        ),
        case(
            "normalization",
            "layer_norm",
            &[&[3, 6], &[6], &[6]],
            unit,
            |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(),
        ),
        case(
            "shape",
            "concat",
            &[&[2, 3, 4], &[2, 1, 4]],
            unit,
            |t, v| t.concat_axis(&[v[0], v[1]], 1).unwrap(),
        ),
        case("shape", "slice", &[&[2, 5, 3]], unit, |t, v| {
            t.slice_axis(v[0], 1, 1, 4).unwrap()
        }),
        case("shape", "reshape", &[&[2, 6]], unit, |t, v| {
            t.reshape(v[0], &[3, 4]).unwrap()
        }),
        case("shape", "permute", &[&[2, 3, 4]], unit, |t, v| {
            t.permute(v[0], &[2, 0, 1]).unwrap()
        }),
        case("shape", "transpose", &[&[2, 3, 4]], unit, |t, v| {
            t.transpose_last2(v[0]).unwrap()
        }),
        case("shape", "broadcast_to", &[&[3, 1]], unit, |t, v| {
            t.broadcast_to(v[0], &[2, 3, 4]).unwrap()
        }),
        case(
            "loss",
            "rmse_mae",
            &[&[3, 4], &[3, 4]],
            (0.0, 1.0),
            |t, v| rmse_mae(t, v[0], v[1]).unwrap(),
        ),
    ]
}

/// Relative error of the full model loss with respect to every parameter
/// and prompt array (T=4, H=3, N=6, C=2, D=8, one layer per encoder, h=2).
pub fn composed_error(variant: PromptVariant) -> f64 {
    let config = ModelConfig::new(4, 3, 6, 2, 8, 1, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut params = ModelParameters::init(&config, 3);
    params.visit_mut(&mut |_, t| {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    });
    let prompts = PromptSet::init(variant, &config, 4).unwrap();
    let mut inputs = Vec::new();
    params.visit(&mut |_, t| inputs.push(t.clone()));
    prompts.visit(&mut |_, t| inputs.push(t.clone()));
    let x = random(
        &[config.attributes, config.input_len, config.regions],
        0.0,
        1.0,
        &mut rng,
    );
    let y = random(
        &[config.attributes, config.regions, config.horizon],
        0.0,
        1.0,
        &mut rng,
    );

    let build = |tape: &mut Tape, vars: &[Var]| {
        let mut it = vars.iter().copied();
        let backbone: Backbone<Var> = params.backbone.map(|_, _| it.next().unwrap());
        let head: Head<Var> = params.head.map(|_, _| it.next().unwrap());
        let bound = prompts
            .try_map::<_, ()>(&mut |_, _| Ok(it.next().unwrap()))
            .unwrap();
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let pred =
            forward_sequences(tape, xv, &backbone, &head, Some(&bound), config.heads).unwrap();
        rmse_mae(tape, pred, yv).unwrap()
    };
    max_relative_error(&inputs, &build)
}
