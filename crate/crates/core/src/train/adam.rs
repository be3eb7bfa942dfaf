//! Adam with per-parameter state keyed by parameter name.

use std::collections::BTreeMap;

use crate::error::TrainError;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Optimizer state for exactly the trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    /// Creates zeroed moments for each `(name, numel)` pair.
    pub fn new(learning_rate: f64, params: impl IntoIterator<Item = (String, usize)>) -> Self {
        let state = params
            .into_iter()
            .map(|(name, n)| {
                (
                    name,
                    Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    },
                )
            })
            .collect();
        Self {
            learning_rate,
            step: 0,
            state,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.state.get(name)
    }

    /// Applies one bias-corrected update to every tracked parameter.
    ///
    /// `visit` must hand each tracked parameter to the callback it receives.
    /// `grads` must hold a gradient for every tracked name.
    pub fn step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        visit: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor)),
    ) -> Result<(), TrainError> {
        for name in self.state.keys() {
            if !grads.contains_key(name) {
                return Err(TrainError::MissingGradient(name.clone()));
            }
        }
        for name in grads.keys() {
            if !self.state.contains_key(name) {
                return Err(TrainError::UntrackedParameter(name.clone()));
            }
        }
        for (name, g) in grads {
            let expected = self.state[name].m.len();
            if g.numel() != expected {
                return Err(TrainError::GradientShape {
                    name: name.clone(),
                    expected,
                    found: g.numel(),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let lr = self.learning_rate;
        let state = &mut self.state;
        let mut error = None;
        visit(&mut |name, param| {
            let Some(moments) = state.get_mut(name) else {
                error.get_or_insert_with(|| TrainError::UntrackedParameter(name.to_string()));
                return;
            };
            let g = grads[name].data();
            for (((p, m), v), &g) in param
                .data_mut()
                .iter_mut()
                .zip(&mut moments.m)
                .zip(&mut moments.v)
                .zip(g)
            {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        });
        error.map_or(Ok(()), Err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(adam: &mut Adam, p: &mut Tensor, g: &Tensor) -> Result<(), TrainError> {
        let grads = BTreeMap::from([("p".to_string(), g.clone())]);
        adam.step(&grads, |f| f("p", p))
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_advances_count() {
        let mut adam = Adam::new(0.1, [("p".to_string(), 3)]);
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let before = p.clone();
        run(&mut adam, &mut p, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_the_sign() {
        let lr = 0.01;
        let mut adam = Adam::new(lr, [("p".to_string(), 4)]);
        let mut p = Tensor::zeros(&[4]);
        let g = Tensor::new(vec![4], vec![3.0, -0.5, 1e-3, -200.0]).unwrap();
        run(&mut adam, &mut p, &g).unwrap();
        for (&delta, &gi) in p.data().iter().zip(g.data()) {
            let oracle = -lr * gi / (gi.abs() + EPSILON);
            assert!((delta - oracle).abs() < 1e-15, "{delta} vs {oracle}");
            assert!((delta + lr * gi.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn second_step_matches_hand_computation() {
        let lr = 0.05;
        let mut adam = Adam::new(lr, [("p".to_string(), 1)]);
        let mut p = Tensor::scalar(1.0);
        run(&mut adam, &mut p, &Tensor::scalar(2.0)).unwrap();
        run(&mut adam, &mut p, &Tensor::scalar(-1.0)).unwrap();
        let m = 0.9 * 0.1 * 2.0 - 0.1;
        let v = 0.999 * 0.001 * 4.0 + 0.001 * 1.0;
        let step2 = lr * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + EPSILON);
        let expected = 1.0 - lr * 2.0 / (2.0 + EPSILON) - step2;
        assert!((p.item().unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn missing_and_untracked_gradients_are_errors() {
        let mut adam = Adam::new(0.1, [("p".to_string(), 1)]);
        let mut p = Tensor::scalar(0.0);
        let err = adam.step(&BTreeMap::new(), |f| f("p", &mut p)).unwrap_err();
        assert_eq!(err, TrainError::MissingGradient("p".into()));
        let grads = BTreeMap::from([
            ("p".to_string(), Tensor::scalar(1.0)),
            ("q".to_string(), Tensor::scalar(1.0)),
        ]);
        assert!(matches!(
            adam.step(&grads, |f| f("p", &mut p)),
            Err(TrainError::UntrackedParameter(_))
        ));
        assert_eq!(adam.step_count(), 0);
        assert_eq!(p.item(), Some(0.0));
    }

    #[test]
    fn wrong_gradient_size_is_rejected() {
        let mut adam = Adam::new(0.1, [("p".to_string(), 2)]);
        let mut p = Tensor::zeros(&[2]);
        assert!(matches!(
            run(&mut adam, &mut p, &Tensor::zeros(&[3])),
            Err(TrainError::GradientShape {
                expected: 2,
                found: 3,
                ..
            })
        ));
    }
}
