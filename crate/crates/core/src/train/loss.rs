//! The forecasting objective: RMSE plus MAE over every element.

use crate::error::TensorError;
use crate::tensor::{Tape, Tensor, Var};

/// `sqrt(mean((ŷ - y)²)) + mean(|ŷ - y|)` on the tape.
pub fn rmse_mae(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, TensorError> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(TensorError::ShapeMismatch {
            op: "loss",
            left: tape.shape(pred).to_vec(),
            right: tape.shape(target).to_vec(),
        });
    }
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let mse = tape.mean_all(sq)?;
    let rmse = tape.sqrt(mse)?;
    let abs = tape.abs(diff)?;
    let mae = tape.mean_all(abs)?;
    tape.add(rmse, mae)
}

/// [`rmse_mae`] on plain tensors.
pub fn loss_value(pred: &Tensor, target: &Tensor) -> Result<f64, TensorError> {
    let mut acc = ErrorSums::default();
    acc.add(pred, target)?;
    Ok(acc.loss())
}

/// Running squared and absolute error sums, for losses over many batches.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorSums {
    pub squared: f64,
    pub absolute: f64,
    pub count: usize,
}

impl ErrorSums {
    pub fn add(&mut self, pred: &Tensor, target: &Tensor) -> Result<(), TensorError> {
        if pred.shape() != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "loss",
                left: pred.shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        for (p, t) in pred.data().iter().zip(target.data()) {
            let d = p - t;
            self.squared += d * d;
            self.absolute += d.abs();
        }
        self.count += pred.numel();
        if !(self.squared.is_finite() && self.absolute.is_finite()) {
            return Err(TensorError::NonFinite { op: "loss" });
        }
        Ok(())
    }

    pub fn rmse(&self) -> f64 {
        (self.squared / self.count.max(1) as f64).sqrt()
    }

    pub fn mae(&self) -> f64 {
        self.absolute / self.count.max(1) as f64
    }

    pub fn loss(&self) -> f64 {
        self.rmse() + self.mae()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn identical_tensors_have_zero_loss() {
        let y = t(&[0.1, 0.5, 0.9]);
        assert_eq!(loss_value(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_costs_two() {
        let y = t(&[0.0, 0.25, 0.5, 1.0]);
        let p = t(&[1.0, 1.25, 1.5, 2.0]);
        assert!((loss_value(&p, &y).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn two_point_fixture() {
        let got = loss_value(&t(&[0.0, 2.0]), &t(&[0.0, 0.0])).unwrap();
        assert!((got - (2f64.sqrt() + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let (p, y) = (t(&[0.3, -0.2, 1.5]), t(&[0.1, 0.4, 0.2]));
        let mut tape = Tape::new();
        let (pv, yv) = (tape.constant(p.clone()), tape.constant(y.clone()));
        let l = rmse_mae(&mut tape, pv, yv).unwrap();
        assert!((tape.value(l).item().unwrap() - loss_value(&p, &y).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(loss_value(&t(&[0.0, 1.0]), &t(&[0.0])).is_err());
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(t(&[0.0, 1.0])), tape.constant(t(&[0.0])));
        assert!(rmse_mae(&mut tape, a, b).is_err());
    }

    #[test]
    fn split_batches_accumulate_to_the_whole() {
        let (p, y) = (t(&[0.3, -0.2, 1.5, 0.7]), t(&[0.1, 0.4, 0.2, 0.7]));
        let mut acc = ErrorSums::default();
        acc.add(&t(&p.data()[..1]), &t(&y.data()[..1])).unwrap();
        acc.add(&t(&p.data()[1..]), &t(&y.data()[1..])).unwrap();
        assert!((acc.loss() - loss_value(&p, &y).unwrap()).abs() < 1e-15);
    }
}
