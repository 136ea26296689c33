use super::params::TensorStore;
use super::tensor::{lit, Real};
use crate::error::{Error, Result};

pub const ADAGRAD_EPS: f64 = 1e-10;

/// Adagrad: `G += g²; θ -= lr·g / (√G + eps)`, elementwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Adagrad<T> {
    pub lr: f64,
    pub eps: f64,
    pub accumulators: Vec<Vec<T>>,
}

impl<T: Real> Adagrad<T> {
    pub fn new(params: &TensorStore<T>, lr: f64) -> Self {
        Self {
            lr,
            eps: ADAGRAD_EPS,
            accumulators: params.tensors().map(|t| vec![T::zero(); t.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut TensorStore<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != params.len() || self.accumulators.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer has {} accumulators, {} gradients for {} parameters",
                self.accumulators.len(),
                grads.len(),
                params.len()
            )));
        }
        for (i, (acc, grad)) in self.accumulators.iter().zip(grads).enumerate() {
            if acc.len() != grad.len() || grad.len() != params.get(i).numel() {
                return Err(Error::Shape(format!(
                    "gradient for {} has {} elements, parameter has {}",
                    params.name(i),
                    grad.len(),
                    params.get(i).numel()
                )));
            }
        }
        let lr: T = lit(self.lr);
        let eps: T = lit(self.eps);
        for (i, (acc, grad)) in self.accumulators.iter_mut().zip(grads).enumerate() {
            let theta = params.get_mut(i).data_mut();
            for ((a, g), p) in acc.iter_mut().zip(grad).zip(theta.iter_mut()) {
                *a += *g * *g;
                *p -= lr * *g / (a.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    fn store(v: f64) -> TensorStore<f64> {
        let mut s = TensorStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn first_and_second_steps() {
        let mut params = store(1.0);
        let mut opt = Adagrad::new(&params, 0.0005);
        opt.step(&mut params, &[vec![1.0]]).unwrap();
        let first = params.get(0).data()[0] - 1.0;
        assert!((first - (-0.0005 / (1.0 + 1e-10))).abs() < 1e-15);
        let before = params.get(0).data()[0];
        opt.step(&mut params, &[vec![1.0]]).unwrap();
        let second = params.get(0).data()[0] - before;
        assert!((second - (-0.0005 / (2f64.sqrt() + 1e-10))).abs() < 1e-15);
        assert_eq!(opt.accumulators[0][0], 2.0);
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut params = store(0.3);
        let mut opt = Adagrad::new(&params, 0.1);
        opt.step(&mut params, &[vec![0.0]]).unwrap();
        assert_eq!(params.get(0).data()[0], 0.3);
        assert_eq!(opt.accumulators[0][0], 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = store(0.3);
        let mut opt = Adagrad::new(&params, 0.1);
        assert!(opt.step(&mut params, &[vec![0.0, 1.0]]).is_err());
        assert!(opt.step(&mut params, &[]).is_err());
    }
}
