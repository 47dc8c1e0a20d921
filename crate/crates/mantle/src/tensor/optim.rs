//! Stochastic gradient descent with classical momentum and L2 weight decay.
//!
//! Update rule per parameter tensor:
//!
//! ```text
//! v ← momentum·v + grad + weight_decay·param
//! param ← param − lr·v
//! ```
//!
//! The learning rate is supplied per step so an epoch schedule can drive it
//! without rebuilding optimizer state.

use crate::tensor::Tensor;

/// Momentum-SGD state for one parameter group.
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    /// Fresh optimizer with zeroed velocity for each parameter shape.
    pub fn new<'a>(momentum: f64, weight_decay: f64, params: impl Iterator<Item = &'a Tensor>) -> Self {
        let velocity = params.map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        SgdMomentum { momentum, weight_decay, velocity }
    }

    /// One update step. `grads[i]` pairs with `params[i]`; a `None` grad
    /// leaves that parameter (and its velocity) untouched.
    pub fn step(&mut self, lr: f64, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) {
        assert_eq!(params.len(), self.velocity.len(), "optimizer built for a different parameter set");
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            let g = match g {
                Some(g) => g,
                None => continue,
            };
            assert_eq!((p.rows, p.cols), (g.rows, g.cols), "gradient shape mismatch");
            for i in 0..p.data.len() {
                v.data[i] = self.momentum * v.data[i] + g.data[i] + self.weight_decay * p.data[i];
                p.data[i] -= lr * v.data[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_changes_nothing() {
        let mut p0 = Tensor::from_vec(1, 2, vec![1.0, -2.0]);
        let mut opt = SgdMomentum::new(0.9, 0.0, std::iter::once(&p0));
        let zero = Tensor::zeros(1, 2);
        opt.step(0.1, &mut [&mut p0], &[Some(&zero)]);
        assert_eq!(p0.data, vec![1.0, -2.0]);
    }

    #[test]
    fn single_step_no_momentum_is_plain_descent() {
        let mut p0 = Tensor::from_vec(1, 1, vec![2.0]);
        let mut opt = SgdMomentum::new(0.0, 0.0, std::iter::once(&p0));
        let g = Tensor::from_vec(1, 1, vec![0.5]);
        opt.step(0.1, &mut [&mut p0], &[Some(&g)]);
        assert!((p0.data[0] - (2.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_hand_unrolled_momentum_and_decay() {
        // lr=0.1, momentum=0.9, wd=0.01, p0=1.0, grads 0.2 then 0.3.
        let mut p0 = Tensor::from_vec(1, 1, vec![1.0]);
        let mut opt = SgdMomentum::new(0.9, 0.01, std::iter::once(&p0));

        let g1 = Tensor::from_vec(1, 1, vec![0.2]);
        opt.step(0.1, &mut [&mut p0], &[Some(&g1)]);
        let v1 = 0.2 + 0.01 * 1.0;
        let p1 = 1.0 - 0.1 * v1;
        assert!((p0.data[0] - p1).abs() < 1e-15);

        let g2 = Tensor::from_vec(1, 1, vec![0.3]);
        opt.step(0.1, &mut [&mut p0], &[Some(&g2)]);
        let v2 = 0.9 * v1 + 0.3 + 0.01 * p1;
        let p2 = p1 - 0.1 * v2;
        assert!((p0.data[0] - p2).abs() < 1e-15);
    }
}
