//! Gradient-descent optimizers for the lab's small networks.

use crate::nn::{Dense, Mlp, MlpGrads};

/// Classical momentum gradient descent.
///
/// `v <- momentum * v - lr * g; p <- p + v`
pub struct Momentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Dense>,
}

impl Momentum {
    pub fn new(lr: f64, momentum: f64, like: &Mlp) -> Self {
        let velocity = like
            .layers
            .iter()
            .map(|l| Dense::zeros(l.w.nrows(), l.w.ncols()))
            .collect();
        Self {
            lr,
            momentum,
            velocity,
        }
    }

    pub fn step(&mut self, params: &mut Mlp, grads: &MlpGrads) {
        for ((layer, vel), grad) in params
            .layers
            .iter_mut()
            .zip(&mut self.velocity)
            .zip(&grads.layers)
        {
            vel.w.zip_mut_with(&grad.w, |v, &g| {
                *v = self.momentum * *v - self.lr * g;
            });
            vel.b.zip_mut_with(&grad.b, |v, &g| {
                *v = self.momentum * *v - self.lr * g;
            });
            layer.w += &vel.w;
            layer.b += &vel.b;
        }
    }
}

/// Momentum descent over a single flat vector (used by the free-embedding
/// baseline attack, which optimizes a raw vector rather than a network).
pub struct VecMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: ndarray::Array1<f64>,
}

impl VecMomentum {
    pub fn new(lr: f64, momentum: f64, dim: usize) -> Self {
        Self {
            lr,
            momentum,
            velocity: ndarray::Array1::zeros(dim),
        }
    }

    pub fn step(&mut self, param: &mut ndarray::Array1<f64>, grad: &ndarray::Array1<f64>) {
        self.velocity
            .zip_mut_with(grad, |v, &g| *v = self.momentum * *v - self.lr * g);
        *param += &self.velocity;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::rng::stream;
    use ndarray::Array2;

    #[test]
    fn momentum_descends_a_quadratic() {
        // Minimize ||W x - y||^2 for a 1-layer linear net.
        let mut rng = stream(3, "opt-test", 0);
        let mut mlp = Mlp::gaussian(&[2, 2], Activation::Linear, Activation::Linear, &mut rng);
        let x = Array2::from_shape_vec((1, 2), vec![1.0, -0.5]).unwrap();
        let target = [0.3, 0.7];
        let mut opt = Momentum::new(0.05, 0.9, &mlp);
        let loss_of = |m: &Mlp| {
            let out = m.forward_batch(&x);
            (out[[0, 0]] - target[0]).powi(2) + (out[[0, 1]] - target[1]).powi(2)
        };
        let initial = loss_of(&mlp);
        for _ in 0..200 {
            let (out, cache) = mlp.forward_batch_cached(&x);
            let mut grad_out = out.clone();
            grad_out[[0, 0]] = 2.0 * (out[[0, 0]] - target[0]);
            grad_out[[0, 1]] = 2.0 * (out[[0, 1]] - target[1]);
            let (grads, _) = mlp.backward_batch(&cache, &grad_out);
            opt.step(&mut mlp, &grads);
        }
        let final_loss = loss_of(&mlp);
        assert!(final_loss < initial * 1e-4, "loss {initial} -> {final_loss}");
    }
}
