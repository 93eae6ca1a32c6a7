//! Minimal dense-network machinery with hand-derived backprop.
//!
//! Three networks in the lab are built from this module: the denoiser, the
//! text-encoder mixing network, and the attack coefficient head. All are
//! small stacks of dense layers, so a full tape is overkill; each forward
//! pass caches the per-layer activations it needs and `backward` walks them
//! in reverse.
//!
//! Layouts: weights are `out x in`, batches are row-major `items x features`.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Pointwise nonlinearity applied after a dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the post-activation value.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

/// One dense layer, `y = act(x W^T + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    /// Gaussian init with per-entry standard deviation `std`.
    pub fn gaussian(out_dim: usize, in_dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite");
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| normal.sample(rng));
        Self {
            w,
            b: Array1::zeros(out_dim),
        }
    }
}

/// A stack of dense layers with a shared hidden activation and a separate
/// output activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    pub output: Activation,
}

/// Per-layer gradients, same shapes as [`Mlp`] parameters.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        let layers = mlp
            .layers
            .iter()
            .map(|l| Dense::zeros(l.w.nrows(), l.w.ncols()))
            .collect();
        Self { layers }
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.scaled_add(scale, &b.w);
            a.b.scaled_add(scale, &b.b);
        }
    }
}

/// Cached forward pass over a batch: layer inputs and post-activations.
pub struct MlpCache {
    /// `inputs[l]` is the batch fed to layer `l`; `inputs[L]` is the output.
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// He-style Gaussian init for every layer; the output layer can be zeroed
    /// afterwards where the model's init convention requires it.
    pub fn gaussian(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| {
                let std = (2.0 / w[0] as f64).sqrt();
                Dense::gaussian(w[1], w[0], std, rng)
            })
            .collect();
        Self {
            layers,
            hidden,
            output,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().expect("nonempty").w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").w.nrows()
    }

    /// Zero the final layer (weights and bias).
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("nonempty");
        last.w.fill(0.0);
        last.b.fill(0.0);
    }

    fn activation_for(&self, layer_idx: usize) -> Activation {
        if layer_idx + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Forward over a batch, `x` is `items x in_dim`.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let act = self.activation_for(i);
            let mut pre = cur.dot(&layer.w.t());
            pre += &layer.b;
            pre.mapv_inplace(|v| act.apply(v));
            cur = pre;
        }
        cur
    }

    /// Forward over a batch keeping the activations needed for backprop.
    pub fn forward_batch_cached(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        inputs.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let act = self.activation_for(i);
            let mut pre = inputs[i].dot(&layer.w.t());
            pre += &layer.b;
            pre.mapv_inplace(|v| act.apply(v));
            inputs.push(pre);
        }
        let out = inputs.last().expect("nonempty").clone();
        (out, MlpCache { inputs })
    }

    /// Backprop a batch of output gradients; returns parameter gradients and
    /// the gradient with respect to the batch input.
    pub fn backward_batch(&self, cache: &MlpCache, grad_out: &Array2<f64>) -> (MlpGrads, Array2<f64>) {
        let n_layers = self.layers.len();
        let mut grads = MlpGrads::zeros_like(self);
        let mut upstream = grad_out.clone();
        for l in (0..n_layers).rev() {
            let act = self.activation_for(l);
            let post = &cache.inputs[l + 1];
            // d/d(preactivation)
            let mut grad_pre = upstream;
            grad_pre
                .iter_mut()
                .zip(post.iter())
                .for_each(|(g, &y)| *g *= act.derivative_from_output(y));
            grads.layers[l].b = grad_pre.sum_axis(Axis(0));
            grads.layers[l].w = grad_pre.t().dot(&cache.inputs[l]);
            upstream = grad_pre.dot(&self.layers[l].w);
        }
        (grads, upstream)
    }

    /// Single-vector forward.
    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        let batch = x.clone().insert_axis(Axis(0));
        self.forward_batch(&batch).index_axis_move(Axis(0), 0)
    }

    /// Flattened little-endian bytes of all parameters, in layer order.
    /// Used by the freeze-contract checks.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for v in layer.w.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in layer.b.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Perturb every parameter in place (test and init helper).
    pub fn jitter(&mut self, std: f64, rng: &mut ChaCha8Rng) {
        let normal = Normal::new(0.0, std).expect("finite std");
        for layer in &mut self.layers {
            layer.w.mapv_inplace(|v| v + normal.sample(rng));
            layer.b.mapv_inplace(|v| v + normal.sample(rng));
        }
    }
}

/// Draw a standard-normal vector.
pub fn randn_vec(dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

/// Draw a standard-normal matrix.
pub fn randn_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn finite_diff_param_grad(
        mlp: &Mlp,
        x: &Array2<f64>,
        loss: impl Fn(&Mlp) -> f64,
    ) -> MlpGrads {
        let step = 1e-5;
        let mut grads = MlpGrads::zeros_like(mlp);
        let _ = x;
        for l in 0..mlp.layers.len() {
            for idx in 0..mlp.layers[l].w.len() {
                let mut plus = mlp.clone();
                let mut minus = mlp.clone();
                plus.layers[l].w.as_slice_mut().unwrap()[idx] += step;
                minus.layers[l].w.as_slice_mut().unwrap()[idx] -= step;
                grads.layers[l].w.as_slice_mut().unwrap()[idx] =
                    (loss(&plus) - loss(&minus)) / (2.0 * step);
            }
            for idx in 0..mlp.layers[l].b.len() {
                let mut plus = mlp.clone();
                let mut minus = mlp.clone();
                plus.layers[l].b[idx] += step;
                minus.layers[l].b[idx] -= step;
                grads.layers[l].b[idx] = (loss(&plus) - loss(&minus)) / (2.0 * step);
            }
        }
        grads
    }

    #[test]
    fn backward_matches_finite_differences_tanh() {
        let mut rng = stream(11, "nn-test", 0);
        let mlp = Mlp::gaussian(&[3, 5, 2], Activation::Tanh, Activation::Linear, &mut rng);
        let x = randn_mat(4, 3, &mut rng);
        // loss = sum of squared outputs
        let loss = |m: &Mlp| m.forward_batch(&x).iter().map(|v| v * v).sum::<f64>();
        let (out, cache) = mlp.forward_batch_cached(&x);
        let grad_out = out.mapv(|v| 2.0 * v);
        let (grads, _) = mlp.backward_batch(&cache, &grad_out);
        let fd = finite_diff_param_grad(&mlp, &x, loss);
        for l in 0..mlp.layers.len() {
            for (a, b) in grads.layers[l].w.iter().zip(fd.layers[l].w.iter()) {
                assert!(
                    (a - b).abs() <= 1e-6 + 1e-5 * b.abs(),
                    "weight grad mismatch: {a} vs {b}"
                );
            }
            for (a, b) in grads.layers[l].b.iter().zip(fd.layers[l].b.iter()) {
                assert!(
                    (a - b).abs() <= 1e-6 + 1e-5 * b.abs(),
                    "bias grad mismatch: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = stream(12, "nn-test", 1);
        let mlp = Mlp::gaussian(&[4, 6, 3], Activation::Tanh, Activation::Tanh, &mut rng);
        let x = randn_mat(2, 4, &mut rng);
        let (out, cache) = mlp.forward_batch_cached(&x);
        let grad_out = out.mapv(|v| 2.0 * v);
        let (_, grad_x) = mlp.backward_batch(&cache, &grad_out);
        let step = 1e-6;
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                let mut plus = x.clone();
                let mut minus = x.clone();
                plus[[r, c]] += step;
                minus[[r, c]] -= step;
                let f = |m: &Array2<f64>| mlp.forward_batch(m).iter().map(|v| v * v).sum::<f64>();
                let fd = (f(&plus) - f(&minus)) / (2.0 * step);
                let an = grad_x[[r, c]];
                assert!(
                    (an - fd).abs() <= 1e-6 + 1e-4 * fd.abs(),
                    "input grad mismatch at ({r},{c}): {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn zeroed_output_layer_gives_zero_output() {
        let mut rng = stream(13, "nn-test", 2);
        let mut mlp = Mlp::gaussian(&[3, 8, 2], Activation::Tanh, Activation::Linear, &mut rng);
        mlp.zero_output_layer();
        let x = randn_vec(3, &mut rng);
        let y = mlp.forward(&x);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_output_is_nonnegative() {
        let mut rng = stream(14, "nn-test", 3);
        let mlp = Mlp::gaussian(&[5, 7, 1], Activation::Relu, Activation::Relu, &mut rng);
        for i in 0..50 {
            let mut r = stream(14, "nn-test-probe", i);
            let x = randn_vec(5, &mut r);
            let y = mlp.forward(&x);
            assert!(y[0] >= 0.0);
        }
    }
}
