//! Conditional denoising diffusion over a low-dimensional latent space.
//!
//! The forward process mixes a clean latent with Gaussian noise according to
//! a cumulative schedule; a small dense network predicts the noise from the
//! noisy latent, a sinusoidal timestep embedding, and the text-encoder
//! conditioning vector. Sampling runs plain ancestral denoising for all
//! timesteps. The training loss is the mean squared noise-prediction error
//! over a batch, with every random draw determined by an explicit seed.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::embedding::{SubspaceBasis, Vocabulary};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpGrads};
use crate::rng::stream;
use rand::Rng;
use rand_distr::StandardNormal;

/// Latent dimension of the toy universe (a 2-D point stands in for an
/// image latent).
pub const LATENT_DIM: usize = 2;

/// Width of the sinusoidal timestep embedding.
pub const TIME_FEATURES: usize = 16;

// ── noise schedule ──────────────────────────────────────────────────

/// Cumulative noise schedule: `alpha_bars[t-1]` is the signal fraction
/// retained at timestep `t`, strictly decreasing in `t` and within (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bars: Array1<f64>,
}

impl NoiseSchedule {
    pub fn new(alpha_bars: Array1<f64>) -> Result<Self> {
        if alpha_bars.is_empty() {
            return Err(Error::BadConfig {
                key: "schedule".into(),
                reason: "empty schedule".into(),
            });
        }
        for (i, &a) in alpha_bars.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::BadConfig {
                    key: "schedule".into(),
                    reason: format!("alpha_bar[{i}] = {a} outside (0, 1]"),
                });
            }
            if i > 0 && a >= alpha_bars[i - 1] {
                return Err(Error::BadConfig {
                    key: "schedule".into(),
                    reason: format!("alpha_bar not strictly decreasing at index {i}"),
                });
            }
        }
        Ok(Self { alpha_bars })
    }

    /// Cosine-spaced schedule with `t_max` steps.
    pub fn cosine(t_max: usize) -> Self {
        let s = 0.008;
        let f = |u: f64| ((u + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let f0 = f(0.0);
        let alpha_bars = Array1::from_shape_fn(t_max, |i| {
            let t = (i + 1) as f64 / t_max as f64;
            (f(t) / f0).clamp(1e-6, 1.0 - 1e-6)
        });
        Self::new(alpha_bars).expect("cosine schedule is valid by construction")
    }

    pub fn t_max(&self) -> usize {
        self.alpha_bars.len()
    }

    /// Cumulative signal fraction at timestep `t` (1-indexed).
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t < 1 || t > self.t_max() {
            return Err(Error::BadTimestep {
                t,
                t_max: self.t_max(),
            });
        }
        Ok(self.alpha_bars[t - 1])
    }

    /// Per-step signal fraction `alpha_t = alpha_bar_t / alpha_bar_{t-1}`.
    fn step_alpha(&self, t: usize) -> f64 {
        if t == 1 {
            self.alpha_bars[0]
        } else {
            self.alpha_bars[t - 1] / self.alpha_bars[t - 2]
        }
    }

    pub fn alpha_bars(&self) -> &Array1<f64> {
        &self.alpha_bars
    }
}

/// Mix a clean latent with noise: `sqrt(abar_t) z + sqrt(1 - abar_t) eps`.
pub fn forward_noise(
    z: &Array1<f64>,
    t: usize,
    eps: &Array1<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array1<f64>> {
    let abar = schedule.alpha_bar(t)?;
    Ok(z * abar.sqrt() + eps * (1.0 - abar).sqrt())
}

/// Sinusoidal features of `t / t_max`, width [`TIME_FEATURES`].
pub fn time_features(t: usize, t_max: usize) -> Array1<f64> {
    let s = t as f64 / t_max as f64;
    Array1::from_shape_fn(TIME_FEATURES, |i| {
        let freq = (1 << (i / 2)) as f64;
        if i % 2 == 0 {
            (freq * s).sin()
        } else {
            (freq * s).cos()
        }
    })
}

// ── model ───────────────────────────────────────────────────────────

/// Which stage of the factory produced a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Base,
    Unlearned { concept: usize },
    Defended { concept: usize, n_block: usize },
}

/// A frozen diffusion model: schedule, denoiser, encoder, vocabulary, and
/// (for defended models) the blocked attack basis applied as an input
/// filter to any injected embedding.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub schedule: NoiseSchedule,
    pub denoiser: Mlp,
    pub encoder: EncoderParams,
    pub vocab: Vocabulary,
    pub provenance: Provenance,
    /// Blocked subspace of a defended model; injected embeddings are
    /// projected out of it before entering the encoder.
    pub defense: Option<SubspaceBasis>,
}

impl DiffusionModel {
    /// Denoiser input dimension for this model's conditioning size.
    pub fn denoiser_input_dim(cond_dim: usize) -> usize {
        LATENT_DIM + TIME_FEATURES + cond_dim
    }

    /// Fresh denoiser with seeded hidden layers and a zeroed output layer.
    pub fn fresh_denoiser(cond_dim: usize, hidden: usize, seed: u64) -> Mlp {
        let mut rng = stream(seed, "denoiser-init", 0);
        let dims = [
            Self::denoiser_input_dim(cond_dim),
            hidden,
            hidden,
            LATENT_DIM,
        ];
        let mut mlp = Mlp::gaussian(&dims, Activation::Tanh, Activation::Linear, &mut rng);
        mlp.zero_output_layer();
        mlp
    }

    pub fn cond_dim(&self) -> usize {
        self.encoder.dim()
    }

    /// Predict the noise in `z_t` at timestep `t` under conditioning `c`.
    pub fn denoise_predict(&self, z_t: &Array1<f64>, t: usize, c: &Array1<f64>) -> Result<Array1<f64>> {
        if z_t.len() != LATENT_DIM {
            return Err(Error::DimensionMismatch(format!(
                "latent has dim {}, expected {LATENT_DIM}",
                z_t.len()
            )));
        }
        if c.len() != self.cond_dim() {
            return Err(Error::DimensionMismatch(format!(
                "conditioning has dim {}, expected {}",
                c.len(),
                self.cond_dim()
            )));
        }
        self.schedule.alpha_bar(t)?;
        let x = denoiser_input(z_t, t, self.schedule.t_max(), c);
        Ok(self.denoiser.forward(&x))
    }

    /// Ancestral sampling from pure noise under conditioning `c`.
    pub fn sample(&self, c: &Array1<f64>, seed: u64) -> Array1<f64> {
        let mut rng = stream(seed, "sample", 0);
        let mut z: Array1<f64> =
            Array1::from_shape_fn(LATENT_DIM, |_| rng.sample::<f64, _>(StandardNormal));
        let t_max = self.schedule.t_max();
        for t in (1..=t_max).rev() {
            let abar = self.schedule.alpha_bars[t - 1];
            let alpha = self.schedule.step_alpha(t);
            let abar_prev = if t > 1 {
                self.schedule.alpha_bars[t - 2]
            } else {
                1.0
            };
            let eps_hat = self
                .denoise_predict(&z, t, c)
                .expect("dimensions checked at model construction");
            let mean = (&z - &(eps_hat * ((1.0 - alpha) / (1.0 - abar).sqrt()))) / alpha.sqrt();
            if t > 1 {
                let var = (1.0 - abar_prev) / (1.0 - abar) * (1.0 - alpha);
                let noise: Array1<f64> =
                    Array1::from_shape_fn(LATENT_DIM, |_| rng.sample::<f64, _>(StandardNormal));
                z = mean + noise * var.max(0.0).sqrt();
            } else {
                z = mean;
            }
        }
        z
    }

    /// Serialized parameter bytes of every component; the freeze-contract
    /// checks compare these before and after an operation.
    pub fn content_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in self.schedule.alpha_bars.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.denoiser.param_bytes());
        out.extend_from_slice(&self.encoder.content_bytes());
        out.extend_from_slice(&self.vocab.content_bytes());
        out
    }
}

fn denoiser_input(z_t: &Array1<f64>, t: usize, t_max: usize, c: &Array1<f64>) -> Array1<f64> {
    let tf = time_features(t, t_max);
    let mut x = Array1::zeros(z_t.len() + tf.len() + c.len());
    x.slice_mut(ndarray::s![..z_t.len()]).assign(z_t);
    x.slice_mut(ndarray::s![z_t.len()..z_t.len() + tf.len()])
        .assign(&tf);
    x.slice_mut(ndarray::s![z_t.len() + tf.len()..]).assign(c);
    x
}

// ── denoising loss ──────────────────────────────────────────────────

/// One batch item after noise injection, as seen by the denoiser.
pub struct NoisedItem {
    pub z_t: Array1<f64>,
    pub t: usize,
    pub eps: Array1<f64>,
    pub c: Array1<f64>,
}

/// Draw `(t, eps)` for every batch item from `seed` and build the noised
/// inputs. Exposed so oracle stubs in tests can see the same draws the loss
/// sees.
pub fn noise_batch(
    batch: &[(Array1<f64>, Array1<f64>)],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<NoisedItem>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = stream(seed, "noise-batch", 0);
    let t_max = schedule.t_max();
    batch
        .iter()
        .map(|(z, c)| {
            let t = rng.gen_range(1..=t_max);
            let eps: Array1<f64> =
                Array1::from_shape_fn(z.len(), |_| rng.sample::<f64, _>(StandardNormal));
            let z_t = forward_noise(z, t, &eps, schedule)?;
            Ok(NoisedItem {
                z_t,
                t,
                eps,
                c: c.clone(),
            })
        })
        .collect()
}

/// Mean squared noise-prediction error over a batch, with the predictor
/// supplied as a closure so tests can substitute an oracle stub.
pub fn denoising_loss_with(
    batch: &[(Array1<f64>, Array1<f64>)],
    schedule: &NoiseSchedule,
    seed: u64,
    mut predict: impl FnMut(usize, &NoisedItem) -> Array1<f64>,
) -> Result<f64> {
    let noised = noise_batch(batch, schedule, seed)?;
    let mut total = 0.0;
    for (idx, item) in noised.iter().enumerate() {
        let pred = predict(idx, item);
        total += (&item.eps - &pred).iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total / noised.len() as f64)
}

/// Mean squared noise-prediction error of the model on a batch of
/// `(clean latent, conditioning)` pairs.
pub fn denoising_loss(
    model: &DiffusionModel,
    batch: &[(Array1<f64>, Array1<f64>)],
    seed: u64,
) -> Result<f64> {
    denoising_loss_with(batch, &model.schedule, seed, |_, item| {
        model
            .denoise_predict(&item.z_t, item.t, &item.c)
            .expect("batch dimensions validated by caller")
    })
}

/// Loss plus gradients with respect to the denoiser parameters and each
/// conditioning vector. This is the single backward pass both training and
/// the attack optimize through.
pub fn denoising_loss_grads(
    denoiser: &Mlp,
    schedule: &NoiseSchedule,
    batch: &[(Array1<f64>, Array1<f64>)],
    seed: u64,
) -> Result<(f64, MlpGrads, Vec<Array1<f64>>)> {
    let noised = noise_batch(batch, schedule, seed)?;
    let n = noised.len();
    let in_dim = denoiser.in_dim();
    let cond_dim = in_dim - LATENT_DIM - TIME_FEATURES;
    let mut inputs = Array2::zeros((n, in_dim));
    for (i, item) in noised.iter().enumerate() {
        let x = denoiser_input(&item.z_t, item.t, schedule.t_max(), &item.c);
        inputs.row_mut(i).assign(&x);
    }
    let (pred, cache) = denoiser.forward_batch_cached(&inputs);
    let mut loss = 0.0;
    let mut grad_out = Array2::zeros((n, LATENT_DIM));
    for (i, item) in noised.iter().enumerate() {
        for j in 0..LATENT_DIM {
            let diff = item.eps[j] - pred[[i, j]];
            loss += diff * diff;
            grad_out[[i, j]] = -2.0 * diff / n as f64;
        }
    }
    loss /= n as f64;
    let (grads, grad_inputs) = denoiser.backward_batch(&cache, &grad_out);
    let cond_grads = (0..n)
        .map(|i| {
            grad_inputs
                .row(i)
                .slice(ndarray::s![LATENT_DIM + TIME_FEATURES..])
                .to_owned()
        })
        .collect::<Vec<_>>();
    debug_assert_eq!(cond_grads[0].len(), cond_dim);
    Ok((loss, grads, cond_grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{randn_mat, randn_vec};
    use ndarray::array;

    fn tiny_model(cond_dim: usize, seed: u64) -> DiffusionModel {
        let mut rng = stream(seed, "tiny-model", 0);
        let names: Vec<String> = (0..4).map(|i| format!("tok{i}")).collect();
        let vocab = Vocabulary::new(names, randn_mat(4, cond_dim, &mut rng)).unwrap();
        let mut denoiser = DiffusionModel::fresh_denoiser(cond_dim, 16, seed);
        denoiser.jitter(0.3, &mut rng);
        DiffusionModel {
            schedule: NoiseSchedule::cosine(10),
            denoiser,
            encoder: EncoderParams::seeded(cond_dim, 8, 0.2, seed),
            vocab,
            provenance: Provenance::Base,
            defense: None,
        }
    }

    #[test]
    fn cosine_schedule_is_valid() {
        let s = NoiseSchedule::cosine(50);
        assert_eq!(s.t_max(), 50);
        assert!(s.alpha_bar(1).unwrap() > s.alpha_bar(50).unwrap());
        assert!(s.alpha_bar(50).unwrap() > 0.0);
        assert!(s.alpha_bar(1).unwrap() <= 1.0);
    }

    #[test]
    fn forward_noise_no_noise_limit() {
        // alpha_bar = 1 returns z exactly.
        let schedule = NoiseSchedule::new(array![1.0, 0.5]).unwrap();
        let z = array![1.5, -2.0];
        let eps = array![3.0, 4.0];
        let out = forward_noise(&z, 1, &eps, &schedule).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn forward_noise_pure_noise_limit() {
        let schedule = NoiseSchedule::new(array![0.5, 1e-12]).unwrap();
        let z = array![1.5, -2.0];
        let eps = array![3.0, 4.0];
        let out = forward_noise(&z, 2, &eps, &schedule).unwrap();
        let diff = (&out - &eps).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-5, "pure-noise limit off by {diff}");
    }

    #[test]
    fn forward_noise_hand_case() {
        // z = (1,0), eps = (0,1), alpha_bar = 0.25: (0.5, sqrt(0.75)).
        let schedule = NoiseSchedule::new(array![0.5, 0.25]).unwrap();
        let z = array![1.0, 0.0];
        let eps = array![0.0, 1.0];
        let out = forward_noise(&z, 2, &eps, &schedule).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-12);
        assert!((out[1] - 0.75f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn forward_noise_bad_timestep() {
        let schedule = NoiseSchedule::cosine(10);
        let z = array![0.0, 0.0];
        assert!(matches!(
            forward_noise(&z, 0, &z, &schedule),
            Err(Error::BadTimestep { .. })
        ));
        assert!(matches!(
            forward_noise(&z, 11, &z, &schedule),
            Err(Error::BadTimestep { .. })
        ));
    }

    #[test]
    fn denoise_predict_is_deterministic_and_zero_when_untrained() {
        let model = tiny_model(5, 21);
        let mut rng = stream(21, "dp-test", 0);
        let z = randn_vec(LATENT_DIM, &mut rng);
        let c = randn_vec(5, &mut rng);
        let a = model.denoise_predict(&z, 3, &c).unwrap();
        let b = model.denoise_predict(&z, 3, &c).unwrap();
        assert_eq!(a, b);

        let mut untrained = model.clone();
        untrained.denoiser = DiffusionModel::fresh_denoiser(5, 16, 22);
        let out = untrained.denoise_predict(&z, 3, &c).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_stub_gives_zero_loss() {
        // A predictor that recovers the true noise from the clean latent
        // gives exactly zero loss.
        let schedule = NoiseSchedule::cosine(10);
        let mut rng = stream(23, "loss-test", 0);
        let batch: Vec<(Array1<f64>, Array1<f64>)> = (0..4)
            .map(|_| (randn_vec(LATENT_DIM, &mut rng), randn_vec(5, &mut rng)))
            .collect();
        let loss = denoising_loss_with(&batch, &schedule, 99, |idx, item| {
            let (z, _) = &batch[idx];
            let abar = schedule.alpha_bar(item.t).unwrap();
            (&item.z_t - &(z * abar.sqrt())) / (1.0 - abar).sqrt()
        })
        .unwrap();
        assert!(loss < 1e-20, "oracle stub loss = {loss}");
    }

    #[test]
    fn zero_predictor_loss_matches_noise_energy() {
        // E ||eps||^2 = latent dim; Monte Carlo over 10^4 single-item draws.
        let schedule = NoiseSchedule::cosine(10);
        let mut rng = stream(24, "loss-test", 1);
        let batch: Vec<(Array1<f64>, Array1<f64>)> = (0..10_000)
            .map(|_| (randn_vec(LATENT_DIM, &mut rng), Array1::zeros(3)))
            .collect();
        let loss = denoising_loss_with(&batch, &schedule, 5, |_, item| {
            Array1::zeros(item.eps.len())
        })
        .unwrap();
        assert!(
            (loss - LATENT_DIM as f64).abs() < 0.1,
            "zero-predictor loss {loss} should be near {LATENT_DIM}"
        );
    }

    #[test]
    fn loss_is_bit_deterministic() {
        let model = tiny_model(5, 25);
        let mut rng = stream(25, "loss-test", 2);
        let batch: Vec<(Array1<f64>, Array1<f64>)> = (0..6)
            .map(|_| (randn_vec(LATENT_DIM, &mut rng), randn_vec(5, &mut rng)))
            .collect();
        let a = denoising_loss(&model, &batch, 7).unwrap();
        let b = denoising_loss(&model, &batch, 7).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a >= 0.0);
    }

    #[test]
    fn empty_batch_errors() {
        let model = tiny_model(5, 26);
        assert!(matches!(
            denoising_loss(&model, &[], 7),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let model = tiny_model(4, 27);
        let mut rng = stream(27, "grad-test", 0);
        let batch: Vec<(Array1<f64>, Array1<f64>)> = (0..4)
            .map(|_| (randn_vec(LATENT_DIM, &mut rng), randn_vec(4, &mut rng)))
            .collect();
        let seed = 31;
        let (_, grads, cond_grads) =
            denoising_loss_grads(&model.denoiser, &model.schedule, &batch, seed).unwrap();

        // Parameter gradients.
        let step = 1e-5;
        for l in 0..model.denoiser.layers.len() {
            for idx in [0usize, 3, 7] {
                if idx >= model.denoiser.layers[l].w.len() {
                    continue;
                }
                let mut plus = model.denoiser.clone();
                let mut minus = model.denoiser.clone();
                plus.layers[l].w.as_slice_mut().unwrap()[idx] += step;
                minus.layers[l].w.as_slice_mut().unwrap()[idx] -= step;
                let lp = denoising_loss_grads(&plus, &model.schedule, &batch, seed)
                    .unwrap()
                    .0;
                let lm = denoising_loss_grads(&minus, &model.schedule, &batch, seed)
                    .unwrap()
                    .0;
                let fd = (lp - lm) / (2.0 * step);
                let an = grads.layers[l].w.as_slice().unwrap()[idx];
                let rel = (an - fd).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel <= 1e-3, "layer {l} idx {idx}: {an} vs {fd} (rel {rel})");
            }
        }

        // Conditioning gradients.
        let fd_step = 1e-4;
        for item in 0..batch.len() {
            for dim in 0..4 {
                let mut plus = batch.clone();
                let mut minus = batch.clone();
                plus[item].1[dim] += fd_step;
                minus[item].1[dim] -= fd_step;
                let lp = denoising_loss(&model, &plus, seed).unwrap();
                let lm = denoising_loss(&model, &minus, seed).unwrap();
                let fd = (lp - lm) / (2.0 * fd_step);
                let an = cond_grads[item][dim];
                let rel = (an - fd).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    rel <= 1e-3,
                    "item {item} dim {dim}: {an} vs {fd} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_seed_sensitive() {
        let model = tiny_model(5, 28);
        let mut rng = stream(28, "sample-test", 0);
        let c = randn_vec(5, &mut rng);
        let a = model.sample(&c, 42);
        let b = model.sample(&c, 42);
        assert_eq!(a, b);
        let other = model.sample(&c, 43);
        let diff = (&a - &other).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff > 0.0);
    }
}
