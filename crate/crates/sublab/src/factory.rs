//! Factory for the experiment's actors: the synthetic concept universe, the
//! pretrained base model, and unlearned victim models.
//!
//! The universe is a 2-D Gaussian mixture with one named concept per
//! component. The vocabulary gives each concept a private embedding axis:
//! the concept token sits on it, a family of associated tokens shares it at
//! lower weight (these are the implicit associations an attack can exploit
//! after the concept token itself stops working), a couple of
//! anti-associated tokens point the other way, and filler plus generic
//! tokens live in the remaining dimensions. Unlearning fine-tunes only the
//! denoiser, pushing its prediction under target-concept prompts toward its
//! prediction under a neutral prompt while a retention term pins the safe
//! concepts; vocabulary and encoder stay frozen throughout.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::Config;
use crate::diffusion::{
    denoising_loss_grads, noise_batch, DiffusionModel, NoiseSchedule, Provenance, LATENT_DIM,
};
use crate::embedding::Vocabulary;
use crate::encoder::{tokenize, EncoderParams, Prompt};
use crate::error::{Error, Result};
use crate::eval::ConceptOracle;
use crate::nn::{Mlp, MlpGrads};
use crate::opt::Momentum;
use crate::rng::stream;

/// Filler words available to prompt templates; all live in the generic
/// subspace of the embedding table.
pub const FILLER_WORDS: &[&str] = &[
    "a", "photo", "of", "the", "an", "in", "on", "with", "scene", "image", "view", "style",
    "bright", "dark", "small", "large", "wide", "closeup", "shot", "frame",
];

/// Prompt frames; `{}` is the concept slot.
const FRAMES: &[&str] = &[
    "a photo of {}",
    "photo of a {}",
    "the {} scene",
    "an image of {}",
    "a {} in view",
    "{} in a frame",
    "a closeup shot of {}",
    "the {} image",
    "a wide view of {}",
    "photo of the {}",
];

/// Qualifiers prepended to frames to widen the prompt pool.
const QUALIFIERS: &[&str] = &["bright", "dark", "small"];

/// Name of concept token `j`.
pub fn concept_token_name(concept: usize) -> String {
    format!("concept{concept}")
}

/// The neutral token used as the concept-slot stand-in during unlearning.
pub fn neutral_token_name() -> String {
    "tok0".to_string()
}

/// All prompt texts for one concept, in a fixed order. The first
/// `config.eval_prompts` of these become the evaluation prompts; the whole
/// pool is used for training.
pub fn prompt_texts(concept_name: &str) -> Vec<String> {
    let mut texts = Vec::new();
    for frame in FRAMES {
        texts.push(frame.replace("{}", concept_name));
    }
    for qualifier in QUALIFIERS {
        for frame in FRAMES {
            texts.push(format!("{qualifier} {}", frame.replace("{}", concept_name)));
        }
    }
    texts
}

/// Tokenized prompt pool for one concept.
pub fn prompt_pool(vocab: &Vocabulary, concept: usize) -> Result<Vec<Prompt>> {
    prompt_texts(&concept_token_name(concept))
        .iter()
        .map(|t| tokenize(t, vocab))
        .collect()
}

/// Position of the concept token inside a pool prompt.
pub fn concept_slot_position(prompt: &Prompt, vocab: &Vocabulary, concept: usize) -> Option<usize> {
    let id = vocab.id_of(&concept_token_name(concept))?;
    prompt
        .tokens()
        .iter()
        .position(|t| *t == crate::encoder::TokenRef::Vocab(id))
}

/// Mixture component means: points on a circle sized so adjacent means are
/// exactly unit distance apart.
pub fn concept_means(config: &Config) -> Vec<Array1<f64>> {
    let c = config.concepts;
    let radius = 0.5 / (std::f64::consts::PI / c as f64).sin();
    (0..c)
        .map(|j| {
            let angle = 2.0 * std::f64::consts::PI * j as f64 / c as f64;
            Array1::from_vec(vec![radius * angle.cos(), radius * angle.sin()])
        })
        .collect()
}

/// Build the structured vocabulary of the universe.
///
/// Axis layout: dimension `j < concepts` is concept `j`'s private axis;
/// everything else is the shared pool where fillers and generic tokens live.
pub fn build_vocabulary(config: &Config) -> Result<Vocabulary> {
    let d = config.dim;
    let c = config.concepts;
    if d < c + 4 {
        return Err(Error::BadConfig {
            key: "universe.dim".into(),
            reason: format!("need at least {} dims for {c} concept axes plus a pool", c + 4),
        });
    }
    let mut rng = stream(config.seed, "vocab-build", 0);
    let mut names: Vec<String> = Vec::new();
    let mut rows: Vec<Array1<f64>> = Vec::new();

    // A random direction confined to the shared pool (axes c..d), scaled to
    // the requested norm.
    let mut pool_vector = |rng: &mut rand_chacha::ChaCha8Rng, norm: f64| {
        let mut v = Array1::zeros(d);
        let mut sq = 0.0;
        for i in c..d {
            let x: f64 = rng.sample(StandardNormal);
            v[i] = x;
            sq += x * x;
        }
        let scale = norm / sq.sqrt();
        for i in c..d {
            v[i] *= scale;
        }
        v
    };

    for j in 0..c {
        let mut v = Array1::zeros(d);
        v[j] = config.concept_scale;
        names.push(concept_token_name(j));
        rows.push(v);
    }
    for j in 0..c {
        for i in 0..config.kin_per_concept {
            let weight = 0.6 + 0.6 * rng.gen::<f64>();
            let mut v = pool_vector(&mut rng, 0.5 * config.generic_scale);
            v[j] += config.kin_scale * weight;
            names.push(format!("kin{j}_{i}"));
            rows.push(v);
        }
        for i in 0..config.anti_per_concept {
            let weight = 0.6 + 0.6 * rng.gen::<f64>();
            let mut v = pool_vector(&mut rng, 0.5 * config.generic_scale);
            v[j] -= config.kin_scale * weight;
            names.push(format!("anti{j}_{i}"));
            rows.push(v);
        }
    }
    for word in FILLER_WORDS {
        names.push(word.to_string());
        rows.push(pool_vector(&mut rng, config.filler_scale));
    }
    let used = names.len();
    if config.n_tokens < used + 1 {
        return Err(Error::BadConfig {
            key: "universe.tokens".into(),
            reason: format!("need more than {used} tokens for this universe"),
        });
    }
    for i in 0..(config.n_tokens - used) {
        names.push(format!("tok{i}"));
        rows.push(pool_vector(&mut rng, config.generic_scale));
    }
    let mut embeddings = Array2::zeros((names.len(), d));
    for (i, row) in rows.iter().enumerate() {
        embeddings.row_mut(i).assign(row);
    }
    Vocabulary::new(names, embeddings)
}

/// Labeled latents plus per-concept prompt pools.
#[derive(Debug, Clone)]
pub struct ConceptDataset {
    pub latents: Vec<Array1<f64>>,
    pub labels: Vec<usize>,
    /// Tokenized prompt pool per concept.
    pub prompts: Vec<Vec<Prompt>>,
}

impl ConceptDataset {
    /// Indices of latents belonging to `concept`.
    pub fn indices_of(&self, concept: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == concept)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Draw the labeled mixture dataset and tokenize the prompt pools.
pub fn make_dataset(config: &Config, vocab: &Vocabulary) -> Result<ConceptDataset> {
    if config.concepts < 2 {
        return Err(Error::BadConfig {
            key: "universe.concepts".into(),
            reason: format!("need at least 2 concepts, got {}", config.concepts),
        });
    }
    if config.data_per_concept == 0 {
        return Err(Error::BadConfig {
            key: "data.per_concept".into(),
            reason: "need at least one latent per concept".into(),
        });
    }
    let means = concept_means(config);
    let mut rng = stream(config.seed, "dataset", 0);
    let mut latents = Vec::new();
    let mut labels = Vec::new();
    for (j, mean) in means.iter().enumerate() {
        for _ in 0..config.data_per_concept {
            let z = Array1::from_shape_fn(LATENT_DIM, |i| {
                mean[i] + config.sigma * rng.sample::<f64, _>(StandardNormal)
            });
            latents.push(z);
            labels.push(j);
        }
    }
    let prompts = (0..config.concepts)
        .map(|j| prompt_pool(vocab, j))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConceptDataset {
        latents,
        labels,
        prompts,
    })
}

/// Conditioning vectors for every prompt of every concept, computed once
/// (vocabulary and encoder are frozen, so these never change).
pub fn prompt_conditionings(
    dataset: &ConceptDataset,
    vocab: &Vocabulary,
    encoder: &EncoderParams,
) -> Result<Vec<Vec<Array1<f64>>>> {
    dataset
        .prompts
        .iter()
        .map(|pool| {
            pool.iter()
                .map(|p| crate::encoder::encode(p, vocab, &[], encoder))
                .collect()
        })
        .collect()
}

/// Train the base model: fresh denoiser, frozen seeded encoder and
/// vocabulary, minibatch momentum descent on the denoising loss.
pub fn pretrain(dataset: &ConceptDataset, config: &Config) -> Result<DiffusionModel> {
    let vocab = build_vocabulary(config)?;
    let encoder = EncoderParams::seeded(
        config.dim,
        config.encoder_hidden,
        config.encoder_pos_scale,
        config.seed,
    );
    let schedule = NoiseSchedule::cosine(config.timesteps);
    let mut denoiser =
        DiffusionModel::fresh_denoiser(config.dim, config.denoiser_hidden, config.seed);
    let conditionings = prompt_conditionings(dataset, &vocab, &encoder)?;

    let mut opt = Momentum::new(config.pretrain_lr, config.pretrain_momentum, &denoiser);
    let n = dataset.latents.len();
    for step in 0..config.pretrain_steps {
        let mut rng = stream(config.seed, "pretrain-batch", step as u64);
        let batch: Vec<(Array1<f64>, Array1<f64>)> = (0..config.pretrain_batch)
            .map(|_| {
                let idx = rng.gen_range(0..n);
                let label = dataset.labels[idx];
                let pool = &conditionings[label];
                let p = rng.gen_range(0..pool.len());
                let mut c = pool[p].clone();
                if config.pretrain_cond_noise > 0.0 {
                    for v in c.iter_mut() {
                        *v += config.pretrain_cond_noise * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                (dataset.latents[idx].clone(), c)
            })
            .collect();
        let seed = crate::rng::derive_seed(config.seed, "pretrain-noise", step as u64);
        let (loss, grads, _) = denoising_loss_grads(&denoiser, &schedule, &batch, seed)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        opt.step(&mut denoiser, &grads);
    }

    Ok(DiffusionModel {
        schedule,
        denoiser,
        encoder,
        vocab,
        provenance: Provenance::Base,
        defense: None,
    })
}

/// One item of the unlearning objective: push the trainee's prediction
/// under `cond` toward the reference denoiser's prediction under `ref_cond`.
struct MatchItem {
    latent: Array1<f64>,
    cond: Array1<f64>,
    ref_cond: Array1<f64>,
    weight: f64,
}

fn matching_loss_grads(
    denoiser: &Mlp,
    reference: &Mlp,
    schedule: &NoiseSchedule,
    items: &[MatchItem],
    seed: u64,
) -> Result<(f64, MlpGrads)> {
    let pairs: Vec<(Array1<f64>, Array1<f64>)> = items
        .iter()
        .map(|it| (it.latent.clone(), it.cond.clone()))
        .collect();
    let noised = noise_batch(&pairs, schedule, seed)?;
    let n = noised.len();
    let in_dim = denoiser.in_dim();
    let mut inputs = Array2::zeros((n, in_dim));
    let mut ref_inputs = Array2::zeros((n, in_dim));
    for (i, item) in noised.iter().enumerate() {
        let x = concat_input(&item.z_t, item.t, schedule.t_max(), &item.c);
        inputs.row_mut(i).assign(&x);
        let xr = concat_input(&item.z_t, item.t, schedule.t_max(), &items[i].ref_cond);
        ref_inputs.row_mut(i).assign(&xr);
    }
    let targets = reference.forward_batch(&ref_inputs);
    let (pred, cache) = denoiser.forward_batch_cached(&inputs);
    let mut loss = 0.0;
    let mut grad_out = Array2::zeros((n, LATENT_DIM));
    let total_weight: f64 = items.iter().map(|it| it.weight).sum();
    for i in 0..n {
        let w = items[i].weight / total_weight;
        for j in 0..LATENT_DIM {
            let diff = pred[[i, j]] - targets[[i, j]];
            loss += w * diff * diff;
            grad_out[[i, j]] = 2.0 * w * diff;
        }
    }
    let (grads, _) = denoiser.backward_batch(&cache, &grad_out);
    Ok((loss, grads))
}

fn concat_input(z_t: &Array1<f64>, t: usize, t_max: usize, c: &Array1<f64>) -> Array1<f64> {
    let tf = crate::diffusion::time_features(t, t_max);
    let mut x = Array1::zeros(z_t.len() + tf.len() + c.len());
    x.slice_mut(ndarray::s![..z_t.len()]).assign(z_t);
    x.slice_mut(ndarray::s![z_t.len()..z_t.len() + tf.len()])
        .assign(&tf);
    x.slice_mut(ndarray::s![z_t.len() + tf.len()..]).assign(c);
    x
}

/// Measured unlearning gates.
#[derive(Debug, Clone, Copy)]
pub struct UnlearnGates {
    /// No-attack oracle success rate on the target concept (percent).
    pub target_asr: f64,
    /// Oracle accuracy on safe-concept prompts (percent).
    pub safe_accuracy: f64,
}

/// Measure the gates on a candidate model.
pub fn measure_gates(
    model: &DiffusionModel,
    dataset: &ConceptDataset,
    target: usize,
    config: &Config,
    oracle: &ConceptOracle,
) -> Result<UnlearnGates> {
    let samples = config.unlearn_gate_samples;
    let mut hits = 0usize;
    for i in 0..samples {
        let pool = &dataset.prompts[target];
        let prompt = &pool[i % pool.len()];
        let c = model.encode_prompt(prompt, &[])?;
        let seed = crate::rng::derive_seed(config.seed, "gate-target", i as u64);
        let z = model.sample(&c, seed);
        if oracle.classify(&z) == Some(target) {
            hits += 1;
        }
    }
    let target_asr = 100.0 * hits as f64 / samples as f64;

    let safe: Vec<usize> = (0..config.concepts).filter(|&j| j != target).collect();
    let mut correct = 0usize;
    let mut total = 0usize;
    for (si, &j) in safe.iter().enumerate() {
        let per = samples / safe.len().max(1);
        let pool = &dataset.prompts[j];
        for i in 0..per {
            let prompt = &pool[i % pool.len()];
            let c = model.encode_prompt(prompt, &[])?;
            let seed = crate::rng::derive_seed(config.seed, "gate-safe", (si * per + i) as u64);
            let z = model.sample(&c, seed);
            if oracle.classify(&z) == Some(j) {
                correct += 1;
            }
            total += 1;
        }
    }
    let safe_accuracy = 100.0 * correct as f64 / total.max(1) as f64;
    Ok(UnlearnGates {
        target_asr,
        safe_accuracy,
    })
}

/// Fine-tune only the denoiser so the target concept stops being generated
/// from its prompts while other concepts are retained. `variant`
/// distinguishes independently unlearned victims sharing one base.
pub fn unlearn(
    base: &DiffusionModel,
    dataset: &ConceptDataset,
    target: usize,
    config: &Config,
    variant: u64,
) -> Result<DiffusionModel> {
    if target >= config.concepts {
        return Err(Error::BadConfig {
            key: "concept.target".into(),
            reason: format!("concept {target} out of range"),
        });
    }
    let oracle = ConceptOracle::from_config(config);
    let reference = base.denoiser.clone();
    let mut denoiser = base.denoiser.clone();
    let conditionings = prompt_conditionings(dataset, &base.vocab, &base.encoder)?;

    // Neutral conditionings: the target prompts with the concept slot
    // replaced by a generic token.
    let neutral_id = base
        .vocab
        .id_of(&neutral_token_name())
        .ok_or_else(|| Error::UnknownToken(neutral_token_name()))?;
    let neutral_conditionings: Vec<Array1<f64>> = dataset.prompts[target]
        .iter()
        .map(|p| {
            let pos = concept_slot_position(p, &base.vocab, target).ok_or_else(|| {
                Error::InvalidPrompt("target prompt lacks the concept token".into())
            })?;
            let neutral = p.with_token(pos, crate::encoder::TokenRef::Vocab(neutral_id))?;
            crate::encoder::encode(&neutral, &base.vocab, &[], &base.encoder)
        })
        .collect::<Result<Vec<_>>>()?;

    let target_indices = dataset.indices_of(target);
    let safe_indices: Vec<usize> = (0..dataset.latents.len())
        .filter(|&i| dataset.labels[i] != target)
        .collect();

    let label = format!("unlearn-v{variant}");
    let mut opt = Momentum::new(config.unlearn_lr, config.unlearn_momentum, &denoiser);
    for round in 0..config.unlearn_max_rounds {
        for step in 0..config.unlearn_steps {
            let global_step = (round * config.unlearn_steps + step) as u64;
            let mut rng = stream(config.seed, &label, global_step);
            let half = config.unlearn_batch / 2;
            let mut items = Vec::with_capacity(config.unlearn_batch);
            for _ in 0..half {
                let idx = *target_indices
                    .choose(&mut rng)
                    .expect("target data nonempty");
                let p = rng.gen_range(0..dataset.prompts[target].len());
                items.push(MatchItem {
                    latent: dataset.latents[idx].clone(),
                    cond: conditionings[target][p].clone(),
                    ref_cond: neutral_conditionings[p].clone(),
                    weight: 1.0,
                });
            }
            for _ in half..config.unlearn_batch {
                let idx = *safe_indices.choose(&mut rng).expect("safe data nonempty");
                let j = dataset.labels[idx];
                let p = rng.gen_range(0..dataset.prompts[j].len());
                let c = conditionings[j][p].clone();
                items.push(MatchItem {
                    latent: dataset.latents[idx].clone(),
                    cond: c.clone(),
                    ref_cond: c,
                    weight: config.unlearn_retain_weight,
                });
            }
            let seed = crate::rng::derive_seed(config.seed, &format!("{label}-noise"), global_step);
            let (loss, grads) =
                matching_loss_grads(&denoiser, &reference, &base.schedule, &items, seed)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { step, loss });
            }
            opt.step(&mut denoiser, &grads);
        }
        let candidate = DiffusionModel {
            schedule: base.schedule.clone(),
            denoiser: denoiser.clone(),
            encoder: base.encoder.clone(),
            vocab: base.vocab.clone(),
            provenance: Provenance::Unlearned { concept: target },
            defense: None,
        };
        let gates = measure_gates(&candidate, dataset, target, config, &oracle)?;
        if gates.target_asr < config.unlearn_asr_ceiling
            && gates.safe_accuracy >= config.unlearn_safe_floor
        {
            return Ok(candidate);
        }
        if round + 1 == config.unlearn_max_rounds {
            return Err(Error::UnlearningFailed {
                target_asr: gates.target_asr,
                ceiling: config.unlearn_asr_ceiling,
                safe_acc: gates.safe_accuracy,
                floor: config.unlearn_safe_floor,
            });
        }
    }
    unreachable!("loop returns or errors within the round budget")
}

/// Two independently unlearned victims sharing one base model.
pub fn make_victim_pair(
    base: &DiffusionModel,
    dataset: &ConceptDataset,
    target: usize,
    config: &Config,
) -> Result<(DiffusionModel, DiffusionModel)> {
    let victim_a = unlearn(base, dataset, target, config, 0)?;
    let mut config_b = config.clone();
    config_b.unlearn_lr = config.unlearn_lr * 0.8;
    let victim_b = unlearn(base, dataset, target, &config_b, 1)?;
    Ok((victim_a, victim_b))
}
