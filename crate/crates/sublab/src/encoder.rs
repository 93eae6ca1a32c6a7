//! Toy text encoder: tokenizer, embedding lookup with injectable attack
//! tokens, and a small frozen mixing network.
//!
//! The encoder keeps the three-stage structure of a real text encoder
//! (tokenize, look up token embeddings, mix into one conditioning vector)
//! while staying fully differentiable through any embedding it reads:
//!
//! ```text
//! c = W2 * mean_j tanh(W1 (v_j + pos_j) + b1) + b2
//! ```
//!
//! The per-position tanh is applied *before* pooling; with pooling first the
//! network would be blind to token order, so the nonlinear mix is what makes
//! position matter.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::embedding::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::randn_mat;
use crate::rng::stream;

/// Maximum prompt length in tokens.
pub const MAX_PROMPT_LEN: usize = 8;

/// A reference to either a vocabulary token or an injected attack-token slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenRef {
    Vocab(usize),
    Extra(usize),
}

/// An ordered token sequence with at most one attack-token slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    tokens: Vec<TokenRef>,
}

impl Prompt {
    pub fn new(tokens: Vec<TokenRef>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidPrompt("empty prompt".into()));
        }
        if tokens.len() > MAX_PROMPT_LEN {
            return Err(Error::InvalidPrompt(format!(
                "{} tokens exceeds the maximum of {MAX_PROMPT_LEN}",
                tokens.len()
            )));
        }
        let extras = tokens
            .iter()
            .filter(|t| matches!(t, TokenRef::Extra(_)))
            .count();
        if extras > 1 {
            return Err(Error::InvalidPrompt(format!(
                "{extras} attack-token slots; at most one is allowed"
            )));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[TokenRef] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Position of the attack-token slot, if any.
    pub fn extra_position(&self) -> Option<usize> {
        self.tokens
            .iter()
            .position(|t| matches!(t, TokenRef::Extra(_)))
    }

    /// A copy with the token at `position` replaced.
    pub fn with_token(&self, position: usize, token: TokenRef) -> Result<Prompt> {
        if position >= self.tokens.len() {
            return Err(Error::InvalidPrompt(format!(
                "position {position} out of range for a {}-token prompt",
                self.tokens.len()
            )));
        }
        let mut tokens = self.tokens.clone();
        tokens[position] = token;
        Prompt::new(tokens)
    }

    /// A copy with `token` appended.
    pub fn with_appended(&self, token: TokenRef) -> Result<Prompt> {
        let mut tokens = self.tokens.clone();
        tokens.push(token);
        Prompt::new(tokens)
    }

    /// Render back to text for reports.
    pub fn render(&self, vocab: &Vocabulary) -> String {
        self.tokens
            .iter()
            .map(|t| match t {
                TokenRef::Vocab(i) => vocab.names()[*i].clone(),
                TokenRef::Extra(k) => format!("<ATT:{k}>"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Split a whitespace-separated text into token references.
///
/// Every word must name a vocabulary token, except the literal `<ATT:k>`
/// placeholder which becomes an attack-token slot.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Prompt> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        if let Some(rest) = word.strip_prefix("<ATT:").and_then(|w| w.strip_suffix('>')) {
            let slot: usize = rest
                .parse()
                .map_err(|_| Error::UnknownToken(word.to_string()))?;
            tokens.push(TokenRef::Extra(slot));
        } else if let Some(id) = vocab.id_of(word) {
            tokens.push(TokenRef::Vocab(id));
        } else {
            return Err(Error::UnknownToken(word.to_string()));
        }
    }
    Prompt::new(tokens)
}

/// Frozen parameters of the mixing network plus positional vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// First mixing layer, `hidden x d`.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// Output layer, `d_c x hidden` with `d_c = d`.
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// Additive positional vectors, `MAX_PROMPT_LEN x d`.
    pub positions: Array2<f64>,
}

impl EncoderParams {
    /// Seeded random encoder. Weight scales keep the tanh units in their
    /// responsive range for prompt statistics of the toy universe.
    pub fn seeded(d: usize, hidden: usize, pos_scale: f64, seed: u64) -> Self {
        let mut rng = stream(seed, "encoder-params", 0);
        let w1 = randn_mat(hidden, d, &mut rng).mapv(|v| v * 1.6);
        let b1 = crate::nn::randn_vec(hidden, &mut rng).mapv(|v| v * 0.1);
        let w2 = randn_mat(d, hidden, &mut rng).mapv(|v| v * (1.0 / (hidden as f64).sqrt()));
        let b2 = Array1::zeros(d);
        let positions = randn_mat(MAX_PROMPT_LEN, d, &mut rng).mapv(|v| v * pos_scale);
        Self {
            w1,
            b1,
            w2,
            b2,
            positions,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    /// Little-endian bytes of all parameters; used by freeze-contract checks.
    pub fn content_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for arr in [&self.w1, &self.w2, &self.positions] {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for arr in [&self.b1, &self.b2] {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Forward cache for one encoded prompt.
pub struct EncodeCache {
    /// Per-position tanh outputs, `len x hidden`.
    hidden: Array2<f64>,
    prompt_len: usize,
}

fn resolve_embedding(
    token: TokenRef,
    vocab: &Vocabulary,
    extras: &[Array1<f64>],
) -> Result<Array1<f64>> {
    match token {
        TokenRef::Vocab(i) => {
            if i >= vocab.len() {
                return Err(Error::InvalidPrompt(format!(
                    "token id {i} out of range for a {}-token vocabulary",
                    vocab.len()
                )));
            }
            Ok(vocab.row(i))
        }
        TokenRef::Extra(slot) => extras
            .get(slot)
            .cloned()
            .ok_or(Error::MissingExtra(slot)),
    }
}

/// Encode a prompt into the conditioning vector.
pub fn encode(
    prompt: &Prompt,
    vocab: &Vocabulary,
    extras: &[Array1<f64>],
    params: &EncoderParams,
) -> Result<Array1<f64>> {
    Ok(encode_cached(prompt, vocab, extras, params)?.0)
}

/// Encode and keep the activations needed for gradients.
pub fn encode_cached(
    prompt: &Prompt,
    vocab: &Vocabulary,
    extras: &[Array1<f64>],
    params: &EncoderParams,
) -> Result<(Array1<f64>, EncodeCache)> {
    let len = prompt.len();
    if len > params.positions.nrows() {
        return Err(Error::InvalidPrompt(format!(
            "{len} tokens exceeds the encoder's {} positions",
            params.positions.nrows()
        )));
    }
    let d = params.dim();
    let mut hidden = Array2::zeros((len, params.hidden()));
    let mut pooled = Array1::zeros(params.hidden());
    for (j, &token) in prompt.tokens().iter().enumerate() {
        let emb = resolve_embedding(token, vocab, extras)?;
        if emb.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "token embedding has dim {}, encoder expects {d}",
                emb.len()
            )));
        }
        let x = &emb + &params.positions.row(j);
        let mut u = params.w1.dot(&x);
        u += &params.b1;
        u.mapv_inplace(f64::tanh);
        pooled += &u;
        hidden.row_mut(j).assign(&u);
    }
    pooled /= len as f64;
    let mut c = params.w2.dot(&pooled);
    c += &params.b2;
    Ok((
        c,
        EncodeCache {
            hidden,
            prompt_len: len,
        },
    ))
}

/// Gradient of a scalar loss with respect to the embedding read at
/// `position`, given the loss gradient with respect to the encoder output.
pub fn encode_backward_position(
    cache: &EncodeCache,
    params: &EncoderParams,
    position: usize,
    grad_c: &Array1<f64>,
) -> Array1<f64> {
    assert!(position < cache.prompt_len, "position out of range");
    let scale = 1.0 / cache.prompt_len as f64;
    // d c / d pooled = W2; d pooled / d u_j = 1/len; d u_j / d x_j = diag(1-u^2) W1
    let grad_pooled = params.w2.t().dot(grad_c) * scale;
    let u = cache.hidden.row(position);
    let grad_u = Array1::from_iter(
        grad_pooled
            .iter()
            .zip(u.iter())
            .map(|(&g, &y)| g * (1.0 - y * y)),
    );
    params.w1.t().dot(&grad_u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn_vec;
    use ndarray::array;

    fn vocab_with(names: &[&str], d: usize, seed: u64) -> Vocabulary {
        let mut rng = stream(seed, "enc-vocab", 0);
        let names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        let embeddings = randn_mat(names.len(), d, &mut rng);
        Vocabulary::new(names, embeddings).unwrap()
    }

    #[test]
    fn tokenize_direct_lookup() {
        let vocab = vocab_with(&["photo", "of", "concept0"], 4, 1);
        let prompt = tokenize("photo of concept0", &vocab).unwrap();
        assert_eq!(
            prompt.tokens(),
            &[TokenRef::Vocab(0), TokenRef::Vocab(1), TokenRef::Vocab(2)]
        );
    }

    #[test]
    fn tokenize_attack_placeholder() {
        let vocab = vocab_with(&["photo", "of", "concept0"], 4, 1);
        let prompt = tokenize("photo of <ATT:1>", &vocab).unwrap();
        assert_eq!(prompt.tokens()[2], TokenRef::Extra(1));
        assert_eq!(prompt.extra_position(), Some(2));
    }

    #[test]
    fn tokenize_unknown_word_errors() {
        let vocab = vocab_with(&["photo", "of"], 4, 1);
        match tokenize("photo of xyzzy", &vocab) {
            Err(Error::UnknownToken(w)) => assert_eq!(w, "xyzzy"),
            other => panic!("expected UnknownToken, got {other:?}"),
        }
    }

    #[test]
    fn prompt_rejects_two_extras_and_overlong_input() {
        let two = Prompt::new(vec![TokenRef::Extra(0), TokenRef::Extra(1)]);
        assert!(matches!(two, Err(Error::InvalidPrompt(_))));
        let long = Prompt::new(vec![TokenRef::Vocab(0); MAX_PROMPT_LEN + 1]);
        assert!(matches!(long, Err(Error::InvalidPrompt(_))));
        assert!(matches!(Prompt::new(vec![]), Err(Error::InvalidPrompt(_))));
    }

    #[test]
    fn encode_is_deterministic() {
        let vocab = vocab_with(&["photo", "of", "concept0"], 6, 2);
        let params = EncoderParams::seeded(6, 5, 0.2, 7);
        let prompt = tokenize("photo of concept0", &vocab).unwrap();
        let a = encode(&prompt, &vocab, &[], &params).unwrap();
        let b = encode(&prompt, &vocab, &[], &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn extra_equal_to_vocab_row_encodes_identically() {
        let vocab = vocab_with(&["photo", "of", "concept0", "concept1"], 6, 3);
        let params = EncoderParams::seeded(6, 5, 0.2, 8);
        for i in 0..vocab.len() {
            let direct = tokenize("photo of concept1", &vocab)
                .unwrap()
                .with_token(2, TokenRef::Vocab(i))
                .unwrap();
            let slotted = tokenize("photo of <ATT:0>", &vocab).unwrap();
            let a = encode(&direct, &vocab, &[], &params).unwrap();
            let b = encode(&slotted, &vocab, &[vocab.row(i)], &params).unwrap();
            let diff = (&a - &b).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(diff < 1e-14, "substitution mismatch for token {i}: {diff}");
        }
    }

    #[test]
    fn missing_extra_errors() {
        let vocab = vocab_with(&["photo", "of"], 4, 4);
        let params = EncoderParams::seeded(4, 5, 0.2, 9);
        let prompt = tokenize("photo of <ATT:0>", &vocab).unwrap();
        assert!(matches!(
            encode(&prompt, &vocab, &[], &params),
            Err(Error::MissingExtra(0))
        ));
    }

    #[test]
    fn gradient_wrt_extra_matches_finite_differences() {
        // Scalar functional: f(extra) = c . w for a fixed random w.
        let d = 6;
        let vocab = vocab_with(&["photo", "of", "concept0"], d, 5);
        let params = EncoderParams::seeded(d, 5, 0.2, 10);
        let prompt = tokenize("photo of <ATT:0>", &vocab).unwrap();
        let slot_pos = prompt.extra_position().unwrap();
        let mut rng = stream(5, "enc-grad", 0);
        let w = randn_vec(d, &mut rng);
        for probe in 0..20 {
            let mut prng = stream(5, "enc-grad-probe", probe);
            let extra = randn_vec(d, &mut prng);
            let (c, cache) = encode_cached(&prompt, &vocab, &[extra.clone()], &params).unwrap();
            let _ = c;
            let grad = encode_backward_position(&cache, &params, slot_pos, &w);
            let step = 1e-4;
            for i in 0..d {
                let mut plus = extra.clone();
                let mut minus = extra.clone();
                plus[i] += step;
                minus[i] -= step;
                let fp = encode(&prompt, &vocab, &[plus], &params).unwrap().dot(&w);
                let fm = encode(&prompt, &vocab, &[minus], &params).unwrap().dot(&w);
                let fd = (fp - fm) / (2.0 * step);
                let rel = (grad[i] - fd).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
                assert!(
                    rel <= 1e-3,
                    "probe {probe}, dim {i}: analytic {} vs fd {fd}, rel {rel}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn position_sensitivity_constructive() {
        let vocab = vocab_with(&["photo", "of", "concept0"], 6, 6);
        let params = EncoderParams::seeded(6, 5, 0.2, 11);
        let forward = tokenize("photo of concept0", &vocab).unwrap();
        let swapped = tokenize("concept0 of photo", &vocab).unwrap();
        let a = encode(&forward, &vocab, &[], &params).unwrap();
        let b = encode(&swapped, &vocab, &[], &params).unwrap();
        let diff = (&a - &b).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff >= 1e-3, "swapping tokens changed output by only {diff}");
    }

    #[test]
    fn render_round_trip() {
        let vocab = vocab_with(&["photo", "of", "concept0"], 4, 7);
        let prompt = tokenize("photo of <ATT:0>", &vocab).unwrap();
        assert_eq!(prompt.render(&vocab), "photo of <ATT:0>");
        let again = tokenize(&prompt.render(&vocab), &vocab).unwrap();
        assert_eq!(prompt, again);
    }
}
