//! The `SULB` binary container.
//!
//! Layout: 4-byte magic `SULB`, one version byte, a little-endian u32 length
//! followed by that many bytes of UTF-8 JSON metadata, then the payload:
//! row-major 32-bit little-endian floats for each section listed in the
//! metadata, concatenated in order.
//!
//! A vocabulary file has a single `embeddings` section, so its payload is
//! exactly the `n x d` row-major float block after the metadata. Model and
//! basis files reuse the same layout with more sections. Values are stored
//! at 32-bit precision; in-memory computation stays in f64.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::diffusion::{DiffusionModel, NoiseSchedule, Provenance};
use crate::embedding::{SubspaceBasis, Vocabulary};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, Mlp};

pub const MAGIC: &[u8; 4] = b"SULB";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SectionMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Meta {
    Vocabulary {
        config_hash: String,
        names: Vec<String>,
        n: usize,
        d: usize,
        generation: u32,
        sections: Vec<SectionMeta>,
    },
    Model {
        config_hash: String,
        provenance: Provenance,
        d: usize,
        timesteps: usize,
        denoiser_dims: Vec<usize>,
        encoder_hidden: usize,
        vocab_names: Vec<String>,
        vocab_generation: u32,
        defense_k: usize,
        sections: Vec<SectionMeta>,
    },
    Basis {
        config_hash: String,
        d: usize,
        k: usize,
        n: usize,
        concept: usize,
        column_norms: Vec<f64>,
        source_generations: Vec<u32>,
        seeds: Vec<u64>,
        final_losses: Vec<f64>,
        sections: Vec<SectionMeta>,
    },
}

impl Meta {
    fn sections(&self) -> &[SectionMeta] {
        match self {
            Meta::Vocabulary { sections, .. } => sections,
            Meta::Model { sections, .. } => sections,
            Meta::Basis { sections, .. } => sections,
        }
    }
}

fn push_section(
    sections: &mut Vec<SectionMeta>,
    payload: &mut Vec<u8>,
    name: &str,
    rows: usize,
    cols: usize,
    values: impl Iterator<Item = f64>,
) {
    sections.push(SectionMeta {
        name: name.to_string(),
        rows,
        cols,
    });
    let mut count = 0usize;
    for v in values {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
        count += 1;
    }
    assert_eq!(count, rows * cols, "section {name} size mismatch");
}

fn encode(meta: &Meta, payload: &[u8]) -> Result<Vec<u8>> {
    let meta_json = serde_json::to_string(meta)?;
    let mut out = Vec::with_capacity(9 + meta_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(meta_json.as_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(Meta, Vec<Array2<f64>>)> {
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(Error::ContainerFormat("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::ContainerFormat(format!(
            "unsupported version {}",
            bytes[4]
        )));
    }
    let meta_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    if bytes.len() < 9 + meta_len {
        return Err(Error::ContainerFormat("truncated metadata".into()));
    }
    let meta: Meta = serde_json::from_slice(&bytes[9..9 + meta_len])?;
    let mut offset = 9 + meta_len;
    let mut arrays = Vec::new();
    for section in meta.sections() {
        let n_values = section.rows * section.cols;
        let n_bytes = n_values * 4;
        if bytes.len() < offset + n_bytes {
            return Err(Error::ContainerFormat(format!(
                "truncated section {}",
                section.name
            )));
        }
        let mut values = Vec::with_capacity(n_values);
        for chunk in bytes[offset..offset + n_bytes].chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        offset += n_bytes;
        let array = Array2::from_shape_vec((section.rows, section.cols), values)
            .map_err(|e| Error::ContainerFormat(e.to_string()))?;
        arrays.push(array);
    }
    if offset != bytes.len() {
        return Err(Error::ContainerFormat("trailing bytes".into()));
    }
    Ok((meta, arrays))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(bytes)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

// ── vocabulary ──────────────────────────────────────────────────────

pub fn vocabulary_to_bytes(vocab: &Vocabulary, config_hash: &str) -> Result<Vec<u8>> {
    let mut sections = Vec::new();
    let mut payload = Vec::new();
    push_section(
        &mut sections,
        &mut payload,
        "embeddings",
        vocab.len(),
        vocab.dim(),
        vocab.embeddings().iter().cloned(),
    );
    let meta = Meta::Vocabulary {
        config_hash: config_hash.to_string(),
        names: vocab.names().to_vec(),
        n: vocab.len(),
        d: vocab.dim(),
        generation: vocab.generation(),
        sections,
    };
    encode(&meta, &payload)
}

pub fn vocabulary_from_bytes(bytes: &[u8]) -> Result<Vocabulary> {
    let (meta, mut arrays) = decode(bytes)?;
    match meta {
        Meta::Vocabulary {
            names, generation, ..
        } => {
            let embeddings = arrays
                .pop()
                .ok_or_else(|| Error::ContainerFormat("missing embeddings section".into()))?;
            Vocabulary::with_generation(names, embeddings, generation)
        }
        _ => Err(Error::ContainerFormat("expected a vocabulary container".into())),
    }
}

pub fn write_vocabulary(path: &Path, vocab: &Vocabulary, config_hash: &str) -> Result<()> {
    write_file(path, &vocabulary_to_bytes(vocab, config_hash)?)
}

pub fn read_vocabulary(path: &Path) -> Result<Vocabulary> {
    vocabulary_from_bytes(&read_file(path)?)
}

// ── model ───────────────────────────────────────────────────────────

pub fn model_to_bytes(model: &DiffusionModel, config_hash: &str) -> Result<Vec<u8>> {
    let mut sections = Vec::new();
    let mut payload = Vec::new();
    let schedule = model.schedule.alpha_bars();
    push_section(
        &mut sections,
        &mut payload,
        "schedule",
        1,
        schedule.len(),
        schedule.iter().cloned(),
    );
    let mut denoiser_dims = vec![model.denoiser.in_dim()];
    for layer in &model.denoiser.layers {
        denoiser_dims.push(layer.w.nrows());
    }
    for (i, layer) in model.denoiser.layers.iter().enumerate() {
        push_section(
            &mut sections,
            &mut payload,
            &format!("denoiser.w{i}"),
            layer.w.nrows(),
            layer.w.ncols(),
            layer.w.iter().cloned(),
        );
        push_section(
            &mut sections,
            &mut payload,
            &format!("denoiser.b{i}"),
            1,
            layer.b.len(),
            layer.b.iter().cloned(),
        );
    }
    let enc = &model.encoder;
    push_section(&mut sections, &mut payload, "encoder.w1", enc.w1.nrows(), enc.w1.ncols(), enc.w1.iter().cloned());
    push_section(&mut sections, &mut payload, "encoder.b1", 1, enc.b1.len(), enc.b1.iter().cloned());
    push_section(&mut sections, &mut payload, "encoder.w2", enc.w2.nrows(), enc.w2.ncols(), enc.w2.iter().cloned());
    push_section(&mut sections, &mut payload, "encoder.b2", 1, enc.b2.len(), enc.b2.iter().cloned());
    push_section(&mut sections, &mut payload, "encoder.pos", enc.positions.nrows(), enc.positions.ncols(), enc.positions.iter().cloned());
    push_section(
        &mut sections,
        &mut payload,
        "vocab",
        model.vocab.len(),
        model.vocab.dim(),
        model.vocab.embeddings().iter().cloned(),
    );
    let defense_k = model.defense.as_ref().map(|b| b.k()).unwrap_or(0);
    if let Some(basis) = &model.defense {
        push_section(
            &mut sections,
            &mut payload,
            "defense.columns",
            basis.dim(),
            basis.k(),
            basis.columns().iter().cloned(),
        );
        for j in 0..basis.k() {
            push_section(
                &mut sections,
                &mut payload,
                &format!("defense.alpha{j}"),
                1,
                basis.alpha(j).len(),
                basis.alpha(j).iter().cloned(),
            );
        }
    }
    let meta = Meta::Model {
        config_hash: config_hash.to_string(),
        provenance: model.provenance.clone(),
        d: model.vocab.dim(),
        timesteps: model.schedule.t_max(),
        denoiser_dims,
        encoder_hidden: enc.hidden(),
        vocab_names: model.vocab.names().to_vec(),
        vocab_generation: model.vocab.generation(),
        defense_k,
        sections,
    };
    encode(&meta, &payload)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<DiffusionModel> {
    let (meta, arrays) = decode(bytes)?;
    let Meta::Model {
        provenance,
        denoiser_dims,
        vocab_names,
        vocab_generation,
        defense_k,
        sections,
        ..
    } = meta
    else {
        return Err(Error::ContainerFormat("expected a model container".into()));
    };
    let by_name: std::collections::HashMap<&str, &Array2<f64>> = sections
        .iter()
        .map(|s| s.name.as_str())
        .zip(arrays.iter())
        .collect();
    let get = |name: &str| -> Result<&Array2<f64>> {
        by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::ContainerFormat(format!("missing section {name}")))
    };
    let schedule = NoiseSchedule::new(get("schedule")?.row(0).to_owned())?;
    let n_layers = denoiser_dims.len() - 1;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let w = get(&format!("denoiser.w{i}"))?.clone();
        let b = get(&format!("denoiser.b{i}"))?.row(0).to_owned();
        layers.push(Dense { w, b });
    }
    let denoiser = Mlp {
        layers,
        hidden: Activation::Tanh,
        output: Activation::Linear,
    };
    let encoder = EncoderParams {
        w1: get("encoder.w1")?.clone(),
        b1: get("encoder.b1")?.row(0).to_owned(),
        w2: get("encoder.w2")?.clone(),
        b2: get("encoder.b2")?.row(0).to_owned(),
        positions: get("encoder.pos")?.clone(),
    };
    let vocab = Vocabulary::with_generation(vocab_names, get("vocab")?.clone(), vocab_generation)?;
    let defense = if defense_k > 0 {
        let columns = get("defense.columns")?.clone();
        let mut alphas = Vec::with_capacity(defense_k);
        for j in 0..defense_k {
            alphas.push(get(&format!("defense.alpha{j}"))?.row(0).to_owned());
        }
        Some(SubspaceBasis::new(columns, alphas)?)
    } else {
        None
    };
    Ok(DiffusionModel {
        schedule,
        denoiser,
        encoder,
        vocab,
        provenance,
        defense,
    })
}

pub fn write_model(path: &Path, model: &DiffusionModel, config_hash: &str) -> Result<()> {
    write_file(path, &model_to_bytes(model, config_hash)?)
}

pub fn read_model(path: &Path) -> Result<DiffusionModel> {
    model_from_bytes(&read_file(path)?)
}

// ── attack basis ────────────────────────────────────────────────────

/// Training metadata persisted alongside a basis.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct BasisMeta {
    pub concept: usize,
    pub source_generations: Vec<u32>,
    pub seeds: Vec<u64>,
    pub final_losses: Vec<f64>,
}

pub fn basis_to_bytes(
    basis: &SubspaceBasis,
    meta_extra: &BasisMeta,
    config_hash: &str,
) -> Result<Vec<u8>> {
    let mut sections = Vec::new();
    let mut payload = Vec::new();
    push_section(
        &mut sections,
        &mut payload,
        "columns",
        basis.dim(),
        basis.k(),
        basis.columns().iter().cloned(),
    );
    let n = basis.alpha(0).len();
    for j in 0..basis.k() {
        push_section(
            &mut sections,
            &mut payload,
            &format!("alpha{j}"),
            1,
            n,
            basis.alpha(j).iter().cloned(),
        );
    }
    let meta = Meta::Basis {
        config_hash: config_hash.to_string(),
        d: basis.dim(),
        k: basis.k(),
        n,
        concept: meta_extra.concept,
        column_norms: (0..basis.k()).map(|j| basis.norm(j)).collect(),
        source_generations: meta_extra.source_generations.clone(),
        seeds: meta_extra.seeds.clone(),
        final_losses: meta_extra.final_losses.clone(),
        sections,
    };
    encode(&meta, &payload)
}

pub fn basis_from_bytes(bytes: &[u8]) -> Result<(SubspaceBasis, BasisMeta)> {
    let (meta, arrays) = decode(bytes)?;
    let Meta::Basis {
        k,
        concept,
        source_generations,
        seeds,
        final_losses,
        ..
    } = meta
    else {
        return Err(Error::ContainerFormat("expected a basis container".into()));
    };
    let columns = arrays
        .first()
        .ok_or_else(|| Error::ContainerFormat("missing columns section".into()))?
        .clone();
    let mut alphas = Vec::with_capacity(k);
    for j in 0..k {
        let arr = arrays
            .get(1 + j)
            .ok_or_else(|| Error::ContainerFormat(format!("missing alpha section {j}")))?;
        alphas.push(arr.row(0).to_owned());
    }
    let basis = SubspaceBasis::new(columns, alphas)?;
    Ok((
        basis,
        BasisMeta {
            concept,
            source_generations,
            seeds,
            final_losses,
        },
    ))
}

pub fn write_basis(
    path: &Path,
    basis: &SubspaceBasis,
    meta: &BasisMeta,
    config_hash: &str,
) -> Result<()> {
    write_file(path, &basis_to_bytes(basis, meta, config_hash)?)
}

pub fn read_basis(path: &Path) -> Result<(SubspaceBasis, BasisMeta)> {
    basis_from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn_mat;
    use crate::rng::stream;
    use ndarray::Array1;

    fn sample_vocab() -> Vocabulary {
        let mut rng = stream(40, "container-test", 0);
        let names = (0..5).map(|i| format!("tok{i}")).collect();
        Vocabulary::new(names, randn_mat(5, 4, &mut rng)).unwrap()
    }

    #[test]
    fn vocabulary_round_trip() {
        let vocab = sample_vocab();
        let bytes = vocabulary_to_bytes(&vocab, "deadbeef").unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(bytes[4], VERSION);
        let back = vocabulary_from_bytes(&bytes).unwrap();
        assert_eq!(back.names(), vocab.names());
        assert_eq!(back.generation(), vocab.generation());
        for (a, b) in back.embeddings().iter().zip(vocab.embeddings().iter()) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "f32 round trip drift");
        }
    }

    #[test]
    fn vocabulary_payload_is_exactly_row_major_f32() {
        let vocab = sample_vocab();
        let bytes = vocabulary_to_bytes(&vocab, "h").unwrap();
        let meta_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let payload = &bytes[9 + meta_len..];
        assert_eq!(payload.len(), vocab.len() * vocab.dim() * 4);
        let first = f32::from_le_bytes(payload[..4].try_into().unwrap());
        assert_eq!(first, vocab.embeddings()[[0, 0]] as f32);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let vocab = sample_vocab();
        let mut bytes = vocabulary_to_bytes(&vocab, "h").unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            vocabulary_from_bytes(&bytes),
            Err(Error::ContainerFormat(_))
        ));
    }

    #[test]
    fn serialization_is_deterministic() {
        let vocab = sample_vocab();
        let a = vocabulary_to_bytes(&vocab, "h").unwrap();
        let b = vocabulary_to_bytes(&vocab, "h").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn basis_round_trip() {
        let mut cols = ndarray::Array2::zeros((4, 2));
        cols[[0, 0]] = 1.0;
        cols[[1, 1]] = 2.0;
        let alphas = vec![
            Array1::from_vec(vec![0.5, 0.0, 0.25]),
            Array1::from_vec(vec![0.0, 1.0, 0.0]),
        ];
        let basis = SubspaceBasis::new(cols, alphas).unwrap();
        let meta = BasisMeta {
            concept: 1,
            source_generations: vec![0, 1],
            seeds: vec![11, 12],
            final_losses: vec![0.5, 0.25],
        };
        let bytes = basis_to_bytes(&basis, &meta, "h").unwrap();
        let (back, back_meta) = basis_from_bytes(&bytes).unwrap();
        assert_eq!(back.k(), 2);
        assert_eq!(back_meta, meta);
        assert!((back.column(0)[0] - 1.0).abs() < 1e-7);
        assert!((back.alpha(0)[2] - 0.25).abs() < 1e-9);
    }
}
