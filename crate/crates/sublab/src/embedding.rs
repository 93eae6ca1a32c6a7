//! Projection algebra over the token-embedding space.
//!
//! This module is the linear-algebra substrate for both the attack and the
//! defense: rank-one projections, subspace projections through an explicit
//! Gram solve, vocabulary deflation (projecting every token embedding
//! orthogonal to a learned attack direction), and vocabulary-wide subspace
//! blocking.

use ndarray::{Array1, Array2, Axis};
use std::collections::HashMap;

use crate::error::{Error, Result};

/// Relative inner-product tolerance under which two vectors count as
/// orthogonal.
pub const ORTH_TOL: f64 = 1e-5;

/// A basis is rank deficient when the Gram matrix's smallest eigenvalue is
/// below this fraction of its largest.
pub const RANK_EIG_RATIO: f64 = 1e-10;

/// Norm below which a vector is treated as numerically zero.
const ZERO_NORM: f64 = 1e-150;

/// Row norm below which a deflated vocabulary row is flagged as zeroed.
const ZEROED_ROW_NORM: f64 = 1e-9;

// ── rank-one projection ─────────────────────────────────────────────

/// Project `z` onto the line spanned by `v`: `(v v^T / ||v||^2) z`.
pub fn proj_vec(z: &Array1<f64>, v: &Array1<f64>) -> Result<Array1<f64>> {
    let norm_sq = v.dot(v);
    if norm_sq.sqrt() < ZERO_NORM {
        return Err(Error::ZeroVector("projection direction"));
    }
    Ok(v * (v.dot(z) / norm_sq))
}

// ── symmetric eigensolver (cyclic Jacobi) ───────────────────────────

/// Eigenvalues and eigenvectors of a small symmetric matrix via cyclic
/// Jacobi rotations. Columns of the returned matrix are eigenvectors.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut m = a.clone();
    let mut q = Array2::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off < 1e-28 * (1.0 + m.diag().iter().map(|v| v * v).sum::<f64>()) {
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apq = m[[p, r]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[r, r]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, r]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, r]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[r, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[r, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let qkp = q[[k, p]];
                    let qkq = q[[k, r]];
                    q[[k, p]] = c * qkp - s * qkq;
                    q[[k, r]] = s * qkp + c * qkq;
                }
            }
        }
    }
    (m.diag().to_owned(), q)
}

// ── subspace projection ─────────────────────────────────────────────

/// A prepared subspace projector `V (V^T V)^{-1} V^T` with the Gram solve
/// factored once so it can be applied to many vectors.
pub struct SubspaceProjector {
    cols: Array2<f64>,
    gram_inv: Array2<f64>,
}

impl SubspaceProjector {
    /// Factor the Gram matrix of `cols` (a `d x k` matrix of column vectors).
    /// Fails with [`Error::RankDeficient`] when the Gram matrix is
    /// numerically singular.
    pub fn new(cols: &Array2<f64>) -> Result<Self> {
        let gram = cols.t().dot(cols);
        let (eigvals, eigvecs) = symmetric_eigen(&gram);
        let max_eig = eigvals.iter().cloned().fold(f64::MIN, f64::max);
        let min_eig = eigvals.iter().cloned().fold(f64::MAX, f64::min);
        if !(max_eig > 0.0) || min_eig < RANK_EIG_RATIO * max_eig {
            let ratio = if max_eig > 0.0 { min_eig / max_eig } else { 0.0 };
            return Err(Error::RankDeficient { ratio });
        }
        // gram_inv = Q diag(1/lambda) Q^T
        let k = gram.nrows();
        let mut scaled = eigvecs.clone();
        for j in 0..k {
            let inv = 1.0 / eigvals[j];
            scaled.column_mut(j).mapv_inplace(|v| v * inv);
        }
        let gram_inv = scaled.dot(&eigvecs.t());
        Ok(Self {
            cols: cols.clone(),
            gram_inv,
        })
    }

    pub fn dim(&self) -> usize {
        self.cols.nrows()
    }

    /// Apply the projector to one vector.
    pub fn project(&self, z: &Array1<f64>) -> Array1<f64> {
        let beta = self.gram_inv.dot(&self.cols.t().dot(z));
        self.cols.dot(&beta)
    }

    /// `z` minus its projection.
    pub fn reject(&self, z: &Array1<f64>) -> Array1<f64> {
        z - &self.project(z)
    }
}

/// Project `z` onto the subspace spanned by the columns of `cols`.
pub fn proj_subspace(z: &Array1<f64>, cols: &Array2<f64>) -> Result<Array1<f64>> {
    Ok(SubspaceProjector::new(cols)?.project(z))
}

// ── vocabulary ──────────────────────────────────────────────────────

/// The token-embedding table: `n` named embeddings of dimension `d`.
///
/// `generation` counts how many deflation or defense passes produced this
/// table (0 for an original vocabulary). Rows driven to numerical zero by
/// deflation are kept in place and flagged, never dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    names: Vec<String>,
    embeddings: Array2<f64>,
    generation: u32,
    zeroed: Vec<bool>,
}

impl Vocabulary {
    pub fn new(names: Vec<String>, embeddings: Array2<f64>) -> Result<Self> {
        Self::with_generation(names, embeddings, 0)
    }

    pub fn with_generation(
        names: Vec<String>,
        embeddings: Array2<f64>,
        generation: u32,
    ) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::BadConfig {
                key: "vocabulary".into(),
                reason: format!("need at least 2 tokens, got {}", names.len()),
            });
        }
        if names.len() != embeddings.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} names vs {} embedding rows",
                names.len(),
                embeddings.nrows()
            )));
        }
        if embeddings.ncols() < 2 {
            return Err(Error::BadConfig {
                key: "vocabulary".into(),
                reason: format!("embedding dim must be >= 2, got {}", embeddings.ncols()),
            });
        }
        let mut seen = HashMap::new();
        for (i, name) in names.iter().enumerate() {
            if let Some(prev) = seen.insert(name.clone(), i) {
                return Err(Error::BadConfig {
                    key: "vocabulary".into(),
                    reason: format!("duplicate token name {name:?} at rows {prev} and {i}"),
                });
            }
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadConfig {
                key: "vocabulary".into(),
                reason: "non-finite embedding entry".into(),
            });
        }
        let zeroed = embeddings
            .axis_iter(Axis(0))
            .map(|row| row.dot(&row).sqrt() <= ZEROED_ROW_NORM)
            .collect();
        Ok(Self {
            names,
            embeddings,
            generation,
            zeroed,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn row(&self, i: usize) -> Array1<f64> {
        self.embeddings.row(i).to_owned()
    }

    /// Whether row `i` was driven to numerical zero by a transform.
    pub fn is_zeroed(&self, i: usize) -> bool {
        self.zeroed[i]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Little-endian bytes of every embedding entry plus names and
    /// generation; used by freeze-contract checks.
    pub fn content_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in self.embeddings.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for n in &self.names {
            out.extend_from_slice(n.as_bytes());
            out.push(0);
        }
        out.extend_from_slice(&self.generation.to_le_bytes());
        out
    }
}

/// Remove the component along `direction` from every vocabulary row.
///
/// Every returned row is orthogonal to `direction`; the generation counter
/// is incremented and names are preserved.
pub fn deflate_vocab(vocab: &Vocabulary, direction: &Array1<f64>) -> Result<Vocabulary> {
    if direction.len() != vocab.dim() {
        return Err(Error::DimensionMismatch(format!(
            "deflation direction has dim {}, vocabulary has dim {}",
            direction.len(),
            vocab.dim()
        )));
    }
    let norm_sq = direction.dot(direction);
    if norm_sq.sqrt() < ZERO_NORM {
        return Err(Error::ZeroVector("deflation direction"));
    }
    let mut embeddings = vocab.embeddings.clone();
    for mut row in embeddings.axis_iter_mut(Axis(0)) {
        let coef = row.dot(direction) / norm_sq;
        row.zip_mut_with(direction, |r, &d| *r -= coef * d);
    }
    Vocabulary::with_generation(vocab.names.clone(), embeddings, vocab.generation + 1)
}

/// Replace every vocabulary row by its component orthogonal to the subspace
/// spanned by `cols`.
pub fn apply_defense_cols(vocab: &Vocabulary, cols: &Array2<f64>) -> Result<Vocabulary> {
    if cols.nrows() != vocab.dim() {
        return Err(Error::DimensionMismatch(format!(
            "basis dim {} vs vocabulary dim {}",
            cols.nrows(),
            vocab.dim()
        )));
    }
    let projector = SubspaceProjector::new(cols)?;
    let mut embeddings = vocab.embeddings.clone();
    for mut row in embeddings.axis_iter_mut(Axis(0)) {
        let blocked = projector.project(&row.to_owned());
        row.zip_mut_with(&blocked, |r, &p| *r -= p);
    }
    Vocabulary::with_generation(vocab.names.clone(), embeddings, vocab.generation + 1)
}

/// Project a single externally supplied embedding out of the subspace
/// spanned by `cols`; used on attack embeddings that were learned without
/// the vocabulary constraint.
pub fn project_out_foreign(v: &Array1<f64>, cols: &Array2<f64>) -> Result<Array1<f64>> {
    Ok(SubspaceProjector::new(cols)?.reject(v))
}

// ── subspace basis ──────────────────────────────────────────────────

/// A matrix of mutually orthogonal attack directions, together with the
/// nonnegative coefficient vector each column was composed from and the
/// column norms.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    columns: Array2<f64>,
    alphas: Vec<Array1<f64>>,
    norms: Vec<f64>,
}

impl SubspaceBasis {
    /// Validate and wrap a `d x k` column matrix with its per-column
    /// coefficient vectors.
    pub fn new(columns: Array2<f64>, alphas: Vec<Array1<f64>>) -> Result<Self> {
        let k = columns.ncols();
        if k == 0 || k > columns.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "basis must have 1..=d columns, got {k} for d = {}",
                columns.nrows()
            )));
        }
        if alphas.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficient vectors for {k} columns",
                alphas.len()
            )));
        }
        let mut norms = Vec::with_capacity(k);
        for j in 0..k {
            let col = columns.column(j);
            let norm = col.dot(&col).sqrt();
            if norm <= 1e-12 {
                return Err(Error::BasisRankCollapse { column: j });
            }
            norms.push(norm);
        }
        for i in 0..k {
            for j in (i + 1)..k {
                let ip = columns.column(i).dot(&columns.column(j)).abs();
                let rel = ip / (norms[i] * norms[j]);
                if rel > ORTH_TOL {
                    return Err(Error::BasisNotOrthogonal { i, j, value: rel });
                }
            }
        }
        for alpha in &alphas {
            if alpha.iter().any(|&a| a < 0.0) {
                return Err(Error::BadConfig {
                    key: "basis.alpha".into(),
                    reason: "negative coefficient".into(),
                });
            }
        }
        Ok(Self {
            columns,
            alphas,
            norms,
        })
    }

    pub fn dim(&self) -> usize {
        self.columns.nrows()
    }

    pub fn k(&self) -> usize {
        self.columns.ncols()
    }

    pub fn columns(&self) -> &Array2<f64> {
        &self.columns
    }

    pub fn column(&self, j: usize) -> Array1<f64> {
        self.columns.column(j).to_owned()
    }

    pub fn alpha(&self, j: usize) -> &Array1<f64> {
        &self.alphas[j]
    }

    pub fn norm(&self, j: usize) -> f64 {
        self.norms[j]
    }

    /// The basis restricted to its first `k` columns.
    pub fn prefix(&self, k: usize) -> Result<SubspaceBasis> {
        if k == 0 || k > self.k() {
            return Err(Error::BadBlockCount {
                requested: k,
                available: self.k(),
            });
        }
        let columns = self.columns.slice(ndarray::s![.., ..k]).to_owned();
        let alphas = self.alphas[..k].to_vec();
        SubspaceBasis::new(columns, alphas)
    }
}

/// Replace every vocabulary row by its component orthogonal to the basis.
pub fn apply_defense(vocab: &Vocabulary, basis: &SubspaceBasis) -> Result<Vocabulary> {
    apply_defense_cols(vocab, basis.columns())
}
