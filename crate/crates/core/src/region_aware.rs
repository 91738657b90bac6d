//! Column-wise relevance block.
//!
//! Every column of the image `Q` is compared with every column of the
//! priority map `A` by inner product, `S = Qᵀ A`. A row-wise softmax turns the
//! scores into the relevance matrix `W`, and the enhanced input is
//! `O = Q Wᵀ`: output column `j` is a convex combination of the image
//! columns, weighted by how strongly image column `j` responds to each
//! priority-map column.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaConfig {
    /// Divides the similarity scores before the softmax.
    pub temperature: f64,
    /// L2-normalize the columns of `Q` and `A` before scoring (cosine similarity).
    pub column_normalize: bool,
}

impl Default for RaConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            column_normalize: false,
        }
    }
}

impl RaConfig {
    pub fn with_temperature(temperature: f64) -> Self {
        Self {
            temperature,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Argument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

const NORMALIZE_EPS: f64 = 1e-12;

/// `S = Qᵀ A` for `q, a: [n, m]`.
pub fn similarity<S: Scalar>(tape: &mut Tape<S>, q: Var, a: Var) -> Result<Var> {
    let (qs, as_) = (tape.shape(q).to_vec(), tape.shape(a).to_vec());
    if qs.len() != 2 || qs != as_ {
        return Err(Error::Shape(format!(
            "similarity: image {qs:?} and priority map {as_:?} must be equal [n, m] matrices"
        )));
    }
    let qt = tape.transpose(q)?;
    tape.matmul(qt, a)
}

/// `W = softmax_rows(S / temperature)`.
pub fn relevance<S: Scalar>(tape: &mut Tape<S>, s: Var, cfg: &RaConfig) -> Result<Var> {
    cfg.validate()?;
    let scaled = if cfg.temperature == 1.0 {
        s
    } else {
        tape.scale(s, 1.0 / cfg.temperature)?
    };
    tape.softmax_rows(scaled)
}

/// `O = Q Wᵀ`.
pub fn embed<S: Scalar>(tape: &mut Tape<S>, q: Var, w: Var) -> Result<Var> {
    let (qs, ws) = (tape.shape(q).to_vec(), tape.shape(w).to_vec());
    if qs.len() != 2 || ws.len() != 2 || ws[0] != ws[1] || ws[0] != qs[1] {
        return Err(Error::Shape(format!(
            "embed: image {qs:?} needs a {m}x{m} relevance matrix, got {ws:?}",
            m = qs.get(1).copied().unwrap_or(0)
        )));
    }
    let wt = tape.transpose(w)?;
    tape.matmul(q, wt)
}

/// Full block: similarity, relevance, embedding. Differentiable in `q` and `a`.
pub fn ra_apply<S: Scalar>(tape: &mut Tape<S>, q: Var, a: Var, cfg: &RaConfig) -> Result<Var> {
    let s = if cfg.column_normalize {
        let qn = tape.normalize_columns(q, NORMALIZE_EPS)?;
        let an = tape.normalize_columns(a, NORMALIZE_EPS)?;
        similarity(tape, qn, an)?
    } else {
        similarity(tape, q, a)?
    };
    let w = relevance(tape, s, cfg)?;
    embed(tape, q, w)
}

/// Row-stochastic `m x m` matrix produced by [`relevance`].
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMatrix<S>(Tensor<S>);

impl<S: Scalar> RelevanceMatrix<S> {
    /// Builds `W` from a similarity matrix outside any gradient tape.
    pub fn from_similarity(s: &Tensor<S>, cfg: &RaConfig) -> Result<Self> {
        let mut tape = Tape::new();
        let sv = tape.constant(s.clone());
        let w = relevance(&mut tape, sv, cfg)?;
        Ok(Self(tape.value(w).clone()))
    }

    pub fn size(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.0
    }

    pub fn row_sums(&self) -> Vec<S> {
        let m = self.size();
        self.0.data().chunks(m).map(|r| r.iter().copied().sum()).collect()
    }
}

/// Plain-tensor helpers for callers that do not need gradients.
pub fn similarity_matrix<S: Scalar>(q: &Tensor<S>, a: &Tensor<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let (qv, av) = (tape.constant(q.clone()), tape.constant(a.clone()));
    let s = similarity(&mut tape, qv, av)?;
    Ok(tape.value(s).clone())
}

pub fn embed_matrix<S: Scalar>(q: &Tensor<S>, w: &RelevanceMatrix<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let (qv, wv) = (tape.constant(q.clone()), tape.constant(w.0.clone()));
    let o = embed(&mut tape, qv, wv)?;
    Ok(tape.value(o).clone())
}

pub fn apply<S: Scalar>(q: &Tensor<S>, a: &Tensor<S>, cfg: &RaConfig) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let (qv, av) = (tape.constant(q.clone()), tape.constant(a.clone()));
    let o = ra_apply(&mut tape, qv, av, cfg)?;
    Ok(tape.value(o).clone())
}
