//! Projection heads into the joint embedding space and the cosine-embedding
//! loss.
//!
//! Query features pass through two fully connected layers with a ReLU in
//! between; pooled image features through one fully connected layer followed
//! by a tanh. Both outputs are L2-normalized, so the distance between a query
//! and an image is `1 - q·f`.

use crate::error::{Error, Result};
use crate::numkernel::{cosine_similarity, Bound, ParamStore, Tape, Tensor, Var};

pub const QUERY_PREFIX: &str = "query.";
pub const IMAGE_PREFIX: &str = "image.";

/// Default embedding width.
pub const EMBED_DIM: usize = 512;

/// A unit-norm point in the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Tensor);

impl Embedding {
    /// Scales `t` to unit norm.
    pub fn normalize(t: Tensor) -> Result<Self> {
        let n = t.norm();
        if t.rank() != 1 || !(n > 0.0) || !n.is_finite() {
            return Err(Error::Degenerate(format!("cannot normalize {t:?} into an embedding")));
        }
        let data = t.into_data().into_iter().map(|v| v / n).collect();
        Ok(Embedding(Tensor::vector(data)))
    }

    /// Wraps a vector already of unit norm (within 1e-9).
    pub fn from_unit(t: Tensor) -> Result<Self> {
        if t.rank() != 1 || (t.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!("not a unit vector: {t:?}")));
        }
        Ok(Embedding(t))
    }

    pub fn dim(&self) -> usize {
        self.0.numel()
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn cosine(&self, other: &Embedding) -> Result<f64> {
        cosine_similarity(&self.0, &other.0)
    }
}

/// Two-layer query projection: `W₂ relu(W₁ x + b₁) + b₂`, then normalized.
#[derive(Debug, Clone, Copy)]
pub struct QueryHead {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl QueryHead {
    pub const W1: &'static str = "query.w1";
    pub const B1: &'static str = "query.b1";
    pub const W2: &'static str = "query.w2";
    pub const B2: &'static str = "query.b2";

    pub fn from_bound(tape: &Tape<'_>, bound: &Bound) -> Result<Self> {
        let head = QueryHead {
            w1: bound.get(Self::W1)?,
            b1: bound.get(Self::B1)?,
            w2: bound.get(Self::W2)?,
            b2: bound.get(Self::B2)?,
        };
        let (w1, b1, w2, b2) = (
            tape.value(head.w1).shape(),
            tape.value(head.b1).shape(),
            tape.value(head.w2).shape(),
            tape.value(head.b2).shape(),
        );
        let ok = w1.len() == 2 && w2.len() == 2 && b1 == [w1[0]] && w2[1] == w1[0] && b2 == [w2[0]];
        if !ok {
            return Err(Error::dim(format!(
                "query head shapes inconsistent: w1 {w1:?}, b1 {b1:?}, w2 {w2:?}, b2 {b2:?}"
            )));
        }
        Ok(head)
    }

    pub fn input_dim(&self, tape: &Tape<'_>) -> usize {
        tape.value(self.w1).cols()
    }

    pub fn embed(&self, tape: &mut Tape<'_>, raw: Var) -> Result<Var> {
        let expected = self.input_dim(tape);
        if tape.value(raw).shape() != [expected] {
            return Err(Error::dim(format!(
                "query feature of shape {:?} does not match head input width {expected}",
                tape.value(raw).shape()
            )));
        }
        let z1 = tape.matvec(self.w1, raw)?;
        let z1 = tape.add(z1, self.b1)?;
        let a1 = tape.relu(z1);
        let z2 = tape.matvec(self.w2, a1)?;
        let z2 = tape.add(z2, self.b2)?;
        tape.normalize(z2)
    }
}

/// Single-layer image projection: `tanh(W f + b)`, then normalized.
#[derive(Debug, Clone, Copy)]
pub struct ImageHead {
    pub w: Var,
    pub b: Var,
}

impl ImageHead {
    pub const W: &'static str = "image.w";
    pub const B: &'static str = "image.b";

    pub fn from_bound(tape: &Tape<'_>, bound: &Bound) -> Result<Self> {
        let head = ImageHead { w: bound.get(Self::W)?, b: bound.get(Self::B)? };
        let (w, b) = (tape.value(head.w).shape(), tape.value(head.b).shape());
        if w.len() != 2 || b != [w[0]] {
            return Err(Error::dim(format!("image head shapes inconsistent: w {w:?}, b {b:?}")));
        }
        Ok(head)
    }

    pub fn embed(&self, tape: &mut Tape<'_>, pooled: Var) -> Result<Var> {
        let z = tape.matvec(self.w, pooled)?;
        let z = tape.add(z, self.b)?;
        let a = tape.tanh(z);
        tape.normalize(a)
    }
}

pub fn embed_query(raw: &Tensor, params: &ParamStore) -> Result<Embedding> {
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let head = QueryHead::from_bound(&tape, &bound)?;
    let x = tape.constant_ref(raw);
    let q = head.embed(&mut tape, x)?;
    Ok(Embedding(tape.value(q).clone()))
}

pub fn embed_image(pooled: &Tensor, params: &ParamStore) -> Result<Embedding> {
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let head = ImageHead::from_bound(&tape, &bound)?;
    let x = tape.constant_ref(pooled);
    let f = head.embed(&mut tape, x)?;
    Ok(Embedding(tape.value(f).clone()))
}

/// Whether a query-image pair is matching (`y = +1`) or not (`y = -1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum Label {
    Positive,
    Negative,
}

impl TryFrom<i64> for Label {
    type Error = Error;

    fn try_from(y: i64) -> Result<Self> {
        match y {
            1 => Ok(Label::Positive),
            -1 => Ok(Label::Negative),
            other => Err(Error::arg(format!("pair label must be +1 or -1, got {other}"))),
        }
    }
}

impl From<Label> for i64 {
    fn from(l: Label) -> i64 {
        match l {
            Label::Positive => 1,
            Label::Negative => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub margin: f64,
}

impl LossConfig {
    pub fn new(margin: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&margin) {
            return Err(Error::arg(format!("margin must lie in [0, 1), got {margin}")));
        }
        Ok(LossConfig { margin })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: 0.0 }
    }
}

fn loss_from_cos(cos: f64, label: Label, cfg: &LossConfig) -> f64 {
    match label {
        Label::Positive => 1.0 - cos,
        Label::Negative => (cos - cfg.margin).max(0.0),
    }
}

/// `1 - cos(q, f)` for a positive pair, `max(0, cos(q, f) - m)` for a negative one.
pub fn cosine_embedding_loss(q: &Embedding, f: &Embedding, label: Label, cfg: &LossConfig) -> Result<f64> {
    Ok(loss_from_cos(q.cosine(f)?, label, cfg))
}

/// Sum of per-object losses for a query of several objects sharing one label.
pub fn multi_query_loss(terms: &[(Embedding, Embedding)], label: Label, cfg: &LossConfig) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::arg("multi-query loss over an empty term list"));
    }
    let mut total = 0.0;
    for (q, f) in terms {
        total += cosine_embedding_loss(q, f, label, cfg)?;
    }
    Ok(total)
}

/// Tape form of [`cosine_embedding_loss`].
pub fn record_loss(tape: &mut Tape<'_>, q: Var, f: Var, label: Label, cfg: &LossConfig) -> Result<Var> {
    let cos = tape.cosine(q, f)?;
    Ok(match label {
        Label::Positive => tape.affine(cos, -1.0, 1.0),
        Label::Negative => tape.hinge(cos, cfg.margin),
    })
}

/// Tape form of [`multi_query_loss`].
pub fn record_multi_loss(tape: &mut Tape<'_>, terms: &[(Var, Var)], label: Label, cfg: &LossConfig) -> Result<Var> {
    if terms.is_empty() {
        return Err(Error::arg("multi-query loss over an empty term list"));
    }
    let parts = terms
        .iter()
        .map(|&(q, f)| record_loss(tape, q, f, label, cfg))
        .collect::<Result<Vec<_>>>()?;
    tape.add_all(&parts)
}
