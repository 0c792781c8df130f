//! Single-head and multi-head softmax attention models and their parameter
//! containers.

use serde::{Deserialize, Serialize};

use crate::linalg::{norm2, softmax, two_inf, Matrix};
use crate::{Error, Result};

/// Input tokens, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    x: Matrix,
    r: f64,
}

impl TokenMatrix {
    pub fn new(x: Matrix) -> Result<Self> {
        if x.rows() == 0 || x.cols() == 0 {
            return Err(Error::Dimension("token matrix needs T >= 1 and d >= 1".into()));
        }
        if !x.is_finite() {
            return Err(Error::Invalid("non-finite token entry".into()));
        }
        let r = two_inf(&x);
        Ok(TokenMatrix { x, r })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    /// Largest token norm.
    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn t(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn token(&self, t: usize) -> &[f64] {
        self.x.row(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub x: TokenMatrix,
    pub y: f64,
}

impl LabeledExample {
    pub fn new(x: TokenMatrix, y: f64) -> Result<Self> {
        if y != 1.0 && y != -1.0 {
            return Err(Error::Invalid(format!("label must be +1 or -1, got {y}")));
        }
        Ok(LabeledExample { x, y })
    }
}

/// One head: decoder `U` (T×d) and key-query product `W` (d×d).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    #[serde(rename = "U")]
    pub u: Matrix,
    #[serde(rename = "W")]
    pub w: Matrix,
}

impl HeadParams {
    pub fn new(u: Matrix, w: Matrix) -> Result<Self> {
        let (t, d) = u.shape();
        if w.shape() != (d, d) {
            return Err(Error::Dimension(format!(
                "U is {t}x{d} so W must be {d}x{d}, got {:?}",
                w.shape()
            )));
        }
        Ok(HeadParams { u, w })
    }

    pub fn zeros(t: usize, d: usize) -> Self {
        HeadParams { u: Matrix::zeros(t, d), w: Matrix::zeros(d, d) }
    }

    /// Mean-pooling decoder: every row of `U` equals `v`.
    pub fn pooled(t: usize, v: &[f64], w: Matrix) -> Result<Self> {
        let u = Matrix::from_fn(t, v.len(), |_, j| v[j]);
        HeadParams::new(u, w)
    }

    /// Last-token decoder: only the final row of `U` is nonzero.
    pub fn last_token(t: usize, v: &[f64], w: Matrix) -> Result<Self> {
        let u = Matrix::from_fn(t, v.len(), |i, j| if i + 1 == t { v[j] } else { 0.0 });
        HeadParams::new(u, w)
    }

    pub fn t(&self) -> usize {
        self.u.rows()
    }

    pub fn d(&self) -> usize {
        self.u.cols()
    }

    pub fn dim(&self) -> usize {
        self.t() * self.d() + self.d() * self.d()
    }

    /// `U` row-major followed by `W` row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.u.as_slice().to_vec();
        v.extend_from_slice(self.w.as_slice());
        v
    }

    pub fn from_flat(t: usize, d: usize, v: &[f64]) -> Result<Self> {
        if v.len() != t * d + d * d {
            return Err(Error::Dimension(format!(
                "flat head of length {} for T={t}, d={d}",
                v.len()
            )));
        }
        Ok(HeadParams {
            u: Matrix::from_vec(t, d, v[..t * d].to_vec())?,
            w: Matrix::from_vec(d, d, v[t * d..].to_vec())?,
        })
    }

    pub fn norm_sq(&self) -> f64 {
        let u = self.u.frobenius();
        let w = self.w.frobenius();
        u * u + w * w
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, other: &HeadParams) -> f64 {
        self.u.inner(&other.u).unwrap() + self.w.inner(&other.w).unwrap()
    }

    pub fn add_scaled(&mut self, c: f64, other: &HeadParams) {
        self.u.add_scaled(c, &other.u).unwrap();
        self.w.add_scaled(c, &other.w).unwrap();
    }

    pub fn scale(&self, c: f64) -> HeadParams {
        HeadParams { u: self.u.scale(c), w: self.w.scale(c) }
    }

    fn check(&self, x: &TokenMatrix) -> Result<()> {
        if self.t() != x.t() || self.d() != x.d() {
            return Err(Error::Dimension(format!(
                "head is ({}, {}) but tokens are ({}, {})",
                self.t(),
                self.d(),
                x.t(),
                x.d()
            )));
        }
        Ok(())
    }
}

/// Parameters of an H-head model.
///
/// Heads are stored as classes: head `h` stands for `counts[h]` identical
/// copies, and the model has `H = Σ counts` heads. Untied models have every
/// count equal to 1. Gradient descent maps identical heads to identical heads,
/// so a model whose heads fall into a few classes can be trained at head
/// counts far beyond what fits in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    t: usize,
    d: usize,
    heads: Vec<HeadParams>,
    counts: Vec<f64>,
}

impl ModelParams {
    pub fn new(heads: Vec<HeadParams>) -> Result<Self> {
        let n = heads.len();
        ModelParams::tied(heads, vec![1.0; n])
    }

    pub fn tied(heads: Vec<HeadParams>, counts: Vec<f64>) -> Result<Self> {
        let first = heads.first().ok_or_else(|| Error::Invalid("a model needs H >= 1".into()))?;
        let (t, d) = (first.t(), first.d());
        if heads.iter().any(|h| h.t() != t || h.d() != d) {
            return Err(Error::Dimension("heads disagree on (T, d)".into()));
        }
        if counts.len() != heads.len() || counts.iter().any(|c| !(c.is_finite() && *c >= 1.0)) {
            return Err(Error::Invalid("head counts must be finite and >= 1, one per head".into()));
        }
        Ok(ModelParams { t, d, heads, counts })
    }

    pub fn zeros(h: usize, t: usize, d: usize) -> Self {
        ModelParams::new(vec![HeadParams::zeros(t, d); h.max(1)]).unwrap()
    }

    /// `H` identical heads, each equal to `head`, stored as one class.
    pub fn replicated(head: HeadParams, h: f64) -> Result<Self> {
        ModelParams::tied(vec![head], vec![h])
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Effective number of heads `H`.
    pub fn num_heads(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn heads(&self) -> &[HeadParams] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [HeadParams] {
        &mut self.heads
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn is_untied(&self) -> bool {
        self.counts.iter().all(|c| *c == 1.0)
    }

    pub fn head_dim(&self) -> usize {
        self.t * self.d + self.d * self.d
    }

    /// Length of `flatten()`: one block per stored head.
    pub fn flat_len(&self) -> usize {
        self.heads.len() * self.head_dim()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.heads.iter().flat_map(|h| h.flatten()).collect()
    }

    /// Inverse of `flatten`, keeping this model's counts.
    pub fn with_flat(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.flat_len() {
            return Err(Error::Dimension(format!(
                "flat vector of length {} for a model with {}",
                v.len(),
                self.flat_len()
            )));
        }
        let k = self.head_dim();
        let heads = v
            .chunks(k)
            .map(|c| HeadParams::from_flat(self.t, self.d, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams { t: self.t, d: self.d, heads, counts: self.counts.clone() })
    }

    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.t == other.t && self.d == other.d && self.counts == other.counts
    }

    fn check_layout(&self, other: &ModelParams) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::Dimension("models differ in shape or head classes".into()));
        }
        Ok(())
    }

    /// Euclidean inner product over all `H` heads.
    pub fn dot(&self, other: &ModelParams) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self
            .heads
            .iter()
            .zip(&other.heads)
            .zip(&self.counts)
            .map(|((a, b), c)| c * a.dot(b))
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.heads.iter().zip(&self.counts).map(|(h, c)| c * h.norm_sq()).sum::<f64>().sqrt()
    }

    pub fn add_scaled(&mut self, c: f64, other: &ModelParams) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            a.add_scaled(c, b);
        }
        Ok(())
    }

    pub fn sub(&self, other: &ModelParams) -> Result<ModelParams> {
        let mut out = self.clone();
        out.add_scaled(-1.0, other)?;
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> ModelParams {
        ModelParams {
            t: self.t,
            d: self.d,
            heads: self.heads.iter().map(|h| h.scale(c)).collect(),
            counts: self.counts.clone(),
        }
    }

    /// `‖self − other‖`.
    pub fn dist(&self, other: &ModelParams) -> Result<f64> {
        Ok(self.sub(other)?.norm())
    }

    /// `(1 − a)·self + a·other`.
    pub fn lerp(&self, other: &ModelParams, a: f64) -> Result<ModelParams> {
        let mut out = self.scale(1.0 - a);
        out.add_scaled(a, other)?;
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.heads.iter().all(|h| h.u.is_finite() && h.w.is_finite())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ParamsDoc::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ParamsDoc = serde_json::from_str(s)?;
        doc.into_params()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsDoc {
    #[serde(rename = "T")]
    t: usize,
    d: usize,
    #[serde(rename = "H")]
    h: f64,
    heads: Vec<HeadParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    counts: Option<Vec<f64>>,
}

impl From<&ModelParams> for ParamsDoc {
    fn from(p: &ModelParams) -> Self {
        ParamsDoc {
            t: p.t,
            d: p.d,
            h: p.num_heads(),
            heads: p.heads.clone(),
            counts: (!p.is_untied()).then(|| p.counts.clone()),
        }
    }
}

impl ParamsDoc {
    fn into_params(self) -> Result<ModelParams> {
        let counts = self.counts.unwrap_or_else(|| vec![1.0; self.heads.len()]);
        let p = ModelParams::tied(self.heads, counts)?;
        if p.t != self.t || p.d != self.d || p.num_heads() != self.h {
            return Err(Error::Invalid("T, d or H disagree with the heads".into()));
        }
        Ok(p)
    }
}

/// Logit matrix `X W Xᵀ`; row t holds `X Wᵀ x_t`.
pub fn attention_logits(x: &TokenMatrix, w: &Matrix) -> Result<Matrix> {
    if w.shape() != (x.d(), x.d()) {
        return Err(Error::Dimension(format!("W is {:?}, tokens have d = {}", w.shape(), x.d())));
    }
    x.x().matmul(w)?.matmul(&x.x().transpose())
}

/// Row-stochastic attention matrix `softmax(X W Xᵀ)`.
pub fn attention_matrix(x: &TokenMatrix, w: &Matrix) -> Result<Matrix> {
    let mut a = attention_logits(x, w)?;
    for t in 0..a.rows() {
        let p = softmax(a.row(t))?;
        a.row_mut(t).copy_from_slice(&p);
    }
    Ok(a)
}

/// `⟨U, softmax(X W Xᵀ) X⟩`.
pub fn forward_single(x: &TokenMatrix, th: &HeadParams) -> Result<f64> {
    th.check(x)?;
    let a = attention_matrix(x, &th.w)?;
    a.matmul(x.x())?.inner(&th.u)
}

/// `(1/√H) Σ_h Φ(X; θ_h)`.
pub fn forward_multi(x: &TokenMatrix, th: &ModelParams) -> Result<f64> {
    let mut s = 0.0;
    for (h, c) in th.heads.iter().zip(&th.counts) {
        s += c * forward_single(x, h)?;
    }
    Ok(s / th.num_heads().sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamNorms {
    pub euclid: f64,
    pub max_per_head: f64,
    pub max_u_frobenius: f64,
}

pub fn param_norms(th: &ModelParams) -> ParamNorms {
    ParamNorms {
        euclid: th.norm(),
        max_per_head: th.heads.iter().map(|h| h.norm()).fold(0.0, f64::max),
        max_u_frobenius: th.heads.iter().map(|h| h.u.frobenius()).fold(0.0, f64::max),
    }
}

/// Row 2-norms of `X`.
pub fn token_norms(x: &TokenMatrix) -> Vec<f64> {
    (0..x.t()).map(|t| norm2(x.token(t))).collect()
}
