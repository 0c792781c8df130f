//! Exact gradients, Hessian contractions, dense Hessians and norm bounds of the
//! attention model, plus central-difference oracles.

use crate::attention::{attention_matrix, HeadParams, ModelParams, TokenMatrix};
use crate::linalg::{axpy, dot, jacobian_apply, one_inf, two_inf, Matrix};
use crate::{Error, Result};

/// Gradient of one head, laid out like the head itself (`u` = ∂/∂U, `w` = ∂/∂W).
pub type HeadGradient = HeadParams;

/// Attention probabilities and `X u_t` for one (tokens, head) pair.
struct Cache<'a> {
    x: &'a Matrix,
    /// Row t is `φ(X Wᵀ x_t)`.
    probs: Matrix,
    /// Row t is `X u_t ∈ ℝ^T`.
    xu: Matrix,
}

impl<'a> Cache<'a> {
    fn new(x: &'a TokenMatrix, th: &HeadParams) -> Result<Self> {
        if th.t() != x.t() || th.d() != x.d() {
            return Err(Error::Dimension(format!(
                "head is ({}, {}) but tokens are ({}, {})",
                th.t(),
                th.d(),
                x.t(),
                x.d()
            )));
        }
        let probs = attention_matrix(x, &th.w)?;
        let xu = th.u.matmul(&x.x().transpose())?;
        Ok(Cache { x: x.x(), probs, xu })
    }

    fn t(&self) -> usize {
        self.x.rows()
    }

    fn d(&self) -> usize {
        self.x.cols()
    }

    /// `x_t (Xᵀ s)ᵀ` accumulated into `out` with weight `c`.
    fn add_token_outer(&self, out: &mut Matrix, c: f64, t: usize, s: &[f64]) {
        let r = self.x.tmatvec(s).unwrap();
        let xt = self.x.row(t);
        for i in 0..self.d() {
            let ci = c * xt[i];
            if ci != 0.0 {
                axpy(ci, &r, out.row_mut(i));
            }
        }
    }
}

/// `∇_U Φ = softmax(XWXᵀ) X` and `∇_W Φ = Σ_t x_t u_tᵀ Xᵀ φ′(XWᵀx_t) X`.
pub fn grad_single(x: &TokenMatrix, th: &HeadParams) -> Result<HeadGradient> {
    let c = Cache::new(x, th)?;
    let du = c.probs.matmul(x.x())?;
    let mut dw = Matrix::zeros(c.d(), c.d());
    for t in 0..c.t() {
        let s = jacobian_apply(c.probs.row(t), c.xu.row(t));
        c.add_token_outer(&mut dw, 1.0, t, &s);
    }
    Ok(HeadParams { u: du, w: dw })
}

/// Gradient of `Φ̃` with respect to one member of each head class:
/// `grad_single(x, θ_h) / √H`.
pub fn grad_multi(x: &TokenMatrix, th: &ModelParams) -> Result<ModelParams> {
    let s = 1.0 / th.num_heads().sqrt();
    let heads = th
        .heads()
        .iter()
        .map(|h| grad_single(x, h).map(|g| g.scale(s)))
        .collect::<Result<Vec<_>>>()?;
    ModelParams::tied(heads, th.counts().to_vec())
}

/// Forward value and per-class gradient in one pass.
pub fn value_and_grad_multi(x: &TokenMatrix, th: &ModelParams) -> Result<(f64, ModelParams)> {
    let s = 1.0 / th.num_heads().sqrt();
    let mut value = 0.0;
    let mut heads = Vec::with_capacity(th.heads().len());
    for (h, cnt) in th.heads().iter().zip(th.counts()) {
        let g = grad_single(x, h)?;
        value += cnt * g.u.inner(&h.u)?;
        heads.push(g.scale(s));
    }
    Ok((value * s, ModelParams::tied(heads, th.counts().to_vec())?))
}

/// `∇_W ⟨a, ∇_U Φ b⟩ = Σ_t x_t a_t bᵀ Xᵀ φ′(XWᵀx_t) X`.
pub fn hess_bilinear_uw(x: &TokenMatrix, th: &HeadParams, a: &[f64], b: &[f64]) -> Result<Matrix> {
    let c = Cache::new(x, th)?;
    if a.len() != c.t() || b.len() != c.d() {
        return Err(Error::Dimension("a must have length T and b length d".into()));
    }
    let q = x.x().matvec(b)?;
    let mut out = Matrix::zeros(c.d(), c.d());
    for t in 0..c.t() {
        if a[t] == 0.0 {
            continue;
        }
        let s = jacobian_apply(c.probs.row(t), &q);
        c.add_token_outer(&mut out, a[t], t, &s);
    }
    Ok(out)
}

/// `∇_W ⟨c, ∇_W Φ b⟩ = Σ_t (cᵀx_t) x_t d_tᵀ φ′(XWᵀx_t) X` with
/// `d_t = diag(Xb) X u_t − X u_t bᵀXᵀφ_t − X b u_tᵀXᵀφ_t`.
pub fn hess_bilinear_ww(x: &TokenMatrix, th: &HeadParams, cvec: &[f64], b: &[f64]) -> Result<Matrix> {
    let c = Cache::new(x, th)?;
    if cvec.len() != c.d() || b.len() != c.d() {
        return Err(Error::Dimension("c and b must have length d".into()));
    }
    let q = x.x().matvec(b)?;
    let mut out = Matrix::zeros(c.d(), c.d());
    for t in 0..c.t() {
        let ct = dot(cvec, x.token(t));
        if ct == 0.0 {
            continue;
        }
        let p = c.probs.row(t);
        let v = c.xu.row(t);
        let (qp, vp) = (dot(&q, p), dot(v, p));
        let dt: Vec<f64> = (0..c.t()).map(|s| q[s] * v[s] - v[s] * qp - q[s] * vp).collect();
        let s = jacobian_apply(p, &dt);
        c.add_token_outer(&mut out, ct, t, &s);
    }
    Ok(out)
}

/// Dense Hessian of a single head in the flattened (U, W) order.
#[derive(Clone, Debug)]
pub struct HeadHessian {
    pub t: usize,
    pub d: usize,
    pub dense: Matrix,
}

impl HeadHessian {
    pub fn uu_block(&self) -> Matrix {
        let k = self.t * self.d;
        Matrix::from_fn(k, k, |i, j| self.dense[(i, j)])
    }

    pub fn symmetry_residual(&self) -> f64 {
        self.dense.sub(&self.dense.transpose()).unwrap().frobenius()
    }
}

pub const MAX_DENSE_DIM: usize = 2000;

pub fn hess_assemble(x: &TokenMatrix, th: &HeadParams) -> Result<HeadHessian> {
    let (t, d) = (th.t(), th.d());
    let k = t * d;
    let n = th.dim();
    if n > MAX_DENSE_DIM {
        return Err(Error::TooLarge(format!("head Hessian of dimension {n} exceeds {MAX_DENSE_DIM}")));
    }
    let mut h = Matrix::zeros(n, n);
    let unit = |len: usize, i: usize| {
        let mut e = vec![0.0; len];
        e[i] = 1.0;
        e
    };
    for ti in 0..t {
        for j in 0..d {
            let blk = hess_bilinear_uw(x, th, &unit(t, ti), &unit(d, j))?;
            let row = ti * d + j;
            for (m, v) in blk.as_slice().iter().enumerate() {
                h[(row, k + m)] = *v;
                h[(k + m, row)] = *v;
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            let blk = hess_bilinear_ww(x, th, &unit(d, i), &unit(d, j))?;
            let row = k + i * d + j;
            for (m, v) in blk.as_slice().iter().enumerate() {
                h[(row, k + m)] = *v;
            }
        }
    }
    Ok(HeadHessian { t, d, dense: h })
}

/// `∇²Φ(X; θ) v` for a single head, without forming the Hessian.
pub fn hvp_single(x: &TokenMatrix, th: &HeadParams, v: &HeadParams) -> Result<HeadParams> {
    let c = Cache::new(x, th)?;
    let (t, d) = (c.t(), c.d());
    let mut ou = Matrix::zeros(t, d);
    let mut ow = Matrix::zeros(d, d);
    // δg_s = X V_Wᵀ x_s, δφ_s = φ′(g_s) δg_s.
    let xvw = x.x().matmul(&v.w)?;
    let xvu = v.u.matmul(&x.x().transpose())?;
    for s in 0..t {
        let p = c.probs.row(s);
        let dg = x.x().matvec(xvw.row(s))?;
        let dp = jacobian_apply(p, &dg);
        ou.row_mut(s).copy_from_slice(&x.x().tmatvec(&dp)?);

        let vt = c.xu.row(s);
        let pv = dot(p, vt);
        let dpv = dot(&dp, vt);
        let mut acc: Vec<f64> = (0..t).map(|i| dp[i] * (vt[i] - pv) - p[i] * dpv).collect();
        let mixed = jacobian_apply(p, xvu.row(s));
        axpy(1.0, &mixed, &mut acc);
        c.add_token_outer(&mut ow, 1.0, s, &acc);
    }
    Ok(HeadParams { u: ou, w: ow })
}

/// `‖∇Φ‖ ≤ 2‖X‖²_{2,∞} Σ_t ‖X u_t‖_∞ + √T ‖X‖_{2,∞}`.
pub fn model_grad_bound(x: &TokenMatrix, th: &HeadParams) -> Result<f64> {
    let s = sum_xu_inf(x, th)?;
    let r = two_inf(x.x());
    Ok(2.0 * r * r * s + (x.t() as f64).sqrt() * r)
}

/// `‖∇²Φ‖ ≤ 6d²‖X‖_{2,∞}‖X‖³_{1,∞} Σ_t ‖X u_t‖_∞ + 2d√(Td)‖X‖_{2,∞}‖X‖²_{1,∞}`.
pub fn model_hess_bound(x: &TokenMatrix, th: &HeadParams) -> Result<f64> {
    let s = sum_xu_inf(x, th)?;
    let r = two_inf(x.x());
    let m = one_inf(x.x());
    let (t, d) = (x.t() as f64, x.d() as f64);
    Ok(6.0 * d * d * r * m.powi(3) * s + 2.0 * d * (t * d).sqrt() * r * m * m)
}

fn sum_xu_inf(x: &TokenMatrix, th: &HeadParams) -> Result<f64> {
    let c = Cache::new(x, th)?;
    Ok((0..c.t()).map(|t| c.xu.row(t).iter().fold(0.0f64, |m, v| m.max(v.abs()))).sum())
}

/// Central-difference oracles.
pub mod fd {
    use super::*;

    /// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
    pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = crate::linalg::norm2(a).max(crate::linalg::norm2(b)).max(floor);
        diff / scale
    }

    pub fn gradient(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
        let mut p = at.to_vec();
        (0..at.len())
            .map(|i| {
                let orig = p[i];
                p[i] = orig + h;
                let fp = f(&p);
                p[i] = orig - h;
                let fm = f(&p);
                p[i] = orig;
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    /// Column j is the central difference of `g` along coordinate j.
    pub fn jacobian(g: impl Fn(&[f64]) -> Vec<f64>, at: &[f64], h: f64) -> Matrix {
        let mut p = at.to_vec();
        let cols: Vec<Vec<f64>> = (0..at.len())
            .map(|i| {
                let orig = p[i];
                p[i] = orig + h;
                let gp = g(&p);
                p[i] = orig - h;
                let gm = g(&p);
                p[i] = orig;
                gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
            })
            .collect();
        let m = cols.first().map_or(0, |c| c.len());
        Matrix::from_fn(m, at.len(), |i, j| cols[j][i])
    }

    /// Relative error of `grad_multi` against differences of `forward_multi`.
    pub fn check_model_gradient(x: &TokenMatrix, th: &ModelParams, h: f64) -> Result<f64> {
        if !th.is_untied() {
            return Err(Error::Invalid("finite differences need an untied model".into()));
        }
        let analytic = grad_multi(x, th)?.flatten();
        let numeric = gradient(
            |v| crate::attention::forward_multi(x, &th.with_flat(v).unwrap()).unwrap(),
            &th.flatten(),
            h,
        );
        Ok(rel_err(&analytic, &numeric, 1e-8))
    }

    /// Worst `check_model_gradient` error over `cases` random instances with
    /// `T ≤ 6`, `d ≤ 5`, `H ≤ 3` and entries uniform on [−1, 1].
    pub fn random_gradcheck(seed: u64, cases: usize, h: f64) -> Result<f64> {
        use rand::Rng as _;
        let mut r = crate::linalg::rng(seed);
        let mut worst = 0.0f64;
        for _ in 0..cases {
            let t = r.random_range(1..=6);
            let d = r.random_range(1..=5);
            let nh = r.random_range(1..=3);
            let mut m = |a: usize, b: usize| Matrix::from_fn(a, b, |_, _| r.random_range(-1.0..1.0));
            let x = TokenMatrix::new(m(t, d))?;
            let heads = (0..nh).map(|_| HeadParams::new(m(t, d), m(d, d))).collect::<Result<Vec<_>>>()?;
            worst = worst.max(check_model_gradient(&x, &ModelParams::new(heads)?, h)?);
        }
        Ok(worst)
    }

    /// Relative error of the dense head Hessian against differences of the gradient.
    pub fn check_head_hessian(x: &TokenMatrix, th: &HeadParams, h: f64) -> Result<f64> {
        let (t, d) = (th.t(), th.d());
        let dense = hess_assemble(x, th)?.dense;
        let numeric = jacobian(
            |v| grad_single(x, &HeadParams::from_flat(t, d, v).unwrap()).unwrap().flatten(),
            &th.flatten(),
            h,
        );
        Ok(rel_err(dense.as_slice(), numeric.as_slice(), 1e-8))
    }
}
