//! Logistic empirical risk over the multi-head model, its derivatives, the
//! smoothness and weak-convexity coefficients, and the segment checker.

use serde::Serialize;

use crate::attention::{forward_multi, param_norms, HeadParams, LabeledExample, ModelParams};
use crate::calculus::{hess_assemble, hvp_single, value_and_grad_multi, MAX_DENSE_DIM};
use crate::linalg::{dot, Matrix};
use crate::{par, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    examples: Vec<LabeledExample>,
    t: usize,
    d: usize,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledExample>) -> Result<Self> {
        let first = examples.first().ok_or_else(|| Error::Invalid("empty dataset".into()))?;
        let (t, d) = (first.x.t(), first.x.d());
        if examples.iter().any(|e| e.x.t() != t || e.x.d() != d) {
            return Err(Error::Dimension("examples disagree on (T, d)".into()));
        }
        Ok(Dataset { examples, t, d })
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn n(&self) -> usize {
        self.examples.len()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Largest token norm over the whole dataset.
    pub fn r(&self) -> f64 {
        self.examples.iter().map(|e| e.x.r()).fold(0.0, f64::max)
    }

    /// The dataset with example `i` removed.
    pub fn without(&self, i: usize) -> Result<Dataset> {
        if i >= self.n() {
            return Err(Error::Invalid(format!("index {i} out of range for n = {}", self.n())));
        }
        let mut ex = self.examples.clone();
        ex.remove(i);
        Dataset::new(ex)
    }

    fn check(&self, th: &ModelParams) -> Result<()> {
        if th.t() != self.t || th.d() != self.d {
            return Err(Error::Dimension(format!(
                "model is ({}, {}) but data is ({}, {})",
                th.t(),
                th.d(),
                self.t,
                self.d
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Logistic {
    pub loss: f64,
    pub d1: f64,
    pub d2: f64,
}

/// `σ(z) = 1/(1+e^{−z})` without overflow.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ℓ(t) = log(1 + e^{−t})` with its first two derivatives.
pub fn logistic(t: f64) -> Logistic {
    let loss = if t >= 0.0 { (-t).exp().ln_1p() } else { -t + t.exp().ln_1p() };
    Logistic { loss, d1: -sigmoid(-t), d2: sigmoid(t) * sigmoid(-t) }
}

/// `ℓ(a) − ℓ(b)` accurate when `a ≈ b`, given `a − b` separately.
pub fn logistic_diff(b: f64, a_minus_b: f64) -> f64 {
    ((-a_minus_b).exp_m1() * sigmoid(-b)).ln_1p()
}

pub fn margins(data: &Dataset, th: &ModelParams) -> Result<Vec<f64>> {
    data.check(th)?;
    par::map(data.n(), |i| {
        let e = &data.examples[i];
        forward_multi(&e.x, th).map(|f| e.y * f)
    })
    .into_iter()
    .collect()
}

/// Per-sample losses `ℓ(y_i Φ̃(X_i; θ̃))`.
pub fn sample_losses(data: &Dataset, th: &ModelParams) -> Result<Vec<f64>> {
    Ok(margins(data, th)?.into_iter().map(|m| logistic(m).loss).collect())
}

/// `(1/n) Σ ℓ(y_i Φ̃(X_i; θ̃))`.
pub fn empirical_risk(data: &Dataset, th: &ModelParams) -> Result<f64> {
    Ok(par::sum_f64(sample_losses(data, th)?) / data.n() as f64)
}

/// Risk and its gradient in one pass over the samples.
pub fn risk_and_gradient(data: &Dataset, th: &ModelParams) -> Result<(f64, ModelParams)> {
    data.check(th)?;
    let per: Vec<(f64, Vec<f64>)> = par::map(data.n(), |i| {
        let e = &data.examples[i];
        let (f, g) = value_and_grad_multi(&e.x, th).unwrap();
        let l = logistic(e.y * f);
        let mut flat = g.flatten();
        let c = l.d1 * e.y;
        flat.iter_mut().for_each(|v| *v *= c);
        (l.loss, flat)
    });
    let n = data.n() as f64;
    let (losses, grads): (Vec<f64>, Vec<Vec<f64>>) = per.into_iter().unzip();
    let value = par::sum_f64(losses) / n;
    let mut g = par::sum_vecs(grads, th.flat_len());
    g.iter_mut().for_each(|v| *v /= n);
    Ok((value, th.with_flat(&g)?))
}

/// `(1/n) Σ y_i ℓ′(y_i Φ̃_i) ∇Φ̃_i`.
pub fn risk_gradient(data: &Dataset, th: &ModelParams) -> Result<ModelParams> {
    Ok(risk_and_gradient(data, th)?.1)
}

/// Gradient of a single sample's loss `ℓ(y_i Φ̃(X_i; θ̃))`.
pub fn sample_gradient(e: &LabeledExample, th: &ModelParams) -> Result<(f64, ModelParams)> {
    let (f, g) = value_and_grad_multi(&e.x, th)?;
    let l = logistic(e.y * f);
    Ok((l.loss, g.scale(l.d1 * e.y)))
}

/// `∇²L̂(θ̃) v`.
pub fn risk_hvp(data: &Dataset, th: &ModelParams, v: &ModelParams) -> Result<ModelParams> {
    data.check(th)?;
    if !th.same_layout(v) {
        return Err(Error::Dimension("direction does not match the model layout".into()));
    }
    let inv_sqrt_h = 1.0 / th.num_heads().sqrt();
    let per: Vec<Vec<f64>> = par::map(data.n(), |i| {
        let e = &data.examples[i];
        let (f, g) = value_and_grad_multi(&e.x, th).unwrap();
        let l = logistic(e.y * f);
        let gv = g.dot(v).unwrap();
        let mut out = g.scale(l.d2 * gv);
        let c = l.d1 * e.y * inv_sqrt_h;
        for (oh, (h, vh)) in out.heads_mut().iter_mut().zip(th.heads().iter().zip(v.heads())) {
            oh.add_scaled(c, &hvp_single(&e.x, h, vh).unwrap());
        }
        out.flatten()
    });
    let n = data.n() as f64;
    let mut s = par::sum_vecs(per, th.flat_len());
    s.iter_mut().for_each(|x| *x /= n);
    th.with_flat(&s)
}

/// Dense `∇²L̂` in flattened order. Untied models only.
pub fn risk_hessian_dense(data: &Dataset, th: &ModelParams) -> Result<Matrix> {
    data.check(th)?;
    if !th.is_untied() {
        return Err(Error::Invalid("dense Hessian needs an untied model".into()));
    }
    let dim = th.flat_len();
    if dim > MAX_DENSE_DIM {
        return Err(Error::TooLarge(format!("loss Hessian of dimension {dim} exceeds {MAX_DENSE_DIM}")));
    }
    let k = th.head_dim();
    let inv_sqrt_h = 1.0 / th.num_heads().sqrt();
    let per: Vec<Vec<f64>> = par::map(data.n(), |i| {
        let e = &data.examples[i];
        let (f, g) = value_and_grad_multi(&e.x, th).unwrap();
        let l = logistic(e.y * f);
        let g = g.flatten();
        let mut m = Matrix::outer(&g, &g).scale(l.d2);
        let c = l.d1 * e.y * inv_sqrt_h;
        for (hi, h) in th.heads().iter().enumerate() {
            let blk = hess_assemble(&e.x, h).unwrap().dense;
            for a in 0..k {
                for b in 0..k {
                    m[(hi * k + a, hi * k + b)] += c * blk[(a, b)];
                }
            }
        }
        m.into_vec()
    });
    let n = data.n() as f64;
    let mut s = par::sum_vecs(per, dim * dim);
    s.iter_mut().for_each(|x| *x /= n);
    Matrix::from_vec(dim, dim, s)
}

/// `Φ(θ + Δ) − Φ(θ)` for one head, without subtracting two nearly equal
/// forward values.
pub fn forward_single_diff(
    x: &crate::attention::TokenMatrix,
    th: &HeadParams,
    delta: &HeadParams,
) -> Result<f64> {
    let logits = crate::attention::attention_logits(x, &th.w)?;
    let dlogits = crate::attention::attention_logits(x, &delta.w)?;
    let t = x.t();
    let xm = x.x();
    let mut total = 0.0;
    for s in 0..t {
        let p = crate::linalg::softmax(logits.row(s))?;
        let dg = dlogits.row(s);
        // p′_i − p_i = p_i Σ_j p_j e^{dg_j} expm1(dg_i − dg_j) / Σ_j p_j e^{dg_j}.
        let w: Vec<f64> = (0..t).map(|j| p[j] * dg[j].exp()).collect();
        let z: f64 = w.iter().sum();
        let dp: Vec<f64> = (0..t)
            .map(|i| p[i] * (0..t).map(|j| w[j] * (dg[i] - dg[j]).exp_m1()).sum::<f64>() / z)
            .collect();
        let pnew: Vec<f64> = w.iter().map(|v| v / z).collect();
        let attended_new = xm.tmatvec(&pnew)?;
        let attended_delta = xm.tmatvec(&dp)?;
        total += dot(delta.u.row(s), &attended_new) + dot(th.u.row(s), &attended_delta);
    }
    Ok(total)
}

/// `L̂(θ + Δ) − L̂(θ)` evaluated by per-sample differences.
pub fn risk_difference(data: &Dataset, th: &ModelParams, delta: &ModelParams) -> Result<f64> {
    data.check(th)?;
    if !th.same_layout(delta) {
        return Err(Error::Dimension("step does not match the model layout".into()));
    }
    let s = 1.0 / th.num_heads().sqrt();
    let diffs = par::map(data.n(), |i| {
        let e = &data.examples[i];
        let base = forward_multi(&e.x, th).unwrap();
        let mut df = 0.0;
        for ((h, dh), c) in th.heads().iter().zip(delta.heads()).zip(th.counts()) {
            df += c * forward_single_diff(&e.x, h, dh).unwrap();
        }
        logistic_diff(e.y * base, e.y * df * s)
    });
    Ok(par::sum_f64(diffs) / data.n() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BetaCoeffs {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub kappa: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBounds {
    /// Coefficients with the per-head norm `‖θ̃‖_{2,∞}`.
    pub loose: BetaCoeffs,
    /// Coefficients with `max_h ‖U_h‖_F`.
    pub tight: BetaCoeffs,
    /// Set when `R < 1`, where the bounds are not claimed.
    pub r_below_one: bool,
}

/// Coefficients for a given norm scale `m` (either `‖θ̃‖_{2,∞}` or `max_h ‖U_h‖_F`).
pub fn beta_coeffs(t: usize, d: usize, h: f64, r: f64, m: f64) -> BetaCoeffs {
    let (t, d) = (t as f64, d as f64);
    let beta1 = t.sqrt() * r * (2.0 * r * r * m + 1.0);
    let beta3 = 2.0 * d * (t * d).sqrt() * r.powi(3) * (3.0 * d.sqrt() * r * r * m + 1.0);
    let kappa = beta3 / h.sqrt();
    BetaCoeffs { beta1, beta2: kappa + beta1 * beta1 / 4.0, beta3, kappa }
}

pub fn loss_bounds(data_r: f64, th: &ModelParams) -> LossBounds {
    let n = param_norms(th);
    let (t, d, h) = (th.t(), th.d(), th.num_heads());
    LossBounds {
        loose: beta_coeffs(t, d, h, data_r, n.max_per_head),
        tight: beta_coeffs(t, d, h, data_r, n.max_u_frobenius),
        r_below_one: data_r < 1.0,
    }
}

/// `α(θ) = 3d√d R²[3√T R³(3‖θ−θ₀‖ + ‖θ‖_{2,∞}) + 2√T R]`.
pub fn alpha_coeff(th: &ModelParams, th0: &ModelParams, r: f64) -> Result<f64> {
    let dist = th.dist(th0)?;
    let m = param_norms(th).max_per_head;
    let (t, d) = (th.t() as f64, th.d() as f64);
    Ok(3.0 * d * d.sqrt() * r * r * (3.0 * t.sqrt() * r.powi(3) * (3.0 * dist + m) + 2.0 * t.sqrt() * r))
}

/// `ρ(θ) = (2d√(Td)R³/√H + TR²/4)·α(θ)²`.
pub fn rho(th: &ModelParams, th0: &ModelParams, r: f64) -> Result<f64> {
    let a = alpha_coeff(th, th0, r)?;
    let (t, d, h) = (th.t() as f64, th.d() as f64, th.num_heads());
    Ok((2.0 * d * (t * d).sqrt() * r.powi(3) / h.sqrt() + t * r * r / 4.0) * a * a)
}

/// `β̃₁(θ) = √T R(2R²(3‖θ−θ₀‖ + ‖θ‖_{2,∞}) + 1)`, the Lipschitz constant of
/// the loss over the ball the iterates stay in.
pub fn beta1_ball(th: &ModelParams, th0: &ModelParams, r: f64) -> Result<f64> {
    let dist = th.dist(th0)?;
    let m = param_norms(th).max_per_head;
    let t = th.t() as f64;
    Ok(t.sqrt() * r * (2.0 * r * r * (3.0 * dist + m) + 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub value: f64,
    pub grad_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub kappa: f64,
    pub rho: f64,
    pub r_below_one: bool,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "value,grad_norm,beta1,beta2,beta3,kappa,rho";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.value, self.grad_norm, self.beta1, self.beta2, self.beta3, self.kappa, self.rho
        )
    }
}

/// Risk, gradient norm, tight coefficients and `ρ(θ)` relative to `th0`.
pub fn loss_report(data: &Dataset, th: &ModelParams, th0: &ModelParams) -> Result<LossReport> {
    let (value, g) = risk_and_gradient(data, th)?;
    let r = data.r();
    let b = loss_bounds(r, th);
    Ok(LossReport {
        value,
        grad_norm: g.norm(),
        beta1: b.tight.beta1,
        beta2: b.tight.beta2,
        beta3: b.tight.beta3,
        kappa: b.tight.kappa,
        rho: rho(th, th0, r)?,
        r_below_one: b.r_below_one,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GlqcReport {
    pub condition_holds: bool,
    pub conclusion_holds: bool,
    pub segment_max: f64,
    pub endpoint_max: f64,
    pub ratio: f64,
}

/// Evaluates `L̂` on `grid` evenly spaced points of `[θ₁, θ₂]`.
pub fn glqc_check(data: &Dataset, th1: &ModelParams, th2: &ModelParams, grid: usize) -> Result<GlqcReport> {
    if grid < 3 {
        return Err(Error::Invalid("grid must have at least 3 points".into()));
    }
    let r = data.r();
    let b3 = loss_bounds(r, th1).loose.beta3.max(loss_bounds(r, th2).loose.beta3);
    let dist = th1.dist(th2)?;
    let condition_holds = 2.0 * b3 * dist * dist <= th1.num_heads().sqrt();
    let mut segment_max = f64::NEG_INFINITY;
    for k in 0..grid {
        let a = k as f64 / (grid - 1) as f64;
        segment_max = segment_max.max(empirical_risk(data, &th1.lerp(th2, a)?)?);
    }
    let endpoint_max = empirical_risk(data, th1)?.max(empirical_risk(data, th2)?);
    let ratio = segment_max / endpoint_max;
    Ok(GlqcReport {
        condition_holds,
        conclusion_holds: segment_max <= 4.0 / 3.0 * endpoint_max,
        segment_max,
        endpoint_max,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::TokenMatrix;
    use crate::calculus::fd;
    use crate::linalg::{rng, sym_eig_extremes, Rng};
    use rand::Rng as _;

    fn rm(r: &mut Rng, m: usize, n: usize, s: f64) -> Matrix {
        Matrix::from_fn(m, n, |_, _| r.random_range(-s..s))
    }

    pub(crate) fn random_data(r: &mut Rng, n: usize, t: usize, d: usize) -> Dataset {
        let ex = (0..n)
            .map(|_| {
                let x = TokenMatrix::new(rm(r, t, d, 1.0)).unwrap();
                let y = if r.random_bool(0.5) { 1.0 } else { -1.0 };
                LabeledExample::new(x, y).unwrap()
            })
            .collect();
        Dataset::new(ex).unwrap()
    }

    fn random_model(r: &mut Rng, h: usize, t: usize, d: usize, s: f64) -> ModelParams {
        ModelParams::new((0..h).map(|_| HeadParams::new(rm(r, t, d, s), rm(r, d, d, s)).unwrap()).collect())
            .unwrap()
    }

    #[test]
    fn logistic_values() {
        let l = logistic(0.0);
        assert_eq!(l.loss, 2f64.ln());
        assert_eq!((l.d1, l.d2), (-0.5, 0.25));
        let mut t = -30.0;
        while t <= 30.0 {
            let l = logistic(t);
            assert!(l.d1.abs() <= l.loss);
            assert!(l.d2 <= 0.25);
            t += 0.01;
        }
        assert!(logistic(800.0).loss >= 0.0 && logistic(-800.0).loss.is_finite());
        for (b, a) in [(0.3, 0.3 + 1e-9), (-2.0, 1.0), (5.0, -4.0)] {
            let want = logistic(a).loss - logistic(b).loss;
            assert!((logistic_diff(b, a - b) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn risk_at_zero_is_log2() {
        let mut r = rng(1);
        let data = random_data(&mut r, 7, 3, 2);
        assert_eq!(empirical_risk(&data, &ModelParams::zeros(3, 3, 2)).unwrap(), 2f64.ln());
    }

    #[test]
    fn risk_matches_direct_sum() {
        let mut r = rng(2);
        let data = random_data(&mut r, 2, 3, 2);
        let th = random_model(&mut r, 2, 3, 2, 1.0);
        let direct: f64 = data
            .examples()
            .iter()
            .map(|e| (1.0 + (-e.y * forward_multi(&e.x, &th).unwrap()).exp()).ln())
            .sum::<f64>()
            / 2.0;
        assert!((empirical_risk(&data, &th).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn risk_monotone_along_classifier() {
        let mut r = rng(3);
        let x = TokenMatrix::new(rm(&mut r, 3, 2, 1.0)).unwrap();
        let data = Dataset::new(vec![LabeledExample::new(x.clone(), 1.0).unwrap()]).unwrap();
        let mut dir = HeadParams::zeros(3, 2);
        dir.u = crate::calculus::grad_single(&x, &dir).unwrap().u;
        let mut prev = f64::INFINITY;
        for k in 0..20 {
            let th = ModelParams::new(vec![dir.scale(k as f64)]).unwrap();
            let v = empirical_risk(&data, &th).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn gradient_at_zero_and_fd() {
        let mut r = rng(4);
        let x = TokenMatrix::new(rm(&mut r, 3, 2, 1.0)).unwrap();
        let data = Dataset::new(vec![
            LabeledExample::new(x.clone(), 1.0).unwrap(),
            LabeledExample::new(x.clone(), -1.0).unwrap(),
        ])
        .unwrap();
        let g = risk_gradient(&data, &ModelParams::zeros(1, 3, 2)).unwrap();
        assert!(g.norm() < 1e-16);

        let data = random_data(&mut r, 5, 3, 2);
        let th = random_model(&mut r, 2, 3, 2, 1.0);
        let g = risk_gradient(&data, &th).unwrap().flatten();
        let num = fd::gradient(|v| empirical_risk(&data, &th.with_flat(v).unwrap()).unwrap(), &th.flatten(), 1e-5);
        assert!(fd::rel_err(&g, &num, 1e-8) <= 1e-6);
    }

    #[test]
    fn hessian_dense_and_hvp() {
        let mut r = rng(5);
        let data = random_data(&mut r, 4, 3, 2);
        let th = random_model(&mut r, 2, 3, 2, 1.0);
        let h = risk_hessian_dense(&data, &th).unwrap();
        assert!(h.sub(&h.transpose()).unwrap().frobenius() <= 1e-10 * (1.0 + h.frobenius()));
        let v = random_model(&mut r, 2, 3, 2, 1.0);
        let hv = risk_hvp(&data, &th, &v).unwrap().flatten();
        let dense_hv = h.matvec(&v.flatten()).unwrap();
        assert!(fd::rel_err(&hv, &dense_hv, 1e-12) < 1e-12);
        let eps = 1e-5;
        let gp = risk_gradient(&data, &th.lerp(&th.sub(&v.scale(-1.0)).unwrap(), eps).unwrap()).unwrap();
        let gm = risk_gradient(&data, &th.lerp(&th.sub(&v).unwrap(), eps).unwrap()).unwrap();
        let fdhv: Vec<f64> = gp.flatten().iter().zip(gm.flatten()).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        assert!(fd::rel_err(&hv, &fdhv, 1e-8) <= 1e-4);

        // UU block of a single-sample loss Hessian is ℓ″ dU dUᵀ.
        let one = Dataset::new(vec![data.examples()[0].clone()]).unwrap();
        let th1 = random_model(&mut r, 1, 3, 2, 1.0);
        let h = risk_hessian_dense(&one, &th1).unwrap();
        let e = &one.examples()[0];
        let (f, g) = value_and_grad_multi(&e.x, &th1).unwrap();
        let l = logistic(e.y * f);
        let du = g.heads()[0].u.as_slice().to_vec();
        for i in 0..6 {
            for j in 0..6 {
                assert!((h[(i, j)] - l.d2 * du[i] * du[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn tied_model_hvp_matches_untied() {
        let mut r = rng(6);
        let data = random_data(&mut r, 3, 3, 2);
        let head = random_model(&mut r, 1, 3, 2, 1.0).heads()[0].clone();
        let dir = random_model(&mut r, 1, 3, 2, 1.0).heads()[0].clone();
        let untied = ModelParams::new(vec![head.clone(); 3]).unwrap();
        let tied = ModelParams::replicated(head, 3.0).unwrap();
        let vu = ModelParams::new(vec![dir.clone(); 3]).unwrap();
        let vt = ModelParams::replicated(dir, 3.0).unwrap();
        let a = risk_hvp(&data, &untied, &vu).unwrap();
        let b = risk_hvp(&data, &tied, &vt).unwrap();
        assert!(fd::rel_err(&a.heads()[1].flatten(), &b.heads()[0].flatten(), 1e-12) < 1e-12);
        let (la, ga) = risk_and_gradient(&data, &untied).unwrap();
        let (lb, gb) = risk_and_gradient(&data, &tied).unwrap();
        assert!((la - lb).abs() < 1e-15);
        assert!((ga.norm() - gb.norm()).abs() < 1e-14);
    }

    #[test]
    fn accurate_risk_difference() {
        let mut r = rng(7);
        let data = random_data(&mut r, 6, 4, 3);
        let th = random_model(&mut r, 2, 4, 3, 1.0);
        let step = random_model(&mut r, 2, 4, 3, 0.3);
        let want = empirical_risk(&data, &{
            let mut p = th.clone();
            p.add_scaled(1.0, &step).unwrap();
            p
        })
        .unwrap()
            - empirical_risk(&data, &th).unwrap();
        assert!((risk_difference(&data, &th, &step).unwrap() - want).abs() < 1e-14);
        // A tiny step: first-order prediction ⟨∇L̂, Δ⟩ is matched to many digits.
        let tiny = step.scale(1e-12);
        let g = risk_gradient(&data, &th).unwrap();
        let pred = g.dot(&tiny).unwrap();
        let got = risk_difference(&data, &th, &tiny).unwrap();
        assert!((got - pred).abs() <= 1e-6 * pred.abs());
    }

    #[test]
    fn coefficient_examples() {
        let b = beta_coeffs(4, 1, 1.0, 1.0, 1.0);
        assert_eq!((b.beta1, b.beta3, b.beta2), (6.0, 16.0, 25.0));
        let z = loss_bounds(1.5, &ModelParams::zeros(1, 4, 2));
        assert!((z.loose.beta1 - 2.0 * 1.5).abs() < 1e-15);
        assert!((z.loose.beta3 - 2.0 * 2.0 * 8f64.sqrt() * 1.5f64.powi(3)).abs() < 1e-12);
        assert!(loss_bounds(0.5, &ModelParams::zeros(1, 4, 2)).r_below_one);

        let z = ModelParams::zeros(1, 1, 1);
        assert_eq!(alpha_coeff(&z, &z, 1.0).unwrap(), 6.0);
        assert_eq!(rho(&z, &z, 1.0).unwrap(), 81.0);
        let mut r = rng(8);
        let far = random_model(&mut r, 1, 1, 1, 1.0);
        let base = ModelParams::zeros(1, 1, 1);
        let th0b = far.scale(-1.0);
        // Same ‖θ‖_{2,∞}, twice the distance.
        assert!(rho(&far, &th0b, 1.0).unwrap() > rho(&far, &base, 1.0).unwrap());
    }

    #[test]
    fn glqc_examples() {
        let mut r = rng(9);
        let data = random_data(&mut r, 5, 3, 2);
        let th = random_model(&mut r, 2, 3, 2, 1.0);
        let same = glqc_check(&data, &th, &th, 101).unwrap();
        assert!((same.ratio - 1.0).abs() < 1e-15 && same.conclusion_holds);
        let mut a = random_model(&mut r, 2, 3, 2, 2.0);
        let mut b = random_model(&mut r, 2, 3, 2, 2.0);
        for h in a.heads_mut().iter_mut().chain(b.heads_mut()) {
            h.w = Matrix::zeros(2, 2);
        }
        let rep = glqc_check(&data, &a, &b, 101).unwrap();
        assert!(rep.segment_max <= rep.endpoint_max * (1.0 + 1e-15));
        assert!(glqc_check(&data, &a, &b, 2).is_err());
    }

    #[test]
    fn small_instance_bounds() {
        let mut r = rng(10);
        for _ in 0..20 {
            let data = random_data(&mut r, 3, 3, 2);
            let th = random_model(&mut r, 2, 3, 2, 1.0);
            let (l, g) = risk_and_gradient(&data, &th).unwrap();
            let b = loss_bounds(data.r().max(1.0), &th);
            assert!(g.norm() <= b.tight.beta1 * l);
            let e = sym_eig_extremes(&risk_hessian_dense(&data, &th).unwrap()).unwrap();
            assert!(e.abs_max() <= b.tight.beta2);
            assert!(e.lambda_min >= -b.tight.kappa * l);
            assert!(b.tight.beta2 <= b.loose.beta2);
        }
    }
}
