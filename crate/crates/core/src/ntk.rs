//! Target directions for the token mixture, margin certificates, softmax
//! saturation and head-count requirements.

use serde::Serialize;

use crate::attention::{attention_logits, attention_matrix, forward_multi, param_norms, HeadParams, ModelParams, TokenMatrix};
use crate::calculus::grad_multi;
use crate::datagen::{MixtureSpec, NoiseBounds, RelevantMask};
use crate::linalg::{dot, Matrix};
use crate::objective::{beta_coeffs, Dataset};
use crate::{par, Error, Result};

/// Reference directions built from the mixture patterns.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetParams {
    /// `1_T (μ₊ − μ₋)ᵀ`.
    pub u_star: Matrix,
    /// `μ₊μ₊ᵀ + μ₋μ₋ᵀ + Σ_ℓ ν_ℓ(μ₊ + μ₋)ᵀ`.
    pub w_star: Matrix,
    /// `U⋆ / (S√(2T))`, unit Frobenius norm.
    pub u_opt: Matrix,
    /// `W⋆ / (S²√(2(M+1)))`, unit Frobenius norm.
    pub w_opt: Matrix,
}

impl TargetParams {
    pub fn new(spec: &MixtureSpec) -> Self {
        let (t, d, s) = (spec.t, spec.d, spec.s);
        let u = spec.u_star_vec();
        let u_star = Matrix::from_fn(t, d, |_, j| u[j]);
        let (mp, mm) = (spec.mu(1.0), spec.mu(-1.0));
        let mut w_star = Matrix::outer(&mp, &mp).add(&Matrix::outer(&mm, &mm)).unwrap();
        let sum: Vec<f64> = mp.iter().zip(&mm).map(|(a, b)| a + b).collect();
        for l in 0..spec.m {
            w_star.add_scaled(1.0, &Matrix::outer(&spec.nu(l), &sum)).unwrap();
        }
        let u_opt = u_star.scale(1.0 / (s * (2.0 * t as f64).sqrt()));
        let w_opt = w_star.scale(1.0 / (s * s * (2.0 * (spec.m as f64 + 1.0)).sqrt()));
        TargetParams { u_star, w_star, u_opt, w_opt }
    }

    /// Single-head direction `(Ū⋆, sign·W̄⋆)` of norm √2.
    pub fn head(&self, sign: f64) -> HeadParams {
        HeadParams { u: self.u_opt.clone(), w: self.w_opt.scale(sign) }
    }

    /// `θ_opt = (U_opt, W_opt)`.
    pub fn theta_opt(&self) -> HeadParams {
        self.head(1.0)
    }
}

/// Sign attached to a head: `sign⟨U_h, U⋆⟩`, with +1 at zero.
pub fn head_sign(targets: &TargetParams, head: &HeadParams) -> f64 {
    if head.u.inner(&targets.u_star).unwrap_or(0.0) < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Multi-head direction `(1/√H) concat(θ⋆(θ_h))` laid out like `th0`.
pub fn theta_star(targets: &TargetParams, th0: &ModelParams) -> Result<ModelParams> {
    let signs: Vec<f64> = th0.heads().iter().map(|h| head_sign(targets, h)).collect();
    theta_star_with_signs(targets, th0, &signs)
}

pub fn theta_star_with_signs(targets: &TargetParams, th0: &ModelParams, signs: &[f64]) -> Result<ModelParams> {
    if signs.len() != th0.heads().len() {
        return Err(Error::Dimension("one sign per head class".into()));
    }
    if targets.u_opt.shape() != (th0.t(), th0.d()) {
        return Err(Error::Dimension("targets and model disagree on (T, d)".into()));
    }
    let s = 1.0 / th0.num_heads().sqrt();
    let heads = signs.iter().map(|&a| targets.head(a).scale(s)).collect();
    ModelParams::tied(heads, th0.counts().to_vec())
}

/// Row `t` of the logit matrix, `X Wᵀ x_t`.
pub fn relevance_scores(x: &TokenMatrix, w: &Matrix, t: usize) -> Result<Vec<f64>> {
    if t >= x.t() {
        return Err(Error::Invalid(format!("token index {t} out of range for T = {}", x.t())));
    }
    Ok(attention_logits(x, w)?.row(t).to_vec())
}

/// `(√T/(√2 S))(S²(1−ε) − 2εZ_μ)`.
pub fn gamma_attn(eps: f64, s: f64, t: usize, z_mu: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::Invalid(format!("eps = {eps} must lie in [0, 1]")));
    }
    Ok((t as f64).sqrt() / (2f64.sqrt() * s) * (s * s * (1.0 - eps) - 2.0 * eps * z_mu))
}

/// `Γ_ε = (8√(2(M+1))/(3S²))·log((1/ζ − 1)/ε)`.
pub fn saturation_gamma(eps: f64, s: f64, m: usize, zeta: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Invalid(format!("eps = {eps} must lie in (0, 1)")));
    }
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(Error::Invalid(format!("zeta = {zeta}: log((1/zeta - 1)/eps) is undefined")));
    }
    Ok(8.0 * (2.0 * (m as f64 + 1.0)).sqrt() / (3.0 * s * s) * ((1.0 / zeta - 1.0) / eps).ln())
}

/// Whether `Z_μ ∨ Z_ν ≤ S²/8`, the noise level under which `Γ_ε` is guaranteed
/// to saturate.
pub fn saturation_noise_ok(s: f64, b: &NoiseBounds) -> bool {
    b.z_mu.max(b.z_nu) <= s * s / 8.0
}

/// Largest attention mass on irrelevant tokens, over samples and query rows,
/// under the key-query matrix `Γ·W`.
pub fn verify_saturation(data: &Dataset, masks: &[RelevantMask], w: &Matrix, gamma: f64) -> Result<f64> {
    if masks.len() != data.n() {
        return Err(Error::Dimension("one mask per sample".into()));
    }
    let w = w.scale(gamma);
    let per = par::map(data.n(), |i| -> Result<f64> {
        let a = attention_matrix(&data.examples()[i].x, &w)?;
        let m = &masks[i];
        let mut worst = 0.0f64;
        for t in 0..a.rows() {
            let mass: f64 = (0..a.cols()).filter(|c| !m.contains(*c)).map(|c| a[(t, c)]).sum();
            worst = worst.max(mass);
        }
        Ok(worst)
    });
    per.into_iter().try_fold(0.0f64, |acc, v| Ok(acc.max(v?)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NtkMargin {
    pub min: f64,
    pub per_sample: Vec<f64>,
}

/// `y_i ⟨∇Φ̃(X_i; θ₀), dir⟩` for every sample, with no norm requirement.
pub fn ntk_inner(data: &Dataset, th0: &ModelParams, dir: &ModelParams) -> Result<NtkMargin> {
    if !th0.same_layout(dir) {
        return Err(Error::Dimension("direction does not match the model layout".into()));
    }
    let per_sample = par::map(data.n(), |i| -> Result<f64> {
        let e = &data.examples()[i];
        Ok(e.y * grad_multi(&e.x, th0)?.dot(dir)?)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let min = per_sample.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(NtkMargin { min, per_sample })
}

/// NTK margin of `th0` along `th_star`, which must have norm √2.
pub fn ntk_margin(data: &Dataset, th0: &ModelParams, th_star: &ModelParams) -> Result<NtkMargin> {
    let n = th_star.norm();
    if (n - 2f64.sqrt()).abs() > 1e-10 {
        return Err(Error::Invalid(format!("theta_star has norm {n}, expected sqrt(2)")));
    }
    ntk_inner(data, th0, th_star)
}

/// NTK margin lower bound for the first-phase initialization on the mixture,
/// `γ⋆ = T(1−ζ)ζ(ζS⁴ − 7Z̄S² − 12Z̄² − 16Z̄³/S²)/(4√(2(M+1))) − P·T^{5/2}(S+Z)³
/// + (S√T/√2)(ζ − 2(1−ζ)Z_μ/S²)` with `Z̄ = Z_μ ∨ Z_ν`.
#[allow(clippy::too_many_arguments)]
pub fn gamma_star(s: f64, t: usize, zeta: f64, m: usize, z_mu: f64, z_nu: f64, z: f64, p: f64) -> f64 {
    let t = t as f64;
    let zb = z_mu.max(z_nu);
    let attn = t * (1.0 - zeta) * zeta * (zeta * s.powi(4) - 7.0 * zb * s * s - 12.0 * zb * zb - 16.0 * zb.powi(3) / (s * s))
        / (4.0 * (2.0 * (m as f64 + 1.0)).sqrt());
    let pert = p * t.powf(2.5) * (s + z).powi(3);
    let lin = s * t.sqrt() / 2f64.sqrt() * (zeta - 2.0 * (1.0 - zeta) * z_mu / (s * s));
    attn - pert + lin
}

/// Reference value of the first-phase perturbation bound
/// `(2S + Z)(√(d/n₁) + √(log(1/δ)/n₁))` with the unspecified constant set to 1.
pub fn p_reference(s: f64, z: f64, d: usize, n1: usize, delta: f64) -> f64 {
    let n1 = n1 as f64;
    (2.0 * s + z) * ((d as f64 / n1).sqrt() + ((1.0 / delta).ln() / n1).sqrt())
}

/// Empirical and theoretical good-initialization quantities.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[allow(non_snake_case)]
pub struct GoodInitReport {
    /// `max_h ‖θ_h⁰‖`.
    pub B2: f64,
    /// `max_i |Φ̃(X_i; θ₀)|`.
    pub B_phi: f64,
    pub ntk_margin_min: f64,
    /// Signs applied to `W̄⋆` per head class in the direction used.
    pub theta_star_signs: Vec<f64>,
    pub theta_star_counts: Vec<f64>,
    pub gamma_star_formula: f64,
    /// `√T(S + P)`.
    pub B2_theory: f64,
    /// `T R (S + P) √(2 log(n/δ))`.
    pub B_phi_theory: f64,
    pub P: f64,
    pub delta: f64,
    pub p1_pass: bool,
    pub p2_pass: bool,
    /// Positive NTK margin.
    pub p3_pass: bool,
    /// NTK margin at least `γ⋆/2`.
    pub p3_meets_half_gamma_star: bool,
}

/// Certifies `th0` against the mixture values, using `p` as the first-phase
/// perturbation size (0 for the zero initialization).
pub fn good_init_check(
    data: &Dataset,
    spec: &MixtureSpec,
    bounds: &NoiseBounds,
    th0: &ModelParams,
    p: f64,
    delta: f64,
) -> Result<GoodInitReport> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Invalid("delta must lie in (0, 1)".into()));
    }
    let targets = TargetParams::new(spec);
    let dir = theta_star(&targets, th0)?;
    let margin = ntk_margin(data, th0, &dir)?;
    let b2 = param_norms(th0).max_per_head;
    let b_phi = par::map(data.n(), |i| forward_multi(&data.examples()[i].x, th0).map(f64::abs))
        .into_iter()
        .try_fold(0.0f64, |acc, v| v.map(|v| acc.max(v)))?;
    let (s, t) = (spec.s, spec.t as f64);
    let b2_theory = t.sqrt() * (s + p);
    let b_phi_theory = t * bounds.r * (s + p) * (2.0 * (data.n() as f64 / delta).ln()).sqrt();
    let gs = gamma_star(s, spec.t, spec.zeta, spec.m, bounds.z_mu, bounds.z_nu, bounds.z, p);
    let signs = th0.heads().iter().map(|h| head_sign(&targets, h)).collect();
    Ok(GoodInitReport {
        B2: b2,
        B_phi: b_phi,
        ntk_margin_min: margin.min,
        theta_star_signs: signs,
        theta_star_counts: th0.counts().to_vec(),
        gamma_star_formula: gs,
        B2_theory: b2_theory,
        B_phi_theory: b_phi_theory,
        P: p,
        delta,
        p1_pass: b2 <= b2_theory,
        p2_pass: b_phi <= b_phi_theory,
        p3_pass: margin.min > 0.0,
        p3_meets_half_gamma_star: margin.min >= gs / 2.0,
    })
}

/// `g₀(ε) = (2B_Φ + log(1/ε))/γ` and `g(ε) = B₂ + g₀(ε)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RealizabilityWitness {
    pub b2: f64,
    pub b_phi: f64,
    pub gamma: f64,
}

impl RealizabilityWitness {
    pub fn g0(&self, eps: f64) -> f64 {
        (2.0 * self.b_phi + (1.0 / eps).ln()) / self.gamma
    }

    pub fn g(&self, eps: f64) -> f64 {
        self.b2 + self.g0(eps)
    }

    /// `(ε, g₀(ε), g(ε))` over a grid.
    pub fn evaluate(&self, eps: &[f64]) -> Vec<(f64, f64, f64)> {
        eps.iter().map(|&e| (e, self.g0(e), self.g(e))).collect()
    }

    /// `θ₀ + g₀(ε)·θ⋆`.
    pub fn point(&self, th0: &ModelParams, th_star: &ModelParams, eps: f64) -> Result<ModelParams> {
        let mut out = th0.clone();
        out.add_scaled(self.g0(eps), th_star)?;
        Ok(out)
    }
}

pub fn realizability_witness(b2: f64, b_phi: f64, gamma: f64) -> Result<RealizabilityWitness> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Invalid(format!("gamma = {gamma}: the witness needs a positive margin")));
    }
    if !(b2 >= 0.0 && b_phi >= 0.0) {
        return Err(Error::Invalid("B2 and B_phi must be non-negative".into()));
    }
    Ok(RealizabilityWitness { b2, b_phi, gamma })
}

/// Smallest integer `H` with `√H ≥ root`; infinite when `root` is.
pub fn heads_for_root(root: f64) -> f64 {
    if root.is_nan() || root == f64::INFINITY {
        f64::INFINITY
    } else {
        (root.max(0.0) * root.max(0.0)).ceil().max(1.0)
    }
}

fn dtr(d: usize, t: usize, r: f64) -> (f64, f64) {
    let (d, t) = (d as f64, t as f64);
    (d * (t * d).sqrt() * r.powi(3), 3.0 * d.sqrt() * r * r)
}

/// Training and generalization head requirements for an explicit target:
/// `√H ≥ c·d√(Td)R³(3√dR²(3‖θ−θ₀‖ + ‖θ‖_{2,∞}) + 1)‖θ−θ₀‖²` with c = 36 and 256.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TheoremHeads {
    pub train: f64,
    pub gen: f64,
}

pub fn theorem_heads(d: usize, t: usize, r: f64, dist: f64, max_norm: f64) -> TheoremHeads {
    let (a, b) = dtr(d, t, r);
    let core = a * (b * (3.0 * dist + max_norm) + 1.0) * dist * dist;
    TheoremHeads { train: heads_for_root(36.0 * core), gen: heads_for_root(256.0 * core) }
}

/// Same as `theorem_heads` for the pair `(θ, θ₀)`.
pub fn theorem_heads_for(th: &ModelParams, th0: &ModelParams, r: f64) -> Result<TheoremHeads> {
    Ok(theorem_heads(th.d(), th.t(), r, th.dist(th0)?, param_norms(th).max_per_head))
}

/// `theorem_heads` for the target `θ₀ + g₀θ⋆` with `θ₀ = 0`, where each head of
/// `θ⋆` has norm `head_norm/√H`. The per-head norm shrinks with `H`, so the
/// count is found by iterating from `H = 1` until it stops changing.
pub fn zero_init_heads(d: usize, t: usize, r: f64, g0: f64, head_norm: f64) -> TheoremHeads {
    let dist = g0 * head_norm;
    let mut out = theorem_heads(d, t, r, dist, dist);
    for _ in 0..50 {
        let next = TheoremHeads {
            train: theorem_heads(d, t, r, dist, dist / out.train.sqrt()).train,
            gen: theorem_heads(d, t, r, dist, dist / out.gen.sqrt()).gen,
        };
        if next == out {
            break;
        }
        out = next;
    }
    out
}

/// Inputs of the good-initialization head requirements.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RequirementInputs {
    pub d: usize,
    pub t: usize,
    pub r: f64,
    pub b2: f64,
    pub b_phi: f64,
    pub gamma: f64,
    pub k: usize,
    pub n: usize,
    pub delta: f64,
    /// `S + P`, used by the margin requirement.
    pub s_plus_p: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[allow(non_snake_case)]
pub struct HeadRequirements {
    pub H_train: f64,
    pub H_gen: f64,
    pub H_realiz: f64,
    pub H_P3: f64,
}

/// Head counts from a good initialization with horizon `K`, using
/// `g₀ = g₀(1/K)` and `g = B₂ + g₀`:
///
/// - train: `√H ≥ 36 d√(Td)R³(3√dR²(3g₀ + g) + 1)g₀²`
/// - generalization: `√H ≥ 256 d√(Td)R³B₂(3√dR²(4g₀ + B₂) + 1)g₀²`
/// - realizability at ε = 1/K:
///   `√H ≥ (5d√(Td)R³B₂/B_Φ)(3√dR² + 1)g₀²(1 ∨ g₀)`
/// - margin concentration: `√H ≥ 4(2R³T(S+P) + √T R)√(2 log(n/δ))/γ`
///
/// `B₂` enters the last two products as `B₂ ∨ 1`. A non-positive margin or
/// `B_Φ = 0` makes the affected requirement infinite.
pub fn head_requirements(c: &RequirementInputs) -> HeadRequirements {
    let inf = f64::INFINITY;
    if !(c.gamma > 0.0) {
        return HeadRequirements { H_train: inf, H_gen: inf, H_realiz: inf, H_P3: inf };
    }
    let w = RealizabilityWitness { b2: c.b2, b_phi: c.b_phi, gamma: c.gamma };
    let eps = 1.0 / c.k.max(1) as f64;
    let g0 = w.g0(eps);
    let g = w.g(eps);
    let (a, b) = dtr(c.d, c.t, c.r);
    let b2 = c.b2.max(1.0);
    let train = 36.0 * a * (b * (3.0 * g0 + g) + 1.0) * g0 * g0;
    let gen = 256.0 * a * b2 * (b * (4.0 * g0 + c.b2) + 1.0) * g0 * g0;
    let realiz = if c.b_phi > 0.0 {
        5.0 * a * b2 / c.b_phi * (3.0 * (c.d as f64).sqrt() * c.r * c.r + 1.0) * g0 * g0 * g0.max(1.0)
    } else {
        inf
    };
    let t = c.t as f64;
    let p3 = 4.0 * (2.0 * c.r.powi(3) * t * c.s_plus_p + t.sqrt() * c.r) * (2.0 * (c.n as f64 / c.delta).ln()).sqrt() / c.gamma;
    HeadRequirements {
        H_train: heads_for_root(train),
        H_gen: heads_for_root(gen),
        H_realiz: heads_for_root(realiz),
        H_P3: heads_for_root(p3),
    }
}

/// Heads needed for the second-order expansion around `θ₀` to keep every
/// margin above `log(1/ε)` at `θ₀ + g₀(ε)θ⋆`:
/// `g₀γ − B_Φ − ½(β₃/√H)‖g₀θ⋆‖² ≥ log(1/ε)`, with `β₃` the larger of its
/// values at the two endpoints (the per-head norm is convex along the segment).
pub fn realizability_heads_direct(
    w: &RealizabilityWitness,
    th0: &ModelParams,
    th_star: &ModelParams,
    r: f64,
    eps: f64,
) -> Result<f64> {
    let end = w.point(th0, th_star, eps)?;
    let h = th0.num_heads();
    let b3 = |p: &ModelParams| beta_coeffs(p.t(), p.d(), h, r, param_norms(p).max_per_head).beta3;
    let b3 = b3(th0).max(b3(&end));
    let g0 = w.g0(eps);
    let slack = g0 * w.gamma - w.b_phi - (1.0 / eps).ln();
    if slack <= 0.0 {
        return Ok(f64::INFINITY);
    }
    let dist_sq = g0 * g0 * th_star.norm().powi(2);
    Ok(heads_for_root(0.5 * b3 * dist_sq / slack))
}

/// Inner product of `∇Φ̃` with a direction, for a single example.
pub fn ntk_feature_inner(x: &TokenMatrix, th0: &ModelParams, dir: &ModelParams) -> Result<f64> {
    grad_multi(x, th0)?.dot(dir)
}

/// `y⟨Ū⋆, X⟩` summed over rows, i.e. the oracle linear score.
pub fn linear_score(targets: &TargetParams, x: &TokenMatrix) -> f64 {
    let u = targets.u_opt.row(0);
    (0..x.t()).map(|t| dot(u, x.token(t))).sum()
}
