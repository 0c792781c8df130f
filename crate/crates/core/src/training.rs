//! Full-batch training: GD with the step-size rules, heavy-ball momentum and
//! Adam, the first-phase step, traces, and the per-step certificate checks.

use rand::Rng as _;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{attention_matrix, HeadParams, ModelParams};
use crate::datagen::{MixtureSpec, RelevantMask};
use crate::linalg::{norm2, rng, Matrix};
use crate::objective::{empirical_risk, loss_bounds, margins, risk_and_gradient, risk_difference, rho, Dataset};
use crate::{par, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Gd,
    /// Heavy ball: `v ← μv + ∇`, `θ ← θ − ηv`.
    GdMomentum {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn momentum() -> Self {
        Optimizer::GdMomentum { momentum: default_momentum() }
    }

    pub fn adam() -> Self {
        Optimizer::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_adam_eps() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSize {
    Explicit { eta: f64 },
    /// `η = 1 ∧ 1/ρ(θ) ∧ ‖θ−θ₀‖²/(K L̂(θ)) ∧ ‖θ−θ₀‖²/L̂(θ₀)` for a target θ.
    AutoTheorem,
    /// `η = base·√H`.
    SqrtH { base: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub step: StepSize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// Keep every iterate; needed by the per-step checks.
    #[serde(default)]
    pub keep_iterates: bool,
}

fn default_record_every() -> usize {
    1
}

impl TrainConfig {
    pub fn gd(eta: f64, k: usize) -> Self {
        TrainConfig {
            optimizer: Optimizer::Gd,
            step: StepSize::Explicit { eta },
            k,
            seed: 0,
            record_every: 1,
            keep_iterates: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.step {
            StepSize::Explicit { eta } if !(eta > 0.0 && eta.is_finite()) => {
                return Err(Error::Invalid(format!("eta = {eta} must be positive")))
            }
            StepSize::SqrtH { base } if !(base > 0.0 && base.is_finite()) => {
                return Err(Error::Invalid(format!("base = {base} must be positive")))
            }
            _ => {}
        }
        if self.record_every == 0 {
            return Err(Error::Invalid("record_every must be at least 1".into()));
        }
        match self.optimizer {
            Optimizer::GdMomentum { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::Invalid("momentum must lie in [0, 1)".into()))
            }
            Optimizer::Adam { beta1, beta2, eps }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) =>
            {
                Err(Error::Invalid("adam needs beta1, beta2 in [0, 1) and eps > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Token norm bound used by the certificate formulas, `R ∨ 1`.
pub fn certificate_r(data: &Dataset) -> f64 {
    data.r().max(1.0)
}

/// The step-size rule of the training theorem for target `th`.
pub fn theorem_eta(data: &Dataset, th: &ModelParams, th0: &ModelParams, k: usize) -> Result<f64> {
    let dist_sq = th.dist(th0)?.powi(2);
    if dist_sq == 0.0 {
        return Err(Error::Invalid("the step-size rule needs a target away from the initialization".into()));
    }
    let r = certificate_r(data);
    let l_target = empirical_risk(data, th)?;
    let l0 = empirical_risk(data, th0)?;
    let eta = 1f64
        .min(1.0 / rho(th, th0, r)?)
        .min(dist_sq / (k.max(1) as f64 * l_target))
        .min(dist_sq / l0);
    Ok(eta)
}

pub fn resolve_eta(cfg: &TrainConfig, data: &Dataset, th0: &ModelParams, target: Option<&ModelParams>) -> Result<f64> {
    match cfg.step {
        StepSize::Explicit { eta } => Ok(eta),
        StepSize::SqrtH { base } => Ok(base * th0.num_heads().sqrt()),
        StepSize::AutoTheorem => {
            let th = target.ok_or_else(|| Error::Invalid("auto_theorem step size needs a target".into()))?;
            theorem_eta(data, th, th0, cfg.k)
        }
    }
}

/// Optional inputs for the recorded metrics.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricContext<'a> {
    pub masks: Option<&'a [RelevantMask]>,
    /// Reference head (planted teacher or target) for the alignments.
    pub planted: Option<&'a HeadParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub min_margin: f64,
    pub grad_norm: f64,
    pub dist_to_init: f64,
    pub avg_w_norm: f64,
    pub avg_u_norm: f64,
    pub attn_rel_mass: Option<f64>,
    pub align_w: Option<f64>,
    pub align_u: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl TraceRow {
    pub const CSV_HEADER: &'static str =
        "iter,train_loss,test_loss,min_margin,grad_norm,dist_to_init,avg_W_norm,avg_U_norm,attn_rel_mass,align_W,align_U";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.train_loss,
            opt(self.test_loss),
            self.min_margin,
            self.grad_norm,
            self.dist_to_init,
            self.avg_w_norm,
            self.avg_u_norm,
            opt(self.attn_rel_mass),
            opt(self.align_w),
            opt(self.align_u)
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTrace {
    pub eta: f64,
    pub optimizer: Optimizer,
    pub rows: Vec<TraceRow>,
    /// `L̂(θ_k)` for every `k = 0..=K` reached.
    pub losses: Vec<f64>,
    /// `‖∇L̂(θ_k)‖` for every `k` reached.
    pub grad_norms: Vec<f64>,
    /// All iterates when `keep_iterates` is set, else empty.
    pub iterates: Vec<ModelParams>,
    pub final_params: ModelParams,
    /// Set when training stopped because the loss exceeded the guard.
    pub diverged: Option<String>,
}

impl TrainTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TraceRow::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    /// Number of completed steps.
    pub fn steps(&self) -> usize {
        self.losses.len().saturating_sub(1)
    }

    /// First iteration whose train loss is at most `level`.
    pub fn first_below(&self, level: f64) -> Option<usize> {
        self.losses.iter().position(|l| *l <= level)
    }
}

pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Metrics of one parameter point.
pub fn trace_metrics(th: &ModelParams, data: &Dataset, ctx: &MetricContext) -> Result<TraceRow> {
    let (loss, g) = risk_and_gradient(data, th)?;
    metrics_row(th, data, ctx, loss, g.norm())
}

fn metrics_row(th: &ModelParams, data: &Dataset, ctx: &MetricContext, loss: f64, grad_norm: f64) -> Result<TraceRow> {
    let m = margins(data, th)?;
    let h = th.num_heads();
    let counts = th.counts();
    let heads = th.heads();
    let sum_w: f64 = heads.iter().zip(counts).map(|(p, c)| c * p.w.frobenius()).sum();
    let sum_u: f64 = heads.iter().zip(counts).map(|(p, c)| c * p.u.frobenius()).sum();
    let attn_rel_mass = match ctx.masks {
        Some(masks) => Some(relevant_mass(th, data, masks)?),
        None => None,
    };
    let (align_w, align_u) = match ctx.planted {
        Some(p) => (Some(alignment(th, |h| &h.w, &p.w)), Some(alignment(th, |h| &h.u, &p.u))),
        None => (None, None),
    };
    Ok(TraceRow {
        iter: 0,
        train_loss: loss,
        test_loss: None,
        min_margin: m.iter().copied().fold(f64::INFINITY, f64::min),
        grad_norm,
        dist_to_init: 0.0,
        avg_w_norm: sum_w / h,
        avg_u_norm: sum_u / h.sqrt(),
        attn_rel_mass,
        align_w,
        align_u,
    })
}

/// `⟨M̃, M̃*⟩/(‖M̃‖‖M̃*‖)` with the reference repeated on every head.
fn alignment(th: &ModelParams, pick: impl Fn(&HeadParams) -> &Matrix, reference: &Matrix) -> f64 {
    let (mut ab, mut aa) = (0.0, 0.0);
    for (h, c) in th.heads().iter().zip(th.counts()) {
        let m = pick(h);
        ab += c * m.inner(reference).unwrap_or(0.0);
        aa += c * m.frobenius().powi(2);
    }
    let bb = th.num_heads() * reference.frobenius().powi(2);
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Mean over samples, heads and query rows of the attention mass on the
/// relevant tokens.
pub fn relevant_mass(th: &ModelParams, data: &Dataset, masks: &[RelevantMask]) -> Result<f64> {
    if masks.len() != data.n() {
        return Err(Error::Dimension("one mask per sample".into()));
    }
    let h = th.num_heads();
    let per = par::map(data.n(), |i| -> Result<f64> {
        let x = &data.examples()[i].x;
        let mut s = 0.0;
        for (head, c) in th.heads().iter().zip(th.counts()) {
            let a = attention_matrix(x, &head.w)?;
            let mut rows = 0.0;
            for t in 0..a.rows() {
                rows += masks[i].0.iter().map(|&j| a[(t, j)]).sum::<f64>();
            }
            s += c * rows / a.rows() as f64;
        }
        Ok(s / h)
    });
    let v = per.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(par::sum_f64(v) / data.n() as f64)
}

struct OptState {
    velocity: Vec<f64>,
    second: Vec<f64>,
    t: i32,
}

fn apply_step(opt: &Optimizer, eta: f64, flat: &mut [f64], grad: &[f64], st: &mut OptState) {
    match *opt {
        Optimizer::Gd => {
            for (x, g) in flat.iter_mut().zip(grad) {
                *x -= eta * g;
            }
        }
        Optimizer::GdMomentum { momentum } => {
            for ((x, g), v) in flat.iter_mut().zip(grad).zip(&mut st.velocity) {
                *v = momentum * *v + g;
                *x -= eta * *v;
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t);
            let c2 = 1.0 - beta2.powi(st.t);
            for (((x, g), m), v) in flat.iter_mut().zip(grad).zip(&mut st.velocity).zip(&mut st.second) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *x -= eta * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// One plain GD step `θ − η∇L̂(θ)`.
pub fn gd_step(data: &Dataset, th: &ModelParams, eta: f64) -> Result<ModelParams> {
    if !(eta > 0.0) {
        return Err(Error::Invalid(format!("eta = {eta} must be positive")));
    }
    let g = risk_and_gradient(data, th)?.1;
    if !g.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let mut out = th.clone();
    out.add_scaled(-eta, &g)?;
    Ok(out)
}

/// Runs `cfg.k` steps from `th0`. `target` is needed by the theorem step-size
/// rule; `eval` supplies the test loss.
pub fn train(
    data: &Dataset,
    th0: &ModelParams,
    cfg: &TrainConfig,
    target: Option<&ModelParams>,
    eval: Option<&Dataset>,
    ctx: &MetricContext,
) -> Result<TrainTrace> {
    cfg.validate()?;
    let eta = resolve_eta(cfg, data, th0, target)?;
    train_with_eta(data, th0, cfg, eta, eval, ctx)
}

pub fn train_with_eta(
    data: &Dataset,
    th0: &ModelParams,
    cfg: &TrainConfig,
    eta: f64,
    eval: Option<&Dataset>,
    ctx: &MetricContext,
) -> Result<TrainTrace> {
    cfg.validate()?;
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Invalid(format!("eta = {eta} must be non-negative")));
    }
    let n = th0.flat_len();
    let mut st = OptState { velocity: vec![0.0; n], second: vec![0.0; n], t: 0 };
    let mut th = th0.clone();
    let mut flat = th.flatten();
    let mut trace = TrainTrace {
        eta,
        optimizer: cfg.optimizer,
        rows: Vec::new(),
        losses: Vec::with_capacity(cfg.k + 1),
        grad_norms: Vec::with_capacity(cfg.k + 1),
        iterates: Vec::new(),
        final_params: th0.clone(),
        diverged: None,
    };
    for k in 0..=cfg.k {
        let (loss, g) = risk_and_gradient(data, &th)?;
        if !g.is_finite() || !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss or gradient at iteration {k}")));
        }
        trace.losses.push(loss);
        trace.grad_norms.push(g.norm());
        if cfg.keep_iterates {
            trace.iterates.push(th.clone());
        }
        if k % cfg.record_every == 0 || k == cfg.k {
            let mut row = metrics_row(&th, data, ctx, loss, *trace.grad_norms.last().unwrap())?;
            row.iter = k;
            row.dist_to_init = th.dist(th0)?;
            if let Some(e) = eval {
                row.test_loss = Some(empirical_risk(e, &th)?);
            }
            trace.rows.push(row);
        }
        if loss > DIVERGENCE_LOSS {
            trace.diverged = Some(format!("train loss {loss} exceeded {DIVERGENCE_LOSS} at iteration {k}"));
            break;
        }
        if k == cfg.k {
            break;
        }
        apply_step(&cfg.optimizer, eta, &mut flat, &g.flatten(), &mut st);
        th = th.with_flat(&flat)?;
    }
    trace.final_params = th;
    Ok(trace)
}

/// Result of the randomized first step from zero.
#[derive(Clone, Debug, PartialEq)]
#[allow(non_snake_case)]
pub struct PhaseOneResult {
    pub theta1: ModelParams,
    /// Sign of each stored head class.
    pub alpha: Vec<f64>,
    /// `p` in the common row `(ζ/4)(μ₊ − μ₋) + p`, when the mixture is known.
    pub p: Option<Vec<f64>>,
    pub P_empirical: Option<f64>,
}

/// Common row of `U_h^(1)` for `α_h = +1`: `(1/(2n)) Σ_i y_i x̄_i`.
fn phase_one_row(data: &Dataset, th0: &ModelParams) -> Result<Vec<f64>> {
    let g = risk_and_gradient(data, th0)?.1;
    let head = &g.heads()[0];
    if head.w.as_slice().iter().any(|v| *v != 0.0) {
        return Err(Error::Numeric("first-phase W gradient is not zero".into()));
    }
    let row = head.u.row(0).to_vec();
    for t in 1..head.u.rows() {
        if head.u.row(t) != row.as_slice() {
            return Err(Error::Numeric("first-phase U gradient rows differ".into()));
        }
    }
    // θ_h = −α_h √H ∇_{θ_h} L̂(0)
    let s = -th0.num_heads().sqrt();
    Ok(row.iter().map(|v| s * v).collect())
}

fn build_phase_one(row: &[f64], t: usize, signs: &[f64], counts: Vec<f64>, spec: Option<&MixtureSpec>) -> Result<PhaseOneResult> {
    let d = row.len();
    let heads = signs
        .iter()
        .map(|a| HeadParams { u: Matrix::from_fn(t, d, |_, j| a * row[j]), w: Matrix::zeros(d, d) })
        .collect();
    let theta1 = ModelParams::tied(heads, counts)?;
    let p = spec.map(|s| {
        let u = s.u_star_vec();
        row.iter().zip(&u).map(|(r, u)| r - s.zeta / 4.0 * u).collect::<Vec<f64>>()
    });
    let pe = p.as_ref().map(|p| norm2(p));
    Ok(PhaseOneResult { theta1, alpha: signs.to_vec(), p, P_empirical: pe })
}

/// `θ_h^(1) = −α_h √H ∇_{θ_h} L̂(0)` with IID signs, `H` untied heads.
pub fn phase_one(data: &Dataset, h: usize, seed: u64, spec: Option<&MixtureSpec>) -> Result<PhaseOneResult> {
    if h == 0 {
        return Err(Error::Invalid("H must be at least 1".into()));
    }
    let zero = ModelParams::replicated(HeadParams::zeros(data.t(), data.d()), h as f64)?;
    let row = phase_one_row(data, &zero)?;
    let mut r = rng(seed);
    let signs: Vec<f64> = (0..h).map(|_| if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    build_phase_one(&row, data.t(), &signs, vec![1.0; h], spec)
}

/// First phase for a large head count stored as two sign classes; the number
/// of positive signs is Binomial(H, 1/2).
pub fn phase_one_tied(data: &Dataset, h: f64, seed: u64, spec: Option<&MixtureSpec>) -> Result<PhaseOneResult> {
    if !(h >= 1.0 && h.is_finite()) {
        return Err(Error::Invalid("H must be finite and at least 1".into()));
    }
    let h = h.round();
    let zero = ModelParams::replicated(HeadParams::zeros(data.t(), data.d()), h)?;
    let row = phase_one_row(data, &zero)?;
    let mut r = rng(seed);
    let plus = if h <= 1e15 {
        Binomial::new(h as u64, 0.5).map_err(|e| Error::Invalid(e.to_string()))?.sample(&mut r) as f64
    } else {
        let z: f64 = r.sample(StandardNormal);
        (h / 2.0 + z * h.sqrt() / 2.0).round().clamp(0.0, h)
    };
    let (mut signs, mut counts) = (Vec::new(), Vec::new());
    for (s, c) in [(1.0, plus), (-1.0, h - plus)] {
        if c >= 1.0 {
            signs.push(s);
            counts.push(c);
        }
    }
    build_phase_one(&row, data.t(), &signs, counts, spec)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DescentStep {
    pub k: usize,
    /// `L̂(θ_{k+1}) − L̂(θ_k)`.
    pub decrease: f64,
    /// `−(η/2)‖∇L̂(θ_k)‖²`.
    pub bound: f64,
    /// `max(β₂(θ_k), β₂(θ_{k+1}))` with the tight coefficients.
    pub rho_k: f64,
    pub precondition: bool,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DescentReport {
    pub steps: Vec<DescentStep>,
    /// Failures among steps meeting `η ≤ 1/ρ_k`.
    pub violations: usize,
    /// Failures among all steps.
    pub raw_violations: usize,
}

/// Checks `L̂(θ_{k+1}) ≤ L̂(θ_k) − (η/2)‖∇L̂(θ_k)‖²` on every recorded step.
pub fn verify_descent(trace: &TrainTrace, data: &Dataset) -> Result<DescentReport> {
    if trace.optimizer != Optimizer::Gd {
        return Err(Error::Invalid("descent is checked for plain GD only".into()));
    }
    if trace.iterates.len() < trace.losses.len() {
        return Err(Error::Invalid("descent check needs keep_iterates".into()));
    }
    let r = certificate_r(data);
    let eta = trace.eta;
    let n = trace.iterates.len().saturating_sub(1);
    let steps = (0..n)
        .map(|k| -> Result<DescentStep> {
            let (a, b) = (&trace.iterates[k], &trace.iterates[k + 1]);
            let decrease = risk_difference(data, a, &b.sub(a)?)?;
            let bound = -0.5 * eta * trace.grad_norms[k].powi(2);
            let rho_k = loss_bounds(r, a).tight.beta2.max(loss_bounds(r, b).tight.beta2);
            Ok(DescentStep { k, decrease, bound, rho_k, precondition: eta * rho_k <= 1.0, holds: decrease <= bound })
        })
        .collect::<Result<Vec<_>>>()?;
    let violations = steps.iter().filter(|s| s.precondition && !s.holds).count();
    let raw_violations = steps.iter().filter(|s| !s.holds).count();
    Ok(DescentReport { steps, violations, raw_violations })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremReport {
    /// Head count and step size meet the theorem's conditions.
    pub certified: bool,
    pub heads_needed: f64,
    pub eta_max: f64,
    /// `(1/K) Σ_{k=1..K} L̂(θ_k)`.
    pub avg_loss: f64,
    /// `2L̂(θ) + 5‖θ−θ₀‖²/(4ηK)`.
    pub avg_loss_bound: f64,
    pub final_dist: f64,
    /// `4‖θ−θ₀‖`.
    pub final_dist_bound: f64,
    /// `max_k ‖θ_k − θ‖`, when iterates were kept.
    pub max_iterate_dist: Option<f64>,
    /// `3‖θ−θ₀‖`.
    pub iterate_bound: f64,
    pub loss_bound_holds: bool,
    pub final_dist_holds: bool,
    pub iterate_bound_holds: Option<bool>,
    pub last_below_average: bool,
}

/// Both sides of the training theorem for target `th`.
pub fn verify_theorem_bounds(trace: &TrainTrace, th: &ModelParams, th0: &ModelParams, data: &Dataset) -> Result<TheoremReport> {
    let k = trace.steps();
    if k == 0 {
        return Err(Error::Invalid("the theorem needs K >= 1 completed steps".into()));
    }
    let dist = th.dist(th0)?;
    let r = certificate_r(data);
    let heads_needed = crate::ntk::theorem_heads_for(th, th0, r)?.train;
    let eta_max = theorem_eta(data, th, th0, k).unwrap_or(0.0);
    let eta = trace.eta;
    let certified = th0.num_heads() >= heads_needed && eta <= eta_max;
    let avg_loss = trace.losses[1..=k].iter().sum::<f64>() / k as f64;
    let avg_loss_bound = 2.0 * empirical_risk(data, th)? + 5.0 * dist * dist / (4.0 * eta * k as f64);
    let final_dist = trace.final_params.dist(th0)?;
    let max_iterate_dist = if trace.iterates.len() == k + 1 {
        let mut m = 0.0f64;
        for it in &trace.iterates[1..] {
            m = m.max(it.dist(th)?);
        }
        Some(m)
    } else {
        None
    };
    Ok(TheoremReport {
        certified,
        heads_needed,
        eta_max,
        avg_loss,
        avg_loss_bound,
        final_dist,
        final_dist_bound: 4.0 * dist,
        max_iterate_dist,
        iterate_bound: 3.0 * dist,
        loss_bound_holds: avg_loss <= avg_loss_bound,
        final_dist_holds: final_dist <= 4.0 * dist,
        iterate_bound_holds: max_iterate_dist.map(|m| m <= 3.0 * dist),
        last_below_average: trace.losses[k] <= avg_loss,
    })
}

/// `2/K + 5(2B_Φ + log K)²/(4γ²ηK)`.
pub fn corollary_train_bound(k: usize, b_phi: f64, gamma: f64, eta: f64) -> f64 {
    let k = k as f64;
    2.0 / k + 5.0 * (2.0 * b_phi + k.ln()).powi(2) / (4.0 * gamma * gamma * eta * k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::LabeledExample;
    use crate::attention::TokenMatrix;
    use crate::datagen::dm1_sample;
    use crate::ntk::{saturation_gamma, TargetParams};
    use crate::objective::risk_gradient;

    fn small(seed: u64, n: usize) -> (Dataset, Vec<RelevantMask>, MixtureSpec) {
        let spec = MixtureSpec::paper(seed);
        let (d, m, _) = dm1_sample(&spec, n).unwrap();
        (d, m, spec)
    }

    #[test]
    fn zero_steps_trace() {
        let (data, _, _) = small(1, 20);
        let th0 = ModelParams::zeros(4, 10, 4);
        let tr = train(&data, &th0, &TrainConfig::gd(1.0, 0), None, None, &MetricContext::default()).unwrap();
        assert_eq!(tr.rows.len(), 1);
        assert_eq!(tr.losses, vec![2f64.ln()]);
        assert_eq!(tr.final_params, th0);
    }

    #[test]
    fn gd_step_algebra() {
        let (data, _, _) = small(2, 2);
        let th0 = ModelParams::zeros(2, 10, 4);
        let one = gd_step(&data, &th0, 0.5).unwrap();
        let loo = Dataset::new(vec![data.examples()[1].clone()]).unwrap();
        // (1/n) normalization: the loo risk is half the one-sample risk.
        let g1 = risk_gradient(&loo, &th0).unwrap().scale(0.5);
        let mut loo_step = th0.clone();
        loo_step.add_scaled(-0.5, &g1).unwrap();
        let g0 = crate::objective::sample_gradient(&data.examples()[0], &th0).unwrap().1;
        let diff = loo_step.sub(&one).unwrap();
        assert!(diff.sub(&g0.scale(0.5 / 2.0)).unwrap().norm() < 1e-15);
        let stationary = ModelParams::zeros(1, 10, 4);
        let sym = Dataset::new(vec![
            data.examples()[0].clone(),
            LabeledExample::new(data.examples()[0].x.clone(), -data.examples()[0].y).unwrap(),
        ])
        .unwrap();
        assert_eq!(gd_step(&sym, &stationary, 1.0).unwrap(), stationary);
    }

    #[test]
    fn constant_step_monotone() {
        let (data, masks, _) = small(3, 100);
        let th0 = ModelParams::zeros(4, 10, 4);
        let ctx = MetricContext { masks: Some(&masks), planted: None };
        let tr = train(&data, &th0, &TrainConfig::gd(1.0, 60), None, None, &ctx).unwrap();
        // a short transient along the shared ν direction precedes monotone decay
        for w in tr.losses[10..].windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(tr.losses[60] < 0.01);
        assert!((tr.rows[0].attn_rel_mass.unwrap() - 0.1).abs() < 1e-12);
        assert!(tr.rows[0].align_w.is_none());
        assert!(tr.to_csv().starts_with(TraceRow::CSV_HEADER));
    }

    #[test]
    fn optimizers_run_and_are_deterministic() {
        let (data, _, _) = small(4, 60);
        let th0 = ModelParams::zeros(2, 10, 4);
        for opt in [Optimizer::momentum(), Optimizer::adam()] {
            let eta = if matches!(opt, Optimizer::Adam { .. }) { 0.06 } else { 0.2 };
            let cfg = TrainConfig { optimizer: opt, step: StepSize::Explicit { eta }, k: 40, seed: 0, record_every: 10, keep_iterates: false };
            let a = train(&data, &th0, &cfg, None, Some(&data), &MetricContext::default()).unwrap();
            let b = train(&data, &th0, &cfg, None, Some(&data), &MetricContext::default()).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.rows.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![0, 10, 20, 30, 40]);
            assert!(a.losses[40] < a.losses[0]);
            assert!((a.rows[4].test_loss.unwrap() - a.losses[40]).abs() < 1e-12 * a.losses[40]);
        }
    }

    #[test]
    fn adam_first_step_is_sign_step() {
        let (data, _, _) = small(5, 30);
        let th0 = ModelParams::replicated(HeadParams::new(Matrix::from_fn(10, 4, |i, j| 0.1 * (i as f64 - j as f64)), Matrix::zeros(4, 4)).unwrap(), 2.0).unwrap();
        let cfg = TrainConfig { optimizer: Optimizer::adam(), step: StepSize::Explicit { eta: 0.01 }, k: 1, seed: 0, record_every: 1, keep_iterates: true };
        let tr = train(&data, &th0, &cfg, None, None, &MetricContext::default()).unwrap();
        let g = risk_gradient(&data, &th0).unwrap().flatten();
        let step: Vec<f64> = tr.iterates[1].flatten().iter().zip(th0.flatten()).map(|(a, b)| a - b).collect();
        for (s, g) in step.iter().zip(&g) {
            let want = -0.01 * g / (g.abs() + 1e-8);
            assert!((s - want).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_guard() {
        let x = TokenMatrix::new(Matrix::from_rows(&[vec![1.0]]).unwrap()).unwrap();
        let data = Dataset::new(vec![LabeledExample::new(x, 1.0).unwrap()]).unwrap();
        let th0 = ModelParams::replicated(HeadParams::new(Matrix::from_rows(&[vec![-3e6]]).unwrap(), Matrix::zeros(1, 1)).unwrap(), 1.0).unwrap();
        let tr = train(&data, &th0, &TrainConfig::gd(1.0, 5), None, None, &MetricContext::default()).unwrap();
        assert!(tr.diverged.is_some());
        assert_eq!(tr.steps(), 0);
    }

    #[test]
    fn phase_one_structure() {
        let (data, _, spec) = small(6, 200);
        let res = phase_one(&data, 8, 3, Some(&spec)).unwrap();
        let heads = res.theta1.heads();
        for (h, a) in heads.iter().zip(&res.alpha) {
            assert!(h.w.as_slice().iter().all(|v| *v == 0.0));
            let r0 = h.u.row(0).to_vec();
            for t in 1..10 {
                assert_eq!(h.u.row(t), r0.as_slice());
            }
            assert_eq!(heads[0].u.scale(res.alpha[0] * a), h.u);
        }
        // independent closed form of the common row
        let n = data.n() as f64;
        let mut row = vec![0.0; 4];
        for e in data.examples() {
            for t in 0..10 {
                for j in 0..4 {
                    row[j] += e.y * e.x.token(t)[j] / (2.0 * n * 10.0);
                }
            }
        }
        let got: Vec<f64> = heads[0].u.row(0).iter().map(|v| v * res.alpha[0]).collect();
        for j in 0..4 {
            assert!((got[j] - row[j]).abs() < 1e-14);
        }
        let u = spec.u_star_vec();
        let p = res.p.unwrap();
        for j in 0..4 {
            assert!((p[j] - (row[j] - 0.025 * u[j])).abs() < 1e-14);
        }
        // one GD step from zero with η = √H on a single positive head
        let th0 = ModelParams::zeros(1, 10, 4);
        let step = gd_step(&data, &th0, 1.0).unwrap();
        assert!(step.heads()[0].u.sub(&Matrix::from_fn(10, 4, |_, j| row[j])).unwrap().frobenius() < 1e-14);
    }

    #[test]
    fn phase_one_label_flip() {
        let (data, _, _) = small(7, 50);
        let flipped = Dataset::new(data.examples().iter().map(|e| LabeledExample::new(e.x.clone(), -e.y).unwrap()).collect()).unwrap();
        let a = phase_one(&data, 3, 1, None).unwrap();
        let b = phase_one(&flipped, 3, 1, None).unwrap();
        assert_eq!(a.alpha, b.alpha);
        for (x, y) in a.theta1.heads().iter().zip(b.theta1.heads()) {
            assert_eq!(x.u.scale(-1.0), y.u);
        }
    }

    #[test]
    fn phase_one_zero_noise_balanced() {
        let spec = MixtureSpec::paper(8).zero_noise();
        let (pool, _, _) = dm1_sample(&spec, 400).unwrap();
        let pos: Vec<_> = pool.examples().iter().filter(|e| e.y > 0.0).take(100).cloned().collect();
        let neg: Vec<_> = pool.examples().iter().filter(|e| e.y < 0.0).take(100).cloned().collect();
        let data = Dataset::new(pos.into_iter().chain(neg).collect()).unwrap();
        let res = phase_one(&data, 1, 0, Some(&spec)).unwrap();
        let p = res.p.unwrap();
        // no label component: only the y-weighted ν mean remains
        assert!(p[0].abs() < 1e-15 && p[1].abs() < 1e-15);
        let mut nu = vec![0.0; 4];
        for e in data.examples() {
            for t in 0..10 {
                if e.x.token(t)[0] == 0.0 && e.x.token(t)[1] == 0.0 {
                    for j in 0..4 {
                        nu[j] += e.y * e.x.token(t)[j];
                    }
                }
            }
        }
        let scale = (1.0 - spec.zeta) / 2.0 / (data.n() as f64 * 9.0);
        for j in 2..4 {
            assert!((p[j] - scale * nu[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn phase_one_tied_counts() {
        let (data, _, spec) = small(9, 30);
        let res = phase_one_tied(&data, 1e18, 4, Some(&spec)).unwrap();
        assert_eq!(res.theta1.num_heads(), 1e18);
        assert_eq!(res.alpha, vec![1.0, -1.0]);
        let small = phase_one_tied(&data, 1.0, 4, None).unwrap();
        assert_eq!(small.theta1.heads().len(), 1);
    }

    #[test]
    fn theorem_eta_rule() {
        let (data, _, spec) = small(10, 40);
        let th0 = ModelParams::zeros(1, 10, 4);
        let tp = TargetParams::new(&spec);
        let target = ModelParams::new(vec![tp.head(1.0).scale(3.0)]).unwrap();
        let eta = theorem_eta(&data, &target, &th0, 50).unwrap();
        let r = certificate_r(&data);
        assert!(eta <= 1.0 / rho(&target, &th0, r).unwrap() && eta > 0.0);
        assert!(theorem_eta(&data, &th0, &th0, 5).is_err());
        let cfg = TrainConfig { step: StepSize::AutoTheorem, ..TrainConfig::gd(1.0, 5) };
        assert!(train(&data, &th0, &cfg, None, None, &MetricContext::default()).is_err());
        let cfg = TrainConfig { step: StepSize::SqrtH { base: 0.5 }, ..TrainConfig::gd(1.0, 1) };
        let four = ModelParams::zeros(4, 10, 4);
        assert_eq!(train(&data, &four, &cfg, None, None, &MetricContext::default()).unwrap().eta, 1.0);
    }

    #[test]
    fn descent_negative_control() {
        let x = TokenMatrix::new(Matrix::from_rows(&[vec![1.0]]).unwrap()).unwrap();
        let data = Dataset::new(vec![LabeledExample::new(x, 1.0).unwrap()]).unwrap();
        let th0 = ModelParams::zeros(1, 1, 1);
        let rho0 = loss_bounds(1.0, &th0).tight.beta2;
        let cfg = TrainConfig { keep_iterates: true, ..TrainConfig::gd(100.0 / rho0, 3) };
        let tr = train(&data, &th0, &cfg, None, None, &MetricContext::default()).unwrap();
        let rep = verify_descent(&tr, &data).unwrap();
        assert!(rep.raw_violations > 0);
        let cfg = TrainConfig { keep_iterates: true, ..TrainConfig::gd(0.5 / rho0, 3) };
        let tr = train(&data, &th0, &cfg, None, None, &MetricContext::default()).unwrap();
        let rep = verify_descent(&tr, &data).unwrap();
        assert_eq!(rep.violations, 0);
        assert!(rep.steps[0].precondition && rep.steps[0].holds);
    }

    #[test]
    fn theorem_bounds_trivial_target() {
        let (data, _, _) = small(11, 30);
        let th0 = ModelParams::zeros(2, 10, 4);
        let cfg = TrainConfig { keep_iterates: true, ..TrainConfig::gd(0.05, 10) };
        let tr = train(&data, &th0, &cfg, None, None, &MetricContext::default()).unwrap();
        let rep = verify_theorem_bounds(&tr, &tr.final_params, &th0, &data).unwrap();
        assert!(rep.loss_bound_holds && rep.last_below_average);
    }

    #[test]
    fn metrics_alignment_and_mass() {
        let spec = MixtureSpec::paper(12).zero_noise();
        let (data, masks, _) = dm1_sample(&spec, 50).unwrap();
        let tp = TargetParams::new(&spec);
        let planted = HeadParams { u: tp.u_star.clone(), w: tp.w_star.clone() };
        let th = ModelParams::tied(vec![planted.scale(2.0)], vec![7.0]).unwrap();
        let ctx = MetricContext { masks: Some(&masks), planted: Some(&planted) };
        let row = trace_metrics(&th, &data, &ctx).unwrap();
        assert!((row.align_w.unwrap() - 1.0).abs() < 1e-12 && (row.align_u.unwrap() - 1.0).abs() < 1e-12);
        let g = saturation_gamma(0.01, 2.0, 2, 0.1).unwrap();
        let sat = ModelParams::new(vec![HeadParams { u: tp.u_opt.clone(), w: tp.w_opt.scale(g) }; 2]).unwrap();
        assert!(trace_metrics(&sat, &data, &ctx).unwrap().attn_rel_mass.unwrap() >= 0.99);
        let row = trace_metrics(&ModelParams::zeros(3, 10, 4), &data, &ctx).unwrap();
        assert_eq!(row.attn_rel_mass, Some(0.1));
    }

    #[test]
    fn corollary_bound_decreasing_in_k() {
        let a = corollary_train_bound(100, 0.1, 0.5, 0.1);
        let b = corollary_train_bound(10000, 0.1, 0.5, 0.1);
        assert!(b < a);
    }
}
