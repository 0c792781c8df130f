//! Leave-one-out GD runs, on-average model stability and the per-step
//! expansiveness recursion.

use serde::Serialize;

use crate::attention::ModelParams;
use crate::objective::{beta1_ball, empirical_risk, loss_bounds, risk_and_gradient, sample_gradient, sample_losses, Dataset};
use crate::training::{certificate_r, resolve_eta, TrainConfig};
use crate::{par, Error, Result};

/// Gradient of `L̂^{¬i}(θ) = (1/n) Σ_{j≠i} ℓ_j(θ)`.
fn loo_gradient(data: &Dataset, loo: &Dataset, th: &ModelParams) -> Result<ModelParams> {
    let g = risk_and_gradient(loo, th)?.1;
    Ok(g.scale(loo.n() as f64 / data.n() as f64))
}

fn check_index(data: &Dataset, i: usize) -> Result<()> {
    if i >= data.n() {
        return Err(Error::Invalid(format!("sample index {i} out of range for n = {}", data.n())));
    }
    if data.n() < 2 {
        return Err(Error::Invalid("leave-one-out needs n >= 2".into()));
    }
    Ok(())
}

/// `K` GD steps on the leave-one-out risk from `th0`; returns every iterate.
pub fn loo_trajectory(data: &Dataset, i: usize, th0: &ModelParams, eta: f64, k: usize) -> Result<Vec<ModelParams>> {
    check_index(data, i)?;
    let loo = data.without(i)?;
    let mut th = th0.clone();
    let mut out = Vec::with_capacity(k + 1);
    out.push(th.clone());
    for _ in 0..k {
        let g = loo_gradient(data, &loo, &th)?;
        if !g.is_finite() {
            return Err(Error::Numeric("non-finite leave-one-out gradient".into()));
        }
        th.add_scaled(-eta, &g)?;
        out.push(th.clone());
    }
    Ok(out)
}

/// Final leave-one-out iterate `θ_K^{¬i}`.
pub fn loo_train(data: &Dataset, i: usize, th0: &ModelParams, eta: f64, k: usize) -> Result<ModelParams> {
    Ok(loo_trajectory(data, i, th0, eta, k)?.pop().unwrap())
}

/// Full-data GD iterates `θ_0..θ_K`.
pub fn gd_trajectory(data: &Dataset, th0: &ModelParams, eta: f64, k: usize) -> Result<Vec<ModelParams>> {
    let mut th = th0.clone();
    let mut out = Vec::with_capacity(k + 1);
    out.push(th.clone());
    for _ in 0..k {
        let g = risk_and_gradient(data, &th)?.1;
        if !g.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        th.add_scaled(-eta, &g)?;
        out.push(th.clone());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityRow {
    pub k: usize,
    /// `(1/n) Σ_i ‖θ_k − θ_k^{¬i}‖`.
    pub avg_stability: f64,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    /// `L_test(θ_k) − L̂(θ_k)`.
    pub gap_estimate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[allow(non_snake_case)]
pub struct StabilityReport {
    pub n: usize,
    pub eta: f64,
    pub rows: Vec<StabilityRow>,
    /// `β̃₁(θ)` at the target.
    pub lipschitz_G: Option<f64>,
    /// `(4/n)(2K L̂(θ) + 9‖θ−θ₀‖²/(4η))`.
    pub bound_rhs: Option<f64>,
    /// `(2ηβ̃₁(θ)/n)(2K L̂(θ) + 9‖θ−θ₀‖²/(4η))`.
    pub stability_rhs: Option<f64>,
}

impl StabilityReport {
    pub const CSV_HEADER: &'static str = "k,avg_stability,train_loss,test_loss,gap_estimate,lipschitz_G,bound_rhs,stability_rhs";

    pub fn to_csv(&self) -> String {
        let o = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.k,
                r.avg_stability,
                r.train_loss,
                o(r.test_loss),
                o(r.gap_estimate),
                o(self.lipschitz_G),
                o(self.bound_rhs),
                o(self.stability_rhs)
            ));
        }
        s
    }

    pub fn last(&self) -> &StabilityRow {
        self.rows.last().expect("a report has at least one row")
    }
}

/// Runs the full GD trajectory and all `n` leave-one-out trajectories, and
/// records the on-average model stability every `cfg.record_every` steps.
/// `cfg` must describe plain GD.
pub fn avg_model_stability(
    data: &Dataset,
    th0: &ModelParams,
    cfg: &TrainConfig,
    test: Option<&Dataset>,
    target: Option<&ModelParams>,
) -> Result<StabilityReport> {
    cfg.validate()?;
    if cfg.optimizer != crate::training::Optimizer::Gd {
        return Err(Error::Invalid("stability is defined for plain GD".into()));
    }
    let eta = resolve_eta(cfg, data, th0, target)?;
    stability_with_eta(data, th0, eta, cfg.k, cfg.record_every, test, target)
}

pub fn stability_with_eta(
    data: &Dataset,
    th0: &ModelParams,
    eta: f64,
    k: usize,
    record_every: usize,
    test: Option<&Dataset>,
    target: Option<&ModelParams>,
) -> Result<StabilityReport> {
    let n = data.n();
    if n < 2 {
        return Err(Error::Invalid("leave-one-out needs n >= 2".into()));
    }
    let every = record_every.max(1);
    let checkpoints: Vec<usize> = (0..=k).filter(|j| j % every == 0 || *j == k).collect();
    let full = gd_trajectory(data, th0, eta, k)?;
    let per_i = par::map(n, |i| -> Result<Vec<f64>> {
        let traj = loo_trajectory(data, i, th0, eta, k)?;
        checkpoints.iter().map(|&j| full[j].dist(&traj[j])).collect()
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(checkpoints.len());
    for (c, &j) in checkpoints.iter().enumerate() {
        let avg = per_i.iter().map(|v| v[c]).sum::<f64>() / n as f64;
        let train_loss = empirical_risk(data, &full[j])?;
        let test_loss = match test {
            Some(t) => Some(empirical_risk(t, &full[j])?),
            None => None,
        };
        rows.push(StabilityRow { k: j, avg_stability: avg, train_loss, test_loss, gap_estimate: test_loss.map(|t| t - train_loss) });
    }
    let (lipschitz_g, bound_rhs, stability_rhs) = match target {
        Some(th) => {
            let r = certificate_r(data);
            let g = beta1_ball(th, th0, r)?;
            let dist = th.dist(th0)?;
            let bracket = 2.0 * k as f64 * empirical_risk(data, th)? + 9.0 * dist * dist / (4.0 * eta);
            (Some(g), Some(4.0 / n as f64 * bracket), Some(2.0 * eta * g / n as f64 * bracket))
        }
        None => (None, None, None),
    };
    Ok(StabilityReport { n, eta, rows, lipschitz_G: lipschitz_g, bound_rhs, stability_rhs })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecursionStep {
    pub k: usize,
    /// `‖θ_{k+1} − θ_{k+1}^{¬i}‖`.
    pub lhs: f64,
    /// `factor·‖θ_k − θ_k^{¬i}‖ + η β₁(θ_k) ℓ_i(θ_k)/n`.
    pub rhs: f64,
    pub factor: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecursionReport {
    pub steps: Vec<RecursionStep>,
    pub violations: usize,
}

/// Points on the segment grid used for the expansiveness maximum.
pub const SEGMENT_GRID: usize = 101;

/// Checks `‖θ_{k+1}−θ_{k+1}^{¬i}‖ ≤ max_α{(1 + ηβ₃(θ_α)L̂^{¬i}(θ_α)/√H) ∨ ηβ₂(θ_α)}·‖θ_k−θ_k^{¬i}‖
/// + ηβ₁(θ_k)ℓ_i(θ_k)/n` at every step, with the maximum over a 101-point grid.
pub fn check_recursion(data: &Dataset, i: usize, th0: &ModelParams, eta: f64, k: usize) -> Result<RecursionReport> {
    check_index(data, i)?;
    let n = data.n() as f64;
    let r = certificate_r(data);
    let loo = data.without(i)?;
    let full = gd_trajectory(data, th0, eta, k)?;
    let other = loo_trajectory(data, i, th0, eta, k)?;
    let h = th0.num_heads();
    let mut steps = Vec::with_capacity(k);
    for j in 0..k {
        let (a, b) = (&full[j], &other[j]);
        let mut factor = 0.0f64;
        for g in 0..SEGMENT_GRID {
            let p = b.lerp(a, g as f64 / (SEGMENT_GRID - 1) as f64)?;
            let lb = loss_bounds(r, &p).loose;
            let loo_risk = empirical_risk(&loo, &p)? * loo.n() as f64 / n;
            factor = factor.max((1.0 + eta * lb.beta3 / h.sqrt() * loo_risk).max(eta * lb.beta2));
        }
        let li = sample_losses(&Dataset::new(vec![data.examples()[i].clone()])?, a)?[0];
        let beta1 = loss_bounds(r, a).loose.beta1;
        let rhs = factor * a.dist(b)? + eta * beta1 * li / n;
        let lhs = full[j + 1].dist(&other[j + 1])?;
        steps.push(RecursionStep { k: j, lhs, rhs, factor, holds: lhs <= rhs });
    }
    let violations = steps.iter().filter(|s| !s.holds).count();
    Ok(RecursionReport { steps, violations })
}

/// `(η/n)∇ℓ_i(θ₀)`, the one-step difference between full and loo runs.
pub fn one_step_difference(data: &Dataset, i: usize, th0: &ModelParams, eta: f64) -> Result<ModelParams> {
    check_index(data, i)?;
    Ok(sample_gradient(&data.examples()[i], th0)?.1.scale(eta / data.n() as f64))
}
