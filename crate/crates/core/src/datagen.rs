//! Synthetic data: the sparse token mixture (DM1) and the planted attention
//! teacher (DM2), plus the linear baseline margin.

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::attention::{forward_single, HeadParams, LabeledExample, TokenMatrix};
use crate::linalg::{dot, norm2, stream_rng, Matrix, Rng};
use crate::objective::Dataset;
use crate::{par, Error, Result};

/// A-priori caps on the noise, used by `enforce_bounds`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseCaps {
    pub z_mu: f64,
    pub z_nu: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub d: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "S")]
    pub s: f64,
    pub zeta: f64,
    pub sigma: f64,
    /// When set, noise vectors are redrawn until they satisfy the caps.
    #[serde(default)]
    pub enforce_bounds: Option<NoiseCaps>,
    /// Fixed relevant positions instead of a uniform random subset.
    #[serde(default)]
    pub fixed_mask: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
}

impl MixtureSpec {
    /// T=10, ζ=0.1, d=4, M=2, S=2, σ=0.1.
    pub fn paper(seed: u64) -> Self {
        MixtureSpec {
            d: 4,
            t: 10,
            m: 2,
            s: 2.0,
            zeta: 0.1,
            sigma: 0.1,
            enforce_bounds: None,
            fixed_mask: None,
            seed,
        }
    }

    pub fn zero_noise(mut self) -> Self {
        self.sigma = 0.0;
        self
    }

    /// `round(ζT)` with halves rounded up.
    pub fn num_relevant(&self) -> usize {
        (self.zeta * self.t as f64 + 0.5).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        let k = self.num_relevant();
        if k < 1 || k + 1 > self.t {
            return Err(Error::Invalid(format!(
                "zeta: round(zeta*T) = {k} must lie in [1, T-1] for T = {}",
                self.t
            )));
        }
        Ok(())
    }

    fn validate_shape(&self) -> Result<()> {
        if self.m < 1 || self.d < self.m + 2 {
            return Err(Error::Invalid(format!("d: need d >= M + 2 and M >= 1, got d = {}, M = {}", self.d, self.m)));
        }
        if self.t < 1 {
            return Err(Error::Invalid("T: must be at least 1".into()));
        }
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(Error::Invalid("S: must be positive".into()));
        }
        if !(self.zeta >= 0.0 && self.zeta <= 1.0) {
            return Err(Error::Invalid("zeta: must lie in [0, 1]".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Invalid("sigma: must be non-negative".into()));
        }
        if let Some(mask) = &self.fixed_mask {
            if mask.len() != self.num_relevant() || mask.iter().any(|&i| i >= self.t) {
                return Err(Error::Invalid("fixed_mask: needs round(zeta*T) distinct positions below T".into()));
            }
            let mut m = mask.clone();
            m.sort_unstable();
            m.dedup();
            if m.len() != mask.len() {
                return Err(Error::Invalid("fixed_mask: positions must be distinct".into()));
            }
        }
        Ok(())
    }

    /// `μ_y = S e_0` for y=+1 and `S e_1` for y=−1.
    pub fn mu(&self, y: f64) -> Vec<f64> {
        self.basis(if y > 0.0 { 0 } else { 1 })
    }

    /// `ν_ℓ = S e_{2+ℓ}`.
    pub fn nu(&self, l: usize) -> Vec<f64> {
        self.basis(2 + l)
    }

    fn basis(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.d];
        v[i] = self.s;
        v
    }

    /// `μ₊ − μ₋`.
    pub fn u_star_vec(&self) -> Vec<f64> {
        let mut v = self.mu(1.0);
        v[1] = -self.s;
        v
    }
}

/// Sample-level noise magnitudes and the induced token-norm bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseBounds {
    pub z_mu: f64,
    pub z_nu: f64,
    pub z: f64,
    pub r: f64,
}

impl NoiseBounds {
    pub fn new(spec: &MixtureSpec, z_mu: f64, z_nu: f64, z: f64) -> Self {
        let r = (spec.s * spec.s + z * z + 2.0 * z_nu / spec.m as f64).sqrt();
        NoiseBounds { z_mu, z_nu, z, r }
    }
}

/// Positions of the label-relevant tokens of one example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevantMask(pub Vec<usize>);

impl RelevantMask {
    pub fn contains(&self, t: usize) -> bool {
        self.0.contains(&t)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

struct Dm1Draw {
    example: LabeledExample,
    mask: RelevantMask,
    z_mu: f64,
    z_nu: f64,
    z: f64,
}

const MAX_NOISE_REDRAWS: usize = 100_000;

fn draw_noise(spec: &MixtureSpec, r: &mut Rng) -> Result<Vec<f64>> {
    for _ in 0..MAX_NOISE_REDRAWS {
        let z: Vec<f64> = (0..spec.d).map(|_| spec.sigma * r.sample::<f64, _>(StandardNormal)).collect();
        let Some(caps) = spec.enforce_bounds else {
            return Ok(z);
        };
        let ok_mu = dot(&z, &spec.mu(1.0)).abs() <= caps.z_mu && dot(&z, &spec.mu(-1.0)).abs() <= caps.z_mu;
        let ok_nu = (0..spec.m).all(|l| dot(&z, &spec.nu(l)).abs() <= caps.z_nu / spec.m as f64);
        if ok_mu && ok_nu && norm2(&z) <= caps.z {
            return Ok(z);
        }
    }
    Err(Error::Invalid("enforce_bounds: noise caps reject essentially every draw".into()))
}

fn draw_dm1(spec: &MixtureSpec, i: usize) -> Result<Dm1Draw> {
    let mut r = stream_rng(spec.seed, i as u64);
    let y = if r.random_bool(0.5) { 1.0 } else { -1.0 };
    let k = spec.num_relevant().min(spec.t);
    let mut mask = match &spec.fixed_mask {
        Some(m) => m.clone(),
        None => sample_indices(&mut r, spec.t, k).into_vec(),
    };
    mask.sort_unstable();
    let mu = spec.mu(y);
    let mut x = Matrix::zeros(spec.t, spec.d);
    let (mut z_mu, mut z_nu, mut z_max) = (0.0f64, 0.0f64, 0.0f64);
    for t in 0..spec.t {
        if mask.binary_search(&t).is_ok() {
            x.row_mut(t).copy_from_slice(&mu);
            continue;
        }
        let j = r.random_range(0..spec.m);
        let z = draw_noise(spec, &mut r)?;
        let nu = spec.nu(j);
        for c in 0..spec.d {
            x[(t, c)] = nu[c] + z[c];
        }
        z_mu = z_mu.max(dot(&z, &spec.mu(1.0)).abs()).max(dot(&z, &spec.mu(-1.0)).abs());
        for l in 0..spec.m {
            z_nu = z_nu.max(spec.m as f64 * dot(&z, &spec.nu(l)).abs());
        }
        z_max = z_max.max(norm2(&z));
    }
    Ok(Dm1Draw {
        example: LabeledExample::new(TokenMatrix::new(x)?, y)?,
        mask: RelevantMask(mask),
        z_mu,
        z_nu,
        z: z_max,
    })
}

/// Example `i` of the stream defined by `spec.seed`.
pub fn dm1_example(spec: &MixtureSpec, i: usize) -> Result<(LabeledExample, RelevantMask)> {
    spec.validate()?;
    let d = draw_dm1(spec, i)?;
    Ok((d.example, d.mask))
}

pub fn dm1_sample(spec: &MixtureSpec, n: usize) -> Result<(Dataset, Vec<RelevantMask>, NoiseBounds)> {
    spec.validate()?;
    dm1_sample_range(spec, 0, n)
}

/// Examples `start..start+n` of the stream; disjoint ranges give independent sets.
pub fn dm1_sample_range(spec: &MixtureSpec, start: usize, n: usize) -> Result<(Dataset, Vec<RelevantMask>, NoiseBounds)> {
    spec.validate()?;
    sample_unchecked(spec, start, n)
}

fn sample_unchecked(spec: &MixtureSpec, start: usize, n: usize) -> Result<(Dataset, Vec<RelevantMask>, NoiseBounds)> {
    if n == 0 {
        return Err(Error::Invalid("n: must be at least 1".into()));
    }
    let draws = par::map(n, |i| draw_dm1(spec, start + i)).into_iter().collect::<Result<Vec<_>>>()?;
    let (mut z_mu, mut z_nu, mut z) = (0.0f64, 0.0f64, 0.0f64);
    let mut ex = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for d in draws {
        z_mu = z_mu.max(d.z_mu);
        z_nu = z_nu.max(d.z_nu);
        z = z.max(d.z);
        ex.push(d.example);
        masks.push(d.mask);
    }
    let bounds = match spec.enforce_bounds {
        Some(c) => NoiseBounds::new(spec, c.z_mu, c.z_nu, c.z),
        None => NoiseBounds::new(spec, z_mu, z_nu, z),
    };
    Ok((Dataset::new(ex)?, masks, bounds))
}

/// Planted-teacher data: Gaussian tokens labelled by `sign Φ(X; W*, U*)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedSpec {
    pub d: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "W_star")]
    pub w_star: Matrix,
    #[serde(rename = "U_star")]
    pub u_star: Matrix,
    pub margin_floor: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PlantedSpec {
    /// Teacher built like the mixture targets with unit-norm patterns:
    /// `U* = u_scale·1(e₀ − e₁)ᵀ/√(2T)` and
    /// `W* = w_scale·(e₀e₀ᵀ + e₁e₁ᵀ + Σ_ℓ e_{2+ℓ}(e₀ + e₁)ᵀ)/√(2(d−1))`.
    pub fn mixture_teacher(d: usize, t: usize, w_scale: f64, u_scale: f64, margin_floor: f64, seed: u64) -> Result<Self> {
        if d < 3 {
            return Err(Error::Invalid("d: the mixture-style teacher needs d >= 3".into()));
        }
        let mix = MixtureSpec { d, t, m: d - 2, s: 1.0, zeta: 0.5, sigma: 0.0, enforce_bounds: None, fixed_mask: None, seed };
        let tp = crate::ntk::TargetParams::new(&mix);
        Ok(PlantedSpec {
            d,
            t,
            w_star: tp.w_opt.scale(w_scale),
            u_star: tp.u_opt.scale(u_scale),
            margin_floor,
            seed,
        })
    }

    /// d=5, T=10, margin floor 0.2 with the mixture-style teacher.
    pub fn paper(seed: u64) -> Self {
        PlantedSpec::mixture_teacher(5, 10, 4.0, 2.0, 0.2, seed).unwrap()
    }

    pub fn teacher(&self) -> Result<HeadParams> {
        HeadParams::new(self.u_star.clone(), self.w_star.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.u_star.shape() != (self.t, self.d) || self.w_star.shape() != (self.d, self.d) {
            return Err(Error::Invalid("U_star/W_star: shapes must be (T, d) and (d, d)".into()));
        }
        if !(self.margin_floor >= 0.0 && self.margin_floor.is_finite()) {
            return Err(Error::Invalid("margin_floor: must be non-negative".into()));
        }
        Ok(())
    }
}

/// Consecutive rejections after which the margin floor is declared infeasible
/// (acceptance rate below 1%).
pub const DM2_REJECTION_WINDOW: usize = 2000;

pub fn dm2_example(spec: &PlantedSpec, i: usize) -> Result<LabeledExample> {
    let teacher = spec.teacher()?;
    let mut r = stream_rng(spec.seed, i as u64);
    let mut rejected = 0;
    loop {
        let x = TokenMatrix::new(Matrix::from_fn(spec.t, spec.d, |_, _| r.sample(StandardNormal)))?;
        let f = forward_single(&x, &teacher)?;
        if f.abs() > spec.margin_floor && f != 0.0 {
            return LabeledExample::new(x, f.signum());
        }
        rejected += 1;
        if rejected >= DM2_REJECTION_WINDOW {
            return Err(Error::Invalid(format!(
                "margin_floor: {DM2_REJECTION_WINDOW} consecutive draws rejected; the floor {} is too large for this teacher",
                spec.margin_floor
            )));
        }
    }
}

pub fn dm2_sample(spec: &PlantedSpec, n: usize) -> Result<Dataset> {
    dm2_sample_range(spec, 0, n)
}

pub fn dm2_sample_range(spec: &PlantedSpec, start: usize, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Invalid("n: must be at least 1".into()));
    }
    let ex = par::map(n, |i| dm2_example(spec, start + i)).into_iter().collect::<Result<Vec<_>>>()?;
    Dataset::new(ex)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinearMargin {
    /// `(S√T/√2)(ζ − 2(1−ζ)Z_μ/S²)`.
    pub closed_form: f64,
    /// `min_i y_i ⟨Ū⋆, X_i⟩` over the supplied data, if any.
    pub empirical_min: Option<f64>,
}

pub fn gamma_lin_value(spec: &MixtureSpec, bounds: &NoiseBounds) -> f64 {
    let (s, t, z) = (spec.s, spec.t as f64, spec.zeta);
    s * t.sqrt() / 2f64.sqrt() * (z - 2.0 * (1.0 - z) * bounds.z_mu / (s * s))
}

/// Linear-baseline margin, with the empirical oracle-classifier margin when
/// data is supplied.
pub fn gamma_lin(spec: &MixtureSpec, bounds: &NoiseBounds, data: Option<&Dataset>) -> LinearMargin {
    let empirical_min = data.map(|data| {
        let u = spec.u_star_vec();
        let scale = 1.0 / (spec.s * (2.0 * spec.t as f64).sqrt());
        data.examples()
            .iter()
            .map(|e| {
                let s: f64 = (0..e.x.t()).map(|t| dot(&u, e.x.token(t))).sum();
                e.y * s * scale
            })
            .fold(f64::INFINITY, f64::min)
    });
    LinearMargin { closed_form: gamma_lin_value(spec, bounds), empirical_min }
}

#[derive(Serialize, Deserialize)]
struct ExampleLine {
    y: f64,
    #[serde(rename = "X")]
    x: Matrix,
}

/// One `{"y": …, "X": [[…]]}` object per line.
pub fn write_jsonl(data: &Dataset, mut w: impl Write) -> Result<()> {
    for e in data.examples() {
        let line = ExampleLine { y: e.y, x: e.x.x().clone() };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Dataset> {
    let mut ex = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: ExampleLine = serde_json::from_str(&line)?;
        ex.push(LabeledExample::new(TokenMatrix::new(l.x)?, l.y)?);
    }
    Dataset::new(ex)
}

/// Mask sidecar: one JSON array of positions per line.
pub fn write_masks(masks: &[RelevantMask], mut w: impl Write) -> Result<()> {
    for m in masks {
        serde_json::to_writer(&mut w, &m.0)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_masks(r: impl BufRead) -> Result<Vec<RelevantMask>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(RelevantMask(serde_json::from_str(&line)?));
        }
    }
    Ok(out)
}
