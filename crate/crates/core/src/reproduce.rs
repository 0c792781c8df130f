//! Synthetic-figure experiments: configs, multi-trial runs over a head grid,
//! per-trial and aggregate CSV, and SVG charts of the mean curves.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{HeadParams, ModelParams};
use crate::datagen::{dm1_sample, dm1_sample_range, dm2_sample, dm2_sample_range, MixtureSpec, PlantedSpec, RelevantMask};
use crate::ntk::TargetParams;
use crate::objective::Dataset;
use crate::svg::LineChart;
use crate::training::{train, MetricContext, Optimizer, StepSize, TrainConfig, TrainTrace};
use crate::{par, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Figure {
    ContextGd,
    ContextGdSqrtH,
    ContextAdam,
    PlantedGd,
    PlantedMomentum,
    PlantedAdam,
}

impl Figure {
    pub const ALL: [Figure; 6] = [
        Figure::ContextGd,
        Figure::ContextGdSqrtH,
        Figure::ContextAdam,
        Figure::PlantedGd,
        Figure::PlantedMomentum,
        Figure::PlantedAdam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Figure::ContextGd => "context-gd",
            Figure::ContextGdSqrtH => "context-gd-sqrtH",
            Figure::ContextAdam => "context-adam",
            Figure::PlantedGd => "planted-gd",
            Figure::PlantedMomentum => "planted-momentum",
            Figure::PlantedAdam => "planted-adam",
        }
    }

    /// Default experiment for this figure; trial `i` uses `seed + i`.
    pub fn config(self, seed: u64) -> ExperimentConfig {
        let (optimizer, step) = match self {
            Figure::ContextGd => (Optimizer::Gd, StepSize::Explicit { eta: 1.0 }),
            Figure::ContextGdSqrtH | Figure::PlantedGd => (Optimizer::Gd, StepSize::SqrtH { base: 1.0 }),
            Figure::PlantedMomentum => (Optimizer::momentum(), StepSize::SqrtH { base: 0.1 }),
            Figure::ContextAdam | Figure::PlantedAdam => (Optimizer::adam(), StepSize::Explicit { eta: 0.06 }),
        };
        let context = matches!(self, Figure::ContextGd | Figure::ContextGdSqrtH | Figure::ContextAdam);
        let (data, d, n, n_test, k, every) = if context {
            (DataConfig::Mixture(MixtureSpec::paper(seed)), 4, 100, 300, 200, 1)
        } else {
            (DataConfig::Planted(PlantedSpec::paper(seed)), 5, 1000, 3000, 300, 10)
        };
        ExperimentConfig {
            data,
            model: ModelConfig { h: vec![1, 4, 16], t: 10, d },
            train: TrainConfig { optimizer, step, k, seed, record_every: every, keep_iterates: false },
            n,
            n_test,
            trials: 5,
            outputs: None,
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Figure::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| {
            let names: Vec<_> = Figure::ALL.iter().map(|f| f.name()).collect();
            Error::Invalid(format!("figure: unknown '{s}', expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataConfig {
    Mixture(MixtureSpec),
    Planted(PlantedSpec),
}

impl DataConfig {
    fn seed(&self) -> u64 {
        match self {
            DataConfig::Mixture(s) => s.seed,
            DataConfig::Planted(s) => s.seed,
        }
    }

    fn with_seed(&self, seed: u64) -> DataConfig {
        let mut c = self.clone();
        match &mut c {
            DataConfig::Mixture(s) => s.seed = seed,
            DataConfig::Planted(s) => s.seed = seed,
        }
        c
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            DataConfig::Mixture(s) => (s.t, s.d),
            DataConfig::Planted(s) => (s.t, s.d),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "H")]
    pub h: Vec<usize>,
    #[serde(rename = "T")]
    pub t: usize,
    pub d: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training-set size.
    pub n: usize,
    #[serde(default)]
    pub n_test: usize,
    pub trials: usize,
    #[serde(default)]
    pub outputs: Option<String>,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataConfig::Mixture(s) => s.validate()?,
            DataConfig::Planted(s) => s.validate()?,
        }
        if self.data.dims() != (self.model.t, self.model.d) {
            return Err(Error::Invalid(format!(
                "model: T = {}, d = {} disagree with the data spec ({:?})",
                self.model.t,
                self.model.d,
                self.data.dims()
            )));
        }
        if self.model.h.is_empty() || self.model.h.contains(&0) {
            return Err(Error::Invalid("model.H: needs at least one positive head count".into()));
        }
        if self.trials == 0 {
            return Err(Error::Invalid("trials: must be at least 1".into()));
        }
        if self.n == 0 {
            return Err(Error::Invalid("n: must be at least 1".into()));
        }
        if self.train.step == StepSize::AutoTheorem {
            return Err(Error::Invalid("train.step: auto_theorem needs a target and is not available here".into()));
        }
        self.train.validate().map_err(|e| Error::Invalid(format!("train: {e}")))
    }
}

/// Data of one trial.
pub struct TrialData {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub masks: Option<Vec<RelevantMask>>,
    /// Reference head for the alignment metrics.
    pub reference: HeadParams,
}

pub fn trial_data(data: &DataConfig, n: usize, n_test: usize) -> Result<TrialData> {
    match data {
        DataConfig::Mixture(spec) => {
            let (train, masks, _) = dm1_sample(spec, n)?;
            let test = if n_test > 0 { Some(dm1_sample_range(spec, n, n_test)?.0) } else { None };
            Ok(TrialData { train, test, masks: Some(masks), reference: TargetParams::new(spec).theta_opt() })
        }
        DataConfig::Planted(spec) => {
            let train = dm2_sample(spec, n)?;
            let test = if n_test > 0 { Some(dm2_sample_range(spec, n, n_test)?) } else { None };
            Ok(TrialData { train, test, masks: None, reference: spec.teacher()? })
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadRuns {
    pub h: usize,
    pub trials: Vec<TrainTrace>,
}

#[derive(Clone, Debug)]
pub struct FigureResult {
    pub name: String,
    pub config: ExperimentConfig,
    pub runs: Vec<HeadRuns>,
}

const METRICS: [&str; 10] = [
    "train_loss",
    "test_loss",
    "min_margin",
    "grad_norm",
    "dist_to_init",
    "avg_W_norm",
    "avg_U_norm",
    "attn_rel_mass",
    "align_W",
    "align_U",
];

fn metric(row: &crate::training::TraceRow, i: usize) -> Option<f64> {
    match i {
        0 => Some(row.train_loss),
        1 => row.test_loss,
        2 => Some(row.min_margin),
        3 => Some(row.grad_norm),
        4 => Some(row.dist_to_init),
        5 => Some(row.avg_w_norm),
        6 => Some(row.avg_u_norm),
        7 => row.attn_rel_mass,
        8 => row.align_w,
        _ => row.align_u,
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every `(H, trial)` pair from `θ₀ = 0`.
pub fn run_experiment(name: &str, cfg: &ExperimentConfig) -> Result<FigureResult> {
    cfg.validate()?;
    let base = cfg.data.seed();
    let jobs: Vec<(usize, usize)> = cfg.model.h.iter().flat_map(|&h| (0..cfg.trials).map(move |i| (h, i))).collect();
    let traces = par::map(jobs.len(), |j| -> Result<TrainTrace> {
        let (h, i) = jobs[j];
        let seed = base.wrapping_add(i as u64);
        let td = trial_data(&cfg.data.with_seed(seed), cfg.n, cfg.n_test)?;
        let ctx = MetricContext { masks: td.masks.as_deref(), planted: Some(&td.reference) };
        let th0 = ModelParams::zeros(h, cfg.model.t, cfg.model.d);
        let tc = TrainConfig { seed, ..cfg.train.clone() };
        train(&td.train, &th0, &tc, None, td.test.as_ref(), &ctx)
    });
    let mut runs: Vec<HeadRuns> = cfg.model.h.iter().map(|&h| HeadRuns { h, trials: Vec::new() }).collect();
    for (j, t) in traces.into_iter().enumerate() {
        let slot = j / cfg.trials;
        runs[slot].trials.push(t?);
    }
    Ok(FigureResult { name: name.into(), config: cfg.clone(), runs })
}

pub fn run_figure(figure: Figure, seed: u64) -> Result<FigureResult> {
    run_experiment(figure.name(), &figure.config(seed))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadSummary {
    #[serde(rename = "H")]
    pub h: usize,
    pub eta: f64,
    /// Per-trial first iteration with train loss ≤ 0.3 (`None` if never).
    pub iters_to_level: Vec<Option<usize>>,
    /// Mean of `iters_to_level`, unreached trials counted as `K + 1`.
    pub mean_iters_to_level: f64,
    pub final_train_loss: Vec<f64>,
    pub initial_test_loss: Vec<Option<f64>>,
    pub final_test_loss: Vec<Option<f64>>,
    pub final_align_w: Vec<Option<f64>>,
    pub final_align_u: Vec<Option<f64>>,
    pub diverged: Vec<bool>,
}

pub const LOSS_LEVEL: f64 = 0.3;

impl FigureResult {
    pub fn trial_csv(&self, slot: usize, trial: usize) -> String {
        self.runs[slot].trials[trial].to_csv()
    }

    pub fn trial_file(&self, h: usize, trial: usize) -> String {
        format!("{}_H{h}_trial{trial}.csv", self.name)
    }

    /// Mean and standard deviation across trials per `(H, iter)`; an iteration
    /// enters only through the trials that recorded it.
    pub fn aggregate_csv(&self) -> String {
        let mut s = String::from("H,iter,trials");
        for m in METRICS {
            s.push_str(&format!(",{m}_mean,{m}_std"));
        }
        s.push('\n');
        for run in &self.runs {
            for (iter, rows) in self.rows_by_iter(run) {
                s.push_str(&format!("{},{},{}", run.h, iter, rows.len()));
                for m in 0..METRICS.len() {
                    let v: Option<Vec<f64>> = rows.iter().map(|r| metric(r, m)).collect();
                    match v {
                        Some(v) => {
                            let (mean, std) = mean_std(&v);
                            s.push_str(&format!(",{mean},{std}"));
                        }
                        None => s.push_str(",,"),
                    }
                }
                s.push('\n');
            }
        }
        s
    }

    fn rows_by_iter<'a>(&self, run: &'a HeadRuns) -> Vec<(usize, Vec<&'a crate::training::TraceRow>)> {
        let mut iters: Vec<usize> = run.trials.iter().flat_map(|t| t.rows.iter().map(|r| r.iter)).collect();
        iters.sort_unstable();
        iters.dedup();
        iters
            .into_iter()
            .map(|k| (k, run.trials.iter().filter_map(|t| t.rows.iter().find(|r| r.iter == k)).collect()))
            .collect()
    }

    pub fn summary(&self) -> Vec<HeadSummary> {
        let k = self.config.train.k;
        self.runs
            .iter()
            .map(|run| {
                let its: Vec<Option<usize>> = run.trials.iter().map(|t| t.first_below(LOSS_LEVEL)).collect();
                let mean = its.iter().map(|v| v.unwrap_or(k + 1) as f64).sum::<f64>() / its.len() as f64;
                let last = |f: fn(&crate::training::TraceRow) -> Option<f64>| -> Vec<Option<f64>> {
                    run.trials.iter().map(|t| t.rows.last().and_then(f)).collect()
                };
                HeadSummary {
                    h: run.h,
                    eta: run.trials[0].eta,
                    iters_to_level: its,
                    mean_iters_to_level: mean,
                    final_train_loss: run.trials.iter().map(|t| *t.losses.last().unwrap()).collect(),
                    initial_test_loss: run.trials.iter().map(|t| t.rows[0].test_loss).collect(),
                    final_test_loss: last(|r| r.test_loss),
                    final_align_w: last(|r| r.align_w),
                    final_align_u: last(|r| r.align_u),
                    diverged: run.trials.iter().map(|t| t.diverged.is_some()).collect(),
                }
            })
            .collect()
    }

    /// One chart per metric with the trial-mean curve of every `H`.
    pub fn charts(&self) -> Vec<(String, LineChart)> {
        let mut out = Vec::new();
        for (m, name) in METRICS.iter().enumerate() {
            let log = matches!(*name, "train_loss" | "test_loss" | "grad_norm");
            let mut chart = LineChart::new(&format!("{}: {name}", self.name), "iteration", name).log_y(log);
            let mut any = false;
            for run in &self.runs {
                let pts: Vec<(f64, f64)> = self
                    .rows_by_iter(run)
                    .into_iter()
                    .filter_map(|(k, rows)| {
                        let v: Option<Vec<f64>> = rows.iter().map(|r| metric(r, m)).collect();
                        v.map(|v| (k as f64, mean_std(&v).0))
                    })
                    .collect();
                any |= !pts.is_empty();
                chart.push(&format!("H={}", run.h), pts);
            }
            if any {
                out.push((format!("{}_{name}.svg", self.name), chart));
            }
        }
        out
    }

    /// Writes per-trial CSVs, the aggregate CSV, a summary JSON and the SVG
    /// charts into `dir`; returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: String, body: String| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, body)?;
            written.push(p);
            Ok(())
        };
        for (slot, run) in self.runs.iter().enumerate() {
            for i in 0..run.trials.len() {
                put(self.trial_file(run.h, i), self.trial_csv(slot, i))?;
            }
        }
        put(format!("{}_aggregate.csv", self.name), self.aggregate_csv())?;
        put(format!("{}_summary.json", self.name), serde_json::to_string_pretty(&self.summary())? + "\n")?;
        for (name, chart) in self.charts() {
            put(name, chart.render())?;
        }
        Ok(written)
    }
}

/// Chart from CSV columns: `x_col` against each of `y_cols`.
pub fn chart_from_csv(csv: &str, title: &str, x_col: &str, y_cols: &[&str], log_y: bool) -> Result<LineChart> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Invalid("csv: empty input".into()))?.split(',').collect();
    let col = |name: &str| {
        header.iter().position(|h| *h == name).ok_or_else(|| Error::Invalid(format!("csv: no column '{name}'")))
    };
    let xi = col(x_col)?;
    let yis = y_cols.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<&str>> = lines.filter(|l| !l.trim().is_empty()).map(|l| l.split(',').collect()).collect();
    let mut chart = LineChart::new(title, x_col, if y_cols.len() == 1 { y_cols[0] } else { "value" }).log_y(log_y);
    for (yi, name) in yis.iter().zip(y_cols) {
        let pts = rows
            .iter()
            .filter_map(|r| Some((r.get(xi)?.parse::<f64>().ok()?, r.get(*yi)?.parse::<f64>().ok()?)))
            .collect();
        chart.push(name, pts);
    }
    Ok(chart)
}
