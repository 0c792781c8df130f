use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use mhattn::calculus::fd;
use mhattn::datagen::{dm1_sample, gamma_lin, read_jsonl, write_jsonl, write_masks, MixtureSpec};
use mhattn::ntk::{
    gamma_attn, gamma_star, good_init_check, head_requirements, realizability_witness, saturation_gamma, theta_star,
    verify_saturation, zero_init_heads, GoodInitReport, HeadRequirements, RequirementInputs, TargetParams, TheoremHeads,
};
use mhattn::reproduce::{chart_from_csv, run_experiment, trial_data, DataConfig, ExperimentConfig, Figure};
use mhattn::stability::avg_model_stability;
use mhattn::training::{certificate_r, phase_one, StepSize};
use mhattn::{par, Error, HeadParams, ModelParams};

#[derive(Parser)]
#[command(name = "mhattn", version, about = "Multi-head attention training, certificates and stability experiments")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults to the `--figure` preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config is given.
    #[arg(long, default_value = "context-gd")]
    figure: String,
    /// Overrides the data seed; trial i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample train/test sets of the config and write them as JSON lines.
    GenData(Common),
    /// Train every (H, trial) of the config and write per-trial and aggregate CSV.
    Train(Common),
    /// NTK margins, saturation and good-initialization checks for a mixture config.
    Margins(Common),
    /// Head-count requirements of the certificates for a mixture config.
    Bounds(Common),
    /// Leave-one-out stability for the first H of the config (plain GD).
    Stability(Common),
    /// Analytic vs central-difference gradients on random instances.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        cases: usize,
    },
    /// Run a figure preset (or a config) and write CSV and SVG.
    Reproduce(Common),
    /// Line chart of CSV columns.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "iter")]
        x: String,
        /// Comma-separated column names.
        #[arg(long, default_value = "train_loss")]
        y: String,
        #[arg(long)]
        log: bool,
        #[arg(long, default_value = "")]
        title: String,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn load(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => {
            let s = std::fs::read_to_string(p).map_err(|e| Error::Invalid(format!("config {}: {e}", p.display())))?;
            ExperimentConfig::from_json(&s)?
        }
        None => c.figure.parse::<Figure>()?.config(0),
    };
    if let Some(seed) = c.seed {
        cfg.data = match cfg.data {
            DataConfig::Mixture(s) => DataConfig::Mixture(MixtureSpec { seed, ..s }),
            DataConfig::Planted(mut s) => {
                s.seed = seed;
                DataConfig::Planted(s)
            }
        };
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(c: &Common, cfg: &ExperimentConfig) -> PathBuf {
    match (&cfg.outputs, c.out.as_os_str() == "out") {
        (Some(o), true) => PathBuf::from(o),
        _ => c.out.clone(),
    }
}

fn mixture(cfg: &ExperimentConfig) -> Result<&MixtureSpec, Error> {
    match &cfg.data {
        DataConfig::Mixture(s) => Ok(s),
        DataConfig::Planted(_) => Err(Error::Invalid("data: this command needs a mixture config".into())),
    }
}

fn write_json(dir: &Path, name: &str, v: &impl Serialize) -> Result<String, Error> {
    std::fs::create_dir_all(dir)?;
    let s = serde_json::to_string_pretty(v)?;
    std::fs::write(dir.join(name), format!("{s}\n"))?;
    Ok(s)
}

fn gen_data(c: &Common) -> Result<(), Error> {
    let cfg = load(c)?;
    let dir = out_dir(c, &cfg);
    std::fs::create_dir_all(&dir)?;
    let td = trial_data(&cfg.data, cfg.n, cfg.n_test)?;
    write_jsonl(&td.train, BufWriter::new(File::create(dir.join("train.jsonl"))?))?;
    if let Some(t) = &td.test {
        write_jsonl(t, BufWriter::new(File::create(dir.join("test.jsonl"))?))?;
    }
    if let Some(m) = &td.masks {
        write_masks(m, BufWriter::new(File::create(dir.join("masks.jsonl"))?))?;
    }
    // round trip as a sanity check on the written file
    let back = read_jsonl(BufReader::new(File::open(dir.join("train.jsonl"))?))?;
    if back.n() != td.train.n() {
        return Err(Error::Numeric("train.jsonl did not read back".into()));
    }
    println!("wrote {} train and {} test samples to {}", td.train.n(), cfg.n_test, dir.display());
    Ok(())
}

fn run(name: &str, c: &Common, svg: bool) -> Result<(), Error> {
    let cfg = load(c)?;
    let dir = out_dir(c, &cfg);
    let r = run_experiment(name, &cfg)?;
    let files = if svg {
        r.write(&dir)?
    } else {
        std::fs::create_dir_all(&dir)?;
        let mut v = Vec::new();
        for (slot, run) in r.runs.iter().enumerate() {
            for i in 0..run.trials.len() {
                let p = dir.join(r.trial_file(run.h, i));
                std::fs::write(&p, r.trial_csv(slot, i))?;
                v.push(p);
            }
        }
        let p = dir.join(format!("{name}_aggregate.csv"));
        std::fs::write(&p, r.aggregate_csv())?;
        v.push(p);
        v
    };
    for s in r.summary() {
        println!(
            "H={:<4} eta={:<8} mean iters to loss {}: {:<6} final train loss {:.4e}",
            s.h,
            s.eta,
            mhattn::reproduce::LOSS_LEVEL,
            s.mean_iters_to_level,
            s.final_train_loss.iter().sum::<f64>() / s.final_train_loss.len() as f64
        );
    }
    println!("wrote {} files to {}", files.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct SaturationRow {
    eps: f64,
    gamma_eps: f64,
    max_irrelevant_mass: f64,
    gamma_attn: f64,
    min_margin: f64,
}

#[derive(Serialize)]
struct MarginsReport {
    gamma_lin: f64,
    gamma_star_zero_init: f64,
    zero_init: GoodInitReport,
    phase_one: GoodInitReport,
    phase_one_p: Option<f64>,
    saturation: Vec<SaturationRow>,
}

fn margins(c: &Common) -> Result<(), Error> {
    let cfg = load(c)?;
    let spec = mixture(&cfg)?;
    let h = cfg.model.h[0];
    let (data, masks, bounds) = dm1_sample(spec, cfg.n)?;
    let zero = ModelParams::zeros(h, spec.t, spec.d);
    let zero_init = good_init_check(&data, spec, &bounds, &zero, 0.0, 0.05)?;
    let p1 = phase_one(&data, h, cfg.train.seed, Some(spec))?;
    let p = p1.P_empirical.unwrap_or(0.0);
    let phase = good_init_check(&data, spec, &bounds, &p1.theta1, p, 0.05)?;
    let tp = TargetParams::new(spec);
    let mut saturation = Vec::new();
    for eps in [0.1, 0.01] {
        let g = saturation_gamma(eps, spec.s, spec.m, spec.zeta)?;
        let mass = verify_saturation(&data, &masks, &tp.w_opt, g)?;
        let head = HeadParams::new(tp.u_opt.clone(), tp.w_opt.scale(g))?;
        let min_margin = data
            .examples()
            .iter()
            .map(|e| mhattn::attention::forward_single(&e.x, &head).map(|f| e.y * f))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        saturation.push(SaturationRow {
            eps,
            gamma_eps: g,
            max_irrelevant_mass: mass,
            gamma_attn: gamma_attn(eps, spec.s, spec.t, bounds.z_mu)?,
            min_margin,
        });
    }
    let rep = MarginsReport {
        gamma_lin: gamma_lin(spec, &bounds, Some(&data)).closed_form,
        gamma_star_zero_init: gamma_star(spec.s, spec.t, spec.zeta, spec.m, bounds.z_mu, bounds.z_nu, bounds.z, 0.0),
        zero_init,
        phase_one: phase,
        phase_one_p: p1.P_empirical,
        saturation,
    };
    println!("{}", write_json(&out_dir(c, &cfg), "margins.json", &rep)?);
    Ok(())
}

#[derive(Serialize)]
struct BoundsReport {
    #[serde(rename = "K")]
    k: usize,
    n: usize,
    ntk_margin_zero_init: f64,
    g0_zero_init: f64,
    zero_init_heads: TheoremHeads,
    phase_one_inputs: RequirementInputs,
    phase_one_heads: HeadRequirements,
}

fn bounds(c: &Common) -> Result<(), Error> {
    let cfg = load(c)?;
    let spec = mixture(&cfg)?;
    let h = cfg.model.h[0];
    let k = cfg.train.k.max(1);
    let (data, _, nb) = dm1_sample(spec, cfg.n)?;
    let r = certificate_r(&data);
    let zero = ModelParams::zeros(1, spec.t, spec.d);
    let dir = theta_star(&TargetParams::new(spec), &zero)?;
    let gamma0 = mhattn::ntk::ntk_margin(&data, &zero, &dir)?.min;
    let g0 = realizability_witness(0.0, 0.0, gamma0)?.g0(1.0 / k as f64);
    let p1 = phase_one(&data, h, cfg.train.seed, Some(spec))?;
    let p = p1.P_empirical.unwrap_or(0.0);
    let gi = good_init_check(&data, spec, &nb, &p1.theta1, p, 0.05)?;
    let inputs = RequirementInputs {
        d: spec.d,
        t: spec.t,
        r,
        b2: gi.B2,
        b_phi: gi.B_phi,
        gamma: gi.ntk_margin_min,
        k,
        n: cfg.n,
        delta: 0.05,
        s_plus_p: spec.s + p,
    };
    let rep = BoundsReport {
        k,
        n: cfg.n,
        ntk_margin_zero_init: gamma0,
        g0_zero_init: g0,
        zero_init_heads: zero_init_heads(spec.d, spec.t, r, g0, dir.norm()),
        phase_one_inputs: inputs,
        phase_one_heads: head_requirements(&inputs),
    };
    println!("{}", write_json(&out_dir(c, &cfg), "bounds.json", &rep)?);
    Ok(())
}

fn stability(c: &Common) -> Result<(), Error> {
    let cfg = load(c)?;
    if !matches!(cfg.train.step, StepSize::Explicit { .. } | StepSize::SqrtH { .. }) {
        return Err(Error::Invalid("train.step: stability needs an explicit or sqrt_h step".into()));
    }
    let h = cfg.model.h[0];
    let td = trial_data(&cfg.data, cfg.n, cfg.n_test)?;
    let th0 = ModelParams::zeros(h, cfg.model.t, cfg.model.d);
    // the reference head spread over H heads, so that Φ̃ equals its output
    let target = ModelParams::new(vec![td.reference.scale(1.0 / (h as f64).sqrt()); h])?;
    let rep = avg_model_stability(&td.train, &th0, &cfg.train, td.test.as_ref(), Some(&target))?;
    let dir = out_dir(c, &cfg);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("stability.csv"), rep.to_csv())?;
    let last = rep.last();
    println!(
        "n={} eta={} K={} avg_stability={:.6e} gap={} bound_rhs={:.6e}",
        rep.n,
        rep.eta,
        last.k,
        last.avg_stability,
        last.gap_estimate.map(|g| format!("{g:.6e}")).unwrap_or_else(|| "n/a".into()),
        rep.bound_rhs.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn gradcheck(seed: u64, cases: usize) -> Result<(), Error> {
    let worst = fd::random_gradcheck(seed, cases, 1e-5)?;
    println!("gradcheck: {cases} cases, max rel err {worst:.3e}");
    if worst > 1e-6 {
        return Err(Error::Numeric(format!("max rel err {worst:.3e} exceeds 1e-6")));
    }
    Ok(())
}

fn plot(input: &Path, out: &Path, x: &str, y: &str, log: bool, title: &str) -> Result<(), Error> {
    let csv = std::fs::read_to_string(input).map_err(|e| Error::Invalid(format!("input {}: {e}", input.display())))?;
    let cols: Vec<&str> = y.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let title = if title.is_empty() { input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot") } else { title };
    let chart = chart_from_csv(&csv, title, x, &cols, log)?;
    if let Some(p) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p)?;
    }
    let mut f = BufWriter::new(File::create(out)?);
    f.write_all(chart.render().as_bytes())?;
    f.flush()?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        par::set_threads(n);
    }
    let res = match &cli.cmd {
        Cmd::GenData(c) => gen_data(c),
        Cmd::Train(c) => run("train", c, false),
        Cmd::Margins(c) => margins(c),
        Cmd::Bounds(c) => bounds(c),
        Cmd::Stability(c) => stability(c),
        Cmd::Gradcheck { seed, cases } => gradcheck(*seed, *cases),
        Cmd::Reproduce(c) => {
            let name = match &c.config {
                Some(_) => "custom".to_string(),
                None => c.figure.clone(),
            };
            run(&name, c, true)
        }
        Cmd::Plot { input, out, x, y, log, title } => plot(input, out, x, y, *log, title),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
