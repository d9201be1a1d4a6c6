use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tezo::config::{init_seed, BuiltObjective, RunConfig};
use tezo::lowrank::{count_elements, CostModel, Method};
use tezo::objectives::{gradient_spectrum, Objective};
use tezo::params::parse_model_text;
use tezo::rank::{select_ranks, RankCriterion, RankPolicy};
use tezo::report::{emit_report, write_output, EmitOptions, Format, RunStatus, Table};
use tezo::rng::{domain, SeedSchedule};
use tezo::verify::{accumulated_moment_error, cross_term_stats, theorem1_check};
use tezo::{Error, Result};

#[derive(Parser)]
#[command(name = "tezo-bench", version, about = "Zeroth-order optimizer experiments and checks")]
struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (stdout when omitted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "csv")]
    format: Format,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model with a ZO optimizer and report the loss trajectory.
    Train(Box<TrainArgs>),
    /// Monte Carlo check of the estimator's mean and variance.
    Stats(ShapeArgs),
    /// Monte Carlo mean of the second-moment cross term.
    Cross(ShapeArgs),
    /// Accumulated error of the separable second moment.
    MomentError(MomentArgs),
    /// Random elements generated by each method.
    Count(CountArgs),
    /// Layer-wise rank selection from weight spectra.
    Rank(RankArgs),
    /// Gradient singular values and cross-step similarity.
    Spectrum(SpectrumArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-run the configuration embedded in a CSV or JSON report.
    #[arg(long, conflicts_with = "config")]
    replay: Option<PathBuf>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    rho: Option<String>,
    #[arg(long)]
    beta1: Option<String>,
    #[arg(long)]
    beta2: Option<String>,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    rank: Option<String>,
    /// Select ranks from weight spectra with this threshold fraction.
    #[arg(long)]
    rank_auto: Option<String>,
    #[arg(long)]
    rmax: Option<String>,
    #[arg(long)]
    log_every: Option<String>,
    /// Divide κ by the layer rank on low-rank layers.
    #[arg(long)]
    unbiased_scale: bool,
    #[arg(long)]
    lozo_interval: Option<String>,
    #[arg(long)]
    subzo_interval: Option<String>,
    /// Redraw TeZO factors every K steps (`never` by default).
    #[arg(long)]
    factor_refresh: Option<String>,
    /// Stop once loss <= target * initial loss.
    #[arg(long)]
    target: Option<String>,
    /// Any other config key, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Include wall time in the report.
    #[arg(long)]
    timing: bool,
    /// Run N independent seeds and emit one summary row per run.
    #[arg(long)]
    sweep: Option<usize>,
}

#[derive(Args)]
struct ShapeArgs {
    #[arg(long, default_value_t = 4)]
    m: usize,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    r: usize,
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
}

#[derive(Args)]
struct MomentArgs {
    /// Square layer sizes.
    #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    r: usize,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 0.99)]
    beta2: f64,
    /// Number of seeds per size.
    #[arg(long, default_value_t = 5)]
    runs: usize,
    /// Emit every k-th step (the last step is always emitted).
    #[arg(long, default_value_t = 1)]
    every: usize,
}

#[derive(Args)]
struct CountArgs {
    /// mezo, subzo, lozo, tezo or all.
    #[arg(long, default_value = "all")]
    method: String,
    #[arg(long)]
    m: u64,
    #[arg(long)]
    n: u64,
    #[arg(long)]
    r: u64,
    #[arg(long)]
    steps: u64,
}

#[derive(Args)]
struct RankArgs {
    /// Model file (`layer <name> <rows> <cols> [block]` followed by rows).
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    threshold: f64,
    #[arg(long, default_value_t = 8)]
    rmax: usize,
    /// Consecutive block sizes over the 2-D layers, e.g. `2,2,1`.
    #[arg(long, value_delimiter = ',')]
    blocks: Option<Vec<usize>>,
    /// Use the cumulative-energy criterion instead of the fraction of σ1.
    #[arg(long)]
    energy: bool,
}

#[derive(Args)]
struct SpectrumArgs {
    #[arg(long, default_value = "mlp:16,32,32,4")]
    objective: String,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    /// Leading singular values per layer.
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Plain gradient-descent rate between snapshots.
    #[arg(long, default_value_t = 0.0)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Emit the cross-step cosine matrices instead of singular values.
    #[arg(long)]
    cosines: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    let seed = cli.seed.unwrap_or(0);
    let out = cli.out.as_deref();
    let table = match cli.cmd {
        Cmd::Train(a) => return train(*a, cli.seed, cli.format, out),
        Cmd::Stats(a) => stats(&a, seed)?,
        Cmd::Cross(a) => cross(&a, seed)?,
        Cmd::MomentError(a) => moment(&a, seed)?,
        Cmd::Count(a) => count(&a)?,
        Cmd::Rank(a) => rank(&a)?,
        Cmd::Spectrum(a) => spectrum(&a, seed)?,
    };
    write_output(out, &table.render(cli.format)?)?;
    Ok(0)
}

fn train(a: TrainArgs, seed: Option<u64>, format: Format, out: Option<&std::path::Path>) -> Result<u8> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(p) = &a.replay {
        let text = std::fs::read_to_string(p)?;
        let report = match serde_json::from_str::<serde_json::Value>(&text) {
            Ok(v) => tezo::report::RunReport::from_json(&v)?,
            Err(_) => tezo::report::RunReport::from_csv(&text)?,
        };
        pairs = report.config;
    }
    let flags = [
        ("optimizer", &a.optimizer),
        ("objective", &a.objective),
        ("steps", &a.steps),
        ("eta", &a.eta),
        ("rho", &a.rho),
        ("beta1", &a.beta1),
        ("beta2", &a.beta2),
        ("eps", &a.eps),
        ("rank", &a.rank),
        ("rank_auto", &a.rank_auto),
        ("rmax", &a.rmax),
        ("log_every", &a.log_every),
        ("lozo_interval", &a.lozo_interval),
        ("subzo_interval", &a.subzo_interval),
        ("factor_refresh", &a.factor_refresh),
        ("target", &a.target),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            // An explicit rank choice replaces the other form from a file.
            if k == "rank" {
                pairs.retain(|(key, _)| key != "rank_auto" && key != "rmax");
            } else if k == "rank_auto" {
                pairs.retain(|(key, _)| key != "rank");
            }
            pairs.push((k.to_string(), v.clone()));
        }
    }
    if a.unbiased_scale {
        pairs.push(("unbiased_scale".into(), "true".into()));
    }
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    let cfg = RunConfig::load(a.config.as_deref(), &pairs)?;
    let opts = EmitOptions { timing: a.timing };

    if let Some(runs) = a.sweep {
        if runs == 0 {
            return Err(Error::Config("--sweep needs at least one run".into()));
        }
        let reports = cfg.execute_sweep(runs)?;
        let mut t = Table::new(["run", "seed", "initial_loss", "final_loss", "steps_run", "elements_generated", "state_floats", "skipped_steps", "status"]);
        t.meta = cfg.echo().into_iter().filter(|(k, _)| k != "seed").collect();
        t.meta.push(("base_seed".into(), cfg.train.seed.to_string()));
        t.meta.push(("runs".into(), runs.to_string()));
        let mut diverged = false;
        for (k, r) in reports.iter().enumerate() {
            diverged |= matches!(r.status, RunStatus::Diverged { .. });
            t.push(vec![
                json!(k),
                json!(r.seed),
                json!(r.rows[0].loss),
                json!(r.final_loss()),
                json!(r.totals.steps_run),
                json!(r.totals.elements_generated),
                json!(r.totals.state_floats),
                json!(r.totals.skipped_steps),
                json!(r.status.to_string()),
            ]);
        }
        write_output(out, &t.render(format)?)?;
        return Ok(if diverged { 3 } else { 0 });
    }

    let report = cfg.execute()?;
    emit_report(&report, format, out, opts)?;
    if let RunStatus::Diverged { step } = report.status {
        eprintln!("error: loss diverged at step {step}");
        return Ok(3);
    }
    Ok(0)
}

fn stats(a: &ShapeArgs, seed: u64) -> Result<Table> {
    let rep = theorem1_check(a.m, a.n, a.r, a.trials, seed)?;
    let mut t = Table::new(["i", "j", "grad", "mean", "bias", "std_err", "z"])
        .meta("m", a.m)
        .meta("n", a.n)
        .meta("r", a.r)
        .meta("trials", a.trials)
        .meta("seed", seed)
        .meta("delta", rep.delta)
        .meta("empirical_variance", rep.empirical_variance)
        .meta("variance_std_err", rep.variance_std_err)
        .meta("predicted_variance", rep.predicted_variance)
        .meta("variance_ratio", rep.ratio.map_or("undefined".to_string(), |r| r.to_string()))
        .meta("max_z", rep.max_z());
    let (bias, z) = (rep.bias(), rep.z_scores());
    for k in 0..a.m * a.n {
        t.push(vec![json!(k / a.n), json!(k % a.n), json!(rep.grad[k]), json!(rep.mean[k]), json!(bias[k]), json!(rep.std_err[k]), json!(z[k])]);
    }
    Ok(t)
}

fn cross(a: &ShapeArgs, seed: u64) -> Result<Table> {
    let rep = cross_term_stats(a.m, a.n, a.r, a.trials, seed)?;
    let mut t = Table::new(["i", "j", "mean", "std_err", "z"])
        .meta("m", a.m)
        .meta("n", a.n)
        .meta("r", a.r)
        .meta("trials", a.trials)
        .meta("seed", seed)
        .meta("max_z", rep.max_z())
        .meta("max_identity_residual", rep.max_identity_residual);
    for k in 0..a.m * a.n {
        let (m, s) = (rep.mean[k], rep.std_err[k]);
        let z = if m == 0.0 { 0.0 } else { m / s };
        t.push(vec![json!(k / a.n), json!(k % a.n), json!(m), json!(s), json!(z)]);
    }
    Ok(t)
}

fn moment(a: &MomentArgs, seed: u64) -> Result<Table> {
    if a.every == 0 || a.runs == 0 {
        return Err(Error::Config("--every and --runs must be positive".into()));
    }
    let seeds: Vec<u64> = {
        let s = SeedSchedule::new(seed).child(domain::SWEEP);
        (0..a.runs as u64).map(|k| s.derive(k)).collect()
    };
    let sizes: Vec<(usize, usize)> = a.sizes.iter().map(|&d| (d, d)).collect();
    let traces = accumulated_moment_error(&sizes, a.r, a.steps, a.beta2, &seeds)?;
    let mut t = Table::new(["m", "n", "seed", "step", "error_norm"])
        .meta("r", a.r)
        .meta("steps", a.steps)
        .meta("beta2", a.beta2)
        .meta("kappa", 1)
        .meta("seed", seed)
        .meta("runs", a.runs);
    for &(m, n) in &sizes {
        let term: Vec<f64> = traces.iter().filter(|tr| tr.m == m && tr.n == n).map(|tr| tr.terminal()).collect();
        t.meta.push((format!("mean_terminal_{m}x{n}"), (term.iter().sum::<f64>() / term.len() as f64).to_string()));
    }
    for tr in &traces {
        for (step, e) in tr.norms.iter().enumerate() {
            if step % a.every == 0 || step == a.steps {
                t.push(vec![json!(tr.m), json!(tr.n), json!(tr.seed), json!(step), json!(e)]);
            }
        }
    }
    Ok(t)
}

fn count(a: &CountArgs) -> Result<Table> {
    let methods: Vec<Method> = if a.method == "all" {
        vec![Method::MeZO, Method::SubZO, Method::LOZO, Method::TeZO]
    } else {
        vec![a.method.parse()?]
    };
    let mut t = Table::new(["method", "m", "n", "r", "steps", "elements"]);
    for method in methods {
        let e = count_elements(&CostModel { method, m: a.m, n: a.n, r: a.r, steps: a.steps })?;
        t.push(vec![json!(method.to_string()), json!(a.m), json!(a.n), json!(a.r), json!(a.steps), json!(e)]);
    }
    Ok(t)
}

fn rank(a: &RankArgs) -> Result<Table> {
    let model = parse_model_text(&std::fs::read_to_string(&a.model)?)?;
    let mut policy = RankPolicy::new(a.threshold, a.rmax)?;
    if a.energy {
        policy.criterion = RankCriterion::CumulativeEnergy;
    }
    if let Some(b) = &a.blocks {
        policy = policy.with_block_sizes(b);
    }
    let mut t = Table::new(["layer", "rows", "cols", "sigma1", "rank_raw", "rank_selected"])
        .meta("threshold", a.threshold)
        .meta("rmax", a.rmax)
        .meta("criterion", if a.energy { "energy" } else { "fraction" });
    for l in select_ranks(&model, &policy)? {
        let (rows, cols) = model.get(l.param_index).shape();
        t.push(vec![json!(l.name), json!(rows), json!(cols), json!(l.sigma1), json!(l.rank_raw), json!(l.rank_selected)]);
    }
    Ok(t)
}

fn spectrum(a: &SpectrumArgs, seed: u64) -> Result<Table> {
    let cfg = RunConfig::from_pairs(&[
        ("optimizer".into(), "mezo".into()),
        ("objective".into(), a.objective.clone()),
        ("steps".into(), "0".into()),
        ("seed".into(), seed.to_string()),
        ("batch".into(), a.batch.to_string()),
    ])?;
    let BuiltObjective::Mlp(net) = cfg.objective.build(seed)? else {
        return Err(Error::Config("spectrum needs an mlp objective".into()));
    };
    let params = net.initial_params(init_seed(seed));
    let rep = gradient_spectrum(&net, &params, &SeedSchedule::new(seed).child(domain::BATCH), a.steps, a.k, a.lr)?;
    let mut meta = Table::new(Vec::<String>::new())
        .meta("objective", &a.objective)
        .meta("steps", a.steps)
        .meta("k", a.k)
        .meta("lr", a.lr)
        .meta("batch", a.batch)
        .meta("seed", seed)
        .meta;
    for (l, (name, _)) in rep.cosines.iter().enumerate() {
        let c = rep.mean_offdiag_cosine(l).map_or("undefined".to_string(), |c| c.to_string());
        meta.push((format!("mean_cosine_{name}"), c));
    }
    let mut t = if a.cosines {
        let mut t = Table::new(["layer", "i", "j", "cosine"]);
        for (name, c) in &rep.cosines {
            for (i, row) in c.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    t.push(vec![json!(name), json!(i), json!(j), v.map_or(serde_json::Value::Null, |x| json!(x))]);
                }
            }
        }
        t
    } else {
        let mut t = Table::new(["layer", "step", "index", "sigma"]);
        for s in &rep.spectra {
            for (i, sigma) in s.sigmas.iter().enumerate() {
                t.push(vec![json!(s.layer), json!(s.step), json!(i + 1), json!(sigma)]);
            }
        }
        t
    };
    t.meta = meta;
    Ok(t)
}
