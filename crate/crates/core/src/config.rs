//! Run configuration: flat `key = value` text plus overrides.
//!
//! A configuration is an ordered list of pairs. Later pairs win, so command
//! line flags appended after a file's contents override it. Every report
//! echoes the fully resolved configuration, and [`RunConfig::from_report`]
//! reads it back for an exact replay.

use std::path::Path;

use crate::error::{Error, Result};
use crate::objectives::{Activation, CascadeMlp, ClusterSpec, Objective, Quadratic};
use crate::optimizers::{run, run_sweep, OptimizerKind, RankSpec, TrainConfig};
use crate::params::ModelParams;
use crate::rank::RankPolicy;
use crate::report::RunReport;
use crate::rng::{domain, SeedSchedule};

/// Keys accepted by [`RunConfig::from_pairs`].
pub const KEYS: &[&str] = &[
    "optimizer",
    "objective",
    "steps",
    "eta",
    "rho",
    "beta1",
    "beta2",
    "eps",
    "seed",
    "log_every",
    "unbiased_scale",
    "rank",
    "rank_auto",
    "rmax",
    "lozo_interval",
    "subzo_interval",
    "factor_refresh",
    "target",
    "cond",
    "cubic",
    "batch",
    "samples",
    "activation",
    "bias",
    "block_size",
];

const QUAD_KEYS: &[&str] = &["cond", "cubic"];
const MLP_KEYS: &[&str] = &["batch", "samples", "activation", "bias", "block_size"];

pub const DEFAULT_RMAX: usize = 8;

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// ignored.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`, got `{line}`", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum ObjectiveSpec {
    /// `quad<N>`, `quad<M>x<N>` or `cubic<N>`: one `m × n` parameter with a
    /// diagonal Hessian of condition number `cond`.
    Quad { m: usize, n: usize, cond: f64, cubic: f64 },
    /// `mlp:<d0>,<d1>,..,<dL>` on a synthetic cluster dataset.
    Mlp { widths: Vec<usize>, batch: usize, samples: usize, activation: Activation, bias: bool, block_size: usize },
}

pub const DEFAULT_COND: f64 = 10.0;
pub const DEFAULT_CUBIC: f64 = 0.1;

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true or false, got `{v}`"))),
    }
}

fn parse_dims(s: &str) -> Option<(usize, usize)> {
    match s.split_once('x') {
        Some((a, b)) => Some((a.parse().ok()?, b.parse().ok()?)),
        None => s.parse().ok().map(|n| (n, n)),
    }
}

impl ObjectiveSpec {
    /// Parses the name and picks up objective-specific keys from `get`.
    fn parse(name: &str, get: &dyn Fn(&str) -> Option<String>) -> Result<Self> {
        let bad = || Error::Config(format!("unknown objective `{name}` (expected quad<N>, quad<M>x<N>, cubic<N> or mlp:<widths>)"));
        let reject = |keys: &[&str]| -> Result<()> {
            match keys.iter().find(|k| get(k).is_some()) {
                Some(k) => Err(Error::Config(format!("key `{k}` does not apply to objective `{name}`"))),
                None => Ok(()),
            }
        };
        if let Some(rest) = name.strip_prefix("mlp:") {
            reject(QUAD_KEYS)?;
            let widths = rest.split(',').map(|w| w.trim().parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|_| bad())?;
            if widths.len() < 2 || widths.contains(&0) || *widths.last().unwrap() < 2 {
                return Err(Error::Config(format!("mlp needs at least two positive widths and two output classes, got `{rest}`")));
            }
            let activation = match get("activation").as_deref() {
                None | Some("tanh") => Activation::Tanh,
                Some("relu") => Activation::Relu,
                Some(other) => return Err(Error::Config(format!("unknown activation `{other}`"))),
            };
            let spec = ObjectiveSpec::Mlp {
                widths,
                batch: get("batch").map_or(Ok(32), |v| parse_num("batch", &v))?,
                samples: get("samples").map_or(Ok(256), |v| parse_num("samples", &v))?,
                activation,
                bias: get("bias").map_or(Ok(true), |v| parse_bool("bias", &v))?,
                block_size: get("block_size").map_or(Ok(2), |v| parse_num("block_size", &v))?,
            };
            if let ObjectiveSpec::Mlp { batch, samples, block_size, .. } = &spec {
                if *batch == 0 || *samples == 0 || *block_size == 0 {
                    return Err(Error::Config("batch, samples and block_size must be positive".into()));
                }
            }
            return Ok(spec);
        }
        reject(MLP_KEYS)?;
        let (dims, default_cubic) = if let Some(d) = name.strip_prefix("quad") {
            (d, 0.0)
        } else if let Some(d) = name.strip_prefix("cubic") {
            (d, DEFAULT_CUBIC)
        } else {
            return Err(bad());
        };
        let (m, n) = parse_dims(dims).filter(|&(m, n)| m > 0 && n > 0).ok_or_else(bad)?;
        let cond: f64 = get("cond").map_or(Ok(DEFAULT_COND), |v| parse_num("cond", &v))?;
        if !(cond >= 1.0 && cond.is_finite()) {
            return Err(Error::Config(format!("cond must be >= 1, got {cond}")));
        }
        let cubic: f64 = get("cubic").map_or(Ok(default_cubic), |v| parse_num("cubic", &v))?;
        Ok(ObjectiveSpec::Quad { m, n, cond, cubic })
    }

    pub fn name(&self) -> String {
        match self {
            ObjectiveSpec::Quad { m, n, cubic, .. } => {
                let base = if *cubic != 0.0 { "cubic" } else { "quad" };
                if m == n {
                    format!("{base}{m}")
                } else {
                    format!("{base}{m}x{n}")
                }
            }
            ObjectiveSpec::Mlp { widths, .. } => {
                format!("mlp:{}", widths.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
            }
        }
    }

    fn echo(&self) -> Vec<(String, String)> {
        let mut v = vec![("objective".to_string(), self.name())];
        match self {
            ObjectiveSpec::Quad { cond, cubic, .. } => {
                v.push(("cond".into(), cond.to_string()));
                v.push(("cubic".into(), cubic.to_string()));
            }
            ObjectiveSpec::Mlp { batch, samples, activation, bias, block_size, .. } => {
                v.push(("batch".into(), batch.to_string()));
                v.push(("samples".into(), samples.to_string()));
                v.push(("activation".into(), if *activation == Activation::Relu { "relu" } else { "tanh" }.into()));
                v.push(("bias".into(), bias.to_string()));
                v.push(("block_size".into(), block_size.to_string()));
            }
        }
        v
    }

    /// Builds the objective. Problem data (Hessian order, dataset) come from
    /// the problem stream of `seed`.
    pub fn build(&self, seed: u64) -> Result<BuiltObjective> {
        let problem = SeedSchedule::new(seed).child(domain::PROBLEM).derive(0);
        match self {
            ObjectiveSpec::Quad { m, n, cond, cubic } => Ok(BuiltObjective::Quad(Quadratic::conditioned(*m, *n, *cond, problem)?.with_cubic(*cubic))),
            ObjectiveSpec::Mlp { widths, batch, samples, activation, bias, block_size } => {
                let dim = widths[0];
                let cs = ClusterSpec {
                    dim,
                    classes: *widths.last().unwrap(),
                    intrinsic_dim: dim.min(3),
                    samples: *samples,
                    spread: 2.0,
                    noise: 0.5,
                    ambient_noise: 0.05,
                };
                let net = CascadeMlp::new(widths.clone(), *activation, *bias, cs.generate(problem)?, *batch)?.with_block_size(*block_size);
                Ok(BuiltObjective::Mlp(net))
            }
        }
    }
}

/// A concrete objective selected by an [`ObjectiveSpec`].
#[derive(Clone, Debug)]
pub enum BuiltObjective {
    Quad(Quadratic),
    Mlp(CascadeMlp),
}

impl BuiltObjective {
    pub fn initial_params(&self, seed: u64) -> ModelParams {
        match self {
            BuiltObjective::Quad(q) => q.initial_params(seed),
            BuiltObjective::Mlp(n) => n.initial_params(seed),
        }
    }
}

/// Initial-parameter seed for a run seed.
pub fn init_seed(seed: u64) -> u64 {
    SeedSchedule::new(seed).child(domain::INIT).derive(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub objective: ObjectiveSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Reads an optional config file and applies `overrides` on top.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => parse_kv(&std::fs::read_to_string(p)?)?,
            None => Vec::new(),
        };
        pairs.extend_from_slice(overrides);
        Self::from_pairs(&pairs)
    }

    /// Recovers the configuration echoed into a report.
    pub fn from_report(report: &RunReport) -> Result<Self> {
        Self::from_pairs(&report.config)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        for (k, _) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::UnknownKey(k.clone()));
            }
        }
        let get = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.clone());
        let need = |key: &str| get(key).ok_or_else(|| Error::MissingKey(key.to_string()));

        let optimizer: OptimizerKind = need("optimizer")?.parse()?;
        let objective = ObjectiveSpec::parse(&need("objective")?, &get)?;
        let steps: u64 = parse_num("steps", &need("steps")?)?;
        let mut train = TrainConfig::new(optimizer, steps);
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = get($key) {
                    $field = parse_num($key, &v)?;
                }
            };
        }
        set!("eta", train.hyper.eta);
        set!("rho", train.hyper.rho);
        set!("beta1", train.hyper.beta1);
        set!("beta2", train.hyper.beta2);
        set!("eps", train.hyper.eps);
        set!("seed", train.seed);
        set!("log_every", train.log_every);
        set!("lozo_interval", train.lozo_interval);
        set!("subzo_interval", train.subzo_interval);
        if let Some(v) = get("unbiased_scale") {
            train.unbiased_scale = parse_bool("unbiased_scale", &v)?;
        }
        train.factor_refresh = match get("factor_refresh").as_deref() {
            None | Some("never") => None,
            Some(v) => match parse_num::<u64>("factor_refresh", v)? {
                0 => return Err(Error::Config("factor_refresh must be positive or `never`".into())),
                k => Some(k),
            },
        };
        train.target_ratio = get("target").map(|v| parse_num("target", &v)).transpose()?;
        train.rank = match (get("rank"), get("rank_auto")) {
            (Some(_), Some(_)) => return Err(Error::Config("`rank` and `rank_auto` are mutually exclusive".into())),
            (_, Some(t)) => {
                let r_max = get("rmax").map_or(Ok(DEFAULT_RMAX), |v| parse_num("rmax", &v))?;
                RankSpec::Auto(RankPolicy::new(parse_num("rank_auto", &t)?, r_max)?)
            }
            (r, None) => {
                if get("rmax").is_some() {
                    return Err(Error::Config("`rmax` requires `rank_auto`".into()));
                }
                RankSpec::Fixed(r.map_or(Ok(4), |v| parse_num("rank", &v))?)
            }
        };
        if train.lozo_interval == 0 || train.subzo_interval == 0 {
            return Err(Error::Config("lazy intervals must be positive".into()));
        }
        train.validate()?;
        let cfg = RunConfig { objective, train };
        // Rank bounds depend on the layer shapes.
        if let RankSpec::Fixed(_) = cfg.train.rank {
            cfg.train.resolve_ranks(&cfg.shape_model()?)?;
        }
        Ok(cfg)
    }

    fn shape_model(&self) -> Result<ModelParams> {
        Ok(self.objective.build(self.train.seed)?.initial_params(0))
    }

    /// Every resolved key, in a fixed order.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut v = self.train.echo();
        let obj = self.objective.echo();
        v.splice(1..1, obj);
        v
    }

    /// Runs the configuration once. The objective and the initial
    /// parameters are seeded from `train.seed`.
    pub fn execute(&self) -> Result<RunReport> {
        let built = self.objective.build(self.train.seed)?;
        let model = built.initial_params(init_seed(self.train.seed));
        let (mut report, _) = match &built {
            BuiltObjective::Quad(q) => run(q, &model, &self.train)?,
            BuiltObjective::Mlp(n) => run(n, &model, &self.train)?,
        };
        report.config = self.echo();
        Ok(report)
    }

    /// `runs` independent runs on the same objective with derived seeds.
    pub fn execute_sweep(&self, runs: usize) -> Result<Vec<RunReport>> {
        let built = self.objective.build(self.train.seed)?;
        let make = |s: u64| built.initial_params(init_seed(s));
        let mut reports = match &built {
            BuiltObjective::Quad(q) => run_sweep(q, make, &self.train, runs)?,
            BuiltObjective::Mlp(n) => run_sweep(n, make, &self.train, runs)?,
        };
        for r in &mut reports {
            let mut cfg = self.clone();
            cfg.train.seed = r.seed;
            r.config = cfg.echo();
        }
        Ok(reports)
    }
}
