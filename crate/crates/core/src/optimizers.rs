//! Update rules and the training loop.
//!
//! TeZO layers keep their optimizer state in factor space: momentum is the
//! running average of `κ_t τ_t` (length `r`), and the separable second
//! moment is the running average of `κ_t² τ_t²`. Both are expanded through
//! the fixed factors only when the update is applied:
//!
//! ```text
//! M_t = Σ_s (τ_M)_s (u_s ∘ v_s)
//! V_t = Σ_s (τ_V)_s (u_s² ∘ v_s²)
//! W  ← W − η M_t / √(V_t + ε)
//! ```
//!
//! There is no `1 − β^t` bias correction, and `ε` sits inside the square root.
//! Dense and baseline layers use ordinary `m × n` buffers.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{spsa_kappa, LayerDraw, PerturbationKind, PerturbationSpec, Perturber, ZoEstimate};
use crate::lowrank::{FactorSet, Method};
use crate::matrix::Matrix;
use crate::objectives::Objective;
use crate::params::{ModelParams, ParamKind};
use crate::rank::{select_ranks, RankPolicy};
use crate::report::{ReportRow, RunReport, RunStatus, RunTotals};
use crate::rng::{domain, SeedSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateRule {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Tezo,
    TezoM,
    TezoAdam,
    Mezo,
    MezoM,
    MezoAdam,
    Lozo,
    Subzo,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 8] = [
        OptimizerKind::Tezo,
        OptimizerKind::TezoM,
        OptimizerKind::TezoAdam,
        OptimizerKind::Mezo,
        OptimizerKind::MezoM,
        OptimizerKind::MezoAdam,
        OptimizerKind::Lozo,
        OptimizerKind::Subzo,
    ];

    pub fn method(self) -> Method {
        match self {
            OptimizerKind::Tezo | OptimizerKind::TezoM | OptimizerKind::TezoAdam => Method::TeZO,
            OptimizerKind::Mezo | OptimizerKind::MezoM | OptimizerKind::MezoAdam => Method::MeZO,
            OptimizerKind::Lozo => Method::LOZO,
            OptimizerKind::Subzo => Method::SubZO,
        }
    }

    pub fn rule(self) -> UpdateRule {
        match self {
            OptimizerKind::TezoM | OptimizerKind::MezoM => UpdateRule::Momentum,
            OptimizerKind::TezoAdam | OptimizerKind::MezoAdam => UpdateRule::Adam,
            _ => UpdateRule::Sgd,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Tezo => "tezo",
            OptimizerKind::TezoM => "tezo-m",
            OptimizerKind::TezoAdam => "tezo-adam",
            OptimizerKind::Mezo => "mezo",
            OptimizerKind::MezoM => "mezo-m",
            OptimizerKind::MezoAdam => "mezo-adam",
            OptimizerKind::Lozo => "lozo",
            OptimizerKind::Subzo => "subzo",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown optimizer `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub eta: f64,
    pub rho: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self { eta: 1e-4, rho: 1e-3, beta1: 0.9, beta2: 0.99, eps: 1e-5 }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Per-layer optimizer buffers.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerState {
    Stateless,
    TemporalMomentum { tau_m: Vec<f64> },
    TemporalAdam { tau_m: Vec<f64>, tau_v: Vec<f64> },
    DenseMomentum { m: Matrix },
    DenseAdam { m: Matrix, v: Matrix },
}

impl LayerState {
    pub fn floats(&self) -> usize {
        match self {
            LayerState::Stateless => 0,
            LayerState::TemporalMomentum { tau_m } => tau_m.len(),
            LayerState::TemporalAdam { tau_m, tau_v } => tau_m.len() + tau_v.len(),
            LayerState::DenseMomentum { m } => m.len(),
            LayerState::DenseAdam { m, v } => m.len() + v.len(),
        }
    }

    fn fresh(rule: UpdateRule, kind: &PerturbationKind, shape: (usize, usize)) -> Self {
        match (rule, kind) {
            (UpdateRule::Sgd, _) => LayerState::Stateless,
            (UpdateRule::Momentum, PerturbationKind::Tezo(fs)) => LayerState::TemporalMomentum { tau_m: vec![0.0; fs.rank()] },
            (UpdateRule::Adam, PerturbationKind::Tezo(fs)) => {
                LayerState::TemporalAdam { tau_m: vec![0.0; fs.rank()], tau_v: vec![0.0; fs.rank()] }
            }
            (UpdateRule::Momentum, _) => LayerState::DenseMomentum { m: Matrix::zeros(shape.0, shape.1) },
            (UpdateRule::Adam, _) => LayerState::DenseAdam { m: Matrix::zeros(shape.0, shape.1), v: Matrix::zeros(shape.0, shape.1) },
        }
    }
}

/// `W ← W − η κ Σ_s τ_s (u_s ∘ v_s)`
pub fn step_tezo(w: &mut Matrix, fs: &FactorSet, tau: &[f64], kappa: f64, eta: f64) -> Result<()> {
    fs.add_scaled(w, tau, -eta * kappa)
}

/// `τ_M ← β1 τ_M + (1 − β1) κ τ`, then `W ← W − η Σ_s (τ_M)_s (u_s ∘ v_s)`.
pub fn step_tezo_m(w: &mut Matrix, fs: &FactorSet, tau_m: &mut [f64], tau: &[f64], kappa: f64, eta: f64, beta1: f64) -> Result<()> {
    if tau_m.len() != tau.len() {
        return Err(Error::Shape(format!("momentum has {} entries, tau has {}", tau_m.len(), tau.len())));
    }
    for (m, t) in tau_m.iter_mut().zip(tau) {
        *m = beta1 * *m + (1.0 - beta1) * kappa * t;
    }
    fs.add_scaled(w, tau_m, -eta)
}

/// Factor-space Adam with the separable second moment.
pub fn step_tezo_adam(
    w: &mut Matrix,
    fs: &FactorSet,
    tau_m: &mut [f64],
    tau_v: &mut [f64],
    tau: &[f64],
    kappa: f64,
    hyper: &Hyper,
) -> Result<()> {
    let r = fs.rank();
    if tau.len() != r || tau_m.len() != r || tau_v.len() != r {
        return Err(Error::Shape(format!("factor-space buffers must have length {r}")));
    }
    w.ensure_shape(fs.m(), fs.n(), &fs.layer_id)?;
    for s in 0..r {
        let g = kappa * tau[s];
        tau_m[s] = hyper.beta1 * tau_m[s] + (1.0 - hyper.beta1) * g;
        tau_v[s] = hyper.beta2 * tau_v[s] + (1.0 - hyper.beta2) * g * g;
    }
    let (u, v) = (fs.u(), fs.v());
    let mut a = vec![0.0; r];
    let mut b = vec![0.0; r];
    for i in 0..fs.m() {
        let ui = u.row(i);
        for s in 0..r {
            a[s] = tau_m[s] * ui[s];
            b[s] = tau_v[s] * ui[s] * ui[s];
        }
        for (j, x) in w.row_mut(i).iter_mut().enumerate() {
            let vj = v.row(j);
            let (mut mt, mut vt) = (0.0, 0.0);
            for s in 0..r {
                mt += a[s] * vj[s];
                vt += b[s] * vj[s] * vj[s];
            }
            *x -= hyper.eta * mt / (vt + hyper.eps).sqrt();
        }
    }
    Ok(())
}

/// Dense SGD / momentum / Adam update with an explicit perturbation `z`.
pub fn step_mezo_family(w: &mut Matrix, state: &mut LayerState, z: &Matrix, kappa: f64, hyper: &Hyper) -> Result<()> {
    w.ensure_shape(z.rows(), z.cols(), "dense update")?;
    match state {
        // Same operation order as the momentum path, so β1 = 0 matches bitwise.
        LayerState::Stateless => {
            for (x, zz) in w.as_mut_slice().iter_mut().zip(z.as_slice()) {
                *x -= hyper.eta * (kappa * zz);
            }
        }
        LayerState::DenseMomentum { m } => {
            m.ensure_shape(z.rows(), z.cols(), "momentum")?;
            for ((x, mm), zz) in w.as_mut_slice().iter_mut().zip(m.as_mut_slice()).zip(z.as_slice()) {
                *mm = hyper.beta1 * *mm + (1.0 - hyper.beta1) * kappa * zz;
                *x -= hyper.eta * *mm;
            }
        }
        LayerState::DenseAdam { m, v } => {
            m.ensure_shape(z.rows(), z.cols(), "first moment")?;
            v.ensure_shape(z.rows(), z.cols(), "second moment")?;
            let it = w.as_mut_slice().iter_mut().zip(m.as_mut_slice()).zip(v.as_mut_slice()).zip(z.as_slice());
            for (((x, mm), vv), zz) in it {
                let g = kappa * zz;
                *mm = hyper.beta1 * *mm + (1.0 - hyper.beta1) * g;
                *vv = hyper.beta2 * *vv + (1.0 - hyper.beta2) * g * g;
                *x -= hyper.eta * *mm / (*vv + hyper.eps).sqrt();
            }
        }
        _ => return Err(Error::Config("temporal state used with a dense perturbation".into())),
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub rule: UpdateRule,
    pub hyper: Hyper,
    /// Divide `κ` by the layer rank before updating (the unbiased scaling).
    pub unbiased_scale: bool,
    pub layers: Vec<LayerState>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(rule: UpdateRule, hyper: Hyper, perturber: &Perturber, params: &ModelParams) -> Self {
        let layers = perturber
            .kinds()
            .iter()
            .zip(params.iter())
            .map(|(k, p)| LayerState::fresh(rule, k, p.shape()))
            .collect();
        Self { rule, hyper, unbiased_scale: false, layers, step: 0 }
    }

    /// Total optimizer-state floats; `Σ r_l` (momentum) or `2 Σ r_l` (Adam)
    /// on TeZO layers, `mn` / `2mn` on dense layers.
    pub fn state_floats(&self) -> usize {
        self.layers.iter().map(LayerState::floats).sum()
    }

    /// Clears factor-space buffers after a factor refresh.
    pub fn reset_temporal(&mut self) {
        for s in &mut self.layers {
            match s {
                LayerState::TemporalMomentum { tau_m } => tau_m.iter_mut().for_each(|x| *x = 0.0),
                LayerState::TemporalAdam { tau_m, tau_v } => {
                    tau_m.iter_mut().for_each(|x| *x = 0.0);
                    tau_v.iter_mut().for_each(|x| *x = 0.0);
                }
                _ => {}
            }
        }
    }

    /// Applies one update from `estimate`, replaying `Z_t` from its seed.
    pub fn step(&mut self, params: &mut ModelParams, perturber: &Perturber, estimate: &ZoEstimate) -> Result<()> {
        if !estimate.kappa.is_finite() {
            return Err(Error::NonFinite { f_plus: estimate.f_plus, f_minus: estimate.f_minus });
        }
        let draws = perturber.draws(estimate.seed, estimate.step);
        let hyper = self.hyper;
        for (l, (draw, state)) in draws.into_iter().zip(self.layers.iter_mut()).enumerate() {
            let kind = &perturber.kinds()[l];
            let mut kappa = estimate.kappa;
            if self.unbiased_scale {
                if let Some(r) = kind.rank() {
                    kappa /= r as f64;
                }
            }
            let w = &mut params.get_mut(l).value;
            match (draw, kind) {
                (LayerDraw::Temporal(tau), PerturbationKind::Tezo(fs)) => match state {
                    LayerState::Stateless => step_tezo(w, fs, &tau, kappa, hyper.eta)?,
                    LayerState::TemporalMomentum { tau_m } => step_tezo_m(w, fs, tau_m, &tau, kappa, hyper.eta, hyper.beta1)?,
                    LayerState::TemporalAdam { tau_m, tau_v } => step_tezo_adam(w, fs, tau_m, tau_v, &tau, kappa, &hyper)?,
                    _ => return Err(Error::Config("dense state on a TeZO layer".into())),
                },
                (LayerDraw::Explicit(z), _) => step_mezo_family(w, state, &z, kappa, &hyper)?,
                (LayerDraw::Temporal(_), _) => unreachable!("temporal draws come from TeZO layers"),
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RankSpec {
    Fixed(usize),
    Auto(RankPolicy),
}

/// Everything the training loop needs, independent of where the objective
/// came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub steps: u64,
    pub hyper: Hyper,
    pub seed: u64,
    pub log_every: u64,
    pub unbiased_scale: bool,
    pub rank: RankSpec,
    pub lozo_interval: u64,
    pub subzo_interval: u64,
    pub factor_refresh: Option<u64>,
    /// Stop once `loss ≤ target_ratio · initial_loss`.
    pub target_ratio: Option<f64>,
}

impl TrainConfig {
    pub fn new(optimizer: OptimizerKind, steps: u64) -> Self {
        Self {
            optimizer,
            steps,
            hyper: Hyper::default(),
            seed: 0,
            log_every: 1,
            unbiased_scale: false,
            rank: RankSpec::Fixed(4),
            lozo_interval: crate::estimators::LOZO_DEFAULT_INTERVAL,
            subzo_interval: crate::estimators::SUBZO_DEFAULT_INTERVAL,
            factor_refresh: None,
            target_ratio: None,
        }
    }

    /// Per-parameter ranks for `model` (0 for 1-D parameters).
    pub fn resolve_ranks(&self, model: &ModelParams) -> Result<Vec<usize>> {
        if self.optimizer.method() == Method::MeZO {
            return Ok(vec![0; model.len()]);
        }
        match &self.rank {
            RankSpec::Fixed(r) => model
                .iter()
                .map(|p| match p.kind {
                    ParamKind::Vector => Ok(0),
                    ParamKind::Matrix => {
                        let (m, n) = p.shape();
                        if *r == 0 || *r > m.min(n) {
                            Err(Error::Config(format!("rank {r} exceeds min({m}, {n}) for layer `{}`", p.name)))
                        } else {
                            Ok(*r)
                        }
                    }
                })
                .collect(),
            RankSpec::Auto(policy) => {
                let mut ranks = vec![0; model.len()];
                for l in select_ranks(model, policy)? {
                    ranks[l.param_index] = l.rank_selected;
                }
                Ok(ranks)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if let Some(t) = self.target_ratio {
            if !(t > 0.0) {
                return Err(Error::Config(format!("target ratio must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// Losses above this multiple of the initial loss abort the run.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// The outer training loop: `T` iterations of estimate-then-update with
/// per-iteration seeds derived from `config.seed`.
pub fn run<O: Objective + ?Sized>(objective: &O, model: &ModelParams, config: &TrainConfig) -> Result<(RunReport, ModelParams)> {
    config.validate()?;
    let started = Instant::now();
    let schedule = SeedSchedule::new(config.seed);
    let perturb_seeds = schedule.child(domain::PERTURBATION);
    let batch_seeds = schedule.child(domain::BATCH);
    let spec = PerturbationSpec {
        method: config.optimizer.method(),
        ranks: config.resolve_ranks(model)?,
        lozo_interval: config.lozo_interval,
        subzo_interval: config.subzo_interval,
        factor_refresh: if config.optimizer.method() == Method::TeZO { config.factor_refresh } else { None },
    };
    let mut perturber = Perturber::new(model, &spec, schedule.child(domain::FACTORS))?;
    let mut params = model.clone();
    let mut state = OptimizerState::new(config.optimizer.rule(), config.hyper, &perturber, &params);
    state.unbiased_scale = config.unbiased_scale;

    let eval_batch = objective.full_batch();
    let initial = objective.eval(&params, &eval_batch)?;
    let mut elements = perturber.init_elements();
    let mut rows = vec![ReportRow { step: 0, loss: initial, elements_generated: elements, state_floats: state.state_floats() as u64 }];
    let mut status = RunStatus::Completed;
    let mut skipped = 0u64;
    let bad = |loss: f64| !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial.abs().max(f64::MIN_POSITIVE);

    if let Some(target) = config.target_ratio {
        if initial <= target * initial {
            status = RunStatus::ReachedTarget { step: 0 };
        }
    }

    if status == RunStatus::Completed {
        for t in 0..config.steps {
            let refreshed = perturber.refresh_if_due(t)?;
            if refreshed > 0 {
                elements += refreshed;
                state.reset_temporal();
            }
            elements += perturber.step_elements(t);
            let batch = objective.sample_batch(batch_seeds.derive(t));
            match spsa_kappa(objective, &mut params, &perturber, &batch, config.hyper.rho, perturb_seeds.derive(t), t) {
                Ok(est) => state.step(&mut params, &perturber, &est)?,
                Err(Error::NonFinite { .. }) | Err(Error::Numerical(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
            let step = t + 1;
            let logged = step % config.log_every == 0 || step == config.steps;
            if !logged && config.target_ratio.is_none() {
                continue;
            }
            let loss = objective.eval(&params, &eval_batch).unwrap_or(f64::NAN);
            let hit = config.target_ratio.is_some_and(|r| loss <= r * initial);
            let diverged = bad(loss);
            if logged || hit || diverged {
                rows.push(ReportRow { step, loss, elements_generated: elements, state_floats: state.state_floats() as u64 });
            }
            if diverged {
                status = RunStatus::Diverged { step };
                break;
            }
            if hit {
                status = RunStatus::ReachedTarget { step };
                break;
            }
        }
    }

    let last = rows.last().expect("initial row");
    let totals = RunTotals {
        steps_run: last.step,
        elements_generated: last.elements_generated,
        state_floats: last.state_floats,
        skipped_steps: skipped,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    Ok((RunReport { config: config.echo(), seed: config.seed, rows, totals, status }, params))
}

impl TrainConfig {
    /// `key = value` pairs describing this configuration.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("optimizer".to_string(), self.optimizer.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("eta".into(), self.hyper.eta.to_string()),
            ("rho".into(), self.hyper.rho.to_string()),
            ("beta1".into(), self.hyper.beta1.to_string()),
            ("beta2".into(), self.hyper.beta2.to_string()),
            ("eps".into(), self.hyper.eps.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("log_every".into(), self.log_every.to_string()),
            ("unbiased_scale".into(), self.unbiased_scale.to_string()),
        ];
        match &self.rank {
            RankSpec::Fixed(r) => v.push(("rank".into(), r.to_string())),
            RankSpec::Auto(p) => {
                v.push(("rank_auto".into(), p.threshold_frac.to_string()));
                v.push(("rmax".into(), p.r_max.to_string()));
            }
        }
        v.push(("lozo_interval".into(), self.lozo_interval.to_string()));
        v.push(("subzo_interval".into(), self.subzo_interval.to_string()));
        v.push(("factor_refresh".into(), self.factor_refresh.map_or("never".into(), |k| k.to_string())));
        if let Some(t) = self.target_ratio {
            v.push(("target".into(), t.to_string()));
        }
        v
    }
}

/// One run per derived seed, in parallel. `make_model` builds the initial
/// parameters for a run seed.
pub fn run_sweep<O, F>(objective: &O, make_model: F, config: &TrainConfig, runs: usize) -> Result<Vec<RunReport>>
where
    O: Objective + ?Sized,
    F: Fn(u64) -> ModelParams + Sync,
{
    use rayon::prelude::*;
    let sweep = SeedSchedule::new(config.seed).child(domain::SWEEP);
    (0..runs)
        .into_par_iter()
        .map(|k| {
            let mut c = config.clone();
            c.seed = sweep.derive(k as u64);
            run(objective, &make_model(c.seed), &c).map(|(r, _)| r)
        })
        .collect()
}
