//! Monte Carlo and algebraic checks of the low-rank estimator.
//!
//! Every trial draws fresh `u`, `v` and `τ` from its own seed, in that order,
//! so individual trials can be replayed. Confidence bands come from the
//! sample standard errors; nothing here uses a fixed absolute tolerance on a
//! stochastic quantity.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::delta_coefficient;
use crate::matrix::Matrix;
use crate::objectives::Quadratic;
use crate::rng::{domain, GaussianStream, SeedSchedule};
use crate::stats::{chunked_trials, Moments, VecMoments};

/// Minimum trial count for [`theorem1_check`].
pub const MIN_TRIALS: u64 = 10_000;

/// One trial's `(u, v, τ)`, drawn in that order from `seed`.
pub fn draw_triplet(m: usize, n: usize, r: usize, seed: u64) -> (Matrix, Matrix, Vec<f64>) {
    let mut g = GaussianStream::new(seed);
    let mut u = Matrix::zeros(m, r);
    let mut v = Matrix::zeros(n, r);
    g.fill_normal(u.as_mut_slice());
    g.fill_normal(v.as_mut_slice());
    let tau = g.sample_normal_vec(r);
    (u, v, tau)
}

/// `Z = Σ_s τ_s u_s v_sᵀ`.
pub fn cpd_matrix(u: &Matrix, v: &Matrix, tau: &[f64]) -> Matrix {
    Matrix::from_fn(u.rows(), v.rows(), |i, j| {
        let (ui, vj) = (u.row(i), v.row(j));
        (0..tau.len()).map(|s| tau[s] * ui[s] * vj[s]).sum()
    })
}

/// Entrywise `Z ∘ Z`.
pub fn dense_square(u: &Matrix, v: &Matrix, tau: &[f64]) -> Matrix {
    cpd_matrix(u, v, tau).map(|x| x * x)
}

/// `Σ_s τ_s² (u_s² ∘ v_s²)`.
pub fn separable_term(u: &Matrix, v: &Matrix, tau: &[f64]) -> Matrix {
    Matrix::from_fn(u.rows(), v.rows(), |i, j| {
        let (ui, vj) = (u.row(i), v.row(j));
        (0..tau.len()).map(|s| tau[s] * tau[s] * ui[s] * ui[s] * vj[s] * vj[s]).sum()
    })
}

/// `Σ_{p≠q} τ_p τ_q (u_p u_q ∘ v_p v_q)`.
pub fn cross_term(u: &Matrix, v: &Matrix, tau: &[f64]) -> Matrix {
    let r = tau.len();
    Matrix::from_fn(u.rows(), v.rows(), |i, j| {
        let (ui, vj) = (u.row(i), v.row(j));
        let mut acc = 0.0;
        for p in 0..r {
            for q in 0..r {
                if p != q {
                    acc += tau[p] * tau[q] * ui[p] * ui[q] * vj[p] * vj[q];
                }
            }
        }
        acc
    })
}

/// Per-entry bias and spread of `(1/r)⟨∇f, Z⟩ Z` against `∇f`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatReport {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub trials: u64,
    pub seed: u64,
    /// Row-major `∇f`.
    pub grad: Vec<f64>,
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Monte Carlo mean of `‖(1/r)κZ − ∇f‖²`.
    pub empirical_variance: f64,
    /// Standard error of `empirical_variance`.
    pub variance_std_err: f64,
    pub delta: f64,
    /// `δ ‖∇f‖²`.
    pub predicted_variance: f64,
    /// `empirical / predicted`; `None` when `∇f = 0`.
    pub ratio: Option<f64>,
}

impl StatReport {
    pub fn bias(&self) -> Vec<f64> {
        self.mean.iter().zip(&self.grad).map(|(m, g)| m - g).collect()
    }

    /// `|bias| / se` per entry; 0 where both vanish, infinite where only `se` does.
    pub fn z_scores(&self) -> Vec<f64> {
        self.bias()
            .iter()
            .zip(&self.std_err)
            .map(|(b, s)| match (*b == 0.0, *s == 0.0) {
                (true, _) => 0.0,
                (false, true) => f64::INFINITY,
                _ => b.abs() / s,
            })
            .collect()
    }

    pub fn max_z(&self) -> f64 {
        self.z_scores().into_iter().fold(0.0, f64::max)
    }
}

/// The gradient used by [`theorem1_check`]: i.i.d. `N(0, 1)` entries drawn
/// from the problem stream of `seed`.
pub fn fixed_gradient(m: usize, n: usize, seed: u64) -> Matrix {
    let mut g = Matrix::zeros(m, n);
    GaussianStream::new(SeedSchedule::new(seed).child(domain::PROBLEM).derive(0)).fill_normal(g.as_mut_slice());
    g
}

/// Samples `(1/r)⟨∇f, Z⟩ Z` against a fixed random gradient.
pub fn theorem1_check(m: usize, n: usize, r: usize, trials: u64, seed: u64) -> Result<StatReport> {
    theorem1_check_with_grad(&fixed_gradient(m, n, seed), r, trials, seed)
}

/// [`theorem1_check`] with a caller-supplied gradient.
pub fn theorem1_check_with_grad(grad: &Matrix, r: usize, trials: u64, seed: u64) -> Result<StatReport> {
    let (m, n) = grad.shape();
    if r == 0 || r > m.min(n) {
        return Err(Error::Config(format!("rank {r} must be in 1..={}", m.min(n))));
    }
    if trials < MIN_TRIALS {
        return Err(Error::Config(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    let seeds = SeedSchedule::new(seed).child(domain::TRIALS);
    let inv_r = 1.0 / r as f64;
    let (entries, sq) = chunked_trials(
        trials,
        |range| {
            let mut vm = VecMoments::new(m * n);
            let mut sq = Moments::new();
            for k in range {
                let (u, v, tau) = draw_triplet(m, n, r, seeds.derive(k));
                let mut z = cpd_matrix(&u, &v, &tau);
                let kappa = grad.dot(&z);
                z.scale(inv_r * kappa);
                vm.push(z.as_slice());
                sq.push(z.as_slice().iter().zip(grad.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum());
            }
            (vm, sq)
        },
        |(a, sa), (b, sb)| (a.merge(&b), sa.merge(&sb)),
    )
    .expect("trials > 0");
    let delta = delta_coefficient(m, n, r);
    let predicted = delta * grad.frobenius_norm_sq();
    Ok(StatReport {
        m,
        n,
        r,
        trials,
        seed,
        grad: grad.as_slice().to_vec(),
        mean: entries.means(),
        std_err: entries.std_errs(),
        empirical_variance: sq.mean(),
        variance_std_err: sq.std_err(),
        delta,
        predicted_variance: predicted,
        ratio: (predicted > 0.0).then(|| sq.mean() / predicted),
    })
}

/// Per-entry Monte Carlo mean of the cross term.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossTermReport {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub trials: u64,
    pub seed: u64,
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Largest `|separable + cross − dense|` over all trials and entries.
    pub max_identity_residual: f64,
}

impl CrossTermReport {
    pub fn max_z(&self) -> f64 {
        self.mean
            .iter()
            .zip(&self.std_err)
            .map(|(m, s)| if *m == 0.0 { 0.0 } else if *s == 0.0 { f64::INFINITY } else { m.abs() / s })
            .fold(0.0, f64::max)
    }
}

pub fn cross_term_stats(m: usize, n: usize, r: usize, trials: u64, seed: u64) -> Result<CrossTermReport> {
    if r == 0 || r > m.min(n) {
        return Err(Error::Config(format!("rank {r} must be in 1..={}", m.min(n))));
    }
    if trials == 0 {
        return Err(Error::Config("need at least one trial".into()));
    }
    if r == 1 {
        return Ok(CrossTermReport { m, n, r, trials, seed, mean: vec![0.0; m * n], std_err: vec![0.0; m * n], max_identity_residual: 0.0 });
    }
    let seeds = SeedSchedule::new(seed).child(domain::TRIALS);
    let (vm, resid) = chunked_trials(
        trials,
        |range| {
            let mut vm = VecMoments::new(m * n);
            let mut resid = 0.0f64;
            for k in range {
                let (u, v, tau) = draw_triplet(m, n, r, seeds.derive(k));
                let cross = cross_term(&u, &v, &tau);
                let sep = separable_term(&u, &v, &tau);
                let dense = dense_square(&u, &v, &tau);
                for ((c, s), d) in cross.as_slice().iter().zip(sep.as_slice()).zip(dense.as_slice()) {
                    resid = resid.max((s + c - d).abs());
                }
                vm.push(cross.as_slice());
            }
            (vm, resid)
        },
        |(a, ra), (b, rb)| (a.merge(&b), ra.max(rb)),
    )
    .expect("trials > 0");
    Ok(CrossTermReport { m, n, r, trials, seed, mean: vm.means(), std_err: vm.std_errs(), max_identity_residual: resid })
}

/// Finite-ρ bias of the SPSA estimator on a non-quadratic objective.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RhoBiasReport {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub trials: u64,
    pub seed: u64,
    pub rhos: Vec<f64>,
    /// `‖mean_ρ − ∇f‖_F` per ρ.
    pub error_vs_grad: Vec<f64>,
    /// `‖mean_ρ − mean_0‖_F` per ρ, where `mean_0` uses `κ = ⟨∇f, Z⟩` on the
    /// same draws. This isolates the part of the error that depends on ρ.
    pub bias_vs_limit: Vec<f64>,
}

/// Monte Carlo mean of `(1/r) κ_ρ Z` with `κ_ρ = (f(W + ρZ) − f(W − ρZ)) / 2ρ`
/// for each ρ, using common draws across ρ values.
pub fn rho_bias_study(objective: &Quadratic, point: &Matrix, r: usize, rhos: &[f64], trials: u64, seed: u64) -> Result<RhoBiasReport> {
    let (m, n) = point.shape();
    if objective.shapes() != [(m, n)] {
        return Err(Error::Shape(format!("objective does not act on a single {m}x{n} matrix")));
    }
    if r == 0 || r > m.min(n) {
        return Err(Error::Config(format!("rank {r} must be in 1..={}", m.min(n))));
    }
    if rhos.is_empty() || rhos.iter().any(|&p| !(p > 0.0)) || trials == 0 {
        return Err(Error::Config("need positive rhos and at least one trial".into()));
    }
    let w = point.as_slice();
    let grad = objective.grad_flat(w);
    let seeds = SeedSchedule::new(seed).child(domain::TRIALS);
    let inv_r = 1.0 / r as f64;
    let k = rhos.len() + 1;
    let acc = chunked_trials(
        trials,
        |range| {
            let mut vm: Vec<VecMoments> = (0..k).map(|_| VecMoments::new(m * n)).collect();
            let mut wp = vec![0.0; m * n];
            let mut wm = vec![0.0; m * n];
            for t in range {
                let (u, v, tau) = draw_triplet(m, n, r, seeds.derive(t));
                let z = cpd_matrix(&u, &v, &tau);
                let zs = z.as_slice();
                let k0: f64 = grad.iter().zip(zs).map(|(g, z)| g * z).sum();
                vm[0].push(&zs.iter().map(|z| inv_r * k0 * z).collect::<Vec<_>>());
                for (slot, &rho) in rhos.iter().enumerate() {
                    for i in 0..m * n {
                        wp[i] = w[i] + rho * zs[i];
                        wm[i] = w[i] - rho * zs[i];
                    }
                    let kappa = (objective.eval_flat(&wp) - objective.eval_flat(&wm)) / (2.0 * rho);
                    vm[slot + 1].push(&zs.iter().map(|z| inv_r * kappa * z).collect::<Vec<_>>());
                }
            }
            vm
        },
        |a, b| a.iter().zip(&b).map(|(x, y)| x.merge(y)).collect(),
    )
    .expect("trials > 0");
    let means: Vec<Vec<f64>> = acc.iter().map(VecMoments::means).collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    Ok(RhoBiasReport {
        m,
        n,
        r,
        trials,
        seed,
        rhos: rhos.to_vec(),
        error_vs_grad: means[1..].iter().map(|mu| dist(mu, &grad)).collect(),
        bias_vs_limit: means[1..].iter().map(|mu| dist(mu, &means[0])).collect(),
    })
}

/// Accumulated gap between the dense and separable second moments.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentErrorTrace {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub beta2: f64,
    pub seed: u64,
    /// `‖E_t‖_F` for `t = 0..=T`, where `E_t = (V_t − V̂_t)/(mn)`.
    pub norms: Vec<f64>,
}

impl MomentErrorTrace {
    pub fn terminal(&self) -> f64 {
        *self.norms.last().expect("E_0 is always recorded")
    }
}

/// Runs both second-moment recursions with shared draws and `κ_t = 1`:
///
/// ```text
/// V_{t+1} = β2 V_t + (1 − β2) (Σ_s τ_s u_s ∘ v_s)²
/// V̂_{t+1} = β2 V̂_t + (1 − β2) Σ_s τ_s² (u_s² ∘ v_s²)
/// ```
///
/// `u` and `v` are drawn once per seed; `τ` is fresh each step. One trace
/// per `(size, seed)`, ordered size-major.
pub fn accumulated_moment_error(sizes: &[(usize, usize)], r: usize, steps: usize, beta2: f64, seeds: &[u64]) -> Result<Vec<MomentErrorTrace>> {
    if steps < 100 {
        return Err(Error::Config(format!("need at least 100 steps, got {steps}")));
    }
    if !(0.0..1.0).contains(&beta2) {
        return Err(Error::Config(format!("beta2 must be in [0, 1), got {beta2}")));
    }
    for &(m, n) in sizes {
        if r == 0 || r > m.min(n) {
            return Err(Error::Config(format!("rank {r} must be in 1..={} for {m}x{n}", m.min(n))));
        }
    }
    let jobs: Vec<(usize, usize, u64)> = sizes.iter().flat_map(|&(m, n)| seeds.iter().map(move |&s| (m, n, s))).collect();
    Ok(jobs.into_par_iter().map(|(m, n, seed)| moment_error_trace(m, n, r, steps, beta2, seed)).collect())
}

fn moment_error_trace(m: usize, n: usize, r: usize, steps: usize, beta2: f64, seed: u64) -> MomentErrorTrace {
    let schedule = SeedSchedule::new(seed);
    let mut fg = GaussianStream::new(schedule.child(domain::FACTORS).derive(0));
    let mut u = Matrix::zeros(m, r);
    let mut v = Matrix::zeros(n, r);
    fg.fill_normal(u.as_mut_slice());
    fg.fill_normal(v.as_mut_slice());
    let taus = schedule.child(domain::PERTURBATION);
    let mut dense = vec![0.0; m * n];
    let mut sep = vec![0.0; m * n];
    let mut norms = Vec::with_capacity(steps + 1);
    norms.push(0.0);
    let scale = 1.0 / (m * n) as f64;
    let (mut a, mut b) = (vec![0.0; r], vec![0.0; r]);
    for t in 0..steps {
        let tau = GaussianStream::new(taus.derive(t as u64)).sample_normal_vec(r);
        let mut acc = 0.0;
        for i in 0..m {
            let ui = u.row(i);
            for s in 0..r {
                a[s] = tau[s] * ui[s];
                b[s] = a[s] * a[s];
            }
            for j in 0..n {
                let vj = v.row(j);
                let (mut z, mut q) = (0.0, 0.0);
                for s in 0..r {
                    z += a[s] * vj[s];
                    q += b[s] * vj[s] * vj[s];
                }
                let k = i * n + j;
                dense[k] = beta2 * dense[k] + (1.0 - beta2) * z * z;
                sep[k] = beta2 * sep[k] + (1.0 - beta2) * q;
                let e = (dense[k] - sep[k]) * scale;
                acc += e * e;
            }
        }
        norms.push(acc.sqrt());
    }
    MomentErrorTrace { m, n, r, beta2, seed, norms }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_gives_zero_moments() {
        let rep = theorem1_check_with_grad(&Matrix::zeros(3, 3), 2, MIN_TRIALS, 1).unwrap();
        assert!(rep.mean.iter().all(|&x| x == 0.0));
        assert_eq!(rep.empirical_variance, 0.0);
        assert_eq!(rep.ratio, None);
        assert_eq!(rep.max_z(), 0.0);
    }

    #[test]
    fn too_few_trials_rejected() {
        assert!(theorem1_check(2, 2, 1, 10, 0).is_err());
    }

    #[test]
    fn identity_holds_per_draw() {
        for seed in 0..20 {
            let (u, v, tau) = draw_triplet(6, 5, 3, seed);
            let d = dense_square(&u, &v, &tau);
            let s = separable_term(&u, &v, &tau);
            let c = cross_term(&u, &v, &tau);
            for k in 0..30 {
                assert!((s.as_slice()[k] + c.as_slice()[k] - d.as_slice()[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rank_one_cross_is_zero() {
        let (u, v, tau) = draw_triplet(4, 4, 1, 9);
        assert_eq!(cross_term(&u, &v, &tau).max_abs(), 0.0);
        let rep = cross_term_stats(4, 4, 1, 10, 0).unwrap();
        assert!(rep.mean.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn beta_zero_error_is_current_cross_term() {
        let traces = accumulated_moment_error(&[(5, 4)], 2, 100, 0.0, &[3]).unwrap();
        let tr = &traces[0];
        assert_eq!(tr.norms[0], 0.0);
        // Rebuild the last step's cross term from the same streams.
        let schedule = SeedSchedule::new(3);
        let mut fg = GaussianStream::new(schedule.child(domain::FACTORS).derive(0));
        let (mut u, mut v) = (Matrix::zeros(5, 2), Matrix::zeros(4, 2));
        fg.fill_normal(u.as_mut_slice());
        fg.fill_normal(v.as_mut_slice());
        let tau = GaussianStream::new(schedule.child(domain::PERTURBATION).derive(99)).sample_normal_vec(2);
        let want = cross_term(&u, &v, &tau).frobenius_norm() / 20.0;
        assert!((tr.terminal() - want).abs() <= 1e-12 * want.max(1.0));
    }

    #[test]
    fn rho_bias_vanishes_on_pure_quadratics() {
        let q = Quadratic::conditioned(3, 3, 4.0, 1).unwrap();
        let w = Matrix::from_fn(3, 3, |i, j| (i as f64) - 0.5 * j as f64);
        let rep = rho_bias_study(&q, &w, 2, &[1e-1, 1e-3], 2000, 4).unwrap();
        assert!(rep.bias_vs_limit.iter().all(|&b| b < 1e-10), "{:?}", rep.bias_vs_limit);
    }

    #[test]
    fn rho_bias_grows_with_rho_on_cubic() {
        let q = Quadratic::isotropic(3, 3).with_cubic(1.0);
        let w = Matrix::from_fn(3, 3, |i, j| 0.3 * (i + j) as f64);
        let rep = rho_bias_study(&q, &w, 2, &[1e-1, 1e-2], 4000, 4).unwrap();
        assert!(rep.bias_vs_limit[0] > rep.bias_vs_limit[1]);
        // Cubic remainder scales with ρ².
        let ratio = rep.bias_vs_limit[0] / rep.bias_vs_limit[1];
        assert!((ratio - 100.0).abs() < 1.0, "{ratio}");
    }

    #[test]
    fn reports_are_reproducible() {
        let a = theorem1_check(3, 2, 2, MIN_TRIALS, 5).unwrap();
        let b = theorem1_check(3, 2, 2, MIN_TRIALS, 5).unwrap();
        assert_eq!(a, b);
    }
}
