//! Update rules, spectra and statistics against independent references.

use nalgebra::DMatrix;

use tezo::estimators::{spsa_kappa, LayerDraw, PerturbationSpec, Perturber};
use tezo::lowrank::{init_factors, LayerShape};
use tezo::objectives::{cosine_matrix, gradient_spectrum, Activation, CascadeMlp, ClusterSpec, Dataset, GradientOracle, Objective, Quadratic};
use tezo::optimizers::{run, step_tezo, step_tezo_adam, Hyper, OptimizerKind, OptimizerState, RankSpec, TrainConfig, UpdateRule};
use tezo::rank::{matrix_rank, select_ranks, singular_values, RankPolicy};
use tezo::rng::{GaussianStream, SeedSchedule};
use tezo::verify::{rho_bias_study, theorem1_check};
use tezo::{Matrix, ModelParams, Param};

fn gaussian(m: usize, n: usize, seed: u64) -> Matrix {
    let mut w = Matrix::zeros(m, n);
    GaussianStream::new(seed).fill_normal(w.as_mut_slice());
    w
}

/// `Z_ij = Σ_s τ_s u_is v_js` by explicit loops.
fn dense_cpd(u: &Matrix, v: &Matrix, tau: &[f64]) -> Matrix {
    let mut z = Matrix::zeros(u.rows(), v.rows());
    for i in 0..u.rows() {
        for j in 0..v.rows() {
            for (s, t) in tau.iter().enumerate() {
                z[(i, j)] += t * u[(i, s)] * v[(j, s)];
            }
        }
    }
    z
}

#[test]
fn tezo_trajectory_matches_dense_reference() {
    let q = Quadratic::conditioned(12, 9, 5.0, 1).unwrap();
    let mut params = q.initial_params(2);
    let p = Perturber::new(&params, &PerturbationSpec::tezo(vec![3]), SeedSchedule::new(3)).unwrap();
    let fs = p.factor_set(0).unwrap().clone();
    let mut dense = params.get(0).value.clone();
    let eta = 1e-3;
    for t in 0..200 {
        let est = spsa_kappa(&q, &mut params, &p, &(), 1e-3, 1000 + t, t).unwrap();
        let LayerDraw::Temporal(tau) = &p.draws(est.seed, t)[0] else { unreachable!() };
        step_tezo(&mut params.get_mut(0).value, &fs, tau, est.kappa, eta).unwrap();
        let g = dense_cpd(fs.u(), fs.v(), tau);
        dense.axpy(-eta * est.kappa, &g);
        let diff = params.get(0).value.sub(&dense).max_abs();
        assert!(diff <= 1e-12, "step {t}: {diff}");
    }
}

#[test]
fn adam_moments_match_dense_expansions() {
    let (m, n, r) = (7, 6, 3);
    let fs = init_factors("w", LayerShape::new(m, n, r).unwrap(), 4).unwrap();
    let hyper = Hyper { eta: 1e-2, ..Hyper::default() };
    let mut w = gaussian(m, n, 5);
    let mut dense_w = w.clone();
    let (mut tm, mut tv) = (vec![0.0; r], vec![0.0; r]);
    let mut dense_m = Matrix::zeros(m, n);
    let mut dense_sep = Matrix::zeros(m, n);
    let (u, v) = (fs.u().clone(), fs.v().clone());
    for t in 0..100u64 {
        let tau = GaussianStream::new(50 + t).sample_normal_vec(r);
        let kappa = (t as f64 * 0.7).sin() * 3.0;
        step_tezo_adam(&mut w, &fs, &mut tm, &mut tv, &tau, kappa, &hyper).unwrap();
        // Dense recursions: M on κZ, V on the separable term Σ κ²τ² u² v².
        for i in 0..m {
            for j in 0..n {
                let (mut z, mut sep) = (0.0, 0.0);
                for s in 0..r {
                    z += tau[s] * u[(i, s)] * v[(j, s)];
                    sep += kappa * kappa * tau[s] * tau[s] * u[(i, s)].powi(2) * v[(j, s)].powi(2);
                }
                dense_m[(i, j)] = hyper.beta1 * dense_m[(i, j)] + (1.0 - hyper.beta1) * kappa * z;
                dense_sep[(i, j)] = hyper.beta2 * dense_sep[(i, j)] + (1.0 - hyper.beta2) * sep;
                dense_w[(i, j)] -= hyper.eta * dense_m[(i, j)] / (dense_sep[(i, j)] + hyper.eps).sqrt();
            }
        }
        // Brute-force expansion of the factor-space second moment.
        let mut v_exp = Matrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                for s in 0..r {
                    v_exp[(i, j)] += tv[s] * u[(i, s)].powi(2) * v[(j, s)].powi(2);
                }
            }
        }
        let vd = v_exp.sub(&dense_sep).max_abs();
        assert!(vd <= 1e-12 * dense_sep.max_abs().max(1.0), "step {t}: V differs by {vd}");
        assert!(v_exp.sub(&fs.materialize_squared(&tv).unwrap()).max_abs() <= 1e-12 * v_exp.max_abs().max(1.0));
        let wd = w.sub(&dense_w).max_abs();
        assert!(wd <= 1e-12, "step {t}: W differs by {wd}");
    }
}

#[test]
fn full_rank_tezo_and_mezo_differ_but_both_descend() {
    let q = Quadratic::conditioned(6, 6, 4.0, 7).unwrap();
    let model = q.initial_params(8);
    let mut c = TrainConfig::new(OptimizerKind::Tezo, 1000);
    c.rank = RankSpec::Fixed(6);
    c.hyper.eta = 2e-4;
    c.log_every = 1000;
    c.seed = 9;
    let (rt, pt) = run(&q, &model, &c).unwrap();
    c.optimizer = OptimizerKind::Mezo;
    c.hyper.eta = 1e-3;
    let (rm, pm) = run(&q, &model, &c).unwrap();
    assert_ne!(pt, pm);
    assert!(rt.final_loss() < rt.rows[0].loss);
    assert!(rm.final_loss() < rm.rows[0].loss);
}

#[test]
fn momentum_state_is_rank_sized() {
    let spec = ClusterSpec { dim: 8, classes: 3, intrinsic_dim: 3, samples: 32, spread: 2.0, noise: 0.4, ambient_noise: 0.05 };
    let net = CascadeMlp::new(vec![8, 10, 9, 3], Activation::Tanh, true, spec.generate(1).unwrap(), 8).unwrap();
    let params = net.initial_params(2);
    let ranks = vec![4, 0, 3, 0, 2, 0];
    let p = Perturber::new(&params, &PerturbationSpec::tezo(ranks), SeedSchedule::new(3)).unwrap();
    let state = OptimizerState::new(UpdateRule::Momentum, Hyper::default(), &p, &params);
    // Σ r_l on weights plus dense momentum for the three bias vectors.
    assert_eq!(state.state_floats(), 4 + 3 + 2 + 10 + 9 + 3);
}

#[test]
fn svd_matches_gram_eigenvalues() {
    let w = gaussian(64, 48, 11);
    let sv = singular_values(&w, 48).unwrap();
    let dm = DMatrix::from_row_slice(64, 48, w.as_slice());
    let mut eig: Vec<f64> = (dm.transpose() * &dm).symmetric_eigenvalues().iter().map(|e| e.max(0.0).sqrt()).collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    for (a, b) in sv.iter().zip(&eig) {
        assert!((a - b).abs() <= 1e-8 * b, "{a} vs {b}");
    }
}

/// `U diag(σ) Vᵀ` with orthonormal columns from QR of Gaussian matrices.
fn with_spectrum(m: usize, n: usize, sigma: &[f64], seed: u64) -> Matrix {
    let k = sigma.len();
    let qu = DMatrix::from_row_slice(m, k, gaussian(m, k, seed).as_slice()).qr().q();
    let qv = DMatrix::from_row_slice(n, k, gaussian(n, k, seed ^ 1).as_slice()).qr().q();
    let w = qu * DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(sigma)) * qv.transpose();
    Matrix::from_fn(m, n, |i, j| w[(i, j)])
}

#[test]
fn constructed_spectrum_rank() {
    let w = with_spectrum(9, 7, &[1.0, 0.31, 0.29, 0.1], 12);
    assert_eq!(matrix_rank(&w, &RankPolicy::new(0.30, 64).unwrap()).unwrap(), 2);
    let sv = singular_values(&w, 4).unwrap();
    for (a, b) in sv.iter().zip([1.0, 0.31, 0.29, 0.1]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn block_rules() {
    let policy = RankPolicy::new(0.5, 64).unwrap();
    let big = ModelParams::new(vec![Param::matrix("a", 0, Matrix::identity(100)), Param::matrix("b", 0, Matrix::identity(120))]);
    assert!(select_ranks(&big, &policy).unwrap().iter().all(|l| l.rank_selected == 64));
    // Two blocks built independently.
    let model = ModelParams::new(vec![
        Param::matrix("a", 0, Matrix::from_diag(&[1.0, 1.0, 1.0, 0.0])),
        Param::matrix("b", 0, Matrix::from_diag(&[1.0, 1.0, 0.0, 0.0])),
        Param::matrix("c", 1, Matrix::from_diag(&[1.0, 0.0, 0.0, 0.0])),
        Param::matrix("d", 1, Matrix::from_diag(&[1.0, 1.0, 1.0, 1.0])),
    ]);
    let r: Vec<usize> = select_ranks(&model, &policy).unwrap().iter().map(|l| l.rank_selected).collect();
    assert_eq!(r, vec![2, 2, 1, 1]);
}

#[test]
fn variance_ratio_other_shapes() {
    for (m, n, r, delta) in [(1, 1, 1, 26.0), (8, 8, 4, 123.5)] {
        let rep = theorem1_check(m, n, r, 1_000_000, 21).unwrap();
        assert_eq!(rep.delta, delta);
        let ratio = rep.ratio.unwrap();
        assert!((0.9..=1.1).contains(&ratio), "({m},{n},{r}): {ratio}");
        assert!(rep.max_z() <= 4.0);
    }
}

#[test]
fn rho_bias_decays_on_cubic() {
    let q = Quadratic::conditioned(4, 4, 3.0, 1).unwrap().with_cubic(0.5);
    let w = gaussian(4, 4, 2);
    let rep = rho_bias_study(&q, &w, 2, &[1e-2, 1e-3], 200_000, 3).unwrap();
    assert!(rep.bias_vs_limit[0] > rep.bias_vs_limit[1]);
    assert!(rep.error_vs_grad[0] > rep.error_vs_grad[1], "{:?}", rep.error_vs_grad);
}

fn rank2_inputs(samples: usize) -> Dataset {
    let basis = gaussian(6, 2, 30);
    let coeffs = gaussian(2, samples, 31);
    Dataset { inputs: basis.matmul(&coeffs).unwrap(), labels: (0..samples).map(|s| s % 2).collect() }
}

#[test]
fn two_sample_gradients_have_rank_at_most_two() {
    let net = CascadeMlp::new(vec![6, 8, 8, 2], Activation::Tanh, true, rank2_inputs(20), 2).unwrap();
    let params = net.initial_params(4);
    for s in 0..5 {
        let batch = net.sample_batch(s);
        for g in net.exact_grad(&params, &batch).unwrap().iter().filter(|g| g.cols() > 1) {
            let sv = singular_values(g, g.rows().min(g.cols())).unwrap();
            assert!(sv.get(2).is_none_or(|&x| x <= 1e-8 * sv[0]), "{sv:?}");
        }
    }
}

#[test]
fn repeated_gradient_has_unit_cosines() {
    let v = vec![vec![1.0, -2.0, 0.5]; 4];
    for row in cosine_matrix(&v) {
        for c in row {
            assert!((c.unwrap() - 1.0).abs() < 1e-15);
        }
    }
}

#[test]
fn toy_mlp_spectrum_is_reported() {
    let spec = ClusterSpec { dim: 16, classes: 4, intrinsic_dim: 3, samples: 256, spread: 2.0, noise: 0.5, ambient_noise: 0.05 };
    let net = CascadeMlp::new(vec![16, 32, 4], Activation::Tanh, true, spec.generate(5).unwrap(), 32).unwrap();
    let rep = gradient_spectrum(&net, &net.initial_params(6), &SeedSchedule::new(7), 100, 4, 0.1).unwrap();
    assert_eq!(rep.spectra.len(), 200);
    for l in 0..2 {
        let c = rep.mean_offdiag_cosine(l).unwrap();
        assert!(c.is_finite() && c.abs() <= 1.0);
    }
}

#[test]
fn lipschitz_estimate_is_finite_for_mlp() {
    let spec = ClusterSpec { dim: 5, classes: 2, intrinsic_dim: 2, samples: 40, spread: 2.0, noise: 0.5, ambient_noise: 0.05 };
    let net = CascadeMlp::new(vec![5, 6, 2], Activation::Tanh, true, spec.generate(1).unwrap(), 10).unwrap();
    let p = net.initial_params(2);
    let l = tezo::objectives::gradient_lipschitz_estimate(&net, &p, &net.full_batch(), 20, 0.1, 3).unwrap();
    assert!(l.is_finite() && l > 0.0);
}
