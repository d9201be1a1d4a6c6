//! Factor sets for the temporal CPD perturbation and element accounting.
//!
//! A 2-D layer `W ∈ R^{m×n}` is perturbed by
//! `Z_t = Σ_{s=1}^r τ_s · (u_s ∘ v_s)`, where the columns `u_s`, `v_s` of a
//! [`FactorSet`] are drawn once and `τ ∈ R^r` is drawn per step.
//!
//! Every expansion below accumulates the rank-1 terms in `s = 1..r` order,
//! one row at a time, so the floating-point evaluation order is fixed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::GaussianStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub block: usize,
}

impl LayerShape {
    pub fn new(m: usize, n: usize, r: usize) -> Result<Self> {
        let s = Self { m, n, r, block: 0 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::Shape(format!("layer must be non-empty, got {}x{}", self.m, self.n)));
        }
        if self.r == 0 || self.r > self.m.min(self.n) {
            return Err(Error::Config(format!(
                "rank {} outside 1..={} for a {}x{} layer",
                self.r,
                self.m.min(self.n),
                self.m,
                self.n
            )));
        }
        Ok(())
    }
}

/// Fixed model-dimension factors of one layer. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorSet {
    pub layer_id: String,
    seed: u64,
    /// `m × r`; column `s` is `u_s`.
    u: Matrix,
    /// `n × r`; column `s` is `v_s`.
    v: Matrix,
}

impl FactorSet {
    pub fn from_factors(layer_id: impl Into<String>, u: Matrix, v: Matrix) -> Result<Self> {
        if u.cols() != v.cols() || u.cols() == 0 {
            return Err(Error::Shape(format!(
                "factor ranks differ or are zero: u has {} columns, v has {}",
                u.cols(),
                v.cols()
            )));
        }
        Ok(Self { layer_id: layer_id.into(), seed: 0, u, v })
    }

    pub fn m(&self) -> usize {
        self.u.rows()
    }

    pub fn n(&self) -> usize {
        self.v.rows()
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    fn check(&self, w: &Matrix, coeffs: &[f64]) -> Result<()> {
        if coeffs.len() != self.rank() {
            return Err(Error::Shape(format!(
                "temporal vector has length {}, factor rank is {}",
                coeffs.len(),
                self.rank()
            )));
        }
        w.ensure_shape(self.m(), self.n(), &self.layer_id)
    }

    /// `W += scale · Σ_s c_s (u_s ∘ v_s)`, streamed row by row.
    pub fn add_scaled(&self, w: &mut Matrix, coeffs: &[f64], scale: f64) -> Result<()> {
        self.check(w, coeffs)?;
        if scale == 0.0 {
            return Ok(());
        }
        let r = self.rank();
        let mut a = vec![0.0; r];
        for i in 0..self.m() {
            let ui = self.u.row(i);
            for s in 0..r {
                a[s] = coeffs[s] * ui[s];
            }
            let row = w.row_mut(i);
            for (j, x) in row.iter_mut().enumerate() {
                let vj = self.v.row(j);
                let mut z = 0.0;
                for s in 0..r {
                    z += a[s] * vj[s];
                }
                *x += scale * z;
            }
        }
        Ok(())
    }

    /// Dense `Σ_s c_s (u_s ∘ v_s)`. Test and verification use only.
    pub fn materialize(&self, coeffs: &[f64]) -> Result<Matrix> {
        let mut z = Matrix::zeros(self.m(), self.n());
        self.add_scaled(&mut z, coeffs, 1.0)?;
        Ok(z)
    }

    /// Dense `Σ_s c_s (u_s² ∘ v_s²)`, the separable second-moment expansion.
    pub fn materialize_squared(&self, coeffs: &[f64]) -> Result<Matrix> {
        if coeffs.len() != self.rank() {
            return Err(Error::Shape(format!(
                "temporal vector has length {}, factor rank is {}",
                coeffs.len(),
                self.rank()
            )));
        }
        let r = self.rank();
        let mut out = Matrix::zeros(self.m(), self.n());
        let mut a = vec![0.0; r];
        for i in 0..self.m() {
            let ui = self.u.row(i);
            for s in 0..r {
                a[s] = coeffs[s] * ui[s] * ui[s];
            }
            for (j, x) in out.row_mut(i).iter_mut().enumerate() {
                let vj = self.v.row(j);
                let mut acc = 0.0;
                for s in 0..r {
                    acc += a[s] * vj[s] * vj[s];
                }
                *x = acc;
            }
        }
        Ok(out)
    }

    /// One streamed pass of the perturbation function: draws `τ` from `seed`
    /// and applies `W += scale · Z`.
    pub fn perturb_in_place(&self, w: &mut Matrix, scale: f64, seed: u64) -> Result<()> {
        let tau = GaussianStream::new(seed).sample_normal_vec(self.rank());
        self.add_scaled(w, &tau, scale)
    }
}

/// Free-function form of [`FactorSet::materialize`].
pub fn materialize_perturbation(fs: &FactorSet, tau: &[f64]) -> Result<Matrix> {
    fs.materialize(tau)
}

/// Draws `u` (row-major, `m × r`) then `v` (`n × r`) from `GaussianStream(seed)`.
pub fn init_factors(layer_id: impl Into<String>, shape: LayerShape, seed: u64) -> Result<FactorSet> {
    shape.validate()?;
    let mut g = GaussianStream::new(seed);
    let mut u = Matrix::zeros(shape.m, shape.r);
    g.fill_normal(u.as_mut_slice());
    let mut v = Matrix::zeros(shape.n, shape.r);
    g.fill_normal(v.as_mut_slice());
    Ok(FactorSet { layer_id: layer_id.into(), seed, u, v })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    MeZO,
    SubZO,
    LOZO,
    TeZO,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::MeZO => "mezo",
            Method::SubZO => "subzo",
            Method::LOZO => "lozo",
            Method::TeZO => "tezo",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mezo" => Ok(Method::MeZO),
            "subzo" => Ok(Method::SubZO),
            "lozo" => Ok(Method::LOZO),
            "tezo" => Ok(Method::TeZO),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Inputs of the sampled-element closed forms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostModel {
    pub method: Method,
    pub m: u64,
    pub n: u64,
    pub r: u64,
    pub steps: u64,
}

/// Random elements generated to train one `m × n` weight for `T` steps:
///
/// | method | elements |
/// |---|---|
/// | MeZO | `m n T` |
/// | SubZO | `(m + n + r) r T` |
/// | LOZO | `(m + n) r T` |
/// | TeZO | `(m + n + T) r` |
pub fn count_elements(cm: &CostModel) -> Result<u64> {
    if cm.m == 0 || cm.n == 0 || cm.r == 0 || cm.steps == 0 {
        return Err(Error::Config("cost model fields must be positive".into()));
    }
    let of = || Error::Overflow("counting generated elements");
    let CostModel { m, n, r, steps: t, .. } = *cm;
    match cm.method {
        Method::MeZO => m.checked_mul(n).and_then(|x| x.checked_mul(t)).ok_or_else(of),
        Method::SubZO => m
            .checked_add(n)
            .and_then(|x| x.checked_add(r))
            .and_then(|x| x.checked_mul(r))
            .and_then(|x| x.checked_mul(t))
            .ok_or_else(of),
        Method::LOZO => m
            .checked_add(n)
            .and_then(|x| x.checked_mul(r))
            .and_then(|x| x.checked_mul(t))
            .ok_or_else(of),
        Method::TeZO => m
            .checked_add(n)
            .and_then(|x| x.checked_add(t))
            .and_then(|x| x.checked_mul(r))
            .ok_or_else(of),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(m: usize, n: usize, r: usize) -> LayerShape {
        LayerShape::new(m, n, r).unwrap()
    }

    #[test]
    fn single_outer_product() {
        let fs = FactorSet::from_factors(
            "l",
            Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap(),
            Matrix::from_vec(1, 1, vec![3.0]).unwrap(),
        )
        .unwrap();
        let z = fs.materialize(&[1.0]).unwrap();
        assert_eq!(z.as_slice(), &[3.0, 6.0]);
    }

    #[test]
    fn zero_tau_gives_zero() {
        let fs = init_factors("l", shape(5, 4, 3), 1).unwrap();
        let z = fs.materialize(&[0.0; 3]).unwrap();
        assert!(z.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matches_triple_loop() {
        let fs = init_factors("l", shape(5, 4, 3), 11).unwrap();
        let tau = GaussianStream::new(12).sample_normal_vec(3);
        let z = fs.materialize(&tau).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mut want = 0.0;
                for s in 0..3 {
                    want += tau[s] * fs.u()[(i, s)] * fs.v()[(j, s)];
                }
                assert!((z[(i, j)] - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn wrong_tau_length_is_a_shape_error() {
        let fs = init_factors("l", shape(3, 3, 2), 1).unwrap();
        assert!(matches!(fs.materialize(&[1.0]), Err(Error::Shape(_))));
        let mut w = Matrix::zeros(3, 4);
        assert!(fs.perturb_in_place(&mut w, 1.0, 0).is_err());
    }

    #[test]
    fn roundtrip_restores_weights() {
        let fs = init_factors("l", shape(7, 5, 3), 3).unwrap();
        let mut w = Matrix::from_fn(7, 5, |i, j| 1.0 + (i * 5 + j) as f64 * 0.1);
        let w0 = w.clone();
        for rho in [1e-3, 1e-2] {
            fs.perturb_in_place(&mut w, rho, 77).unwrap();
            fs.perturb_in_place(&mut w, -2.0 * rho, 77).unwrap();
            fs.perturb_in_place(&mut w, rho, 77).unwrap();
            for (a, b) in w.as_slice().iter().zip(w0.as_slice()) {
                assert!((a - b).abs() <= 1e-10 * b.abs());
            }
        }
    }

    #[test]
    fn zero_scale_is_bitwise_noop() {
        let fs = init_factors("l", shape(4, 4, 2), 3).unwrap();
        let mut w = Matrix::from_fn(4, 4, |i, j| (i as f64).sin() + j as f64);
        let w0 = w.clone();
        fs.perturb_in_place(&mut w, 0.0, 5).unwrap();
        assert_eq!(w, w0);
    }

    #[test]
    fn perturb_matches_materialized_oracle() {
        let fs = init_factors("l", shape(6, 3, 2), 8).unwrap();
        let w0 = Matrix::from_fn(6, 3, |i, j| (i + j) as f64);
        let mut w = w0.clone();
        let rho = 1e-3;
        fs.perturb_in_place(&mut w, rho, 99).unwrap();
        let tau = GaussianStream::new(99).sample_normal_vec(2);
        let z = fs.materialize(&tau).unwrap();
        let mut d = w.sub(&w0);
        d.axpy(-rho, &z);
        assert!(d.max_abs() <= 1e-12);
    }

    #[test]
    fn init_is_replayable_and_full_rank_allowed() {
        let a = init_factors("l", shape(4, 6, 4), 5).unwrap();
        let b = init_factors("l", shape(4, 6, 4), 5).unwrap();
        assert_eq!(a, b);
        assert!(LayerShape::new(4, 6, 5).is_err());
        assert!(LayerShape::new(4, 6, 0).is_err());
    }

    #[test]
    fn column_variance_of_u() {
        let fs = init_factors("l", shape(10_000, 2, 2), 31).unwrap();
        for s in 0..2 {
            let col = fs.u().column(s);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            assert!((0.94..=1.06).contains(&var), "var {var}");
        }
    }

    #[test]
    fn table_values() {
        let c = |method, m, n, r, steps| count_elements(&CostModel { method, m, n, r, steps }).unwrap();
        assert_eq!(c(Method::MeZO, 1024, 1024, 8, 1000), 1_048_576_000);
        assert_eq!(c(Method::TeZO, 1024, 1024, 8, 1000), 24_384);
        assert_eq!(c(Method::LOZO, 1024, 1024, 8, 1000), 16_384_000);
        assert_eq!(c(Method::SubZO, 1024, 1024, 8, 1000), (2048 + 8) * 8 * 1000);
    }

    #[test]
    fn count_overflow_and_zero() {
        let big = CostModel { method: Method::MeZO, m: u64::MAX / 2, n: 3, r: 1, steps: 1 };
        assert!(matches!(count_elements(&big), Err(Error::Overflow(_))));
        let zero = CostModel { method: Method::TeZO, m: 0, n: 3, r: 1, steps: 1 };
        assert!(count_elements(&zero).is_err());
    }

    #[test]
    fn method_parse_roundtrip() {
        for m in [Method::MeZO, Method::SubZO, Method::LOZO, Method::TeZO] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
    }
}
