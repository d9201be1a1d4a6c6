//! Layer-wise rank selection from weight singular spectra.
//!
//! A layer's rank is the number of singular values above a fraction of the
//! largest one. Within a block every 2-D layer receives the block minimum,
//! capped at `r_max`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{ModelParams, ParamKind};

const MAX_SWEEPS: usize = 80;

/// All singular values of `a`, descending, by one-sided (Hestenes) Jacobi.
///
/// Column pairs are visited in fixed cyclic order `(p, q), p < q`, so the
/// result is bit-stable for a given input.
pub fn jacobi_singular_values(a: &Matrix) -> Vec<f64> {
    // work on the orientation with at least as many rows as columns
    let mut w = if a.rows() >= a.cols() { a.transpose() } else { a.clone() };
    // rows of `w` are now the columns being orthogonalized
    let k = w.rows();
    let len = w.cols();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for t in 0..len {
                    let (x, y) = (w[(p, t)], w[(q, t)]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..len {
                    let (x, y) = (w[(p, i)], w[(q, i)]);
                    w[(p, i)] = c * x - s * y;
                    w[(q, i)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..k).map(|i| w.row(i).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Top-`k` singular values, descending.
pub fn singular_values(w: &Matrix, k: usize) -> Result<Vec<f64>> {
    let full = w.rows().min(w.cols());
    if k > full {
        return Err(Error::Config(format!("requested {k} singular values of a {}x{} matrix", w.rows(), w.cols())));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut sv = jacobi_singular_values(w);
    sv.truncate(k);
    Ok(sv)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RankCriterion {
    /// Count `σ_i > threshold · σ_1`.
    FractionOfLargest,
    /// Smallest `k` with `Σ_{i≤k} σ_i² ≥ threshold · Σ σ_i²`.
    CumulativeEnergy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankPolicy {
    pub threshold_frac: f64,
    pub r_max: usize,
    pub criterion: RankCriterion,
    /// Explicit partition of the 2-D layer indices (positions among matrix
    /// parameters). `None` groups layers by their `block` labels.
    pub blocks: Option<Vec<Vec<usize>>>,
}

impl RankPolicy {
    pub fn new(threshold_frac: f64, r_max: usize) -> Result<Self> {
        let p = Self { threshold_frac, r_max, criterion: RankCriterion::FractionOfLargest, blocks: None };
        p.validate()?;
        Ok(p)
    }

    pub fn with_blocks(mut self, blocks: Vec<Vec<usize>>) -> Self {
        self.blocks = Some(blocks);
        self
    }

    /// Blocks of `sizes[b]` consecutive layers each.
    pub fn with_block_sizes(self, sizes: &[usize]) -> Self {
        let mut start = 0;
        let blocks = sizes
            .iter()
            .map(|&s| {
                let b: Vec<usize> = (start..start + s).collect();
                start += s;
                b
            })
            .collect();
        self.with_blocks(blocks)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_frac > 0.0 && self.threshold_frac < 1.0) {
            return Err(Error::Config(format!("rank threshold must be in (0, 1), got {}", self.threshold_frac)));
        }
        if self.r_max == 0 {
            return Err(Error::Config("r_max must be at least 1".into()));
        }
        Ok(())
    }
}

/// Rank from precomputed descending singular values; at least 1.
pub fn rank_from_spectrum(sv: &[f64], threshold_frac: f64, criterion: RankCriterion) -> usize {
    let Some(&s1) = sv.first() else { return 1 };
    if !(s1 > 0.0) {
        return 1;
    }
    let r = match criterion {
        RankCriterion::FractionOfLargest => sv.iter().filter(|&&s| s > threshold_frac * s1).count(),
        RankCriterion::CumulativeEnergy => {
            let total: f64 = sv.iter().map(|s| s * s).sum();
            let mut acc = 0.0;
            let mut k = sv.len();
            for (i, s) in sv.iter().enumerate() {
                acc += s * s;
                if acc >= threshold_frac * total {
                    k = i + 1;
                    break;
                }
            }
            k
        }
    };
    r.max(1)
}

/// Effective rank of `w` under `policy` (uncapped). The zero matrix has rank 1.
pub fn matrix_rank(w: &Matrix, policy: &RankPolicy) -> Result<usize> {
    policy.validate()?;
    let sv = jacobi_singular_values(w);
    Ok(rank_from_spectrum(&sv, policy.threshold_frac, policy.criterion))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRank {
    /// Index into the model parameters.
    pub param_index: usize,
    pub name: String,
    pub sigma1: f64,
    pub rank_raw: usize,
    pub rank_selected: usize,
}

/// Per 2-D layer `r_l = min(min_{l' ∈ block(l)} Rank(W_l'), r_max)`.
pub fn select_ranks(model: &ModelParams, policy: &RankPolicy) -> Result<Vec<LayerRank>> {
    policy.validate()?;
    let layers: Vec<usize> = (0..model.len()).filter(|&i| model.get(i).kind == ParamKind::Matrix).collect();
    let blocks: Vec<Vec<usize>> = match &policy.blocks {
        Some(b) => b.clone(),
        None => {
            let mut labels: Vec<usize> = layers.iter().map(|&i| model.get(i).block).collect();
            labels.sort_unstable();
            labels.dedup();
            labels
                .iter()
                .map(|&lab| (0..layers.len()).filter(|&k| model.get(layers[k]).block == lab).collect())
                .collect()
        }
    };
    let mut owner = vec![None; layers.len()];
    for (b, members) in blocks.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Config(format!("block {b} is empty")));
        }
        for &k in members {
            if k >= layers.len() {
                return Err(Error::Config(format!("block {b} names layer {k}, model has {} 2-D layers", layers.len())));
            }
            if owner[k].replace(b).is_some() {
                return Err(Error::Config(format!("layer {k} appears in more than one block")));
            }
        }
    }
    if let Some(k) = owner.iter().position(Option::is_none) {
        return Err(Error::Config(format!("layer {k} is not covered by any block")));
    }

    let spectra: Vec<Vec<f64>> = layers.iter().map(|&i| jacobi_singular_values(&model.get(i).value)).collect();
    let raw: Vec<usize> = spectra.iter().map(|sv| rank_from_spectrum(sv, policy.threshold_frac, policy.criterion)).collect();
    let block_min: Vec<usize> = blocks.iter().map(|m| m.iter().map(|&k| raw[k]).min().unwrap()).collect();
    Ok(layers
        .iter()
        .enumerate()
        .map(|(k, &i)| LayerRank {
            param_index: i,
            name: model.get(i).name.clone(),
            sigma1: spectra[k].first().copied().unwrap_or(0.0),
            rank_raw: raw[k],
            rank_selected: block_min[owner[k].unwrap()].min(policy.r_max).max(1),
        })
        .collect())
}
