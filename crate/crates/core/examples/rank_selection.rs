//! Picks per-layer ranks from weight spectra: count singular values above a
//! fraction of the largest, take the minimum within a block, cap at `r_max`.

use tezo::rank::{select_ranks, singular_values, RankPolicy};
use tezo::rng::GaussianStream;
use tezo::{Matrix, ModelParams, Param};

/// `diag(sigma)` padded to `m x n` and mixed by a random orthogonal matrix on each side.
fn layer(m: usize, n: usize, sigma: &[f64]) -> Matrix {
    let rot = |k: usize| Matrix::from_vec(k, k, GaussianStream::new(k as u64).sample_normal_vec(k * k)).unwrap();
    let q = |a: Matrix| {
        // Modified Gram-Schmidt on the columns.
        let (k, _) = a.shape();
        let mut cols: Vec<Vec<f64>> = (0..k).map(|j| a.column(j)).collect();
        for j in 0..k {
            for p in 0..j {
                let d: f64 = cols[j].iter().zip(&cols[p]).map(|(x, y)| x * y).sum();
                let prev = cols[p].clone();
                cols[j].iter_mut().zip(&prev).for_each(|(x, y)| *x -= d * y);
            }
            let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            cols[j].iter_mut().for_each(|x| *x /= norm);
        }
        Matrix::from_fn(k, k, |i, j| cols[j][i])
    };
    let d = Matrix::from_fn(m, n, |i, j| if i == j && i < sigma.len() { sigma[i] } else { 0.0 });
    q(rot(m)).matmul(&d).unwrap().matmul(&q(rot(n)).transpose()).unwrap()
}

fn main() -> tezo::Result<()> {
    let model = ModelParams::new(vec![
        Param::matrix("attn.q", 0, layer(8, 8, &[1.0, 0.8, 0.6, 0.3, 0.1])),
        Param::matrix("attn.k", 0, layer(8, 8, &[1.0, 0.5, 0.1])),
        Param::matrix("mlp.up", 1, layer(12, 8, &[2.0, 1.9, 1.8, 1.7, 1.6, 1.5, 0.2])),
        Param::vector("mlp.bias", 1, vec![0.0; 12]),
    ]);
    for p in model.iter().filter(|p| p.shape().1 > 1) {
        let sv = singular_values(&p.value, 8)?;
        let shown: Vec<String> = sv.iter().map(|s| format!("{s:.2}")).collect();
        println!("{:<9} sigma = [{}]", p.name, shown.join(", "));
    }

    let policy = RankPolicy::new(0.25, 4)?.with_block_sizes(&[2, 1]);
    for l in select_ranks(&model, &policy)? {
        println!("{:<9} raw rank {}  selected {}", l.name, l.rank_raw, l.rank_selected);
    }
    Ok(())
}
