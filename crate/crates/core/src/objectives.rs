//! Desk-scale objectives with exact gradient oracles.
//!
//! ZO code paths only see [`Objective`]. Exact gradients live behind the
//! separate [`GradientOracle`] trait and are used by tests and diagnostics.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{ModelParams, Param, ParamKind};
use crate::rank::singular_values;
use crate::rng::{CounterRng, GaussianStream};

/// `f(w) = E_ξ f(w, ξ)` with an explicit minibatch handle `ξ`.
pub trait Objective: Sync {
    type Batch: Send + Sync;

    /// Deterministic given `(params, batch)`.
    fn eval(&self, params: &ModelParams, batch: &Self::Batch) -> Result<f64>;

    fn sample_batch(&self, seed: u64) -> Self::Batch;

    /// Batch used for reporting the training loss.
    fn full_batch(&self) -> Self::Batch;

    /// Parameters laid out as the objective expects, drawn from `seed`.
    fn initial_params(&self, seed: u64) -> ModelParams;
}

pub trait GradientOracle: Objective {
    /// One gradient matrix per parameter, same shapes as `params`.
    fn exact_grad(&self, params: &ModelParams, batch: &Self::Batch) -> Result<Vec<Matrix>>;
}

#[derive(Clone, Debug, PartialEq)]
pub enum Hessian {
    Diagonal(Vec<f64>),
    Dense(Matrix),
}

impl Hessian {
    fn dim(&self) -> usize {
        match self {
            Hessian::Diagonal(d) => d.len(),
            Hessian::Dense(a) => a.rows(),
        }
    }

    fn apply(&self, w: &[f64]) -> Vec<f64> {
        match self {
            Hessian::Diagonal(d) => d.iter().zip(w).map(|(a, x)| a * x).collect(),
            Hessian::Dense(a) => (0..a.rows()).map(|i| a.row(i).iter().zip(w).map(|(x, y)| x * y).sum()).collect(),
        }
    }
}

/// `f(w) = ½⟨w, Aw⟩ − ⟨b, w⟩ + (c/6) Σ w_i³` over the flattened parameters.
///
/// With `c = 0` this is the plain quadratic; `c ≠ 0` gives a smooth
/// non-quadratic test function whose SPSA remainder is nonzero.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    shapes: Vec<(usize, usize)>,
    hessian: Hessian,
    b: Vec<f64>,
    cubic: f64,
}

impl Quadratic {
    pub fn new(shapes: Vec<(usize, usize)>, hessian: Hessian, b: Vec<f64>) -> Result<Self> {
        let d: usize = shapes.iter().map(|(m, n)| m * n).sum();
        if hessian.dim() != d || b.len() != d {
            return Err(Error::Shape(format!(
                "quadratic over {d} scalars got a {}-dim Hessian and {}-dim b",
                hessian.dim(),
                b.len()
            )));
        }
        if let Hessian::Dense(a) = &hessian {
            a.ensure_shape(d, d, "Hessian")?;
            for i in 0..d {
                for j in 0..i {
                    if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 * (a[(i, j)].abs() + a[(j, i)].abs()).max(1.0) {
                        return Err(Error::Config("Hessian must be symmetric".into()));
                    }
                }
            }
        }
        Ok(Self { shapes, hessian, b, cubic: 0.0 })
    }

    /// `A = I`, `b = 0` on one `m × n` matrix.
    pub fn isotropic(m: usize, n: usize) -> Self {
        Self::new(vec![(m, n)], Hessian::Diagonal(vec![1.0; m * n]), vec![0.0; m * n]).expect("consistent")
    }

    /// Diagonal Hessian with eigenvalues log-spaced over `[1, cond]` in a
    /// seed-determined order, `b = 0` (minimum 0 at the origin).
    pub fn conditioned(m: usize, n: usize, cond: f64, seed: u64) -> Result<Self> {
        if !(cond >= 1.0) || !cond.is_finite() {
            return Err(Error::Config(format!("condition number must be >= 1, got {cond}")));
        }
        let d = m * n;
        let mut diag: Vec<f64> = (0..d)
            .map(|i| if d == 1 { 1.0 } else { cond.powf(i as f64 / (d - 1) as f64) })
            .collect();
        let mut rng = CounterRng::new(seed);
        for i in (1..d).rev() {
            let j = rng.next_below(i + 1);
            diag.swap(i, j);
        }
        Self::new(vec![(m, n)], Hessian::Diagonal(diag), vec![0.0; d])
    }

    pub fn with_cubic(mut self, c: f64) -> Self {
        self.cubic = c;
        self
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn hessian(&self) -> &Hessian {
        &self.hessian
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    fn check(&self, params: &ModelParams) -> Result<Vec<f64>> {
        if params.len() != self.shapes.len() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.shapes.len(), params.len())));
        }
        for (p, &(m, n)) in params.iter().zip(&self.shapes) {
            p.value.ensure_shape(m, n, &p.name)?;
        }
        Ok(params.flatten())
    }

    pub fn eval_flat(&self, w: &[f64]) -> f64 {
        let aw = self.hessian.apply(w);
        let mut f = 0.0;
        for i in 0..w.len() {
            f += 0.5 * w[i] * aw[i] - self.b[i] * w[i] + self.cubic / 6.0 * w[i] * w[i] * w[i];
        }
        f
    }

    pub fn grad_flat(&self, w: &[f64]) -> Vec<f64> {
        let aw = self.hessian.apply(w);
        (0..w.len()).map(|i| aw[i] - self.b[i] + 0.5 * self.cubic * w[i] * w[i]).collect()
    }
}

impl Objective for Quadratic {
    type Batch = ();

    fn eval(&self, params: &ModelParams, _: &()) -> Result<f64> {
        Ok(self.eval_flat(&self.check(params)?))
    }

    fn sample_batch(&self, _: u64) {}

    fn full_batch(&self) {}

    fn initial_params(&self, seed: u64) -> ModelParams {
        let mut g = GaussianStream::new(seed);
        ModelParams::new(
            self.shapes
                .iter()
                .enumerate()
                .map(|(l, &(m, n))| {
                    let mut w = Matrix::zeros(m, n);
                    g.fill_normal(w.as_mut_slice());
                    Param::matrix(format!("w{l}"), l, w)
                })
                .collect(),
        )
    }
}

impl GradientOracle for Quadratic {
    fn exact_grad(&self, params: &ModelParams, _: &()) -> Result<Vec<Matrix>> {
        let g = self.grad_flat(&self.check(params)?);
        let mut out = Vec::with_capacity(self.shapes.len());
        let mut off = 0;
        for &(m, n) in &self.shapes {
            out.push(Matrix::from_vec(m, n, g[off..off + m * n].to_vec())?);
            off += m * n;
        }
        Ok(out)
    }
}

/// `½⟨w, Aw⟩ − ⟨b, w⟩` for a flattened matrix `w`.
pub fn quad_eval(w: &Matrix, a: &Matrix, b: &[f64]) -> Result<f64> {
    let d = w.len();
    a.ensure_shape(d, d, "Hessian")?;
    if b.len() != d {
        return Err(Error::Shape(format!("b has {} entries, w has {d}", b.len())));
    }
    let x = w.as_slice();
    let mut f = 0.0;
    for i in 0..d {
        let ax: f64 = a.row(i).iter().zip(x).map(|(p, q)| p * q).sum();
        f += 0.5 * x[i] * ax - b[i] * x[i];
    }
    Ok(f)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Not smooth at 0; gradient checks near kinks may fail.
    Relu,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Relu => a.max(0.0),
        }
    }

    /// Derivative expressed through the output `x = σ(a)`.
    fn derivative_from_output(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - x * x,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_smooth(self) -> bool {
        matches!(self, Activation::Tanh)
    }
}

/// Labelled samples stored column-wise (`d × N`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let d = self.inputs.rows();
        let inputs = Matrix::from_fn(d, idx.len(), |i, j| self.inputs[(i, idx[j])]);
        Dataset { inputs, labels: idx.iter().map(|&k| self.labels[k]).collect() }
    }
}

/// Gaussian cluster mixture whose class means and within-class noise live in
/// a random `intrinsic_dim`-dimensional subspace of `R^d`, plus small ambient
/// noise. Labels cycle `0, 1, .., classes-1`, so every prefix is balanced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterSpec {
    pub dim: usize,
    pub classes: usize,
    pub intrinsic_dim: usize,
    pub samples: usize,
    pub spread: f64,
    pub noise: f64,
    pub ambient_noise: f64,
}

impl ClusterSpec {
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        if self.dim == 0 || self.classes < 2 || self.intrinsic_dim == 0 || self.intrinsic_dim > self.dim || self.samples == 0 {
            return Err(Error::Config(format!("invalid cluster spec {self:?}")));
        }
        let mut g = GaussianStream::new(seed);
        let k = self.intrinsic_dim;
        let scale = 1.0 / (k as f64).sqrt();
        let mut basis = Matrix::zeros(self.dim, k);
        g.fill_normal(basis.as_mut_slice());
        basis.scale(scale);
        let mut means = Matrix::zeros(self.classes, k);
        g.fill_normal(means.as_mut_slice());
        means.scale(self.spread);
        let mut inputs = Matrix::zeros(self.dim, self.samples);
        let mut labels = Vec::with_capacity(self.samples);
        let mut latent = vec![0.0; k];
        for s in 0..self.samples {
            let c = s % self.classes;
            labels.push(c);
            for (a, &mu) in latent.iter_mut().zip(means.row(c)) {
                *a = mu + self.noise * g.next_normal();
            }
            for i in 0..self.dim {
                let x: f64 = basis.row(i).iter().zip(&latent).map(|(b, a)| b * a).sum();
                inputs[(i, s)] = x + self.ambient_noise * g.next_normal();
            }
        }
        Ok(Dataset { inputs, labels })
    }
}

/// Cascade network `X_l = σ_l(W_l X_{l−1} + b_l)` with a linear last layer
/// feeding softmax cross-entropy.
///
/// Parameter layout: `layer{l}.weight` (`d_l × d_{l−1}`), then
/// `layer{l}.bias` when biases are enabled, for `l = 1..L`.
#[derive(Clone, Debug)]
pub struct CascadeMlp {
    widths: Vec<usize>,
    activation: Activation,
    bias: bool,
    /// Consecutive layers per rank-selection block.
    block_size: usize,
    data: Dataset,
    batch_size: usize,
}

impl CascadeMlp {
    pub fn new(widths: Vec<usize>, activation: Activation, bias: bool, data: Dataset, batch_size: usize) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        if data.inputs.rows() != widths[0] {
            return Err(Error::Shape(format!("data dimension {} != input width {}", data.inputs.rows(), widths[0])));
        }
        if data.labels.iter().any(|&c| c >= *widths.last().unwrap()) {
            return Err(Error::Config("label outside output width".into()));
        }
        if batch_size == 0 || data.is_empty() {
            return Err(Error::Config("empty batch or dataset".into()));
        }
        Ok(Self { widths, activation, bias, block_size: 2, data, batch_size })
    }

    pub fn with_block_size(mut self, block_size: usize) -> Self {
        self.block_size = block_size.max(1);
        self
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn weight_index(&self, l: usize) -> usize {
        if self.bias {
            2 * l
        } else {
            l
        }
    }

    fn check(&self, params: &ModelParams) -> Result<()> {
        let expected = self.num_layers() * if self.bias { 2 } else { 1 };
        if params.len() != expected {
            return Err(Error::Shape(format!("expected {expected} parameters, got {}", params.len())));
        }
        for l in 0..self.num_layers() {
            let w = params.get(self.weight_index(l));
            w.value.ensure_shape(self.widths[l + 1], self.widths[l], &w.name)?;
            if self.bias {
                let b = params.get(self.weight_index(l) + 1);
                b.value.ensure_shape(self.widths[l + 1], 1, &b.name)?;
            }
        }
        Ok(())
    }

    /// Layer outputs `[X_0, X_1, .., X_{L−1}, A_L]` (the last entry is the logits).
    pub fn forward(&self, params: &ModelParams, x: &Matrix) -> Result<Vec<Matrix>> {
        self.check(params)?;
        let mut outs = vec![x.clone()];
        for l in 0..self.num_layers() {
            let w = &params.get(self.weight_index(l)).value;
            let mut a = w.matmul(outs.last().unwrap())?;
            if self.bias {
                let b = &params.get(self.weight_index(l) + 1).value;
                for i in 0..a.rows() {
                    let bi = b.as_slice()[i];
                    a.row_mut(i).iter_mut().for_each(|v| *v += bi);
                }
            }
            if l + 1 < self.num_layers() {
                a = a.map(|v| self.activation.apply(v));
            }
            if a.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite activation in layer {}", l + 1)));
            }
            outs.push(a);
        }
        Ok(outs)
    }

    fn softmax_columns(logits: &Matrix) -> Matrix {
        let mut p = logits.clone();
        for j in 0..p.cols() {
            let mx = (0..p.rows()).map(|i| p[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..p.rows() {
                let e = (p[(i, j)] - mx).exp();
                p[(i, j)] = e;
                z += e;
            }
            for i in 0..p.rows() {
                p[(i, j)] /= z;
            }
        }
        p
    }
}

/// Mean softmax cross-entropy of `net` on `batch`.
pub fn mlp_eval(net: &CascadeMlp, params: &ModelParams, batch: &Dataset) -> Result<f64> {
    let outs = net.forward(params, &batch.inputs)?;
    let logits = outs.last().unwrap();
    let mut loss = 0.0;
    for j in 0..logits.cols() {
        let mx = (0..logits.rows()).map(|i| logits[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + (0..logits.rows()).map(|i| (logits[(i, j)] - mx).exp()).sum::<f64>().ln();
        loss += lse - logits[(batch.labels[j], j)];
    }
    let loss = loss / logits.cols() as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite loss".into()));
    }
    Ok(loss)
}

impl Objective for CascadeMlp {
    type Batch = Dataset;

    fn eval(&self, params: &ModelParams, batch: &Dataset) -> Result<f64> {
        mlp_eval(self, params, batch)
    }

    fn sample_batch(&self, seed: u64) -> Dataset {
        let mut rng = CounterRng::new(seed);
        let idx: Vec<usize> = (0..self.batch_size).map(|_| rng.next_below(self.data.len())).collect();
        self.data.select(&idx)
    }

    fn full_batch(&self) -> Dataset {
        self.data.clone()
    }

    /// Weights `N(0, 1/fan_in)`, zero biases.
    fn initial_params(&self, seed: u64) -> ModelParams {
        let mut g = GaussianStream::new(seed);
        let mut params = ModelParams::default();
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let mut w = Matrix::zeros(fan_out, fan_in);
            g.fill_normal(w.as_mut_slice());
            w.scale(1.0 / (fan_in as f64).sqrt());
            let block = l / self.block_size;
            params.push(Param::matrix(format!("layer{}.weight", l + 1), block, w));
            if self.bias {
                params.push(Param::vector(format!("layer{}.bias", l + 1), block, vec![0.0; fan_out]));
            }
        }
        params
    }
}

impl GradientOracle for CascadeMlp {
    /// Mean-over-batch backpropagation.
    fn exact_grad(&self, params: &ModelParams, batch: &Dataset) -> Result<Vec<Matrix>> {
        let outs = self.forward(params, &batch.inputs)?;
        let nb = batch.labels.len() as f64;
        let mut delta = Self::softmax_columns(outs.last().unwrap());
        for (j, &c) in batch.labels.iter().enumerate() {
            delta[(c, j)] -= 1.0;
        }
        delta.scale(1.0 / nb);
        let mut grads: Vec<Option<Matrix>> = vec![None; params.len()];
        for l in (0..self.num_layers()).rev() {
            let x_prev = &outs[l];
            grads[self.weight_index(l)] = Some(delta.matmul(&x_prev.transpose())?);
            if self.bias {
                let db: Vec<f64> = (0..delta.rows()).map(|i| delta.row(i).iter().sum()).collect();
                grads[self.weight_index(l) + 1] = Some(Matrix::from_vec(db.len(), 1, db)?);
            }
            if l > 0 {
                let w = &params.get(self.weight_index(l)).value;
                let mut back = w.transpose().matmul(&delta)?;
                for (b, &x) in back.as_mut_slice().iter_mut().zip(x_prev.as_slice()) {
                    *b *= self.activation.derivative_from_output(x);
                }
                delta = back;
            }
        }
        Ok(grads.into_iter().map(|g| g.expect("every parameter has a gradient")).collect())
    }
}

/// Central differences `(f(w + h e_k) − f(w − h e_k)) / 2h` for every scalar.
pub fn central_difference_grad<O: Objective + ?Sized>(objective: &O, params: &ModelParams, batch: &O::Batch, h: f64) -> Result<Vec<Matrix>> {
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for l in 0..params.len() {
        let (m, n) = params.get(l).shape();
        let mut g = Matrix::zeros(m, n);
        for k in 0..m * n {
            let x0 = params.get(l).value.as_slice()[k];
            work.get_mut(l).value.as_mut_slice()[k] = x0 + h;
            let fp = objective.eval(&work, batch)?;
            work.get_mut(l).value.as_mut_slice()[k] = x0 - h;
            let fm = objective.eval(&work, batch)?;
            work.get_mut(l).value.as_mut_slice()[k] = x0;
            g.as_mut_slice()[k] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest `‖∇f(x) − ∇f(y)‖ / ‖x − y‖` over `pairs` random pairs within
/// `radius` of `params`.
pub fn gradient_lipschitz_estimate<O: GradientOracle + ?Sized>(
    objective: &O,
    params: &ModelParams,
    batch: &O::Batch,
    pairs: usize,
    radius: f64,
    seed: u64,
) -> Result<f64> {
    let mut g = GaussianStream::new(seed);
    let base = params.flatten();
    let mut best: f64 = 0.0;
    for _ in 0..pairs {
        let x: Vec<f64> = base.iter().map(|b| b + radius * g.next_normal()).collect();
        let y: Vec<f64> = base.iter().map(|b| b + radius * g.next_normal()).collect();
        let mut px = params.clone();
        px.set_flat(&x)?;
        let mut py = params.clone();
        py.set_flat(&y)?;
        let gx: Vec<f64> = objective.exact_grad(&px, batch)?.into_iter().flat_map(Matrix::into_vec).collect();
        let gy: Vec<f64> = objective.exact_grad(&py, batch)?.into_iter().flat_map(Matrix::into_vec).collect();
        let num: f64 = gx.iter().zip(&gy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if den > 0.0 {
            best = best.max(num / den);
        }
    }
    Ok(best)
}

/// Pairwise cosines of the given vectors; `None` where a vector is zero.
pub fn cosine_matrix(vectors: &[Vec<f64>]) -> Vec<Vec<Option<f64>>> {
    let norms: Vec<f64> = vectors.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    (0..vectors.len())
        .map(|i| {
            (0..vectors.len())
                .map(|j| {
                    if norms[i] == 0.0 || norms[j] == 0.0 {
                        None
                    } else {
                        let d: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
                        Some(d / (norms[i] * norms[j]))
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpectrum {
    pub step: usize,
    pub layer: String,
    pub sigmas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    pub spectra: Vec<LayerSpectrum>,
    /// Per 2-D layer: name and the step-by-step cosine matrix of normalized gradients.
    pub cosines: Vec<(String, Vec<Vec<Option<f64>>>)>,
}

impl SpectrumReport {
    /// Mean over defined off-diagonal cosines of one layer.
    pub fn mean_offdiag_cosine(&self, layer: usize) -> Option<f64> {
        let c = &self.cosines.get(layer)?.1;
        let vals: Vec<f64> = (0..c.len())
            .flat_map(|i| (0..c.len()).filter(move |&j| j != i).map(move |j| (i, j)))
            .filter_map(|(i, j)| c[i][j])
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Top-`k` gradient singular values per 2-D layer over `steps` minibatches,
/// plus the cross-step cosine matrix of normalized flattened gradients.
///
/// Parameters follow plain gradient descent with rate `lr` (pass `0.0` to
/// keep them fixed) so that gradients evolve as in training.
pub fn gradient_spectrum<O: GradientOracle + ?Sized>(
    objective: &O,
    params: &ModelParams,
    batch_seeds: &crate::rng::SeedSchedule,
    steps: usize,
    k: usize,
    lr: f64,
) -> Result<SpectrumReport> {
    let mut work = params.clone();
    let layers: Vec<usize> = (0..params.len()).filter(|&l| params.get(l).kind == ParamKind::Matrix).collect();
    let mut spectra = Vec::new();
    let mut flats: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layers.len()];
    for step in 0..steps {
        let batch = objective.sample_batch(batch_seeds.derive(step as u64));
        let grads = objective.exact_grad(&work, &batch)?;
        for (slot, &l) in layers.iter().enumerate() {
            let g = &grads[l];
            let kk = k.min(g.rows().min(g.cols()));
            spectra.push(LayerSpectrum { step, layer: params.get(l).name.clone(), sigmas: singular_values(g, kk)? });
            flats[slot].push(g.as_slice().to_vec());
        }
        if lr != 0.0 {
            for (p, g) in work.iter_mut().zip(&grads) {
                p.value.axpy(-lr, g);
            }
        }
    }
    let cosines = layers
        .iter()
        .zip(&flats)
        .map(|(&l, f)| (params.get(l).name.clone(), cosine_matrix(f)))
        .collect();
    Ok(SpectrumReport { spectra, cosines })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_close(a: &[Matrix], b: &[Matrix], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| {
            x.as_slice()
                .iter()
                .zip(y.as_slice())
                .all(|(p, q)| (p - q).abs() <= tol * p.abs().max(q.abs()).max(1e-3))
        })
    }

    fn small_mlp(bias: bool, samples: usize, batch: usize) -> CascadeMlp {
        let spec = ClusterSpec { dim: 8, classes: 2, intrinsic_dim: 3, samples, spread: 2.0, noise: 0.3, ambient_noise: 0.05 };
        CascadeMlp::new(vec![8, 8, 2], Activation::Tanh, bias, spec.generate(7).unwrap(), batch).unwrap()
    }

    #[test]
    fn unit_quadratic_values() {
        let q = Quadratic::isotropic(2, 2);
        let mut w = Matrix::zeros(2, 2);
        w[(0, 0)] = 1.0;
        let p = ModelParams::single("w", w.clone());
        assert_eq!(q.eval(&p, &()).unwrap(), 0.5);
        assert_eq!(q.exact_grad(&p, &()).unwrap()[0], w);
        assert_eq!(quad_eval(&w, &Matrix::identity(4), &[0.0; 4]).unwrap(), 0.5);
    }

    #[test]
    fn gradient_vanishes_at_minimizer() {
        let a = Matrix::from_vec(2, 2, vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        let b = vec![1.0, 2.0];
        // A⁻¹ b = (1/5)[3·1 − 1·2, −1·1 + 2·2] = [0.2, 0.6]
        let q = Quadratic::new(vec![(1, 2)], Hessian::Dense(a), b).unwrap();
        let p = ModelParams::single("w", Matrix::from_vec(1, 2, vec![0.2, 0.6]).unwrap());
        let g = q.exact_grad(&p, &()).unwrap();
        assert!(g[0].max_abs() < 1e-15);
    }

    #[test]
    fn quadratic_shape_errors() {
        let q = Quadratic::isotropic(2, 2);
        assert!(q.eval(&ModelParams::single("w", Matrix::zeros(3, 2)), &()).is_err());
        assert!(quad_eval(&Matrix::zeros(2, 2), &Matrix::identity(3), &[0.0; 4]).is_err());
        assert!(Quadratic::new(vec![(1, 2)], Hessian::Dense(Matrix::from_vec(2, 2, vec![1., 2., 0., 1.]).unwrap()), vec![0.; 2]).is_err());
    }

    #[test]
    fn quadratic_and_cubic_finite_differences() {
        let q = Quadratic::conditioned(4, 4, 10.0, 3).unwrap();
        for (obj, tol) in [(q.clone(), 1e-6), (q.with_cubic(0.7), 1e-6)] {
            let p = obj.initial_params(11);
            let exact = obj.exact_grad(&p, &()).unwrap();
            let fd = central_difference_grad(&obj, &p, &(), 1e-5).unwrap();
            assert!(rel_close(&exact, &fd, tol));
        }
    }

    #[test]
    fn zero_weights_give_ln2() {
        let net = small_mlp(true, 8, 8);
        let mut p = net.initial_params(1);
        for q in p.iter_mut() {
            q.value.scale(0.0);
        }
        let loss = mlp_eval(&net, &p, &net.full_batch()).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn mlp_backprop_matches_finite_differences() {
        let net = small_mlp(true, 32, 16);
        let p = net.initial_params(5);
        let batch = net.sample_batch(9);
        let exact = net.exact_grad(&p, &batch).unwrap();
        let fd = central_difference_grad(&net, &p, &batch, 1e-5).unwrap();
        assert!(rel_close(&exact, &fd, 1e-5));
    }

    #[test]
    fn single_sample_gradient_is_rank_one() {
        let net = small_mlp(false, 16, 1);
        let p = net.initial_params(2);
        let batch = net.sample_batch(4);
        for g in net.exact_grad(&p, &batch).unwrap() {
            let s = singular_values(&g, 2).unwrap();
            assert!(s[1] <= 1e-8 * s[0]);
        }
    }

    #[test]
    fn batch_handle_is_fixed() {
        let net = small_mlp(true, 32, 8);
        let p = net.initial_params(3);
        let b = net.sample_batch(12);
        assert_eq!(net.eval(&p, &b).unwrap().to_bits(), net.eval(&p, &b).unwrap().to_bits());
        assert_eq!(net.sample_batch(12), b);
    }

    #[test]
    fn non_finite_activation_is_an_error() {
        let net = small_mlp(true, 8, 8);
        let mut p = net.initial_params(3);
        p.get_mut(0).value[(0, 0)] = f64::NAN;
        assert!(matches!(mlp_eval(&net, &p, &net.full_batch()), Err(Error::Numerical(_))));
    }

    #[test]
    fn cosine_edge_cases() {
        let v = vec![vec![1.0, 2.0]; 3];
        for row in cosine_matrix(&v) {
            for c in row {
                assert!((c.unwrap() - 1.0).abs() < 1e-15);
            }
        }
        let c = cosine_matrix(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(c[0][1], None);
        assert_eq!(c[1][1], Some(1.0));
    }

    #[test]
    fn lipschitz_estimate_is_finite() {
        let net = small_mlp(true, 16, 16);
        let p = net.initial_params(1);
        let l = gradient_lipschitz_estimate(&net, &p, &net.full_batch(), 5, 0.1, 3).unwrap();
        assert!(l.is_finite() && l > 0.0);
        let q = Quadratic::conditioned(3, 3, 5.0, 1).unwrap();
        let l = gradient_lipschitz_estimate(&q, &q.initial_params(0), &(), 10, 1.0, 3).unwrap();
        assert!(l <= 5.0 + 1e-9);
    }
}
