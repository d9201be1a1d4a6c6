//! Streaming moments with deterministic parallel reduction.
//!
//! Trials are split into fixed-size chunks. Each chunk is accumulated
//! sequentially, and chunk results are merged by a fixed pairwise tree, so
//! the result does not depend on the number of worker threads.

use rayon::prelude::*;

/// Trials per sequential chunk.
pub const CHUNK: u64 = 4096;

/// Count, mean and sum of squared deviations (Welford; merged with Chan's rule).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&self, other: &Moments) -> Moments {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        let (na, nb, nf) = (self.n as f64, other.n as f64, n as f64);
        Moments { n, mean: self.mean + d * nb / nf, m2: self.m2 + other.m2 + d * d * na * nb / nf }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; 0 with fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn std_err(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

/// Per-entry [`Moments`] for vector-valued samples.
#[derive(Clone, Debug, PartialEq)]
pub struct VecMoments {
    entries: Vec<Moments>,
}

impl VecMoments {
    pub fn new(len: usize) -> Self {
        Self { entries: vec![Moments::new(); len] }
    }

    pub fn push(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.entries.len(), "sample length");
        for (m, &v) in self.entries.iter_mut().zip(x) {
            m.push(v);
        }
    }

    pub fn merge(&self, other: &VecMoments) -> VecMoments {
        VecMoments { entries: self.entries.iter().zip(&other.entries).map(|(a, b)| a.merge(b)).collect() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Moments] {
        &self.entries
    }

    pub fn means(&self) -> Vec<f64> {
        self.entries.iter().map(Moments::mean).collect()
    }

    pub fn std_errs(&self) -> Vec<f64> {
        self.entries.iter().map(Moments::std_err).collect()
    }
}

/// Merges `items` pairwise, neighbour with neighbour, until one remains.
pub fn pairwise_reduce<T>(mut items: Vec<T>, merge: impl Fn(T, T) -> T) -> Option<T> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(merge(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

/// Runs `chunk(lo..hi)` over `[0, trials)` in fixed-size chunks in parallel
/// and merges the chunk results in a fixed tree.
pub fn chunked_trials<A, F, M>(trials: u64, chunk: F, merge: M) -> Option<A>
where
    A: Send,
    F: Fn(std::ops::Range<u64>) -> A + Sync,
    M: Fn(A, A) -> A,
{
    let chunks = trials.div_ceil(CHUNK);
    let parts: Vec<A> = (0..chunks)
        .into_par_iter()
        .map(|c| chunk(c * CHUNK..((c + 1) * CHUNK).min(trials)))
        .collect();
    pairwise_reduce(parts, merge)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_matches_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.1 - 3.0).collect();
        let mut all = Moments::new();
        xs.iter().for_each(|&x| all.push(x));
        let mut a = Moments::new();
        let mut b = Moments::new();
        xs[..313].iter().for_each(|&x| a.push(x));
        xs[313..].iter().for_each(|&x| b.push(x));
        let m = a.merge(&b);
        assert_eq!(m.count(), 1000);
        assert!((m.mean() - all.mean()).abs() < 1e-12);
        assert!((m.variance() - all.variance()).abs() < 1e-10);
    }

    #[test]
    fn known_variance() {
        let mut m = Moments::new();
        for x in [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0] {
            m.push(x);
        }
        assert_eq!(m.mean(), 5.0);
        assert!((m.variance() - 32.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn chunked_is_thread_independent() {
        let run = || {
            chunked_trials(
                20_000,
                |r| {
                    let mut m = Moments::new();
                    r.for_each(|k| m.push((k as f64).sin()));
                    m
                },
                |a, b| a.merge(&b),
            )
            .unwrap()
        };
        let a = run();
        let b = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
        assert_eq!(a, b);
        assert_eq!(a.count(), 20_000);
    }

    #[test]
    fn pairwise_handles_odd_and_empty() {
        assert_eq!(pairwise_reduce(vec![1, 2, 3, 4, 5], |a, b| a + b), Some(15));
        assert_eq!(pairwise_reduce(Vec::<i32>::new(), |a, b| a + b), None);
    }
}
