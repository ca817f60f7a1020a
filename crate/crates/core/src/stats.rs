//! Streaming moment accumulation and rate estimates.

use serde::Serialize;

/// Welford accumulator. `merge` follows Chan et al. so partial results from
/// independent workers can be combined.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64) * (other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance (zero for fewer than two samples).
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    pub fn estimate(&self) -> RateEstimate {
        RateEstimate {
            value: self.mean,
            std_error: self.std_error(),
            samples: self.n.max(1),
        }
    }
}

impl FromIterator<f64> for RunningStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = RunningStats::new();
        for x in iter {
            s.push(x);
        }
        s
    }
}

/// An information-rate estimate in bits per channel use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateEstimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: u64,
}

impl RateEstimate {
    /// Combined standard error of several independent-ish estimates, `sqrt(sum se^2)`.
    pub fn combined_error(parts: &[RateEstimate]) -> f64 {
        parts.iter().map(|r| r.std_error * r.std_error).sum::<f64>().sqrt()
    }

    /// Mean of estimates obtained on independent draws, with the error of the mean.
    pub fn average(parts: &[RateEstimate]) -> RateEstimate {
        let n = parts.len().max(1) as f64;
        RateEstimate {
            value: parts.iter().map(|r| r.value).sum::<f64>() / n,
            std_error: Self::combined_error(parts) / n,
            samples: parts.iter().map(|r| r.samples).sum(),
        }
    }
}

/// Gauss–Hermite rule with `n` nodes for `int f(t) exp(-t^2) dt` (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut jacobi = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        jacobi[(i, i - 1)] = b;
        jacobi[(i - 1, i)] = b;
    }
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}
