//! Decoding fronts: the optimal GNND `(g, f)` for a posterior, the
//! channel-linearization (CL) whitened matched filter, and exact ML metrics.
//!
//! A front is the triple `(alpha, beta, gamma)` with `alpha + j beta = g* f`
//! and `gamma = |f|^2`. The metric is `d(a) = |g - f a|^2`, and the induced
//! tilted distribution is `p~(a) ∝ p(a) exp(-gamma |a|^2 + 2 alpha Re a - 2 beta Im a)`.
//! The optimal front makes `p~` match the posterior's first (and, unless
//! the constellation has constant modulus, second) moment.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::channel::ChannelInstance;
use crate::constellation::Constellation;
use crate::posterior::{JointPosterior, PosteriorMoments, DEFAULT_ENUMERATION_CAP};
use crate::{Error, Result};

/// Largest magnitude passed to `artanh`.
pub const ARTANH_CLAMP: f64 = 1.0 - 1e-12;

/// Newton iteration budget and moment tolerance (relative to `sqrt(P)` / `P`).
pub const SOLVER_MAX_ITER: usize = 200;
pub const SOLVER_TOL: f64 = 1e-8;

/// `artanh` of `u` clamped to `±ARTANH_CLAMP`. Evaluated on `|u|` because the
/// library `atanh` is not exactly odd near -1.
pub fn clamped_artanh(u: f64) -> f64 {
    u.signum() * u.abs().min(ARTANH_CLAMP).atanh()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnndFront {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl GnndFront {
    /// Front from an explicit `(g, f)` pair.
    pub fn from_gf(g: Complex64, f: Complex64) -> Self {
        let c = g.conj() * f;
        Self {
            alpha: c.re,
            beta: c.im,
            gamma: f.norm_sqr(),
        }
    }

    /// `f = sqrt(gamma)` (real, nonnegative).
    pub fn f(&self) -> Complex64 {
        Complex64::new(self.gamma.max(0.0).sqrt(), 0.0)
    }

    /// `g` with `f` real; zero when `gamma = 0`.
    pub fn g(&self) -> Complex64 {
        if self.gamma > 0.0 {
            Complex64::new(self.alpha, -self.beta) / self.gamma.sqrt()
        } else {
            Complex64::new(0.0, 0.0)
        }
    }

    /// The GNND estimate `g / f`; `None` when `gamma = 0`.
    pub fn estimate(&self) -> Option<Complex64> {
        (self.gamma > 0.0).then(|| Complex64::new(self.alpha, -self.beta) / self.gamma)
    }

    /// `-gamma |a|^2 + 2 alpha Re a - 2 beta Im a`, i.e. `|g|^2 - d(a)`.
    fn exponent(&self, a: Complex64) -> f64 {
        -self.gamma * a.norm_sqr() + 2.0 * self.alpha * a.re - 2.0 * self.beta * a.im
    }
}

/// Which receiver front produced a metric table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrontKind {
    Gnnd,
    Cl,
    Ml,
}

impl FrontKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FrontKind::Gnnd => "gnnd",
            FrontKind::Cl => "cl",
            FrontKind::Ml => "ml",
        }
    }
}

/// Metric `d(a_i, y)` for every point of the target user's constellation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub values: Vec<f64>,
    pub tag: FrontKind,
}

impl MetricTable {
    pub fn argmin(&self) -> usize {
        self.values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Diagnostics of one call to the general solver.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// Objective value at the start and after every accepted step.
    pub objective: Vec<f64>,
    pub mean_residual: f64,
    pub second_residual: f64,
    /// The unconstrained optimum had `gamma < 0`; `gamma` was fixed to 0 and
    /// only the first moment is matched.
    pub gamma_at_bound: bool,
}

/// Sufficient statistics of the tilted family:
/// features `(2 Re a, -2 Im a, -|a|^2)` and natural parameters `(alpha, beta, gamma)`.
struct Tilted {
    log_z: f64,
    mean: [f64; 3],
    cov: [[f64; 3]; 3],
}

fn features(a: Complex64) -> [f64; 3] {
    [2.0 * a.re, -2.0 * a.im, -a.norm_sqr()]
}

fn tilted_stats(front: &GnndFront, points: &[Complex64], log_prior: &[f64]) -> Tilted {
    let e: Vec<f64> = points.iter().zip(log_prior).map(|(a, lp)| lp + front.exponent(*a)).collect();
    let mx = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = e.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut mean = [0.0; 3];
    for (a, wi) in points.iter().zip(&w) {
        let phi = features(*a);
        for d in 0..3 {
            mean[d] += wi * phi[d] / z;
        }
    }
    let mut cov = [[0.0; 3]; 3];
    for (a, wi) in points.iter().zip(&w) {
        let phi = features(*a);
        for r in 0..3 {
            for c in 0..3 {
                cov[r][c] += wi / z * (phi[r] - mean[r]) * (phi[c] - mean[c]);
            }
        }
    }
    Tilted {
        log_z: z.ln() + mx,
        mean,
        cov,
    }
}

/// Newton with backtracking on the free coordinates `dims` of the convex objective
/// `F(theta) = -theta . target + log Z(theta)`.
fn newton(
    start: GnndFront,
    dims: &[usize],
    target: [f64; 3],
    points: &[Complex64],
    log_prior: &[f64],
    tol: [f64; 3],
) -> (GnndFront, Vec<f64>, usize, [f64; 3]) {
    let to_arr = |f: &GnndFront| [f.alpha, f.beta, f.gamma];
    let from_arr = |t: [f64; 3]| GnndFront {
        alpha: t[0],
        beta: t[1],
        gamma: t[2],
    };
    let objective = |t: &Tilted, theta: [f64; 3]| -(0..3).map(|d| theta[d] * target[d]).sum::<f64>() + t.log_z;

    let mut theta = to_arr(&start);
    let mut stats = tilted_stats(&start, points, log_prior);
    let mut trace = vec![objective(&stats, theta)];
    let mut iterations = 0;
    // Newton steps taken after the tolerance was met: they cost little and pin
    // the parameters down in saturated directions where the moments barely move.
    let mut polish = 0;
    loop {
        let grad: [f64; 3] = std::array::from_fn(|d| stats.mean[d] - target[d]);
        if dims.iter().all(|&d| grad[d].abs() <= 0.01 * tol[d]) {
            polish += 1;
        }
        if polish > 2 || iterations >= SOLVER_MAX_ITER {
            return (from_arr(theta), trace, iterations, grad);
        }
        iterations += 1;
        let n = dims.len();
        let h = DMatrix::from_fn(n, n, |r, c| stats.cov[dims[r]][dims[c]]);
        let gvec = DVector::from_fn(n, |r, _| grad[dims[r]]);
        let step = newton_direction(&h, &gvec);
        let slope = gvec.dot(&step);
        let f0 = *trace.last().expect("nonempty trace");
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut cand = theta;
            for (i, &d) in dims.iter().enumerate() {
                cand[d] += t * step[i];
            }
            let s = tilted_stats(&from_arr(cand), points, log_prior);
            let f = objective(&s, cand);
            // Near the optimum the objective is flat to rounding; then a
            // smaller moment residual decides.
            let noise = 16.0 * f64::EPSILON * (1.0 + s.log_z.abs() + (0..3).map(|d| (cand[d] * target[d]).abs()).sum::<f64>());
            let flat_but_better = f <= f0 + noise
                && dims.iter().map(|&d| ((s.mean[d] - target[d]) / tol[d]).powi(2)).sum::<f64>()
                    < dims.iter().map(|&d| (grad[d] / tol[d]).powi(2)).sum::<f64>();
            if f.is_finite() && (f <= f0 + 1e-4 * t * slope || flat_but_better) {
                accepted = Some((cand, s, f));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, s, f)) => {
                theta = cand;
                stats = s;
                trace.push(f);
            }
            // No decrease is representable any more; report where we are.
            None => return (from_arr(theta), trace, iterations, grad),
        }
    }
}

/// `-H^{-1} g`, regularized if the covariance is (numerically) singular.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let scale = h.trace().abs().max(1e-300);
    let mut lambda = 0.0;
    loop {
        let mut hr = h.clone();
        for i in 0..hr.nrows() {
            hr[(i, i)] += lambda;
        }
        if let Some(ch) = hr.cholesky() {
            let d = -ch.solve(g);
            if d.iter().all(|v| v.is_finite()) {
                return d;
            }
        }
        lambda = if lambda == 0.0 { 1e-14 * scale } else { lambda * 10.0 };
        if lambda > 1e6 * scale {
            // Fall back to steepest descent.
            return -g / scale;
        }
    }
}

/// Optimal GNND front for the given posterior moments and prior.
pub fn solve_gf_general(moments: &PosteriorMoments, prior: &Constellation) -> Result<GnndFront> {
    solve_gf_general_report(moments, prior).map(|(f, _)| f)
}

/// As [`solve_gf_general`], also returning solver diagnostics.
pub fn solve_gf_general_report(moments: &PosteriorMoments, prior: &Constellation) -> Result<(GnndFront, SolveReport)> {
    let m = moments.mean;
    let s = moments.second;
    if !(m.re.is_finite() && m.im.is_finite() && s.is_finite()) {
        return Err(Error::invalid("posterior moments must be finite"));
    }
    if s < m.norm_sqr() * (1.0 - 1e-12) - 1e-300 {
        return Err(Error::invalid(format!(
            "inconsistent moments: second {s} < |mean|^2 {}",
            m.norm_sqr()
        )));
    }
    let p = prior.power();
    let points = prior.points();
    let log_prior: Vec<f64> = prior.probabilities().iter().map(|q| q.ln()).collect();
    let target = [2.0 * m.re, -2.0 * m.im, -s];
    let tol = [2.0 * SOLVER_TOL * p.sqrt(), 2.0 * SOLVER_TOL * p.sqrt(), SOLVER_TOL * p];
    let constant_modulus = prior.is_constant_modulus();

    let (front, trace, iterations, grad, gamma_at_bound) = if constant_modulus {
        let start = GnndFront {
            alpha: 0.0,
            beta: 0.0,
            gamma: 1.0,
        };
        let (f, tr, it, g) = newton(start, &[0, 1], target, points, &log_prior, tol);
        (f, tr, it, g, false)
    } else {
        let start = GnndFront {
            alpha: 0.0,
            beta: 0.0,
            gamma: 1.0 / p,
        };
        let (f, tr, it, g) = newton(start, &[0, 1, 2], target, points, &log_prior, tol);
        if f.gamma >= 0.0 {
            (f, tr, it, g, false)
        } else {
            // Convex objective: the constrained optimum lies on gamma = 0.
            let start = GnndFront {
                alpha: f.alpha,
                beta: f.beta,
                gamma: 0.0,
            };
            let (f2, tr2, it2, g2) = newton(start, &[0, 1], target, points, &log_prior, tol);
            let mut trace = tr;
            trace.extend(tr2);
            (f2, trace, it + it2, g2, true)
        }
    };
    let mean_residual = 0.5 * grad[0].hypot(grad[1]);
    let second_residual = grad[2].abs();
    let report = SolveReport {
        iterations,
        objective: trace,
        mean_residual,
        second_residual,
        gamma_at_bound,
    };
    let second_ok = constant_modulus || gamma_at_bound || second_residual <= SOLVER_TOL * p;
    if mean_residual <= SOLVER_TOL * p.sqrt() && second_ok {
        Ok((front, report))
    } else {
        Err(Error::NonConvergence {
            iterations,
            mean_residual,
            second_residual,
        })
    }
}

/// Closed-form optimal front for QPSK of power `power`: `f = 1` and
/// `g = (artanh(u) + j artanh(w)) / sqrt(2P)` with `u + j w = sqrt(2/P) mean`.
pub fn qpsk_gf(mean: Complex64, power: f64) -> GnndFront {
    let c = (2.0 / power).sqrt();
    let s = 1.0 / (2.0 * power).sqrt();
    let g = Complex64::new(s * clamped_artanh(c * mean.re), s * clamped_artanh(c * mean.im));
    GnndFront::from_gf(g, Complex64::new(1.0, 0.0))
}

/// Optimal front from the posterior moments: closed form for QPSK, the
/// general solver otherwise.
pub fn optimal_front(moments: &PosteriorMoments, c: &Constellation) -> Result<GnndFront> {
    if crate::inforate::is_qpsk(c) {
        Ok(qpsk_gf(moments.mean, c.power()))
    } else {
        solve_gf_general(moments, c)
    }
}

/// `values[i] = |g - f a_i|^2` (for `gamma = 0`, the `|g|^2` constant is dropped).
pub fn metric_table_gnnd(front: &GnndFront, c: &Constellation) -> MetricTable {
    let g2 = if front.gamma > 0.0 {
        (front.alpha * front.alpha + front.beta * front.beta) / front.gamma
    } else {
        0.0
    };
    MetricTable {
        values: c.points().iter().map(|a| g2 - front.exponent(*a)).collect(),
        tag: FrontKind::Gnnd,
    }
}

/// `p~(a_i) ∝ exp(-|g - f a_i|^2) p(a_i)`.
pub fn tilted_pmf(front: &GnndFront, c: &Constellation) -> Vec<f64> {
    let e: Vec<f64> = c
        .points()
        .iter()
        .zip(c.probabilities())
        .map(|(a, p)| p.ln() + front.exponent(*a))
        .collect();
    let mx = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = e.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|v| v / z).collect()
}

/// Channel-linearization front for user `k`: the other users are lumped with
/// the noise into a Gaussian term with covariance `delta`; users
/// `0..prefix_len` are assumed cancelled.
#[derive(Debug, Clone)]
pub struct ClFront {
    pub user: usize,
    pub prefix_len: usize,
    pub power: f64,
    /// `E[x_k* y] / P_k = h_k`.
    pub effective_gain: Vec<Complex64>,
    /// `sum_{j != k, j >= prefix_len} P_j h_j h_j^H + sigma^2 I`.
    pub residual_cov: DMatrix<Complex64>,
    /// `delta^{-1} h_k`.
    pub whitened_gain: Vec<Complex64>,
    /// `h_k^H delta^{-1} h_k`.
    pub rho: f64,
    prefix_gains: Vec<Vec<Complex64>>,
}

impl ClFront {
    /// Removes the cancelled users from `y` given their symbols.
    pub fn residual(&self, y: &[Complex64], prefix: &[Complex64]) -> Result<Vec<Complex64>> {
        if prefix.len() != self.prefix_len {
            return Err(Error::ShapeMismatch {
                expected: self.prefix_len,
                got: prefix.len(),
            });
        }
        if y.len() != self.effective_gain.len() {
            return Err(Error::ShapeMismatch {
                expected: self.effective_gain.len(),
                got: y.len(),
            });
        }
        let mut r = y.to_vec();
        for (g, x) in self.prefix_gains.iter().zip(prefix) {
            for (rl, gl) in r.iter_mut().zip(g) {
                *rl -= gl * x;
            }
        }
        Ok(r)
    }

    /// Whitened matched-filter output `h^H delta^{-1} y_res`.
    pub fn matched_output(&self, y: &[Complex64], prefix: &[Complex64]) -> Result<Complex64> {
        let r = self.residual(y, prefix)?;
        Ok(self.whitened_gain.iter().zip(&r).map(|(w, v)| w.conj() * v).sum())
    }

    /// LMMSE estimate `P h^H (P h h^H + delta)^{-1} y_res`.
    pub fn lmmse_estimate(&self, y: &[Complex64], prefix: &[Complex64]) -> Result<Complex64> {
        let s = self.matched_output(y, prefix)?;
        Ok(s * (self.power / (1.0 + self.power * self.rho)))
    }
}

pub fn cl_front(channel: &ChannelInstance, k: usize, prefix_len: usize) -> Result<ClFront> {
    let users = channel.users();
    if k >= users {
        return Err(Error::invalid(format!("user {k} out of range")));
    }
    if prefix_len > k {
        return Err(Error::invalid(format!("prefix of {prefix_len} users cannot precede user {k}")));
    }
    let l = channel.antennas();
    let mut delta = DMatrix::<Complex64>::identity(l, l) * Complex64::new(channel.noise_var(), 0.0);
    for j in (prefix_len..users).filter(|&j| j != k) {
        let h = DVector::from_column_slice(channel.gain(j));
        delta += (&h * h.adjoint()) * Complex64::new(channel.powers()[j], 0.0);
    }
    let hk = DVector::from_column_slice(channel.gain(k));
    let chol = delta.clone().cholesky().ok_or(Error::SingularCovariance)?;
    let w = chol.solve(&hk);
    let rho = hk.dotc(&w).re;
    if !(rho.is_finite() && rho > 0.0) {
        return Err(Error::SingularCovariance);
    }
    Ok(ClFront {
        user: k,
        prefix_len,
        power: channel.powers()[k],
        effective_gain: hk.iter().copied().collect(),
        residual_cov: delta,
        whitened_gain: w.iter().copied().collect(),
        rho,
        prefix_gains: (0..prefix_len).map(|j| channel.gain(j).to_vec()).collect(),
    })
}

/// `values[i] = |h^H delta^{-1} y_res - rho a_i|^2 / rho`.
pub fn metric_table_cl(front: &ClFront, y: &[Complex64], prefix: &[Complex64], c: &Constellation) -> Result<MetricTable> {
    let s = front.matched_output(y, prefix)?;
    Ok(MetricTable {
        values: c.points().iter().map(|a| (s - a * front.rho).norm_sqr() / front.rho).collect(),
        tag: FrontKind::Cl,
    })
}

/// `values[i] = -log p(y | x_k = a_i, prefix)`, interferers marginalized exactly.
pub fn metric_table_ml(
    y: &[Complex64],
    channel: &ChannelInstance,
    constellations: &[Constellation],
    k: usize,
    prefix: &[Complex64],
) -> Result<MetricTable> {
    if channel.noise_var() <= 0.0 {
        return Err(Error::invalid("ML metric needs a positive noise variance"));
    }
    if k >= channel.users() || prefix.len() > k {
        return Err(Error::invalid(format!("user {k} with a prefix of {} symbols", prefix.len())));
    }
    let side = crate::posterior::side_from_prefix(channel.users(), prefix);
    let known: Vec<bool> = side.iter().map(Option::is_some).collect();
    let post = JointPosterior::new(channel, constellations, &known, DEFAULT_ENUMERATION_CAP)?;
    ml_table_from(&post, y, &side, k)
}

/// ML table from a prepared [`JointPosterior`] (reused across observations).
pub fn ml_table_from(post: &JointPosterior, y: &[Complex64], side: &[Option<Complex64>], k: usize) -> Result<MetricTable> {
    let marg = post.evaluate(y, side)?;
    let lj = marg.log_joint(k)?;
    let lp = post.log_prior(k).ok_or_else(|| Error::invalid(format!("user {k} is not enumerated")))?;
    Ok(MetricTable {
        values: lj.iter().zip(lp).map(|(j, p)| p - j).collect(),
        tag: FrontKind::Ml,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{equal_powers, sample_channel};
    use crate::posterior::{posterior_moments, posterior_pmf};
    use crate::rng::{complex_gaussian, substream};
    use crate::stats::gauss_hermite;
    use rand::Rng;

    fn qam16(power: f64) -> Constellation {
        let lv = [-3.0, -1.0, 1.0, 3.0];
        let s = (power / 10.0).sqrt();
        let pts: Vec<Complex64> = lv
            .iter()
            .flat_map(|&re| lv.iter().map(move |&im| Complex64::new(re * s, im * s)))
            .collect();
        Constellation::new(pts, vec![1.0 / 16.0; 16], None).unwrap()
    }

    fn scalar_channel(h: Complex64, nv: f64, p: f64) -> ChannelInstance {
        ChannelInstance::new(DMatrix::from_element(1, 1, h), nv, vec![p]).unwrap()
    }

    fn tilted_moments(front: &GnndFront, c: &Constellation) -> (Complex64, f64) {
        let pmf = tilted_pmf(front, c);
        let m = pmf.iter().zip(c.points()).map(|(p, a)| a * p).sum();
        let s = pmf.iter().zip(c.points()).map(|(p, a)| p * a.norm_sqr()).sum();
        (m, s)
    }

    fn objective(front: &GnndFront, mom: &PosteriorMoments, c: &Constellation) -> f64 {
        let e: Vec<f64> = c
            .points()
            .iter()
            .zip(c.probabilities())
            .map(|(a, p)| p.ln() + front.exponent(*a))
            .collect();
        let mx = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lz = e.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
        front.gamma * mom.second - 2.0 * front.alpha * mom.mean.re + 2.0 * front.beta * mom.mean.im + lz
    }

    #[test]
    fn qpsk_closed_form_examples() {
        let f = qpsk_gf(Complex64::new(0.0, 0.0), 2.0);
        assert_eq!(f.g(), Complex64::new(0.0, 0.0));
        let f = qpsk_gf(Complex64::new(0.6f64.tanh(), 0.2f64.tanh()), 2.0);
        assert!((f.g() - Complex64::new(0.3, 0.1)).norm() < 1e-14);
        assert!((f.gamma - 1.0).abs() < 1e-15);
        // Spec-style rounded input.
        let f = qpsk_gf(Complex64::new(0.53705, 0.19738), 2.0);
        assert!((f.g() - Complex64::new(0.3, 0.1)).norm() < 1e-4);
        let edge = (1.0f64).sqrt() * (1.0 - 1e-12);
        let f = qpsk_gf(Complex64::new(edge, -edge), 2.0);
        assert!(f.alpha.is_finite() && f.beta.is_finite());
        let f = qpsk_gf(Complex64::new(5.0, 0.0), 2.0);
        assert!(f.alpha.is_finite() && f.alpha > 0.0);
        assert_eq!(clamped_artanh(-0.9999999), -clamped_artanh(0.9999999));
        assert_eq!(clamped_artanh(-2.0), -clamped_artanh(2.0));
        assert_eq!(clamped_artanh(0.0), 0.0);
    }

    #[test]
    fn gnnd_tables() {
        let c = Constellation::qpsk(2.0).unwrap();
        let t = metric_table_gnnd(&GnndFront::from_gf(Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)), &c);
        assert!(t.values.iter().all(|v| (v - 2.0).abs() < 1e-15));
        let a1 = c.points()[0];
        let t = metric_table_gnnd(&GnndFront::from_gf(a1, Complex64::new(1.0, 0.0)), &c);
        assert!(t.values[0].abs() < 1e-15);
        assert!(t.values[1..].iter().all(|&v| v > 0.0));
        assert_eq!(t.tag, FrontKind::Gnnd);
    }

    #[test]
    fn qpsk_argmin_is_sign_decision() {
        let c = Constellation::qpsk(1.0).unwrap();
        let mut rng = substream(31, &[0]);
        for _ in 0..500 {
            let m = Complex64::new(rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7));
            let t = metric_table_gnnd(&qpsk_gf(m, 1.0), &c);
            let want = c.nearest(Complex64::new(m.re.signum(), m.im.signum()));
            assert_eq!(t.argmin(), want);
        }
    }

    #[test]
    fn trivial_moments_give_prior() {
        let c = Constellation::qpsk(1.0).unwrap();
        let mom = PosteriorMoments {
            mean: Complex64::new(0.0, 0.0),
            second: 1.0,
            log_norm: 0.0,
        };
        let f = solve_gf_general(&mom, &c).unwrap();
        assert!(f.alpha.abs() < 1e-12 && f.beta.abs() < 1e-12);
        assert!(tilted_pmf(&f, &c).iter().all(|p| (p - 0.25).abs() < 1e-12));
        let q = qam16(1.0);
        let f = solve_gf_general(&mom, &q).unwrap();
        assert!(f.alpha.abs() < 1e-10 && f.beta.abs() < 1e-10 && f.gamma.abs() < 1e-10);
        assert!(tilted_pmf(&f, &q).iter().all(|p| (p - 1.0 / 16.0).abs() < 1e-10));
    }

    #[test]
    fn zero_g_gives_prior_for_constant_modulus() {
        let c = Constellation::qpsk(3.0).unwrap();
        let f = GnndFront::from_gf(Complex64::new(0.0, 0.0), Complex64::new(0.7, 0.2));
        assert!(tilted_pmf(&f, &c).iter().all(|p| (p - 0.25).abs() < 1e-14));
    }

    #[test]
    fn solver_matches_qpsk_closed_form() {
        let mut rng = substream(32, &[0]);
        let mut checked = 0;
        while checked < 1000 {
            let p = rng.random_range(0.1..4.0);
            let c = Constellation::qpsk(p).unwrap();
            let ch = scalar_channel(complex_gaussian(&mut rng, 1.0), rng.random_range(0.05..3.0), p);
            let x = c.points()[rng.random_range(0..4)];
            let y = ch.transmit(&[x], &mut rng).unwrap();
            let mom = posterior_moments(&y, &ch, std::slice::from_ref(&c), 0, &[]).unwrap();
            // Near the corners the closed form clamps its artanh argument while
            // the solver does not; compare away from the clamp.
            let u = (2.0 / p).sqrt() * mom.mean;
            if u.re.abs().max(u.im.abs()) > 1.0 - 1e-6 {
                continue;
            }
            let (f, rep) = solve_gf_general_report(&mom, &c).unwrap();
            let cf = qpsk_gf(mom.mean, p);
            assert!((f.alpha - cf.alpha).abs() < 1e-6, "{f:?} vs {cf:?}");
            assert!((f.beta - cf.beta).abs() < 1e-6, "{f:?} vs {cf:?} {rep:?} {mom:?} p={p}");
            let (tm, _) = tilted_moments(&f, &c);
            assert!((tm - mom.mean).norm() <= 1e-8 * p.sqrt());
            // Non-increasing up to the rounding of the log-partition.
            for w in rep.objective.windows(2) {
                assert!(w[1] <= w[0] + 1e-13 * w[0].abs().max(1.0));
            }
            checked += 1;
        }
    }

    /// Dense grid search on the convex objective, refined twice around the best cell.
    fn grid_search(mom: &PosteriorMoments, c: &Constellation, center: [f64; 3], half: [f64; 3]) -> [f64; 3] {
        let n = 24;
        let mut best = (f64::INFINITY, center);
        let mut ctr = center;
        let mut hw = half;
        for _ in 0..3 {
            for i in 0..=n {
                for j in 0..=n {
                    for k in 0..=n {
                        let t = [
                            ctr[0] - hw[0] + 2.0 * hw[0] * i as f64 / n as f64,
                            ctr[1] - hw[1] + 2.0 * hw[1] * j as f64 / n as f64,
                            ctr[2] - hw[2] + 2.0 * hw[2] * k as f64 / n as f64,
                        ];
                        let fr = GnndFront {
                            alpha: t[0],
                            beta: t[1],
                            gamma: t[2],
                        };
                        let v = objective(&fr, mom, c);
                        if v < best.0 {
                            best = (v, t);
                        }
                    }
                }
            }
            ctr = best.1;
            hw = hw.map(|h| h * 4.0 / n as f64);
        }
        best.1
    }

    #[test]
    fn solver_matches_grid_search_on_16qam() {
        let c = qam16(1.0);
        let mut rng = substream(33, &[0]);
        for _ in 0..4 {
            let ch = scalar_channel(Complex64::new(1.0, 0.0), 0.1, 1.0);
            let x = c.points()[rng.random_range(0..16)];
            let y = ch.transmit(&[x], &mut rng).unwrap();
            let mom = posterior_moments(&y, &ch, std::slice::from_ref(&c), 0, &[]).unwrap();
            let (f, rep) = solve_gf_general_report(&mom, &c).unwrap();
            assert!(!rep.gamma_at_bound);
            let (tm, ts) = tilted_moments(&f, &c);
            assert!((tm - mom.mean).norm() < 1e-8);
            assert!((ts - mom.second).abs() < 1e-8);
            let g = grid_search(&mom, &c, [0.0, 0.0, 10.0], [20.0, 20.0, 10.0]);
            let fv = objective(&f, &mom, &c);
            let gv = objective(
                &GnndFront {
                    alpha: g[0],
                    beta: g[1],
                    gamma: g[2],
                },
                &mom,
                &c,
            );
            assert!(fv <= gv + 1e-12, "solver {fv} grid {gv}");
            assert!((f.alpha - g[0]).abs() < 0.2 && (f.beta - g[1]).abs() < 0.2 && (f.gamma - g[2]).abs() < 0.2);
            // In the matched single-user case the front reproduces the likelihood:
            // gamma = |h|^2 / sigma^2 and g / f = y / h.
            assert!((f.gamma - 10.0).abs() < 1e-6, "{f:?}");
            assert!((f.estimate().unwrap() - y[0]).norm() < 1e-7);
        }
    }

    #[test]
    fn gaussian_limit_of_discretized_prior() {
        // CN(0, P) discretized by a product Gauss-Hermite rule; AWGN with
        // variance s2. The Gaussian answer is gamma = 1/s2 and g/f = y.
        let (p, s2) = (1.0, 0.5);
        let y = Complex64::new(0.4, -0.3);
        let mut errs = Vec::new();
        for n in [6usize, 10, 16] {
            let (t, w) = gauss_hermite(n);
            let mut pts = Vec::new();
            let mut probs = Vec::new();
            for (ti, wi) in t.iter().zip(&w) {
                for (tj, wj) in t.iter().zip(&w) {
                    pts.push(Complex64::new(*ti, *tj) * (p / 2.0f64).sqrt() * std::f64::consts::SQRT_2);
                    probs.push(wi * wj / std::f64::consts::PI);
                }
            }
            let z: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|q| *q /= z);
            let c = Constellation::new(pts, probs, None).unwrap();
            let mean = y * (p / (p + s2));
            let var = p * s2 / (p + s2);
            let mom = PosteriorMoments {
                mean,
                second: mean.norm_sqr() + var,
                log_norm: 0.0,
            };
            let f = solve_gf_general(&mom, &c).unwrap();
            errs.push(((f.gamma * s2 - 1.0).abs(), (f.estimate().unwrap() - y).norm()));
        }
        assert!(errs[2].0 < errs[0].0 && errs[2].1 < errs[0].1, "{errs:?}");
        assert!(errs[2].0 < 1e-3 && errs[2].1 < 1e-3, "{errs:?}");
    }

    #[test]
    fn gamma_bound_is_respected() {
        // Two-ring prior with a posterior concentrated on the outer ring more than
        // any gamma >= 0 tilt allows: second moment above the prior's, mean zero.
        let inner = 0.5f64;
        let outer = (2.0 - inner * inner).sqrt();
        let mut pts = Vec::new();
        for r in [inner, outer] {
            for q in 0..4 {
                let ang = std::f64::consts::FRAC_PI_4 + q as f64 * std::f64::consts::FRAC_PI_2;
                pts.push(Complex64::from_polar(r, ang));
            }
        }
        let c = Constellation::new(pts, vec![0.125; 8], None).unwrap();
        let mom = PosteriorMoments {
            mean: Complex64::new(0.1, 0.0),
            second: 1.6,
            log_norm: 0.0,
        };
        let (f, rep) = solve_gf_general_report(&mom, &c).unwrap();
        assert!(rep.gamma_at_bound);
        assert_eq!(f.gamma, 0.0);
        let (tm, _) = tilted_moments(&f, &c);
        assert!((tm - mom.mean).norm() < 1e-8);
    }

    #[test]
    fn inconsistent_moments_are_rejected() {
        let c = qam16(1.0);
        let mom = PosteriorMoments {
            mean: Complex64::new(0.5, 0.5),
            second: 0.1,
            log_norm: 0.0,
        };
        assert!(solve_gf_general(&mom, &c).is_err());
    }

    #[test]
    fn cl_single_user_is_matched_filter() {
        let c = Constellation::qpsk(1.0).unwrap();
        let ch = scalar_channel(Complex64::new(1.0, 0.0), 1.0, 1.0);
        let fr = cl_front(&ch, 0, 0).unwrap();
        assert!((fr.residual_cov[(0, 0)].re - 1.0).abs() < 1e-15);
        let y = [Complex64::new(0.3, -0.8)];
        let t = metric_table_cl(&fr, &y, &[], &c).unwrap();
        for (v, a) in t.values.iter().zip(c.points()) {
            assert!((v - (y[0] - a).norm_sqr()).abs() < 1e-14);
        }
    }

    #[test]
    fn cl_matches_direct_formula() {
        let mut rng = substream(34, &[0]);
        let ch = sample_channel(2, 2, 0.3, vec![0.6, 0.4], &mut rng).unwrap();
        let c = Constellation::qpsk(0.6).unwrap();
        let fr = cl_front(&ch, 0, 0).unwrap();
        let y = [complex_gaussian(&mut rng, 1.0), complex_gaussian(&mut rng, 1.0)];
        let t = metric_table_cl(&fr, &y, &[], &c).unwrap();
        // Second implementation: explicit 2x2 inverse and q = E[x* y] = P h.
        let (h1, h2) = (ch.gain(0), ch.gain(1));
        let (p1, p2, s2) = (0.6, 0.4, 0.3);
        let d = [
            [h2[0] * h2[0].conj() * p2 + s2, h2[0] * h2[1].conj() * p2],
            [h2[1] * h2[0].conj() * p2, h2[1] * h2[1].conj() * p2 + s2],
        ];
        let det = d[0][0] * d[1][1] - d[0][1] * d[1][0];
        let inv = [[d[1][1] / det, -d[0][1] / det], [-d[1][0] / det, d[0][0] / det]];
        let q = [h1[0] * p1, h1[1] * p1];
        let qi = [
            q[0].conj() * inv[0][0] + q[1].conj() * inv[1][0],
            q[0].conj() * inv[0][1] + q[1].conj() * inv[1][1],
        ];
        let qq = (qi[0] * q[0] + qi[1] * q[1]).re;
        for (v, a) in t.values.iter().zip(c.points()) {
            let r = [y[0] - q[0] / p1 * a, y[1] - q[1] / p1 * a];
            let want = (qi[0] * r[0] + qi[1] * r[1]).norm_sqr() / qq;
            assert!((v - want).abs() < 1e-10, "{v} {want}");
        }
        // Hermitian PSD covariance.
        let dm = &fr.residual_cov;
        assert!((dm - dm.adjoint()).norm() < 1e-15);
        assert!(dm.clone().cholesky().is_some());
    }

    #[test]
    fn cl_full_cancellation_is_single_user() {
        let mut rng = substream(35, &[0]);
        let ch = sample_channel(3, 2, 0.2, equal_powers(3, 1.0), &mut rng).unwrap();
        let c = Constellation::qpsk(ch.powers()[2]).unwrap();
        let prefix = [c.points()[0], c.points()[3]];
        let fr = cl_front(&ch, 2, 2).unwrap();
        let single = ChannelInstance::new(ch.gains().columns(2, 1).into_owned(), 0.2, vec![ch.powers()[2]]).unwrap();
        let fs = cl_front(&single, 0, 0).unwrap();
        let y = ch.transmit(&[prefix[0], prefix[1], c.points()[1]], &mut rng).unwrap();
        let y_res: Vec<Complex64> = fr.residual(&y, &prefix).unwrap();
        let a = metric_table_cl(&fr, &y, &prefix, &c).unwrap();
        let b = metric_table_cl(&fs, &y_res, &[], &c).unwrap();
        for (u, v) in a.values.iter().zip(&b.values) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn cl_effective_gain_is_cross_correlation() {
        // E[x_k* y] / P_k = h_k, estimated over 1e6 draws.
        let mut rng = substream(36, &[0]);
        let ch = sample_channel(2, 2, 0.5, vec![0.5, 0.5], &mut rng).unwrap();
        let cons: Vec<Constellation> = ch.powers().iter().map(|&p| Constellation::qpsk(p).unwrap()).collect();
        let n = 1_000_000;
        let mut acc = [Complex64::new(0.0, 0.0); 2];
        let mut acc2 = [0.0; 2];
        for _ in 0..n {
            let x: Vec<Complex64> = cons.iter().map(|c| c.points()[c.sample_index(&mut rng)]).collect();
            let y = ch.transmit(&x, &mut rng).unwrap();
            for l in 0..2 {
                let v = x[0].conj() * y[l] / 0.5;
                acc[l] += v;
                acc2[l] += v.norm_sqr();
            }
        }
        let fr = cl_front(&ch, 0, 0).unwrap();
        for l in 0..2 {
            let mean = acc[l] / n as f64;
            let se = ((acc2[l] / n as f64 - mean.norm_sqr()) / n as f64).sqrt();
            assert!((mean - fr.effective_gain[l]).norm() < 3.0 * se * std::f64::consts::SQRT_2, "{mean} {}", fr.effective_gain[l]);
        }
    }

    #[test]
    fn cl_argmin_invariant_to_scaling() {
        let mut rng = substream(37, &[0]);
        let ch = sample_channel(3, 2, 0.2, equal_powers(3, 1.0), &mut rng).unwrap();
        let c = Constellation::qpsk(ch.powers()[1]).unwrap();
        let fr = cl_front(&ch, 1, 0).unwrap();
        let mut scaled = fr.clone();
        let s = 7.3;
        scaled.whitened_gain.iter_mut().for_each(|w| *w /= s);
        scaled.rho /= s;
        for _ in 0..100 {
            let y = [complex_gaussian(&mut rng, 1.0), complex_gaussian(&mut rng, 1.0)];
            let a = metric_table_cl(&fr, &y, &[], &c).unwrap();
            let b = metric_table_cl(&scaled, &y, &[], &c).unwrap();
            assert_eq!(a.argmin(), b.argmin());
        }
    }

    #[test]
    fn ml_table_properties() {
        let c = Constellation::qpsk(1.0).unwrap();
        let ch = scalar_channel(Complex64::new(0.8, 0.3), 0.4, 1.0);
        let y = [Complex64::new(0.2, 0.5)];
        let t = metric_table_ml(&y, &ch, std::slice::from_ref(&c), 0, &[]).unwrap();
        let h = Complex64::new(0.8, 0.3);
        let offs: Vec<f64> = t
            .values
            .iter()
            .zip(c.points())
            .map(|(v, a)| v - (y[0] - h * a).norm_sqr() / 0.4)
            .collect();
        assert!(offs.iter().all(|o| (o - offs[0]).abs() < 1e-12));

        let mut rng = substream(38, &[0]);
        let ch = sample_channel(3, 2, 0.3, equal_powers(3, 1.0), &mut rng).unwrap();
        let cons: Vec<Constellation> = ch.powers().iter().map(|&p| Constellation::qpsk(p).unwrap()).collect();
        let y = ch.transmit(&[cons[0].points()[1], cons[1].points()[2], cons[2].points()[0]], &mut rng).unwrap();
        for k in 0..3 {
            let t = metric_table_ml(&y, &ch, &cons, k, &[]).unwrap();
            let w: Vec<f64> = t.values.iter().map(|v| (-v).exp()).collect();
            let z: f64 = w.iter().sum();
            let pmf = posterior_pmf(&y, &ch, &cons, k, &[]).unwrap();
            for (a, b) in w.iter().zip(&pmf) {
                assert!((a / z - b).abs() < 1e-12);
            }
        }
        let flat = metric_table_ml(&y, &ch.with_noise_var(1e12).unwrap(), &cons, 0, &[]).unwrap();
        let spread = flat.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - flat.values.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(spread < 1e-9);
    }
}
