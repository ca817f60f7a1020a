//! Monte-Carlo information-rate estimators: GNND and CL GMI, mutual
//! information, and the MI–GMI gap expressed as a conditional KL divergence.
//!
//! All per-user estimators draw their samples through [`collect_terms`], which
//! works in fixed-size chunks with one RNG substream per chunk. Results do not
//! depend on the thread count, and every method sees the same `(x, y)` draws
//! (common random numbers), which keeps differences between methods tight.
//! Noise is drawn with unit variance and scaled, so the same seed gives
//! the same underlying draws at every SNR.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::channel::ChannelInstance;
use crate::constellation::Constellation;
use crate::gnnd::{clamped_artanh, cl_front, solve_gf_general, tilted_pmf, ClFront, MetricTable};
use crate::posterior::{JointPosterior, PosteriorMoments, Scratch, DEFAULT_ENUMERATION_CAP};
use crate::rng::{complex_gaussian, substream, tag};
use crate::stats::{RateEstimate, RunningStats};
use crate::{Error, Result};

pub const DEFAULT_SAMPLES: usize = 200_000;
/// Samples per RNG substream.
pub const CHUNK: usize = 1024;
pub const GOLDEN_ITERATIONS: usize = 60;

const LOG2E: f64 = std::f64::consts::LOG2_E;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Receiver {
    /// Every user decoded on its own, others treated as interference.
    NoSic,
    /// User `k` sees the true symbols of users `0..k` (genie prefix).
    Sic,
}

impl Receiver {
    pub fn as_str(&self) -> &'static str {
        match self {
            Receiver::NoSic => "no-sic",
            Receiver::Sic => "sic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RateMethod {
    Gnnd,
    Cl,
    Mi,
}

impl RateMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            RateMethod::Gnnd => "gnnd",
            RateMethod::Cl => "cl",
            RateMethod::Mi => "mi",
        }
    }
}

/// Sample budget and RNG addressing of one Monte-Carlo estimate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct McSpec {
    pub samples: usize,
    pub seed: u64,
    /// Prefix of the substream path, e.g. `[draw index]`.
    pub stream: Vec<u64>,
}

impl McSpec {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self {
            samples,
            seed,
            stream: Vec::new(),
        }
    }

    pub fn with_stream(mut self, stream: Vec<u64>) -> Self {
        self.stream = stream;
        self
    }
}

fn logcosh(z: f64) -> f64 {
    let a = z.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Per-observation GNND GMI for QPSK in bits, from the posterior mean.
pub fn gnnd_qpsk_integrand(mean: Complex64, power: f64) -> f64 {
    let c = (2.0 / power).sqrt();
    let term = |u: f64| {
        let u = u.clamp(-crate::gnnd::ARTANH_CLAMP, crate::gnnd::ARTANH_CLAMP);
        let a = clamped_artanh(u);
        // log cosh(artanh u) = -log(1 - u^2) / 2; 1 - |u| is exact near the clamp.
        u * a + 0.5 * ((1.0 - u.abs()) * (1.0 + u.abs())).ln()
    };
    (term(c * mean.re) + term(c * mean.im)) * LOG2E
}

/// GMI of GNND for QPSK: sample average of the closed-form integrand over
/// posterior means.
pub fn gmi_gnnd_qpsk<I: IntoIterator<Item = Complex64>>(means: I, power: f64) -> RateEstimate {
    means
        .into_iter()
        .map(|m| gnnd_qpsk_integrand(m, power))
        .collect::<RunningStats>()
        .estimate()
}

/// Maximizes a concave function of `theta < 0` by golden-section search on
/// `[-2/scale, -1e-6/scale]`, doubling the lower end while the maximum sits on it.
pub fn maximize_theta<F: Fn(f64) -> f64>(objective: F, scale: f64) -> Result<f64> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid(format!("theta scale must be positive, got {scale}")));
    }
    let mut lo = -2.0 / scale;
    let hi = -1e-6 / scale;
    let mut expansions = 0;
    while objective(lo) > objective(0.5 * lo) {
        lo *= 2.0;
        expansions += 1;
        if expansions > 60 || !lo.is_finite() {
            return Err(Error::BracketFailure { last_lower: lo });
        }
    }
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    for _ in 0..GOLDEN_ITERATIONS {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = objective(d);
        }
    }
    Ok(if fc >= fd { c } else { d })
}

/// Per-sample GMI terms (nats) of `sum_i` for a given `theta`.
fn generic_terms<'a>(
    theta: f64,
    tables: &'a [MetricTable],
    truth: &'a [usize],
    log_prior: &'a [f64],
) -> impl Iterator<Item = f64> + 'a {
    tables.iter().zip(truth).map(move |(t, &i)| {
        let e: Vec<f64> = t.values.iter().zip(log_prior).map(|(d, lp)| lp + theta * d).collect();
        let mx = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = e.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
        theta * t.values[i] - lse
    })
}

/// GMI of an arbitrary metric:
/// `sup_{theta<0} E[log(e^{theta d(x,y)} / sum_x' p(x') e^{theta d(x',y)})]`, in bits.
/// `tables[s]` is the metric at sample `s`, whose transmitted point is `truth[s]`;
/// `scale` (the noise variance) sets the initial search bracket. Returns the
/// estimate and the maximizing `theta`.
pub fn gmi_generic(tables: &[MetricTable], truth: &[usize], prior: &Constellation, scale: f64) -> Result<(RateEstimate, f64)> {
    if tables.is_empty() || tables.len() != truth.len() {
        return Err(Error::invalid("need one true index per metric table, and at least one sample"));
    }
    if tables.iter().any(|t| t.values.len() != prior.len()) {
        return Err(Error::invalid("metric table size differs from the constellation"));
    }
    let log_prior: Vec<f64> = prior.probabilities().iter().map(|p| p.ln()).collect();
    let mean_at = |theta: f64| generic_terms(theta, tables, truth, &log_prior).sum::<f64>() / tables.len() as f64;
    let theta = maximize_theta(mean_at, scale)?;
    let stats: RunningStats = generic_terms(theta, tables, truth, &log_prior).map(|v| v * LOG2E).collect();
    Ok((stats.estimate(), theta))
}

/// CL GMI for QPSK from whitened matched-filter outputs `s = h^H delta^{-1} y_res`
/// and the transmitted symbols, using the closed cosh form. Returns the
/// estimate and the maximizing `theta`.
pub fn gmi_cl_qpsk_from_outputs(outputs: &[Complex64], sent: &[Complex64], power: f64, scale: f64) -> Result<(RateEstimate, f64)> {
    if outputs.is_empty() || outputs.len() != sent.len() {
        return Err(Error::invalid("need one transmitted symbol per output, and at least one sample"));
    }
    let c = (2.0 * power).sqrt();
    // `s` is `conj(h^H delta^{-1} y)`, so `Re(s x)` is the real correlation.
    let term = |theta: f64, t: &Complex64, x: &Complex64| {
        let s = t.conj();
        -2.0 * theta * (s * x).re - logcosh(c * theta * s.re) - logcosh(c * theta * s.im)
    };
    let n = outputs.len() as f64;
    let theta = maximize_theta(|th| outputs.iter().zip(sent).map(|(t, x)| term(th, t, x)).sum::<f64>() / n, scale)?;
    let stats: RunningStats = outputs.iter().zip(sent).map(|(t, x)| term(theta, t, x) * LOG2E).collect();
    Ok((stats.estimate(), theta))
}

/// Whether `c` is the equiprobable set `sqrt(P/2)(±1 ± j)` (any labeling).
pub fn is_qpsk(c: &Constellation) -> bool {
    if c.len() != 4 || c.probabilities().iter().any(|p| (p - 0.25).abs() > 1e-12) {
        return false;
    }
    let s = (c.power() / 2.0).sqrt();
    c.points()
        .iter()
        .all(|a| (a.re.abs() - s).abs() <= 1e-12 * s.max(1.0) && (a.im.abs() - s).abs() <= 1e-12 * s.max(1.0))
        && {
            let mut q: Vec<(bool, bool)> = c.points().iter().map(|a| (a.re > 0.0, a.im > 0.0)).collect();
            q.sort();
            q.dedup();
            q.len() == 4
        }
}

/// Which per-sample terms [`collect_terms`] computes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Wants {
    pub mi: bool,
    pub gnnd: bool,
    pub cl: bool,
    pub kl: bool,
}

impl Wants {
    pub fn all() -> Self {
        Self {
            mi: true,
            gnnd: true,
            cl: true,
            kl: true,
        }
    }

    pub fn methods(methods: &[RateMethod]) -> Self {
        Self {
            mi: methods.contains(&RateMethod::Mi),
            gnnd: methods.contains(&RateMethod::Gnnd),
            cl: methods.contains(&RateMethod::Cl),
            kl: false,
        }
    }
}

/// Per-sample terms of one user. Rates are in bits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserTerms {
    /// `log2(p(x_k | y, prefix) / p(x_k))` at the transmitted point.
    pub mi: Vec<f64>,
    /// GNND GMI integrand: the closed form for QPSK, otherwise
    /// `log2(p~(x_k | y) / p(x_k))` at the transmitted point.
    pub gnnd: Vec<f64>,
    /// `log2(p(x_k | y) / p~(x_k | y))` at the transmitted point.
    pub kl: Vec<f64>,
    /// Whitened matched-filter outputs and transmitted symbols for the CL GMI.
    pub cl_outputs: Vec<Complex64>,
    pub cl_sent: Vec<Complex64>,
}

impl UserTerms {
    fn append(&mut self, other: UserTerms) {
        self.mi.extend(other.mi);
        self.gnnd.extend(other.gnnd);
        self.kl.extend(other.kl);
        self.cl_outputs.extend(other.cl_outputs);
        self.cl_sent.extend(other.cl_sent);
    }
}

/// Prepared receivers for every user under one receiver mode.
struct Receivers {
    /// One posterior for no-SIC, one per user (users `0..k` known) for SIC.
    posteriors: Vec<JointPosterior>,
    cl: Vec<Option<ClFront>>,
}

impl Receivers {
    fn posterior(&self, k: usize) -> &JointPosterior {
        if self.posteriors.len() == 1 {
            &self.posteriors[0]
        } else {
            &self.posteriors[k]
        }
    }
}

fn prepare(ch: &ChannelInstance, cons: &[Constellation], receiver: Receiver, users: &[usize], wants: Wants) -> Result<Receivers> {
    let k_all = ch.users();
    let need_post = wants.mi || wants.gnnd || wants.kl;
    let posteriors = if !need_post {
        Vec::new()
    } else {
        match receiver {
            Receiver::NoSic => vec![JointPosterior::new(ch, cons, &[], DEFAULT_ENUMERATION_CAP)?],
            Receiver::Sic => (0..k_all)
                .map(|k| {
                    if users.contains(&k) {
                        let known: Vec<bool> = (0..k_all).map(|u| u < k).collect();
                        JointPosterior::new(ch, cons, &known, DEFAULT_ENUMERATION_CAP).map(Some)
                    } else {
                        Ok(None)
                    }
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .map(|p| p.unwrap_or_else(|| placeholder_posterior(ch, cons)))
                .collect(),
        }
    };
    let cl = (0..k_all)
        .map(|k| {
            if wants.cl && users.contains(&k) {
                let prefix = if receiver == Receiver::Sic { k } else { 0 };
                cl_front(ch, k, prefix).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Receivers { posteriors, cl })
}

/// Stand-in for SIC stages of users that were not requested (never evaluated).
fn placeholder_posterior(ch: &ChannelInstance, cons: &[Constellation]) -> JointPosterior {
    let known: Vec<bool> = (0..ch.users()).map(|u| u + 1 != ch.users()).collect();
    JointPosterior::new(ch, cons, &known, DEFAULT_ENUMERATION_CAP).expect("single-user posterior")
}

/// Draws `spec.samples` channel uses and evaluates the requested per-sample
/// terms for each user in `users`.
pub fn collect_terms(
    ch: &ChannelInstance,
    cons: &[Constellation],
    receiver: Receiver,
    users: &[usize],
    wants: Wants,
    spec: &McSpec,
) -> Result<Vec<UserTerms>> {
    let k_all = ch.users();
    if cons.len() != k_all {
        return Err(Error::ShapeMismatch {
            expected: k_all,
            got: cons.len(),
        });
    }
    if spec.samples == 0 {
        return Err(Error::invalid("at least one sample is required"));
    }
    if let Some(&u) = users.iter().find(|&&u| u >= k_all) {
        return Err(Error::invalid(format!("user {u} out of range")));
    }
    if wants.cl && users.iter().any(|&u| !is_qpsk(&cons[u])) {
        return Err(Error::invalid("the CL GMI is implemented for QPSK inputs"));
    }
    let rx = prepare(ch, cons, receiver, users, wants)?;
    let chunks = spec.samples.div_ceil(CHUNK);
    let per_chunk: Vec<Result<Vec<UserTerms>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let n = CHUNK.min(spec.samples - c * CHUNK);
            let mut path = spec.stream.clone();
            path.extend([tag::SAMPLES, c as u64]);
            chunk_terms(ch, cons, receiver, users, wants, &rx, n, &mut substream(spec.seed, &path))
        })
        .collect();
    let mut out = vec![UserTerms::default(); users.len()];
    for chunk in per_chunk {
        for (acc, t) in out.iter_mut().zip(chunk?) {
            acc.append(t);
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn chunk_terms(
    ch: &ChannelInstance,
    cons: &[Constellation],
    receiver: Receiver,
    users: &[usize],
    wants: Wants,
    rx: &Receivers,
    n: usize,
    rng: &mut crate::rng::SimRng,
) -> Result<Vec<UserTerms>> {
    let k_all = ch.users();
    let l = ch.antennas();
    let sigma = ch.noise_var().sqrt();
    let mut out = vec![UserTerms::default(); users.len()];
    let mut scratch = Scratch::default();
    let log_priors: Vec<Vec<f64>> = cons.iter().map(|c| c.probabilities().iter().map(|p| p.ln()).collect()).collect();
    for _ in 0..n {
        let idx: Vec<usize> = cons.iter().map(|c| c.sample_index(rng)).collect();
        let x: Vec<Complex64> = idx.iter().zip(cons).map(|(&i, c)| c.points()[i]).collect();
        let noise: Vec<Complex64> = (0..l).map(|_| complex_gaussian(rng, 1.0) * sigma).collect();
        let y = ch.transmit_with_noise(&x, &noise)?;
        let shared = match (receiver, rx.posteriors.is_empty()) {
            (Receiver::NoSic, false) => Some(rx.posteriors[0].evaluate_with(&y, &vec![None; k_all], &mut scratch)?),
            _ => None,
        };
        for (slot, &k) in users.iter().enumerate() {
            let terms = &mut out[slot];
            let i = idx[k];
            if wants.mi || wants.gnnd || wants.kl {
                let own;
                let marg = match &shared {
                    Some(m) => m,
                    None => {
                        let side: Vec<Option<Complex64>> = (0..k_all).map(|u| (u < k).then(|| x[u])).collect();
                        own = rx.posterior(k).evaluate_with(&y, &side, &mut scratch)?;
                        &own
                    }
                };
                let pmf = marg.pmf(k)?;
                if wants.mi {
                    terms.mi.push((pmf[i].ln() - log_priors[k][i]) * LOG2E);
                }
                if wants.gnnd || wants.kl {
                    let mom = PosteriorMoments::from_pmf(pmf, &cons[k], marg.log_evidence);
                    if wants.gnnd && is_qpsk(&cons[k]) {
                        terms.gnnd.push(gnnd_qpsk_integrand(mom.mean, cons[k].power()));
                    }
                    let need_tilted = wants.kl || (wants.gnnd && !is_qpsk(&cons[k]));
                    if need_tilted {
                        let tilted = tilted_for(pmf, &cons[k])?;
                        if wants.gnnd && !is_qpsk(&cons[k]) {
                            terms.gnnd.push((tilted[i].ln() - log_priors[k][i]) * LOG2E);
                        }
                        if wants.kl {
                            terms.kl.push((pmf[i].ln() - tilted[i].ln()) * LOG2E);
                        }
                    }
                }
            }
            if wants.cl {
                let front = rx.cl[k].as_ref().expect("CL front prepared");
                let prefix = &x[..front.prefix_len];
                terms.cl_outputs.push(front.matched_output(&y, prefix)?);
                terms.cl_sent.push(x[k]);
            }
        }
    }
    Ok(out)
}

/// Tilted pmf at the optimal GNND front for a posterior pmf. The pmf is mixed
/// with the prior at weight 1e-12 so the moments are strictly interior and the
/// front is finite.
pub fn tilted_for(pmf: &[f64], c: &Constellation) -> Result<Vec<f64>> {
    const MIX: f64 = 1e-12;
    let mixed: Vec<f64> = pmf
        .iter()
        .zip(c.probabilities())
        .map(|(p, q)| (1.0 - MIX) * p + MIX * q)
        .collect();
    let mom = PosteriorMoments::from_pmf(&mixed, c, 0.0);
    let front = solve_gf_general(&mom, c)?;
    Ok(tilted_pmf(&front, c))
}

/// Per-user and sum rates of one method under one receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub method: RateMethod,
    pub receiver: Receiver,
    pub per_user: Vec<RateEstimate>,
    /// Standard error from the per-sample sums over users (same samples).
    pub sum: RateEstimate,
}

fn estimate(v: &[f64]) -> RateEstimate {
    v.iter().copied().collect::<RunningStats>().estimate()
}

/// Sum of per-user per-sample terms, as an estimate.
fn sum_estimate(per_user: &[Vec<f64>]) -> RateEstimate {
    let n = per_user.first().map_or(0, Vec::len);
    (0..n)
        .map(|s| per_user.iter().map(|u| u[s]).sum::<f64>())
        .collect::<RunningStats>()
        .estimate()
}

/// Rates of several methods from one shared set of samples.
pub fn sum_rate(
    ch: &ChannelInstance,
    cons: &[Constellation],
    receiver: Receiver,
    methods: &[RateMethod],
    spec: &McSpec,
) -> Result<Vec<RateReport>> {
    if methods.is_empty() {
        return Err(Error::invalid("no rate method requested"));
    }
    let users: Vec<usize> = (0..ch.users()).collect();
    let terms = collect_terms(ch, cons, receiver, &users, Wants::methods(methods), spec)?;
    let mut reports = Vec::new();
    for &method in methods {
        let per_sample: Vec<Vec<f64>> = match method {
            RateMethod::Mi => terms.iter().map(|t| t.mi.clone()).collect(),
            RateMethod::Gnnd => terms.iter().map(|t| t.gnnd.clone()).collect(),
            RateMethod::Cl => terms
                .iter()
                .zip(cons)
                .map(|(t, c)| cl_terms_at_optimum(&t.cl_outputs, &t.cl_sent, c.power(), ch.noise_var()))
                .collect::<Result<Vec<_>>>()?,
        };
        reports.push(RateReport {
            method,
            receiver,
            per_user: per_sample.iter().map(|v| estimate(v)).collect(),
            sum: sum_estimate(&per_sample),
        });
    }
    Ok(reports)
}

/// Per-sample CL GMI terms (bits) at the maximizing `theta`.
fn cl_terms_at_optimum(outputs: &[Complex64], sent: &[Complex64], power: f64, noise_var: f64) -> Result<Vec<f64>> {
    let (_, theta) = gmi_cl_qpsk_from_outputs(outputs, sent, power, noise_var.max(1e-300))?;
    let c = (2.0 * power).sqrt();
    Ok(outputs
        .iter()
        .zip(sent)
        .map(|(t, x)| {
            let s = t.conj();
            (-2.0 * theta * (s * x).re - logcosh(c * theta * s.re) - logcosh(c * theta * s.im)) * LOG2E
        })
        .collect())
}

fn single_user(ch: &ChannelInstance, cons: &[Constellation], k: usize, receiver: Receiver, wants: Wants, spec: &McSpec) -> Result<UserTerms> {
    Ok(collect_terms(ch, cons, receiver, &[k], wants, spec)?.remove(0))
}

/// `I(x_k; y | prefix)` in bits.
pub fn mutual_information(ch: &ChannelInstance, cons: &[Constellation], k: usize, receiver: Receiver, spec: &McSpec) -> Result<RateEstimate> {
    let wants = Wants {
        mi: true,
        ..Wants::default()
    };
    Ok(estimate(&single_user(ch, cons, k, receiver, wants, spec)?.mi))
}

/// `I(x_1, .., x_K; y)` by the chain rule over SIC stages.
pub fn joint_mutual_information(ch: &ChannelInstance, cons: &[Constellation], spec: &McSpec) -> Result<RateEstimate> {
    Ok(sum_rate(ch, cons, Receiver::Sic, &[RateMethod::Mi], spec)?.remove(0).sum)
}

/// GNND GMI of user `k` in bits.
pub fn gmi_gnnd(ch: &ChannelInstance, cons: &[Constellation], k: usize, receiver: Receiver, spec: &McSpec) -> Result<RateEstimate> {
    let wants = Wants {
        gnnd: true,
        ..Wants::default()
    };
    Ok(estimate(&single_user(ch, cons, k, receiver, wants, spec)?.gnnd))
}

/// CL GMI of user `k` (QPSK) in bits.
pub fn gmi_cl_qpsk(ch: &ChannelInstance, cons: &[Constellation], k: usize, receiver: Receiver, spec: &McSpec) -> Result<RateEstimate> {
    let wants = Wants {
        cl: true,
        ..Wants::default()
    };
    let t = single_user(ch, cons, k, receiver, wants, spec)?;
    Ok(gmi_cl_qpsk_from_outputs(&t.cl_outputs, &t.cl_sent, cons[k].power(), ch.noise_var().max(1e-300))?.0)
}

/// `D(p(x_k|y) || p~(x_k|y) | p_y)` in bits.
pub fn kl_gap(ch: &ChannelInstance, cons: &[Constellation], k: usize, receiver: Receiver, spec: &McSpec) -> Result<RateEstimate> {
    let wants = Wants {
        kl: true,
        ..Wants::default()
    };
    Ok(estimate(&single_user(ch, cons, k, receiver, wants, spec)?.kl))
}
