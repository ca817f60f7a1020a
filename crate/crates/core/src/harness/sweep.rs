//! Rate sweeps over channel draws and SNR, and estimate scattergrams.

use std::time::{Duration, Instant};

use num_complex::Complex64;
use serde::Serialize;

use super::config::{ExperimentConfig, ExperimentKind, Method, ReceiverMode};
use crate::channel::{equal_powers, noise_var_for_snr, sample_gains, ChannelInstance};
use crate::constellation::Constellation;
use crate::gnnd::{cl_front, optimal_front};
use crate::inforate::{sum_rate, McSpec, RateMethod, Receiver};
use crate::posterior::{JointPosterior, Scratch, DEFAULT_ENUMERATION_CAP};
use crate::rng::{complex_gaussian, substream, tag};
use crate::stats::RateEstimate;
use crate::{Error, Result};

/// Channel realization `draw` of a config at the given SNR (gains do not
/// depend on the SNR).
pub fn draw_channel(config: &ExperimentConfig, draw: usize, snr_db: f64) -> Result<ChannelInstance> {
    let mut rng = substream(config.seed, &[tag::CHANNEL, draw as u64]);
    let gains = sample_gains(config.users, config.antennas, &mut rng)?;
    ChannelInstance::new(gains, noise_var_for_snr(snr_db, 1.0), equal_powers(config.users, 1.0))
}

/// One rate row: a draw, an SNR point and a method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub draw: usize,
    pub snr_db: f64,
    pub method: &'static str,
    pub receiver: &'static str,
    pub sum_rate: f64,
    pub sum_std_error: f64,
    pub samples: u64,
    /// Per-user rates, `;`-separated, in user index order.
    pub per_user: String,
    pub per_user_std_error: String,
}

/// Average over draws at one SNR for one method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateSummaryRow {
    pub snr_db: f64,
    pub method: &'static str,
    pub receiver: &'static str,
    pub mean_sum_rate: f64,
    pub std_error: f64,
    pub draws: usize,
}

#[derive(Debug, Clone)]
pub struct RateSweep {
    pub rows: Vec<RateRow>,
    pub summary: Vec<RateSummaryRow>,
    pub runtime: Duration,
}

impl RateSweep {
    pub fn mean_sum_rate(&self, snr_db: f64, method: Method) -> Option<&RateSummaryRow> {
        self.summary
            .iter()
            .find(|r| r.snr_db == snr_db && r.method == method.as_str())
    }
}

fn rate_method(m: Method) -> Result<RateMethod> {
    match m {
        Method::Gnnd => Ok(RateMethod::Gnnd),
        Method::Cl => Ok(RateMethod::Cl),
        Method::Mi => Ok(RateMethod::Mi),
        Method::Ml => Err(Error::invalid("ml is a decoding method, not a rate")),
    }
}

fn join(v: impl Iterator<Item = f64>) -> String {
    v.map(|x| format!("{x:?}")).collect::<Vec<_>>().join(";")
}

/// Sum rates per draw, SNR and method; all methods and SNR points of a draw
/// share the same symbols and (unit-variance) noise samples.
pub fn run_gmi_sweep(config: &ExperimentConfig) -> Result<RateSweep> {
    config.validate()?;
    if config.kind != ExperimentKind::GmiSweep {
        return Err(Error::invalid("run_gmi_sweep needs kind = gmi-sweep"));
    }
    let start = Instant::now();
    let cons = config.constellations()?;
    let methods: Vec<RateMethod> = config.methods.iter().map(|&m| rate_method(m)).collect::<Result<_>>()?;
    let receiver = match config.receiver {
        ReceiverMode::NoSic => Receiver::NoSic,
        ReceiverMode::Sic => Receiver::Sic,
    };
    let order = config.sic_order();
    let samples = config.samples_or_default();
    let mut rows = Vec::new();
    for draw in 0..config.draws {
        for &snr in &config.snr_db {
            let ch = draw_channel(config, draw, snr)?;
            let (ch, cons_p) = match receiver {
                Receiver::Sic => (ch.permuted(&order)?, order.iter().map(|&u| cons[u].clone()).collect()),
                Receiver::NoSic => (ch, cons.clone()),
            };
            let spec = McSpec::new(samples, config.seed).with_stream(vec![draw as u64]);
            for rep in sum_rate(&ch, &cons_p, receiver, &methods, &spec)? {
                // Back to user index order.
                let mut per_user = vec![RateEstimate { value: 0.0, std_error: 0.0, samples: 0 }; config.users];
                for (pos, r) in rep.per_user.iter().enumerate() {
                    let u = if receiver == Receiver::Sic { order[pos] } else { pos };
                    per_user[u] = *r;
                }
                rows.push(RateRow {
                    draw,
                    snr_db: snr,
                    method: rep.method.as_str(),
                    receiver: receiver.as_str(),
                    sum_rate: rep.sum.value,
                    sum_std_error: rep.sum.std_error,
                    samples: rep.sum.samples,
                    per_user: join(per_user.iter().map(|r| r.value)),
                    per_user_std_error: join(per_user.iter().map(|r| r.std_error)),
                });
            }
        }
    }
    let mut summary = Vec::new();
    for &snr in &config.snr_db {
        for m in &methods {
            let parts: Vec<RateEstimate> = rows
                .iter()
                .filter(|r| r.snr_db == snr && r.method == m.as_str())
                .map(|r| RateEstimate {
                    value: r.sum_rate,
                    std_error: r.sum_std_error,
                    samples: r.samples,
                })
                .collect();
            let avg = RateEstimate::average(&parts);
            summary.push(RateSummaryRow {
                snr_db: snr,
                method: m.as_str(),
                receiver: receiver.as_str(),
                mean_sum_rate: avg.value,
                std_error: avg.std_error,
                draws: parts.len(),
            });
        }
    }
    Ok(RateSweep {
        rows,
        summary,
        runtime: start.elapsed(),
    })
}

/// One scatter point; estimates are divided by their cloud's RMS magnitude.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterRow {
    pub sample: usize,
    pub symbol: usize,
    pub x_re: f64,
    pub x_im: f64,
    pub gnnd_re: f64,
    pub gnnd_im: f64,
    pub cl_re: f64,
    pub cl_im: f64,
}

#[derive(Debug, Clone)]
pub struct Scatter {
    pub rows: Vec<ScatterRow>,
    pub runtime: Duration,
}

/// Transmitted symbol indices of user `k` and the observations.
pub fn scatter_samples(
    ch: &ChannelInstance,
    cons: &[Constellation],
    k: usize,
    n: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<Vec<Complex64>>)> {
    let mut data = substream(seed, &[tag::DATA]);
    let mut noise = substream(seed, &[tag::NOISE]);
    let sd = ch.noise_var().sqrt();
    let mut symbols = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let idx: Vec<usize> = cons.iter().map(|c| c.sample_index(&mut data)).collect();
        let x: Vec<Complex64> = idx.iter().zip(cons).map(|(&i, c)| c.points()[i]).collect();
        let z: Vec<Complex64> = (0..ch.antennas()).map(|_| complex_gaussian(&mut noise, 1.0) * sd).collect();
        ys.push(ch.transmit_with_noise(&x, &z)?);
        symbols.push(idx[k]);
    }
    Ok((symbols, ys))
}

/// GNND estimates `g/f` of user `k` (no cancellation); NaN where `f = 0`.
pub fn gnnd_estimates(ch: &ChannelInstance, cons: &[Constellation], k: usize, ys: &[Vec<Complex64>]) -> Result<Vec<Complex64>> {
    let post = JointPosterior::new(ch, cons, &[], DEFAULT_ENUMERATION_CAP)?;
    let side = vec![None; ch.users()];
    let mut scratch = Scratch::default();
    ys.iter()
        .map(|y| {
            let m = post.evaluate_with(y, &side, &mut scratch)?.moments(k, &cons[k])?;
            let nan = Complex64::new(f64::NAN, f64::NAN);
            Ok(optimal_front(&m, &cons[k])?.estimate().unwrap_or(nan))
        })
        .collect()
}

/// LMMSE estimates of user `k` from channel linearization.
pub fn cl_estimates(ch: &ChannelInstance, k: usize, ys: &[Vec<Complex64>]) -> Result<Vec<Complex64>> {
    let front = cl_front(ch, k, 0)?;
    ys.iter().map(|y| front.lmmse_estimate(y, &[])).collect()
}

/// Divides by the root-mean-square magnitude.
pub fn normalize_rms(v: &[Complex64]) -> Vec<Complex64> {
    let rms = (v.iter().map(|z| z.norm_sqr()).sum::<f64>() / v.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        v.iter().map(|z| z / rms).collect()
    } else {
        v.to_vec()
    }
}

/// Minimum distance between cluster centroids over the RMS intra-cluster
/// spread; clusters group estimates by their true symbol.
pub fn cluster_separation(est: &[Complex64], symbols: &[usize], m: usize) -> f64 {
    let mut sum = vec![Complex64::new(0.0, 0.0); m];
    let mut count = vec![0usize; m];
    for (e, &s) in est.iter().zip(symbols) {
        sum[s] += e;
        count[s] += 1;
    }
    let cent: Vec<Option<Complex64>> = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    let spread = (est
        .iter()
        .zip(symbols)
        .map(|(e, &s)| (e - cent[s].expect("nonempty cluster")).norm_sqr())
        .sum::<f64>()
        / est.len().max(1) as f64)
        .sqrt();
    let mut dmin = f64::INFINITY;
    for i in 0..m {
        for j in i + 1..m {
            if let (Some(a), Some(b)) = (cent[i], cent[j]) {
                dmin = dmin.min((a - b).norm());
            }
        }
    }
    dmin / spread
}

/// GNND and LMMSE estimate clouds of the configured user, on channel draw 0
/// at the first SNR point.
pub fn run_scatter(config: &ExperimentConfig) -> Result<Scatter> {
    config.validate()?;
    let start = Instant::now();
    let cons = config.constellations()?;
    let ch = draw_channel(config, 0, config.snr_db[0])?;
    let n = config.samples_or_default();
    let k = config.user;
    let (symbols, ys) = scatter_samples(&ch, &cons, k, n, config.seed)?;
    let g = normalize_rms(&gnnd_estimates(&ch, &cons, k, &ys)?);
    let c = normalize_rms(&cl_estimates(&ch, k, &ys)?);
    let pts = cons[k].points();
    let rows = (0..n)
        .map(|i| ScatterRow {
            sample: i,
            symbol: symbols[i],
            x_re: pts[symbols[i]].re,
            x_im: pts[symbols[i]].im,
            gnnd_re: g[i].re,
            gnnd_im: g[i].im,
            cl_re: c[i].re,
            cl_im: c[i].im,
        })
        .collect();
    Ok(Scatter {
        rows,
        runtime: start.elapsed(),
    })
}
