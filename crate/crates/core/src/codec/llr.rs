//! Bit LLRs from per-symbol metric tables, and the residual variance used to
//! scale GNND metrics.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::channel::ChannelInstance;
use crate::constellation::Constellation;
use crate::gnnd::{optimal_front, FrontKind, GnndFront, MetricTable};
use crate::posterior::{side_from_prefix, JointPosterior, DEFAULT_ENUMERATION_CAP};
use crate::rng::{substream, tag, SimRng};
use crate::stats::RunningStats;
use crate::{Error, Result};

pub const DEFAULT_LLR_CLAMP: f64 = 30.0;

const CHUNK: usize = 1024;

/// Temperature `s` in `exp(-d(x)/s)` when turning metrics into bit LLRs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LlrScale {
    /// `s = sigma_u^2 = E|g(y) - f(y) x|^2`, the residual of the equivalent channel.
    ResidualVar(f64),
    /// `s = 1`: the metric's own tilted distribution. For GNND fronts this is
    /// the moment-matched posterior; for CL it is the unit postulated noise.
    Unit,
}

impl LlrScale {
    pub fn value(&self) -> f64 {
        match self {
            LlrScale::ResidualVar(v) => *v,
            LlrScale::Unit => 1.0,
        }
    }
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + v.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// `LLR_j = log sum_{x in X_0^j} e^{-d(x)/s} - log sum_{x in X_1^j} e^{-d(x)/s}`
/// for every label bit, clamped to `±clamp`.
///
/// GNND tables need an explicit scale; CL and ML tables default to `s = 1`.
pub fn llr_init(table: &MetricTable, c: &Constellation, scale: Option<LlrScale>, clamp: f64) -> Result<Vec<f64>> {
    let scale = match (scale, table.tag) {
        (Some(s), _) => s.value(),
        (None, FrontKind::Gnnd) => return Err(Error::invalid("GNND metrics need an LLR scale")),
        (None, _) => 1.0,
    };
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("LLR scale must be positive, got {scale}")));
    }
    if table.values.len() != c.len() {
        return Err(Error::ShapeMismatch {
            expected: c.len(),
            got: table.values.len(),
        });
    }
    let labeling = c
        .labeling()
        .ok_or_else(|| Error::invalid("constellation has no bit labeling"))?;
    let e: Vec<f64> = table.values.iter().map(|d| -d / scale).collect();
    Ok((1..=labeling.bits_per_symbol())
        .map(|j| {
            let zero = (0..c.len()).filter(|&i| labeling.bit(i, j) == 0).map(|i| e[i]);
            let one = (0..c.len()).filter(|&i| labeling.bit(i, j) == 1).map(|i| e[i]);
            let l = log_sum_exp(zero) - log_sum_exp(one);
            if l.is_nan() {
                0.0
            } else {
                l.clamp(-clamp, clamp)
            }
        })
        .collect())
}

/// Exact AWGN metric `||y - h a||^2 / sigma^2` of a single user.
pub fn awgn_table(y: &[Complex64], h: &[Complex64], noise_var: f64, c: &Constellation) -> Result<MetricTable> {
    if y.len() != h.len() {
        return Err(Error::ShapeMismatch {
            expected: h.len(),
            got: y.len(),
        });
    }
    Ok(MetricTable {
        values: c
            .points()
            .iter()
            .map(|a| y.iter().zip(h).map(|(y, h)| (y - h * a).norm_sqr()).sum::<f64>() / noise_var)
            .collect(),
        tag: FrontKind::Ml,
    })
}

/// One channel use: the observation and every user's transmitted symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelUse {
    pub y: Vec<Complex64>,
    pub x: Vec<Complex64>,
}

/// Draws i.i.d. symbols for every user and passes them through `ch`.
pub fn sample_use(ch: &ChannelInstance, cons: &[Constellation], rng: &mut SimRng) -> Result<ChannelUse> {
    let x: Vec<Complex64> = cons.iter().map(|c| c.points()[c.sample_index(rng)]).collect();
    let y = ch.transmit(&x, rng)?;
    Ok(ChannelUse { y, x })
}

/// Monte-Carlo mean of `|g(y) - f(y) x_k|^2` over `samples` channel uses.
/// Chunks use independent substreams, so the result does not depend on the
/// number of worker threads.
pub fn estimate_residual_var<S, F>(
    sampler: S,
    front: F,
    k: usize,
    samples: usize,
    seed: u64,
    stream: &[u64],
) -> Result<f64>
where
    S: Fn(&mut SimRng) -> Result<ChannelUse> + Sync,
    F: Fn(&ChannelUse) -> Result<GnndFront> + Sync,
{
    if samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let chunks = samples.div_ceil(CHUNK);
    let parts: Vec<RunningStats> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let mut path = stream.to_vec();
            path.extend([tag::RESIDUAL, ci as u64]);
            let mut rng = substream(seed, &path);
            let mut st = RunningStats::new();
            for _ in ci * CHUNK..((ci + 1) * CHUNK).min(samples) {
                let u = sampler(&mut rng)?;
                let fr = front(&u)?;
                st.push((fr.g() - fr.f() * u.x[k]).norm_sqr());
            }
            Ok(st)
        })
        .collect::<Result<_>>()?;
    let mut total = RunningStats::new();
    for p in &parts {
        total.merge(p);
    }
    Ok(total.mean())
}

/// [`estimate_residual_var`] for the exact-posterior GNND front of user `k`,
/// with users `0..prefix_len` known (SIC) or none (`prefix_len = 0`).
pub fn residual_var_exact(
    ch: &ChannelInstance,
    cons: &[Constellation],
    k: usize,
    prefix_len: usize,
    samples: usize,
    seed: u64,
    stream: &[u64],
) -> Result<f64> {
    if k >= ch.users() || prefix_len > k {
        return Err(Error::invalid(format!("user {k} with prefix {prefix_len} out of range")));
    }
    let known: Vec<bool> = (0..ch.users()).map(|u| u < prefix_len).collect();
    let post = JointPosterior::new(ch, cons, &known, DEFAULT_ENUMERATION_CAP)?;
    estimate_residual_var(
        |rng| sample_use(ch, cons, rng),
        |u| {
            let side = side_from_prefix(ch.users(), &u.x[..prefix_len]);
            let m = post.evaluate(&u.y, &side)?.moments(k, &cons[k])?;
            optimal_front(&m, &cons[k])
        },
        k,
        samples,
        seed,
        stream,
    )
}
