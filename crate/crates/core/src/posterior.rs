//! Exact posterior marginals by enumerating the joint alphabet of the users
//! that are not yet known at the receiver.
//!
//! For a fixed channel and a fixed set of known (cancelled) users,
//! [`JointPosterior`] precomputes `log p(x) - ||H x||^2 / sigma^2` for every
//! joint hypothesis of the remaining users. Evaluating one observation then
//! only needs the per-user correlations `Re(<h_u, y> a)`, one pass to build
//! the log-likelihoods, one pass of `exp`, and a reduction tree for the marginals.

use num_complex::Complex64;

use crate::channel::ChannelInstance;
use crate::constellation::Constellation;
use crate::kernels::{enumerate, Buffers, Enumerated};
use crate::{Error, Result};

/// Default cap on the number of joint hypotheses (4^10).
pub const DEFAULT_ENUMERATION_CAP: usize = 1 << 20;

/// Conditional moments of one user's symbol given the observation (and side
/// information).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorMoments {
    pub mean: Complex64,
    pub second: f64,
    /// Log of the evidence `p(y | side information)`; NaN for noiseless channels.
    pub log_norm: f64,
}

impl PosteriorMoments {
    pub fn from_pmf(pmf: &[f64], constellation: &Constellation, log_norm: f64) -> Self {
        let mut mean = Complex64::new(0.0, 0.0);
        let mut second = 0.0;
        for (p, a) in pmf.iter().zip(constellation.points()) {
            mean += a * p;
            second += p * a.norm_sqr();
        }
        Self {
            mean,
            second,
            log_norm,
        }
    }

    pub fn variance(&self) -> f64 {
        (self.second - self.mean.norm_sqr()).max(0.0)
    }
}

/// Builds a side-information vector from a SIC prefix: users `0..prefix.len()`
/// are known, the rest are not.
pub fn side_from_prefix(users: usize, prefix: &[Complex64]) -> Vec<Option<Complex64>> {
    (0..users).map(|u| prefix.get(u).copied()).collect()
}

/// Exact posterior machinery for one channel and one known-user pattern.
#[derive(Debug, Clone)]
pub struct JointPosterior {
    antennas: usize,
    noise_var: f64,
    gains: Vec<Vec<Complex64>>,
    active: Vec<usize>,
    known: Vec<usize>,
    /// Position of each user in `active`, if enumerated.
    slot: Vec<Option<usize>>,
    points: Vec<Vec<Complex64>>,
    log_priors: Vec<Vec<f64>>,
    strides: Vec<usize>,
    total: usize,
    /// `log p(x) - ||H x||^2 / sigma^2` (or `-||H x||^2` when noiseless).
    base: Vec<f64>,
}

/// Per-observation output: posterior pmfs of every enumerated user.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub users: Vec<usize>,
    pub pmfs: Vec<Vec<f64>>,
    /// `log sum_{x: x_u = a_i} p(x) p(y | x)` including the receiver-side
    /// constant, i.e. the log of the joint density of `(x_u = a_i, y)`.
    pub log_joint: Vec<Vec<f64>>,
    pub log_evidence: f64,
}

/// Reusable buffers for [`JointPosterior::evaluate_with`].
#[derive(Debug, Default, Clone)]
pub struct Scratch {
    buf: Buffers,
}

impl JointPosterior {
    /// `known[u]` marks users whose symbols will be supplied at evaluation time.
    pub fn new(
        channel: &ChannelInstance,
        constellations: &[Constellation],
        known: &[bool],
        cap: usize,
    ) -> Result<Self> {
        let k = channel.users();
        if constellations.len() != k {
            return Err(Error::ShapeMismatch {
                expected: k,
                got: constellations.len(),
            });
        }
        let known: Vec<bool> = if known.is_empty() { vec![false; k] } else { known.to_vec() };
        if known.len() != k {
            return Err(Error::ShapeMismatch {
                expected: k,
                got: known.len(),
            });
        }
        let active: Vec<usize> = (0..k).filter(|&u| !known[u]).collect();
        let known_users: Vec<usize> = (0..k).filter(|&u| known[u]).collect();
        if active.is_empty() {
            return Err(Error::invalid("every user is known; nothing to enumerate"));
        }
        let size: u128 = active.iter().map(|&u| constellations[u].len() as u128).product();
        if size > cap as u128 {
            return Err(Error::EnumerationCap { size, cap });
        }
        let total = size as usize;
        let mut slot = vec![None; k];
        for (s, &u) in active.iter().enumerate() {
            slot[u] = Some(s);
        }
        let points: Vec<Vec<Complex64>> = active.iter().map(|&u| constellations[u].points().to_vec()).collect();
        let log_priors: Vec<Vec<f64>> = active
            .iter()
            .map(|&u| constellations[u].probabilities().iter().map(|p| p.ln()).collect())
            .collect();
        // First active user is the most significant digit.
        let mut strides = vec![1usize; active.len()];
        for s in (0..active.len().saturating_sub(1)).rev() {
            strides[s] = strides[s + 1] * points[s + 1].len();
        }
        let gains: Vec<Vec<Complex64>> = (0..k).map(|u| channel.gain(u).to_vec()).collect();
        let l = channel.antennas();
        let noise_var = channel.noise_var();

        // Accumulate H x and log p(x) digit by digit.
        let mut hx: Vec<Complex64> = vec![Complex64::new(0.0, 0.0); l];
        let mut lp = vec![0.0f64];
        for (s, &u) in active.iter().enumerate() {
            let m = points[s].len();
            let mut next = Vec::with_capacity(hx.len() * m);
            let mut next_lp = Vec::with_capacity(lp.len() * m);
            for (h, &p0) in lp.iter().enumerate() {
                let prev = &hx[h * l..(h + 1) * l];
                for (i, a) in points[s].iter().enumerate() {
                    next.extend(prev.iter().zip(&gains[u]).map(|(v, g)| v + g * a));
                    next_lp.push(p0 + log_priors[s][i]);
                }
            }
            hx = next;
            lp = next_lp;
        }
        let scale = if noise_var > 0.0 { 1.0 / noise_var } else { 1.0 };
        let base: Vec<f64> = (0..total)
            .map(|h| {
                let e: f64 = hx[h * l..(h + 1) * l].iter().map(|v| v.norm_sqr()).sum();
                if noise_var > 0.0 {
                    lp[h] - e * scale
                } else {
                    -e
                }
            })
            .collect();
        Ok(Self {
            antennas: l,
            noise_var,
            gains,
            active,
            known: known_users,
            slot,
            points,
            log_priors,
            strides,
            total,
            base,
        })
    }

    pub fn active_users(&self) -> &[usize] {
        &self.active
    }

    pub fn hypotheses(&self) -> usize {
        self.total
    }

    /// Removes the known users' contributions from `y`.
    pub fn residual(&self, y: &[Complex64], side: &[Option<Complex64>]) -> Result<Vec<Complex64>> {
        if y.len() != self.antennas {
            return Err(Error::ShapeMismatch {
                expected: self.antennas,
                got: y.len(),
            });
        }
        let mut r = y.to_vec();
        for &u in &self.known {
            let x = side
                .get(u)
                .copied()
                .flatten()
                .ok_or_else(|| Error::invalid(format!("symbol of known user {u} missing")))?;
            for (rl, g) in r.iter_mut().zip(&self.gains[u]) {
                *rl -= g * x;
            }
        }
        Ok(r)
    }

    pub fn evaluate(&self, y: &[Complex64], side: &[Option<Complex64>]) -> Result<Marginals> {
        self.evaluate_with(y, side, &mut Scratch::default())
    }

    pub fn evaluate_with(
        &self,
        y: &[Complex64],
        side: &[Option<Complex64>],
        scratch: &mut Scratch,
    ) -> Result<Marginals> {
        let r = self.residual(y, side)?;
        let noiseless = self.noise_var <= 0.0;
        let two_over = if noiseless { 2.0 } else { 2.0 / self.noise_var };

        // Correlations 2 Re(<h_u, r> a_i) / sigma^2 per active user and point.
        let corr: Vec<Vec<f64>> = self
            .active
            .iter()
            .enumerate()
            .map(|(s, &u)| {
                let b: Complex64 = self.gains[u].iter().zip(&r).map(|(g, v)| g.conj() * v).sum();
                self.points[s].iter().map(|a| two_over * (b.conj() * a).re).collect()
            })
            .collect();

        let total = self.total;
        let Enumerated { max, sums: all_sums } = enumerate(&corr, &self.base, noiseless, &mut scratch.buf);
        let ll = &scratch.buf.ll;
        let z: f64 = all_sums[0].iter().sum();

        let y_energy: f64 = r.iter().map(|v| v.norm_sqr()).sum();
        let constant = if noiseless {
            f64::NAN
        } else {
            -y_energy / self.noise_var - self.antennas as f64 * (std::f64::consts::PI * self.noise_var).ln()
        };

        let mut pmfs = Vec::with_capacity(all_sums.len());
        let mut log_joint = Vec::with_capacity(all_sums.len());
        for (s, sums) in all_sums.iter().enumerate() {
            let m = self.points[s].len();
            let stride = self.strides[s];
            let block = stride * m;
            let lj: Vec<f64> = sums
                .iter()
                .enumerate()
                .map(|(i, &sm)| {
                    if noiseless {
                        return if sm > 0.0 { 0.0 } else { f64::NEG_INFINITY };
                    }
                    if sm > 1e-250 {
                        sm.ln() + max + constant
                    } else {
                        // Underflowed slice: exact log-sum-exp over it.
                        let mut mx = f64::NEG_INFINITY;
                        for outer in (0..total).step_by(block) {
                            let start = outer + i * stride;
                            for &v in &ll[start..start + stride] {
                                mx = mx.max(v);
                            }
                        }
                        let mut acc = 0.0;
                        for outer in (0..total).step_by(block) {
                            let start = outer + i * stride;
                            for &v in &ll[start..start + stride] {
                                acc += (v - mx).exp();
                            }
                        }
                        acc.ln() + mx + constant
                    }
                })
                .collect();
            pmfs.push(sums.iter().map(|v| v / z).collect());
            log_joint.push(lj);
        }
        Ok(Marginals {
            users: self.active.clone(),
            pmfs,
            log_joint,
            log_evidence: if noiseless { f64::NAN } else { z.ln() + max + constant },
        })
    }

    /// Log prior of user `u`'s points (enumerated users only).
    pub fn log_prior(&self, u: usize) -> Option<&[f64]> {
        self.slot[u].map(|s| self.log_priors[s].as_slice())
    }
}

impl Marginals {
    fn position(&self, user: usize) -> Result<usize> {
        self.users
            .iter()
            .position(|&u| u == user)
            .ok_or_else(|| Error::invalid(format!("user {user} is not enumerated")))
    }

    pub fn pmf(&self, user: usize) -> Result<&[f64]> {
        Ok(&self.pmfs[self.position(user)?])
    }

    pub fn log_joint(&self, user: usize) -> Result<&[f64]> {
        Ok(&self.log_joint[self.position(user)?])
    }

    pub fn moments(&self, user: usize, constellation: &Constellation) -> Result<PosteriorMoments> {
        Ok(PosteriorMoments::from_pmf(self.pmf(user)?, constellation, self.log_evidence))
    }
}

fn prefix_setup(
    channel: &ChannelInstance,
    k: usize,
    prefix: &[Complex64],
) -> Result<(Vec<bool>, Vec<Option<Complex64>>)> {
    if k >= channel.users() {
        return Err(Error::invalid(format!("user {k} out of range")));
    }
    if prefix.len() > k {
        return Err(Error::invalid(format!(
            "prefix of {} symbols cannot precede user {k}",
            prefix.len()
        )));
    }
    let side = side_from_prefix(channel.users(), prefix);
    let known: Vec<bool> = side.iter().map(Option::is_some).collect();
    Ok((known, side))
}

/// Posterior pmf of user `k` given `y` and the decoded symbols of users
/// `0..prefix.len()` (empty prefix: no cancellation).
pub fn posterior_pmf(
    y: &[Complex64],
    channel: &ChannelInstance,
    constellations: &[Constellation],
    k: usize,
    prefix: &[Complex64],
) -> Result<Vec<f64>> {
    let (known, side) = prefix_setup(channel, k, prefix)?;
    let post = JointPosterior::new(channel, constellations, &known, DEFAULT_ENUMERATION_CAP)?;
    Ok(post.evaluate(y, &side)?.pmf(k)?.to_vec())
}

/// `E[x_k | y, prefix]` and `E[|x_k|^2 | y, prefix]` by exact enumeration.
pub fn posterior_moments(
    y: &[Complex64],
    channel: &ChannelInstance,
    constellations: &[Constellation],
    k: usize,
    prefix: &[Complex64],
) -> Result<PosteriorMoments> {
    let (known, side) = prefix_setup(channel, k, prefix)?;
    let post = JointPosterior::new(channel, constellations, &known, DEFAULT_ENUMERATION_CAP)?;
    post.evaluate(y, &side)?.moments(k, &constellations[k])
}
