//! Multiuser uplink `y = sum_k h_k x_k + z` with quasi-static CN(0,1) gains, and
//! single-pilot LMMSE channel estimation.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

use crate::rng::complex_gaussian;
use crate::{Error, Result};

/// One channel realization: an `L x K` gain matrix (column `k` is user `k`),
/// the complex noise variance and per-user average powers.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelInstance {
    gains: DMatrix<Complex64>,
    noise_var: f64,
    powers: Vec<f64>,
}

impl ChannelInstance {
    pub fn new(gains: DMatrix<Complex64>, noise_var: f64, powers: Vec<f64>) -> Result<Self> {
        if gains.nrows() == 0 || gains.ncols() == 0 {
            return Err(Error::invalid("gain matrix must be at least 1x1"));
        }
        if powers.len() != gains.ncols() {
            return Err(Error::ShapeMismatch {
                expected: gains.ncols(),
                got: powers.len(),
            });
        }
        if powers.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::invalid("user powers must be positive"));
        }
        if !(noise_var >= 0.0 && noise_var.is_finite()) {
            return Err(Error::invalid("noise variance must be finite and nonnegative"));
        }
        Ok(Self {
            gains,
            noise_var,
            powers,
        })
    }

    pub fn users(&self) -> usize {
        self.gains.ncols()
    }

    pub fn antennas(&self) -> usize {
        self.gains.nrows()
    }

    pub fn gains(&self) -> &DMatrix<Complex64> {
        &self.gains
    }

    /// Gain vector `h_k` of user `k`.
    pub fn gain(&self, k: usize) -> &[Complex64] {
        let l = self.antennas();
        &self.gains.as_slice()[k * l..(k + 1) * l]
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn powers(&self) -> &[f64] {
        &self.powers
    }

    /// Same realization seen through different (e.g. estimated) gains.
    pub fn with_gains(&self, gains: DMatrix<Complex64>) -> Result<Self> {
        if gains.shape() != self.gains.shape() {
            return Err(Error::invalid("replacement gains must keep the shape"));
        }
        Self::new(gains, self.noise_var, self.powers.clone())
    }

    pub fn with_noise_var(&self, noise_var: f64) -> Result<Self> {
        Self::new(self.gains.clone(), noise_var, self.powers.clone())
    }

    /// Users reordered so that new user `i` is old user `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let k = self.users();
        let mut seen = vec![false; k];
        if order.len() != k || order.iter().any(|&u| u >= k || std::mem::replace(&mut seen[u], true)) {
            return Err(Error::invalid(format!("order must be a permutation of 0..{k}")));
        }
        let gains = DMatrix::from_fn(self.antennas(), k, |r, c| self.gains[(r, order[c])]);
        Self::new(gains, self.noise_var, order.iter().map(|&u| self.powers[u]).collect())
    }

    /// Noiseless superposition `H x`.
    pub fn superpose(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        if x.len() != self.users() {
            return Err(Error::ShapeMismatch {
                expected: self.users(),
                got: x.len(),
            });
        }
        let l = self.antennas();
        let mut y = vec![Complex64::new(0.0, 0.0); l];
        for (k, xk) in x.iter().enumerate() {
            for (yl, h) in y.iter_mut().zip(self.gain(k)) {
                *yl += h * xk;
            }
        }
        Ok(y)
    }

    /// `y = H x + z` with a caller-supplied noise vector.
    pub fn transmit_with_noise(&self, x: &[Complex64], noise: &[Complex64]) -> Result<Vec<Complex64>> {
        if noise.len() != self.antennas() {
            return Err(Error::ShapeMismatch {
                expected: self.antennas(),
                got: noise.len(),
            });
        }
        let mut y = self.superpose(x)?;
        for (yl, z) in y.iter_mut().zip(noise) {
            *yl += z;
        }
        Ok(y)
    }

    /// `y = H x + z`, `z ~ CN(0, noise_var I)`.
    pub fn transmit<R: Rng + ?Sized>(&self, x: &[Complex64], rng: &mut R) -> Result<Vec<Complex64>> {
        let noise: Vec<Complex64> = (0..self.antennas())
            .map(|_| complex_gaussian(rng, self.noise_var))
            .collect();
        self.transmit_with_noise(x, &noise)
    }

    /// Dumps the gains as CSV rows `row,col,re,im`.
    pub fn write_gains_csv<W: Write>(&self, w: W) -> Result<()> {
        write_gains_csv(&self.gains, w)
    }
}

/// Equal power split `P_k = P / K`.
pub fn equal_powers(users: usize, total_power: f64) -> Vec<f64> {
    vec![total_power / users as f64; users]
}

/// Noise variance giving system SNR `P / sigma^2` of `snr_db`.
pub fn noise_var_for_snr(snr_db: f64, total_power: f64) -> f64 {
    total_power / crate::db_to_linear(snr_db)
}

/// i.i.d. CN(0,1) gain matrix with `antennas` rows and `users` columns.
pub fn sample_gains<R: Rng + ?Sized>(users: usize, antennas: usize, rng: &mut R) -> Result<DMatrix<Complex64>> {
    if users == 0 || antennas == 0 {
        return Err(Error::invalid("need at least one user and one antenna"));
    }
    // Column-major fill keeps the draw order stable: user by user.
    let data: Vec<Complex64> = (0..users * antennas)
        .map(|_| complex_gaussian(rng, 1.0))
        .collect();
    Ok(DMatrix::from_vec(antennas, users, data))
}

pub fn sample_channel<R: Rng + ?Sized>(
    users: usize,
    antennas: usize,
    noise_var: f64,
    powers: Vec<f64>,
    rng: &mut R,
) -> Result<ChannelInstance> {
    ChannelInstance::new(sample_gains(users, antennas, rng)?, noise_var, powers)
}

/// Pilot energy `|x_p|^2`, or perfect channel knowledge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PilotPower {
    Perfect,
    Energy(f64),
}

impl PilotPower {
    /// Parses `perfect` or a multiple of the system power such as `16P` / `4`.
    pub fn parse(spec: &str, total_power: f64) -> Result<Self> {
        let s = spec.trim();
        if s.eq_ignore_ascii_case("perfect") || s.eq_ignore_ascii_case("inf") {
            return Ok(PilotPower::Perfect);
        }
        let num = s.strip_suffix(['P', 'p']).unwrap_or(s);
        let mult: f64 = if num.is_empty() {
            1.0
        } else {
            num.parse()
                .map_err(|_| Error::Parse(format!("bad pilot power {spec:?}")))?
        };
        if !(mult > 0.0) {
            return Err(Error::invalid("pilot power must be positive"));
        }
        Ok(PilotPower::Energy(mult * total_power))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEstimate {
    pub gains_hat: DMatrix<Complex64>,
    pub pilot_power: PilotPower,
}

/// LMMSE shrinkage `E_p / (E_p + sigma^2)` applied to the pilot observation.
pub fn lmmse_shrinkage(pilot_energy: f64, noise_var: f64) -> f64 {
    pilot_energy / (pilot_energy + noise_var)
}

/// One orthogonal pilot `x_p = sqrt(E_p)` per user; each entry is estimated as
/// `E_p/(E_p + sigma^2) * r / x_p` with `r = h x_p + n` under the CN(0,1) prior.
pub fn estimate_channel<R: Rng + ?Sized>(
    gains: &DMatrix<Complex64>,
    pilot_power: PilotPower,
    noise_var: f64,
    rng: &mut R,
) -> Result<ChannelEstimate> {
    let energy = match pilot_power {
        PilotPower::Perfect => {
            return Ok(ChannelEstimate {
                gains_hat: gains.clone(),
                pilot_power,
            })
        }
        PilotPower::Energy(e) if e > 0.0 => e,
        PilotPower::Energy(e) => {
            return Err(Error::invalid(format!("pilot energy must be positive, got {e}")))
        }
    };
    let xp = energy.sqrt();
    let shrink = lmmse_shrinkage(energy, noise_var);
    let gains_hat = gains.map(|h| {
        let r = h * xp + complex_gaussian(rng, noise_var);
        r / xp * shrink
    });
    Ok(ChannelEstimate {
        gains_hat,
        pilot_power,
    })
}

pub fn write_gains_csv<W: Write>(gains: &DMatrix<Complex64>, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["row", "col", "re", "im"])?;
    for c in 0..gains.ncols() {
        for r in 0..gains.nrows() {
            let g = gains[(r, c)];
            wr.write_record([r.to_string(), c.to_string(), g.re.to_string(), g.im.to_string()])?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn read_gains_csv<R: Read>(rd: R) -> Result<DMatrix<Complex64>> {
    let mut reader = csv::Reader::from_reader(rd);
    let mut entries = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(Error::Parse(format!("expected 4 columns, got {}", rec.len())));
        }
        let idx = |i: usize| {
            rec[i]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("bad index {:?}: {e}", &rec[i])))
        };
        let val = |i: usize| {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad value {:?}: {e}", &rec[i])))
        };
        entries.push((idx(0)?, idx(1)?, Complex64::new(val(2)?, val(3)?)));
    }
    let rows = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
    let cols = entries.iter().map(|e| e.1 + 1).max().unwrap_or(0);
    if rows == 0 || entries.len() != rows * cols {
        return Err(Error::Parse(format!(
            "gain CSV must list every entry of a {rows}x{cols} matrix exactly once"
        )));
    }
    let mut seen = vec![false; rows * cols];
    let mut m = DMatrix::zeros(rows, cols);
    for (r, c, v) in entries {
        if std::mem::replace(&mut seen[c * rows + r], true) {
            return Err(Error::Parse(format!("duplicate entry ({r},{c})")));
        }
        m[(r, c)] = v;
    }
    Ok(m)
}
