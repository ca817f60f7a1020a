//! Finite input alphabets with probabilities and binary labelings.

use std::fmt::Write as _;

use num_complex::Complex64;

use crate::{Error, Result};

const PROB_TOL: f64 = 1e-12;
const DISTINCT_TOL: f64 = 1e-12;

/// Bijection between `m`-bit labels and constellation indices.
///
/// Labels are stored as integers whose most significant of the `m` bits is bit
/// position 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BitLabeling {
    bits_per_symbol: usize,
    label_of: Vec<u32>,
    index_of: Vec<usize>,
}

impl BitLabeling {
    pub fn new(bits_per_symbol: usize, label_of: Vec<u32>) -> Result<Self> {
        if bits_per_symbol == 0 || bits_per_symbol > 16 {
            return Err(Error::invalid("bits per symbol must be in 1..=16"));
        }
        let size = 1usize << bits_per_symbol;
        if label_of.len() != size {
            return Err(Error::invalid(format!(
                "labeling with {bits_per_symbol} bits needs {size} points, got {}",
                label_of.len()
            )));
        }
        let mut index_of = vec![usize::MAX; size];
        for (i, &l) in label_of.iter().enumerate() {
            let l = l as usize;
            if l >= size || index_of[l] != usize::MAX {
                return Err(Error::invalid("labeling is not a bijection"));
            }
            index_of[l] = i;
        }
        Ok(Self {
            bits_per_symbol,
            label_of,
            index_of,
        })
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.bits_per_symbol
    }

    pub fn label(&self, index: usize) -> u32 {
        self.label_of[index]
    }

    pub fn index(&self, label: u32) -> usize {
        self.index_of[label as usize]
    }

    /// Bit `j` (1-based, 1 = most significant) of the label of point `index`.
    pub fn bit(&self, index: usize, j: usize) -> u8 {
        ((self.label_of[index] >> (self.bits_per_symbol - j)) & 1) as u8
    }
}

/// A finite complex alphabet with input probabilities and average power.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    points: Vec<Complex64>,
    probabilities: Vec<f64>,
    power: f64,
    labeling: Option<BitLabeling>,
}

impl Constellation {
    /// Generic constructor from explicit point and probability lists.
    pub fn new(
        points: Vec<Complex64>,
        probabilities: Vec<f64>,
        labeling: Option<BitLabeling>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("constellation needs at least one point"));
        }
        if points.len() != probabilities.len() {
            return Err(Error::ShapeMismatch {
                expected: points.len(),
                got: probabilities.len(),
            });
        }
        if probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("probabilities must be finite and nonnegative"));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        for i in 0..points.len() {
            if !(points[i].re.is_finite() && points[i].im.is_finite()) {
                return Err(Error::invalid("constellation points must be finite"));
            }
            for j in 0..i {
                if (points[i] - points[j]).norm() <= DISTINCT_TOL {
                    return Err(Error::invalid(format!("points {j} and {i} coincide")));
                }
            }
        }
        if let Some(l) = &labeling {
            if l.label_of.len() != points.len() {
                return Err(Error::ShapeMismatch {
                    expected: points.len(),
                    got: l.label_of.len(),
                });
            }
        }
        let power = points
            .iter()
            .zip(&probabilities)
            .map(|(a, p)| p * a.norm_sqr())
            .sum();
        Ok(Self {
            points,
            probabilities,
            power,
            labeling,
        })
    }

    /// Equiprobable QPSK `sqrt(P/2)(±1±j)` with the Gray map
    /// `00 → +,+`, `01 → +,−`, `10 → −,+`, `11 → −,−` (first bit: sign of the
    /// real part, second bit: sign of the imaginary part).
    pub fn qpsk(power: f64) -> Result<Self> {
        if !(power > 0.0 && power.is_finite()) {
            return Err(Error::invalid(format!("QPSK power must be positive, got {power}")));
        }
        let a = (power / 2.0).sqrt();
        let points = vec![
            Complex64::new(a, a),
            Complex64::new(a, -a),
            Complex64::new(-a, a),
            Complex64::new(-a, -a),
        ];
        let labeling = BitLabeling::new(2, vec![0, 1, 2, 3])?;
        Self::new(points, vec![0.25; 4], Some(labeling))
    }

    /// Equiprobable square 16-QAM with a per-axis Gray map: the first two
    /// label bits select the real level, the last two the imaginary level,
    /// `00, 01, 11, 10` for levels `-3, -1, 1, 3` (times `sqrt(P/10)`).
    pub fn qam16(power: f64) -> Result<Self> {
        if !(power > 0.0 && power.is_finite()) {
            return Err(Error::invalid(format!("16-QAM power must be positive, got {power}")));
        }
        let s = (power / 10.0).sqrt();
        let levels = [(-3.0, 0b00), (-1.0, 0b01), (1.0, 0b11), (3.0, 0b10)];
        let mut points = Vec::with_capacity(16);
        let mut labels = Vec::with_capacity(16);
        for &(re, lr) in &levels {
            for &(im, li) in &levels {
                points.push(Complex64::new(re * s, im * s));
                labels.push((lr << 2) | li);
            }
        }
        Self::new(points, vec![1.0 / 16.0; 16], Some(BitLabeling::new(4, labels)?))
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn labeling(&self) -> Option<&BitLabeling> {
        self.labeling.as_ref()
    }

    fn require_labeling(&self) -> Result<&BitLabeling> {
        self.labeling
            .as_ref()
            .ok_or_else(|| Error::invalid("constellation has no bit labeling"))
    }

    pub fn bits_per_symbol(&self) -> Option<usize> {
        self.labeling.as_ref().map(|l| l.bits_per_symbol())
    }

    pub fn max_magnitude(&self) -> f64 {
        self.points.iter().map(|a| a.norm()).fold(0.0, f64::max)
    }

    pub fn mean(&self) -> Complex64 {
        self.points
            .iter()
            .zip(&self.probabilities)
            .map(|(a, p)| a * p)
            .sum()
    }

    /// True when every point has the same energy.
    pub fn is_constant_modulus(&self) -> bool {
        let e0 = self.points[0].norm_sqr();
        self.points
            .iter()
            .all(|a| (a.norm_sqr() - e0).abs() <= 1e-12 * e0.max(1e-300))
    }

    /// A copy rescaled to average power `power`.
    pub fn scaled_to(&self, power: f64) -> Result<Self> {
        if !(power > 0.0) {
            return Err(Error::invalid("target power must be positive"));
        }
        let s = (power / self.power).sqrt();
        Self::new(
            self.points.iter().map(|a| a * s).collect(),
            self.probabilities.clone(),
            self.labeling.clone(),
        )
    }

    /// Indices of the points whose label has value `b` in position `j` (1-based).
    pub fn label_set(&self, j: usize, b: u8) -> Result<Vec<usize>> {
        let l = self.require_labeling()?;
        if j == 0 || j > l.bits_per_symbol() {
            return Err(Error::invalid(format!(
                "bit position {j} outside 1..={}",
                l.bits_per_symbol()
            )));
        }
        if b > 1 {
            return Err(Error::invalid("bit value must be 0 or 1"));
        }
        Ok((0..self.len()).filter(|&i| l.bit(i, j) == b).collect())
    }

    /// Symbol index for each `m`-bit block of `bits`.
    pub fn modulate_indices(&self, bits: &[u8]) -> Result<Vec<usize>> {
        let l = self.require_labeling()?;
        let m = l.bits_per_symbol();
        if bits.len() % m != 0 {
            return Err(Error::invalid(format!(
                "{} bits is not a multiple of {m} bits per symbol",
                bits.len()
            )));
        }
        Ok(bits
            .chunks(m)
            .map(|c| {
                let label = c.iter().fold(0u32, |acc, &b| (acc << 1) | (b & 1) as u32);
                l.index(label)
            })
            .collect())
    }

    pub fn modulate(&self, bits: &[u8]) -> Result<Vec<Complex64>> {
        Ok(self
            .modulate_indices(bits)?
            .into_iter()
            .map(|i| self.points[i])
            .collect())
    }

    /// Label bits of point `index`, most significant first.
    pub fn bits_of(&self, index: usize) -> Result<Vec<u8>> {
        let l = self.require_labeling()?;
        Ok((1..=l.bits_per_symbol()).map(|j| l.bit(index, j)).collect())
    }

    /// Draws a point index according to the input probabilities.
    pub fn sample_index<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.len() - 1
    }

    pub fn nearest(&self, y: Complex64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, a) in self.points.iter().enumerate() {
            let d = (y - a).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Minimum-distance hard demapping back to label bits.
    pub fn demodulate_hard(&self, symbols: &[Complex64]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &y in symbols {
            out.extend(self.bits_of(self.nearest(y))?);
        }
        Ok(out)
    }

    /// Plain-text dump, one `re im prob label` row per point.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# re im prob label\n");
        for i in 0..self.len() {
            let label = match &self.labeling {
                Some(l) => format!("{:0width$b}", l.label(i), width = l.bits_per_symbol()),
                None => "-".to_string(),
            };
            let _ = writeln!(
                s,
                "{} {} {} {}",
                self.points[i].re, self.points[i].im, self.probabilities[i], label
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        let mut probs = Vec::new();
        let mut labels: Vec<Option<String>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::Parse(format!(
                    "line {}: expected `re im prob label`, got {} fields",
                    lineno + 1,
                    fields.len()
                )));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))
            };
            points.push(Complex64::new(num(fields[0])?, num(fields[1])?));
            probs.push(num(fields[2])?);
            labels.push((fields[3] != "-").then(|| fields[3].to_string()));
        }
        let labeling = if labels.iter().all(Option::is_some) && !labels.is_empty() {
            let strs: Vec<String> = labels.into_iter().flatten().collect();
            let m = strs[0].len();
            let mut label_of = Vec::with_capacity(strs.len());
            for s in &strs {
                if s.len() != m {
                    return Err(Error::Parse("labels must all have the same length".into()));
                }
                label_of.push(
                    u32::from_str_radix(s, 2)
                        .map_err(|e| Error::Parse(format!("bad label {s:?}: {e}")))?,
                );
            }
            Some(BitLabeling::new(m, label_of)?)
        } else if labels.iter().all(Option::is_none) {
            None
        } else {
            return Err(Error::Parse("either all or no rows may carry a label".into()));
        };
        Self::new(points, probs, labeling)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::stats::RunningStats;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn qam16_gray_and_power() {
        let c = Constellation::qam16(2.0).unwrap();
        assert!((c.power() - 2.0).abs() < 1e-12);
        let l = c.labeling().unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let d = (c.points()[i] - c.points()[j]).norm();
                if (d - (0.2f64).sqrt() * 2.0).abs() < 1e-12 {
                    assert_eq!((l.label(i) ^ l.label(j)).count_ones(), 1);
                }
            }
        }
    }

    #[test]
    fn qpsk_power_two_points() {
        let q = Constellation::qpsk(2.0).unwrap();
        assert_eq!(q.points(), &[c(1., 1.), c(1., -1.), c(-1., 1.), c(-1., -1.)]);
        assert_eq!(q.probabilities(), &[0.25; 4]);
        assert!((q.power() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn qpsk_half_power() {
        let q = Constellation::qpsk(0.5).unwrap();
        for a in q.points() {
            assert!((a.re.abs() - 0.5).abs() < 1e-15 && (a.im.abs() - 0.5).abs() < 1e-15);
            assert!((a.norm_sqr() - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn qpsk_rejects_non_positive_power() {
        assert!(Constellation::qpsk(0.0).is_err());
        assert!(Constellation::qpsk(-1.0).is_err());
    }

    #[test]
    fn label_sets_follow_gray_map() {
        let q = Constellation::qpsk(2.0).unwrap();
        let s10 = q.label_set(1, 0).unwrap();
        assert!(s10.iter().all(|&i| q.points()[i].re > 0.0));
        let s21 = q.label_set(2, 1).unwrap();
        assert!(s21.iter().all(|&i| q.points()[i].im < 0.0));
        for j in 1..=2 {
            let a = q.label_set(j, 0).unwrap();
            let b = q.label_set(j, 1).unwrap();
            assert_eq!(a.len() + b.len(), 4);
            assert!(a.iter().all(|i| !b.contains(i)));
        }
        assert!(q.label_set(0, 0).is_err());
        assert!(q.label_set(3, 0).is_err());
    }

    #[test]
    fn modulate_examples() {
        let q = Constellation::qpsk(2.0).unwrap();
        assert_eq!(q.modulate(&[0, 0]).unwrap(), vec![c(1., 1.)]);
        assert_eq!(q.modulate(&[0, 1, 1, 0, 1, 1]).unwrap().len(), 3);
        assert!(q.modulate(&[0, 1, 1]).is_err());
        let bits = [1, 0, 0, 1, 1, 1, 0, 0];
        let syms = q.modulate(&bits).unwrap();
        assert_eq!(q.demodulate_hard(&syms).unwrap(), bits);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Constellation::new(vec![c(1., 0.), c(1., 0.)], vec![0.5, 0.5], None).is_err());
        assert!(Constellation::new(vec![c(1., 0.), c(-1., 0.)], vec![0.5, 0.6], None).is_err());
        assert!(Constellation::new(vec![c(1., 0.)], vec![0.5, 0.5], None).is_err());
        assert!(BitLabeling::new(2, vec![0, 1, 1, 3]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let q = Constellation::qpsk(1.3).unwrap();
        let back = Constellation::from_text(&q.to_text()).unwrap();
        assert_eq!(q, back);
        let unlabeled = Constellation::new(vec![c(1., 0.), c(-2., 0.)], vec![0.8, 0.2], None).unwrap();
        assert_eq!(Constellation::from_text(&unlabeled.to_text()).unwrap(), unlabeled);
        assert!(Constellation::from_text("1 0 1\n").is_err());
    }

    #[test]
    fn empirical_power_matches_within_three_standard_errors() {
        let pts: Vec<Complex64> = (0..4)
            .flat_map(|i| (0..4).map(move |j| c(2.0 * i as f64 - 3.0, 2.0 * j as f64 - 3.0)))
            .collect();
        let mut probs: Vec<f64> = (0..16).map(|i| 1.0 + (i % 3) as f64).collect();
        let s: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= s);
        let qam = Constellation::new(pts, probs, None).unwrap();
        for con in [Constellation::qpsk(0.7).unwrap(), qam] {
            let mut rng = substream(11, &[0]);
            let stats: RunningStats = (0..1_000_000)
                .map(|_| con.points()[con.sample_index(&mut rng)].norm_sqr())
                .collect();
            let z = (stats.mean() - con.power()).abs() / stats.std_error().max(1e-300);
            assert!(z < 3.0 || stats.std_error() == 0.0, "z = {z}");
        }
    }
}
