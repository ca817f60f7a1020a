//! Zero-terminated feedforward convolutional codes and a Viterbi decoder whose
//! branch metrics come from per-symbol [`MetricTable`]s.

use crate::constellation::Constellation;
use crate::gnnd::MetricTable;
use crate::{Error, Result};

/// Rate-1/n feedforward convolutional code.
///
/// Generators are written in octal with the most significant register tap
/// being the current input (`D^0`), so `0o5 = 1 + D^2` and `0o7 = 1 + D + D^2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvCode {
    generators: Vec<u32>,
    constraint_length: usize,
}

impl ConvCode {
    pub fn new(generators: Vec<u32>, constraint_length: usize) -> Result<Self> {
        if !(2..=16).contains(&constraint_length) {
            return Err(Error::invalid("constraint length must be in 2..=16"));
        }
        if generators.is_empty() {
            return Err(Error::invalid("need at least one generator"));
        }
        let limit = 1u32 << constraint_length;
        for &g in &generators {
            if g == 0 || g >= limit {
                return Err(Error::invalid(format!(
                    "generator {g:o} does not fit constraint length {constraint_length}"
                )));
            }
        }
        Ok(Self {
            generators,
            constraint_length,
        })
    }

    /// The 4-state rate-1/2 code with `G1 = 1 + D^2`, `G2 = 1 + D + D^2`.
    pub fn standard() -> Self {
        Self::new(vec![0o5, 0o7], 3).expect("valid code")
    }

    pub fn generators(&self) -> &[u32] {
        &self.generators
    }

    pub fn constraint_length(&self) -> usize {
        self.constraint_length
    }

    pub fn memory(&self) -> usize {
        self.constraint_length - 1
    }

    pub fn states(&self) -> usize {
        1 << self.memory()
    }

    /// Coded bits per information bit (the rate is `1/outputs`).
    pub fn outputs(&self) -> usize {
        self.generators.len()
    }

    /// Rate as `(numerator, denominator)`.
    pub fn rate(&self) -> (usize, usize) {
        (1, self.outputs())
    }

    /// Output label (first generator most significant) and next state for
    /// input `u` in `state`. States hold past inputs, newest most significant.
    fn step(&self, state: usize, u: u8) -> (u32, usize) {
        let m = self.memory();
        let reg = ((u as u32) << m) | state as u32;
        let label = self
            .generators
            .iter()
            .fold(0u32, |acc, g| (acc << 1) | ((reg & g).count_ones() & 1));
        (label, (reg >> 1) as usize)
    }
}

/// Encodes `bits` followed by `memory` zero flush bits.
pub fn conv_encode(bits: &[u8], code: &ConvCode) -> Vec<u8> {
    let n = code.outputs();
    let mut out = Vec::with_capacity((bits.len() + code.memory()) * n);
    let mut state = 0;
    let flush = std::iter::repeat(0u8).take(code.memory());
    for u in bits.iter().map(|b| b & 1).chain(flush) {
        let (label, next) = code.step(state, u);
        for i in (0..n).rev() {
            out.push(((label >> i) & 1) as u8);
        }
        state = next;
    }
    out
}

/// Number of trellis sections (symbols) for `info_len` information bits.
pub fn trellis_len(info_len: usize, code: &ConvCode) -> usize {
    info_len + code.memory()
}

fn check_mapping(code: &ConvCode, c: &Constellation) -> Result<Vec<usize>> {
    let labeling = c
        .labeling()
        .ok_or_else(|| Error::invalid("constellation has no bit labeling"))?;
    if labeling.bits_per_symbol() != code.outputs() {
        return Err(Error::ShapeMismatch {
            expected: code.outputs(),
            got: labeling.bits_per_symbol(),
        });
    }
    Ok((0..1u32 << code.outputs()).map(|l| labeling.index(l)).collect())
}

/// Minimum-sum path through the terminated trellis, one table per symbol.
///
/// Branch metric is the table entry of the constellation point labelled by the
/// branch's coded bits. Exact ties go to the lexicographically smaller state
/// path, which (states holding the newest input as the top bit) is the
/// lexicographically smaller information sequence.
pub fn viterbi(tables: &[MetricTable], code: &ConvCode, c: &Constellation) -> Result<Vec<u8>> {
    let index_of = check_mapping(code, c)?;
    let m = code.memory();
    if tables.len() < m {
        return Err(Error::ShapeMismatch {
            expected: m,
            got: tables.len(),
        });
    }
    for t in tables {
        if t.values.len() != c.len() {
            return Err(Error::ShapeMismatch {
                expected: c.len(),
                got: t.values.len(),
            });
        }
    }
    let info_len = tables.len() - m;
    let ns = code.states();

    // Branch tables: for every next state, its two predecessors with labels.
    let mut preds = vec![[(0usize, 0u32); 2]; ns];
    for (s, p) in preds.iter_mut().enumerate() {
        let u = (s >> (m - 1)) as u8;
        for b in 0..2 {
            let prev = ((s << 1) & (ns - 1)) | b;
            let (label, next) = code.step(prev, u);
            debug_assert_eq!(next, s);
            p[b] = (prev, label);
        }
    }

    let mut metric = vec![f64::INFINITY; ns];
    metric[0] = 0.0;
    // rank[s]: position of state s's survivor in lexicographic path order.
    let mut rank: Vec<usize> = (0..ns).collect();
    let mut back = vec![0usize; tables.len() * ns];
    let mut next_metric = vec![0.0; ns];
    let mut chosen = vec![0usize; ns];
    for (t, table) in tables.iter().enumerate() {
        let flushing = t >= info_len;
        for s in 0..ns {
            if flushing && (s >> (m - 1)) == 1 {
                next_metric[s] = f64::INFINITY;
                chosen[s] = preds[s][0].0;
                continue;
            }
            let mut best: Option<(f64, usize)> = None;
            for &(prev, label) in &preds[s] {
                let cand = metric[prev] + table.values[index_of[label as usize]];
                best = match best {
                    None => Some((cand, prev)),
                    Some((bm, bp)) => {
                        if cand < bm || (cand == bm && rank[prev] < rank[bp]) {
                            Some((cand, prev))
                        } else {
                            Some((bm, bp))
                        }
                    }
                };
            }
            let (bm, bp) = best.expect("two predecessors");
            next_metric[s] = bm;
            chosen[s] = bp;
        }
        let mut order: Vec<usize> = (0..ns).collect();
        order.sort_by_key(|&s| (rank[chosen[s]], s));
        for (r, &s) in order.iter().enumerate() {
            rank[s] = r;
        }
        back[t * ns..(t + 1) * ns].copy_from_slice(&chosen);
        std::mem::swap(&mut metric, &mut next_metric);
    }

    let mut bits = vec![0u8; tables.len()];
    let mut s = 0;
    for t in (0..tables.len()).rev() {
        bits[t] = (s >> (m - 1)) as u8;
        s = back[t * ns + s];
    }
    bits.truncate(info_len);
    Ok(bits)
}

/// Constellation indices transmitted for `bits` (encoded and zero-terminated).
pub fn encode_symbols(bits: &[u8], code: &ConvCode, c: &Constellation) -> Result<Vec<usize>> {
    check_mapping(code, c)?;
    c.modulate_indices(&conv_encode(bits, code))
}
