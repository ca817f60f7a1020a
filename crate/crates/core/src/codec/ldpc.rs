//! Binary LDPC codes: quasi-cyclic construction, systematic GF(2) encoder and
//! flooding sum-product decoding.

use crate::{Error, Result};

/// Base matrix shipped with the crate (rate 5/6, 4 x 24 blocks, Z = 22).
pub const BASE_R56_Z22: &str = include_str!("../../data/qc_ldpc_r56_z22.txt");

/// Default iteration cap for [`bp_decode`].
pub const DEFAULT_BP_ITERATIONS: usize = 50;

/// Bound on the tanh-rule product so that check messages stay finite.
const TANH_LIMIT: f64 = 1.0 - 1e-15;

/// Quasi-cyclic base matrix: `-1` is the zero block, `s >= 0` the identity
/// cyclically shifted right by `s` (row `i` has its one in column `(i+s) mod Z`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QcBase {
    pub lifting: usize,
    pub shifts: Vec<Vec<i32>>,
}

impl QcBase {
    /// Parses the plain-text format: `#` comments, the lifting size on the first
    /// data line, then one whitespace-separated row per block row.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let (line, first) = lines.next().ok_or_else(|| Error::Parse("empty base matrix".into()))?;
        let lifting: usize = first
            .parse()
            .map_err(|_| Error::Parse(format!("line {line}: bad lifting size {first:?}")))?;
        if lifting == 0 {
            return Err(Error::Parse(format!("line {line}: lifting size must be positive")));
        }
        let mut shifts = Vec::new();
        for (line, l) in lines {
            let row = l
                .split_whitespace()
                .map(|t| {
                    let v: i32 = t.parse().map_err(|_| Error::Parse(format!("line {line}: bad entry {t:?}")))?;
                    if v < -1 || v >= lifting as i32 {
                        return Err(Error::Parse(format!("line {line}: shift {v} outside -1..{lifting}")));
                    }
                    Ok(v)
                })
                .collect::<Result<Vec<_>>>()?;
            if let Some(prev) = shifts.first().map(Vec::len) {
                if row.len() != prev {
                    return Err(Error::Parse(format!("line {line}: expected {prev} entries, got {}", row.len())));
                }
            }
            shifts.push(row);
        }
        if shifts.is_empty() {
            return Err(Error::Parse("base matrix has no rows".into()));
        }
        Ok(Self { lifting, shifts })
    }

    /// Lifted parity checks as lists of variable indices.
    pub fn lift(&self) -> (usize, Vec<Vec<usize>>) {
        let z = self.lifting;
        let n = self.shifts[0].len() * z;
        let mut checks = Vec::with_capacity(self.shifts.len() * z);
        for row in &self.shifts {
            for i in 0..z {
                let vars = row
                    .iter()
                    .enumerate()
                    .filter(|(_, &s)| s >= 0)
                    .map(|(b, &s)| b * z + (i + s as usize) % z)
                    .collect();
                checks.push(vars);
            }
        }
        (n, checks)
    }
}

/// Dense GF(2) row stored as packed words.
#[derive(Debug, Clone, PartialEq, Eq)]
struct BitRow(Vec<u64>);

impl BitRow {
    fn zeros(n: usize) -> Self {
        Self(vec![0; n.div_ceil(64)])
    }

    fn get(&self, i: usize) -> bool {
        (self.0[i / 64] >> (i % 64)) & 1 == 1
    }

    fn set(&mut self, i: usize, v: bool) {
        let m = 1u64 << (i % 64);
        if v {
            self.0[i / 64] |= m;
        } else {
            self.0[i / 64] &= !m;
        }
    }

    fn flip(&mut self, i: usize) {
        self.0[i / 64] ^= 1 << (i % 64);
    }

    fn xor_assign(&mut self, other: &BitRow) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a ^= b;
        }
    }

    fn dot(&self, other: &BitRow) -> u8 {
        let ones: u32 = self.0.iter().zip(&other.0).map(|(a, b)| (a & b).count_ones()).sum();
        (ones & 1) as u8
    }
}

/// A binary linear code given by its parity checks, with a systematic encoder.
#[derive(Debug, Clone)]
pub struct LdpcCode {
    n: usize,
    checks: Vec<Vec<usize>>,
    /// Columns carrying information bits, increasing.
    info_positions: Vec<usize>,
    /// For each pivot column, the mask of information columns it is the parity of.
    parity_rules: Vec<(usize, BitRow)>,
}

impl LdpcCode {
    /// Builds the code from check rows (lists of variable indices in `0..n`).
    /// Pivots are chosen from the rightmost columns, so for parity-check
    /// matrices `[H_i | H_p]` with invertible `H_p` the code is systematic with
    /// information bits first.
    pub fn from_checks(n: usize, checks: Vec<Vec<usize>>) -> Result<Self> {
        if n == 0 || checks.is_empty() {
            return Err(Error::invalid("code needs variables and checks"));
        }
        let mut rows = Vec::with_capacity(checks.len());
        for c in &checks {
            let mut r = BitRow::zeros(n);
            for &v in c {
                if v >= n {
                    return Err(Error::invalid(format!("check references variable {v} >= {n}")));
                }
                r.flip(v);
            }
            rows.push(r);
        }
        // Reduced row echelon form, pivoting from the last column backwards.
        let mut pivots = Vec::new();
        let mut top = 0;
        for col in (0..n).rev() {
            if top == rows.len() {
                break;
            }
            let Some(p) = (top..rows.len()).find(|&r| rows[r].get(col)) else {
                continue;
            };
            rows.swap(top, p);
            let pivot = rows[top].clone();
            for (r, row) in rows.iter_mut().enumerate() {
                if r != top && row.get(col) {
                    row.xor_assign(&pivot);
                }
            }
            pivots.push(col);
            top += 1;
        }
        let mut is_pivot = vec![false; n];
        for &p in &pivots {
            is_pivot[p] = true;
        }
        let info_positions: Vec<usize> = (0..n).filter(|&j| !is_pivot[j]).collect();
        if info_positions.is_empty() {
            return Err(Error::invalid("parity checks leave no information bits"));
        }
        let parity_rules = pivots
            .iter()
            .zip(rows)
            .map(|(&p, mut row)| {
                row.set(p, false);
                (p, row)
            })
            .collect();
        Ok(Self {
            n,
            checks,
            info_positions,
            parity_rules,
        })
    }

    /// Quasi-cyclic code lifted from `base`.
    pub fn from_base(base: &QcBase) -> Result<Self> {
        let (n, checks) = base.lift();
        Self::from_checks(n, checks)
    }

    /// Codeword length.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Code dimension.
    pub fn k(&self) -> usize {
        self.info_positions.len()
    }

    pub fn checks(&self) -> &[Vec<usize>] {
        &self.checks
    }

    pub fn info_positions(&self) -> &[usize] {
        &self.info_positions
    }

    pub fn encode(&self, info: &[u8]) -> Result<Vec<u8>> {
        if info.len() != self.k() {
            return Err(Error::ShapeMismatch {
                expected: self.k(),
                got: info.len(),
            });
        }
        let mut word = BitRow::zeros(self.n);
        for (&pos, &b) in self.info_positions.iter().zip(info) {
            word.set(pos, b & 1 == 1);
        }
        let mut out = vec![0u8; self.n];
        for (&pos, &b) in self.info_positions.iter().zip(info) {
            out[pos] = b & 1;
        }
        for (p, rule) in &self.parity_rules {
            out[*p] = rule.dot(&word);
        }
        Ok(out)
    }

    /// Number of unsatisfied checks.
    pub fn syndrome_weight(&self, word: &[u8]) -> usize {
        self.checks
            .iter()
            .filter(|c| c.iter().fold(0u8, |acc, &v| acc ^ (word[v] & 1)) == 1)
            .count()
    }

    /// Information bits of a codeword.
    pub fn extract_info(&self, word: &[u8]) -> Vec<u8> {
        self.info_positions.iter().map(|&p| word[p]).collect()
    }
}

/// The rate-5/6 quasi-cyclic code with 440 information bits, from the shipped
/// base matrix.
pub fn ldpc_build(info_length: usize, rate: (usize, usize)) -> Result<LdpcCode> {
    let base = QcBase::parse(BASE_R56_Z22)?;
    let code = LdpcCode::from_base(&base)?;
    if info_length != code.k() || rate.0 * code.n() != rate.1 * code.k() {
        return Err(Error::invalid(format!(
            "no shipped construction for {info_length} information bits at rate {}/{} (available: {} bits, rate {}/{})",
            rate.0,
            rate.1,
            code.k(),
            code.k(),
            code.n()
        )));
    }
    Ok(code)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BpOptions {
    pub max_iters: usize,
    /// Stop as soon as the hard decisions satisfy every check.
    pub early_exit: bool,
}

impl Default for BpOptions {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_BP_ITERATIONS,
            early_exit: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpResult {
    /// Hard decisions on the posterior LLRs (whole codeword).
    pub bits: Vec<u8>,
    pub posterior: Vec<f64>,
    /// All checks satisfied and no posterior LLR exactly zero.
    pub converged: bool,
    pub iterations: usize,
}

/// Sum-product decoding with the flooding schedule and early exit.
pub fn bp_decode(code: &LdpcCode, llr: &[f64], max_iters: usize) -> Result<BpResult> {
    bp_decode_with(
        code,
        llr,
        &BpOptions {
            max_iters,
            early_exit: true,
        },
    )
}

pub fn bp_decode_with(code: &LdpcCode, llr: &[f64], opts: &BpOptions) -> Result<BpResult> {
    if llr.len() != code.n {
        return Err(Error::ShapeMismatch {
            expected: code.n,
            got: llr.len(),
        });
    }
    if llr.iter().any(|l| l.is_nan()) {
        return Err(Error::invalid("NaN channel LLR"));
    }
    // Edges are stored check by check.
    let edges: Vec<usize> = code.checks.iter().flatten().copied().collect();
    let mut c2v = vec![0.0; edges.len()];
    let mut v2c = vec![0.0; edges.len()];
    let mut posterior = llr.to_vec();
    let mut bits = vec![0u8; code.n];
    let mut tanhs = Vec::new();
    let mut suffix = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iters {
        iterations = it;
        for (e, &v) in edges.iter().enumerate() {
            v2c[e] = posterior[v] - c2v[e];
        }
        let mut start = 0;
        for check in &code.checks {
            let d = check.len();
            let range = start..start + d;
            tanhs.clear();
            tanhs.extend(v2c[range.clone()].iter().map(|m| (0.5 * m).tanh()));
            suffix.clear();
            suffix.resize(d + 1, 1.0);
            for i in (0..d).rev() {
                suffix[i] = suffix[i + 1] * tanhs[i];
            }
            let mut prefix = 1.0;
            for (i, out) in c2v[range].iter_mut().enumerate() {
                let p = (prefix * suffix[i + 1]).clamp(-TANH_LIMIT, TANH_LIMIT);
                *out = 2.0 * p.atanh();
                prefix *= tanhs[i];
            }
            start += d;
        }
        posterior.copy_from_slice(llr);
        for (e, &v) in edges.iter().enumerate() {
            posterior[v] += c2v[e];
        }
        for (b, &l) in bits.iter_mut().zip(&posterior) {
            *b = u8::from(l < 0.0);
        }
        converged = code.syndrome_weight(&bits) == 0 && posterior.iter().all(|&l| l != 0.0);
        if converged && opts.early_exit {
            break;
        }
    }
    Ok(BpResult {
        bits,
        posterior,
        converged,
        iterations,
    })
}
