//! Coded bit-error-rate simulations under quasi-static fading.
//!
//! Every block draws a fresh channel; block `b` uses the same gains, data,
//! pilot noise and (unit-variance, then scaled) channel noise at every SNR
//! point, for every method and pilot power. Points stop per method after
//! `min_errors` bit errors or `max_blocks` blocks, whichever comes first,
//! scanning blocks in index order so the count is exact and independent of the
//! number of worker threads.

use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{scale_for, ExperimentConfig, ExperimentKind, LlrScaleMode, Method, ReceiverMode, SicPrefix};
use crate::channel::{equal_powers, estimate_channel, noise_var_for_snr, sample_gains, ChannelInstance, PilotPower};
use crate::codec::{bp_decode, conv_encode, encode_symbols, ldpc_build, llr_init, viterbi, ConvCode, LdpcCode, DEFAULT_LLR_CLAMP};
use crate::codec::llr::{estimate_residual_var, sample_use};
use crate::constellation::Constellation;
use crate::gnnd::{cl_front, metric_table_cl, metric_table_gnnd, optimal_front, qpsk_gf, FrontKind, GnndFront, MetricTable};
use crate::mmse_net::{make_dataset, train, MlpModel};
use crate::posterior::{JointPosterior, Marginals, Scratch, DEFAULT_ENUMERATION_CAP};
use crate::rng::{complex_gaussian, substream, tag};
use crate::{Error, Result};

/// Blocks evaluated per parallel wave.
const WAVE: usize = 16;
/// BP iteration cap.
pub const BP_ITERATIONS: usize = 50;

/// One BER row: a pilot power, an SNR point, a method and a user (`all` for
/// the aggregate the stopping rule applies to).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BerRow {
    pub pilot_power: String,
    pub snr_db: f64,
    pub method: &'static str,
    pub user: String,
    pub errors: u64,
    pub bits: u64,
    pub blocks: u64,
    pub ber: f64,
    /// `errors` when `min_errors` was reached, `cap` when the block cap was.
    pub stop: &'static str,
}

#[derive(Debug, Clone)]
pub struct BerSweep {
    pub rows: Vec<BerRow>,
    pub runtime: Duration,
}

impl BerSweep {
    /// `(snr_db, ber, errors)` of the aggregate rows of one method and pilot power.
    pub fn curve(&self, method: Method, pilot_power: &str) -> Vec<(f64, f64, u64)> {
        self.rows
            .iter()
            .filter(|r| r.method == method.as_str() && r.user == "all" && r.pilot_power == pilot_power)
            .map(|r| (r.snr_db, r.ber, r.errors))
            .collect()
    }
}

/// Stopping rule recorded in output metadata.
pub fn stopping_rule(config: &ExperimentConfig) -> String {
    format!(
        "stopping rule: per method and point, blocks in index order until >= {} bit errors (all users) or {} blocks",
        config.min_errors, config.max_blocks
    )
}

/// SNR (dB) where the curve first crosses `target`, interpolating
/// `log10(BER)` linearly in dB. Only points with at least `min_errors` errors,
/// or the first point below target, are used; `None` if no crossing is seen.
pub fn required_snr(curve: &[(f64, f64, u64)], target: f64, min_errors: u64) -> Option<f64> {
    let mut pts: Vec<(f64, f64, u64)> = curve.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut prev: Option<(f64, f64)> = None;
    for &(snr, ber, errors) in &pts {
        if ber <= target {
            let (s0, b0) = prev?;
            if ber <= 0.0 || errors < min_errors {
                // Not enough errors below the target to interpolate reliably.
                return None;
            }
            let (l0, l1, lt) = (b0.log10(), ber.log10(), target.log10());
            return Some(s0 + (snr - s0) * (l0 - lt) / (l0 - l1));
        }
        if errors >= min_errors {
            prev = Some((snr, ber));
        }
    }
    None
}

/// Per-method, per-user bit errors of one block.
type BlockErrors = Vec<Vec<u64>>;

struct PointCounter {
    per_user: Vec<u64>,
    blocks: u64,
    done: bool,
    reached: bool,
}

/// Runs blocks in waves until every method has met the stopping rule.
fn run_point<F>(methods: &[Method], users: usize, min_errors: u64, max_blocks: usize, block: F) -> Result<Vec<PointCounter>>
where
    F: Fn(usize, &[Method]) -> Result<BlockErrors> + Sync,
{
    let mut counters: Vec<PointCounter> = methods
        .iter()
        .map(|_| PointCounter {
            per_user: vec![0; users],
            blocks: 0,
            done: false,
            reached: false,
        })
        .collect();
    let mut next = 0;
    while counters.iter().any(|c| !c.done) {
        let active: Vec<usize> = (0..methods.len()).filter(|&i| !counters[i].done).collect();
        let active_methods: Vec<Method> = active.iter().map(|&i| methods[i]).collect();
        let wave: Vec<usize> = (next..(next + WAVE).min(max_blocks)).collect();
        let results: Vec<BlockErrors> = wave
            .par_iter()
            .map(|&b| block(b, &active_methods))
            .collect::<Result<_>>()?;
        for res in &results {
            for (slot, &mi) in active.iter().enumerate() {
                let c = &mut counters[mi];
                if c.done {
                    continue;
                }
                for (acc, e) in c.per_user.iter_mut().zip(&res[slot]) {
                    *acc += e;
                }
                c.blocks += 1;
                if c.per_user.iter().sum::<u64>() >= min_errors {
                    c.done = true;
                    c.reached = true;
                } else if c.blocks as usize >= max_blocks {
                    c.done = true;
                }
            }
        }
        next += wave.len();
        if next >= max_blocks {
            for c in &mut counters {
                c.done = true;
            }
        }
    }
    Ok(counters)
}

fn push_rows(
    rows: &mut Vec<BerRow>,
    pilot: &str,
    snr_db: f64,
    methods: &[Method],
    counters: &[PointCounter],
    bits_per_user_block: u64,
) {
    for (m, c) in methods.iter().zip(counters) {
        let stop = if c.reached { "errors" } else { "cap" };
        let bits = c.blocks * bits_per_user_block;
        let total: u64 = c.per_user.iter().sum();
        let all_bits = bits * c.per_user.len() as u64;
        rows.push(BerRow {
            pilot_power: pilot.to_string(),
            snr_db,
            method: m.as_str(),
            user: "all".into(),
            errors: total,
            bits: all_bits,
            blocks: c.blocks,
            ber: total as f64 / all_bits.max(1) as f64,
            stop,
        });
        for (u, &e) in c.per_user.iter().enumerate() {
            rows.push(BerRow {
                pilot_power: pilot.to_string(),
                snr_db,
                method: m.as_str(),
                user: u.to_string(),
                errors: e,
                bits,
                blocks: c.blocks,
                ber: e as f64 / bits.max(1) as f64,
                stop,
            });
        }
    }
}

fn pilot_label(p: &PilotPower) -> String {
    match p {
        PilotPower::Perfect => "perfect".into(),
        PilotPower::Energy(e) => format!("{e}P"),
    }
}

/// Successive decoding in `order`. `decode(user, prefix)` receives the symbol
/// sequences of the users already processed (in order) and returns its result
/// together with the re-modulated decision. With `genie`, the prefix carries
/// the transmitted sequences instead. Results are indexed by user.
pub fn sic_receiver<T, F>(order: &[usize], genie: Option<&[Vec<Complex64>]>, mut decode: F) -> Result<Vec<T>>
where
    F: FnMut(usize, &[Vec<Complex64>]) -> Result<(T, Vec<Complex64>)>,
{
    let k = order.len();
    let mut seen = vec![false; k];
    if order.iter().any(|&u| u >= k || std::mem::replace(&mut seen[u], true)) {
        return Err(Error::invalid(format!("order must be a permutation of 0..{k}")));
    }
    if let Some(g) = genie {
        if g.len() != k {
            return Err(Error::ShapeMismatch { expected: k, got: g.len() });
        }
    }
    let mut prefix: Vec<Vec<Complex64>> = Vec::with_capacity(k);
    let mut out: Vec<Option<T>> = (0..k).map(|_| None).collect();
    for &u in order {
        let (res, symbols) = decode(u, &prefix)?;
        prefix.push(match genie {
            Some(g) => g[u].clone(),
            None => symbols,
        });
        out[u] = Some(res);
    }
    Ok(out.into_iter().map(|o| o.expect("every user decoded")).collect())
}

/// Shared per-block draws.
struct BlockDraw {
    gains: nalgebra::DMatrix<Complex64>,
    /// Information bits per user.
    bits: Vec<Vec<u8>>,
    /// Unit-variance noise per symbol time.
    noise: Vec<Vec<Complex64>>,
}

fn draw_block(config: &ExperimentConfig, b: usize, info_len: usize, symbols: usize) -> Result<BlockDraw> {
    let gains = sample_gains(config.users, config.antennas, &mut substream(config.seed, &[tag::CHANNEL, b as u64]))?;
    let mut data = substream(config.seed, &[tag::DATA, b as u64]);
    let bits = (0..config.users)
        .map(|_| (0..info_len).map(|_| data.random_range(0..2u8)).collect())
        .collect();
    let mut nr = substream(config.seed, &[tag::NOISE, b as u64]);
    let noise = (0..symbols)
        .map(|_| (0..config.antennas).map(|_| complex_gaussian(&mut nr, 1.0)).collect())
        .collect();
    Ok(BlockDraw { gains, bits, noise })
}

fn observe(ch: &ChannelInstance, x: &[Vec<Complex64>], noise: &[Vec<Complex64>]) -> Result<Vec<Vec<Complex64>>> {
    let sd = ch.noise_var().sqrt();
    (0..noise.len())
        .map(|t| {
            let xt: Vec<Complex64> = x.iter().map(|s| s[t]).collect();
            let z: Vec<Complex64> = noise[t].iter().map(|v| v * sd).collect();
            ch.transmit_with_noise(&xt, &z)
        })
        .collect()
}

fn ml_table(post: &JointPosterior, marg: &Marginals, k: usize) -> Result<MetricTable> {
    let lj = marg.log_joint(k)?;
    let lp = post.log_prior(k).ok_or_else(|| Error::invalid(format!("user {k} is not enumerated")))?;
    Ok(MetricTable {
        values: lj.iter().zip(lp).map(|(j, p)| p - j).collect(),
        tag: FrontKind::Ml,
    })
}

/// Per-symbol metric tables of user `pos` of `ch` for `method`, with users
/// `0..prefix.len()` known.
fn symbol_tables(
    method: Method,
    ch: &ChannelInstance,
    cons: &[Constellation],
    pos: usize,
    prefix: &[Vec<Complex64>],
    ys: &[Vec<Complex64>],
) -> Result<Vec<MetricTable>> {
    match method {
        Method::Cl => {
            let front = cl_front(ch, pos, prefix.len())?;
            ys.iter()
                .enumerate()
                .map(|(t, y)| {
                    let p: Vec<Complex64> = prefix.iter().map(|s| s[t]).collect();
                    metric_table_cl(&front, y, &p, &cons[pos])
                })
                .collect()
        }
        Method::Gnnd | Method::Ml => {
            let known: Vec<bool> = (0..ch.users()).map(|u| u < prefix.len()).collect();
            let post = JointPosterior::new(ch, cons, &known, DEFAULT_ENUMERATION_CAP)?;
            let mut scratch = Scratch::default();
            ys.iter()
                .enumerate()
                .map(|(t, y)| {
                    let side: Vec<Option<Complex64>> = (0..ch.users()).map(|u| prefix.get(u).map(|s| s[t])).collect();
                    let marg = post.evaluate_with(y, &side, &mut scratch)?;
                    if method == Method::Ml {
                        ml_table(&post, &marg, pos)
                    } else {
                        let m = marg.moments(pos, &cons[pos])?;
                        Ok(metric_table_gnnd(&optimal_front(&m, &cons[pos])?, &cons[pos]))
                    }
                })
                .collect()
        }
        Method::Mi => Err(Error::invalid("mi is not a decoding method")),
    }
}

fn count_errors(a: &[u8], b: &[u8]) -> u64 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as u64
}

/// Convolutionally coded blocks decoded by Viterbi with GNND / CL / ML
/// branch metrics, per user without SIC or successively in the configured order.
pub fn run_viterbi_ber(config: &ExperimentConfig) -> Result<BerSweep> {
    config.validate()?;
    if config.kind != ExperimentKind::ViterbiBer {
        return Err(Error::invalid("run_viterbi_ber needs kind = viterbi-ber"));
    }
    let start = Instant::now();
    let cons = config.constellations()?;
    let code = ConvCode::standard();
    let info = config.info_bits;
    let nsym = info + code.memory();
    let order = config.sic_order();
    let mut rows = Vec::new();
    for &snr in &config.snr_db {
        let nv = noise_var_for_snr(snr, 1.0);
        let counters = run_point(&config.methods, config.users, config.min_errors, config.max_blocks, |b, methods| {
            let d = draw_block(config, b, info, nsym)?;
            let ch = ChannelInstance::new(d.gains.clone(), nv, equal_powers(config.users, 1.0))?;
            let x: Vec<Vec<Complex64>> = d
                .bits
                .iter()
                .zip(&cons)
                .map(|(bits, c)| Ok(encode_symbols(bits, &code, c)?.iter().map(|&i| c.points()[i]).collect()))
                .collect::<Result<_>>()?;
            let ys = observe(&ch, &x, &d.noise)?;
            methods
                .iter()
                .map(|&m| viterbi_block(config, m, &ch, &cons, &order, &d.bits, &x, &ys, &code))
                .collect()
        })?;
        push_rows(&mut rows, "perfect", snr, &config.methods, &counters, info as u64);
    }
    Ok(BerSweep {
        rows,
        runtime: start.elapsed(),
    })
}

#[allow(clippy::too_many_arguments)]
fn viterbi_block(
    config: &ExperimentConfig,
    method: Method,
    ch: &ChannelInstance,
    cons: &[Constellation],
    order: &[usize],
    bits: &[Vec<u8>],
    x: &[Vec<Complex64>],
    ys: &[Vec<Complex64>],
    code: &ConvCode,
) -> Result<Vec<u64>> {
    match config.receiver {
        ReceiverMode::NoSic => (0..config.users)
            .map(|k| {
                // Move user k to position 0 so that no one is cancelled.
                let mut perm: Vec<usize> = vec![k];
                perm.extend((0..config.users).filter(|&u| u != k));
                let chp = ch.permuted(&perm)?;
                let consp: Vec<Constellation> = perm.iter().map(|&u| cons[u].clone()).collect();
                let tables = symbol_tables(method, &chp, &consp, 0, &[], ys)?;
                Ok(count_errors(&viterbi(&tables, code, &cons[k])?, &bits[k]))
            })
            .collect(),
        ReceiverMode::Sic => {
            let chp = ch.permuted(order)?;
            let consp: Vec<Constellation> = order.iter().map(|&u| cons[u].clone()).collect();
            let genie = (config.sic_prefix == SicPrefix::Genie).then_some(x);
            sic_receiver(order, genie, |u, prefix| {
                let pos = prefix.len();
                let tables = symbol_tables(method, &chp, &consp, pos, prefix, ys)?;
                let decoded = viterbi(&tables, code, &cons[u])?;
                let idx = encode_symbols(&decoded, code, &cons[u])?;
                let symbols = idx.iter().map(|&i| cons[u].points()[i]).collect();
                Ok((count_errors(&decoded, &bits[u]), symbols))
            })
        }
    }
}

/// LDPC-coded blocks (no SIC): channel estimation, per-symbol fronts on the
/// estimated channel, LLR initialization and belief propagation per user.
pub fn run_ldpc_ber(config: &ExperimentConfig) -> Result<BerSweep> {
    config.validate()?;
    if config.kind != ExperimentKind::LdpcBer {
        return Err(Error::invalid("run_ldpc_ber needs kind = ldpc-ber"));
    }
    let start = Instant::now();
    let cons = config.constellations()?;
    let bps = cons[0]
        .bits_per_symbol()
        .ok_or_else(|| Error::invalid("constellation needs a labeling"))?;
    let code = ldpc_build(440, (5, 6))?;
    if code.n() % bps != 0 {
        return Err(Error::invalid("codeword length is not a multiple of the bits per symbol"));
    }
    let nsym = code.n() / bps;
    let hyps: u128 = cons.iter().map(|c| c.len() as u128).product();
    let use_net = config.mmse_net.enabled || hyps > DEFAULT_ENUMERATION_CAP as u128;
    if use_net && config.methods.contains(&Method::Ml) {
        return Err(Error::invalid("ml LLRs need exact enumeration; disable mmse_net or drop ml"));
    }
    let mut rows = Vec::new();
    for pilot in config.pilot_powers()? {
        let label = pilot_label(&pilot);
        for &snr in &config.snr_db {
            let nv = noise_var_for_snr(snr, 1.0);
            let counters = run_point(&config.methods, config.users, config.min_errors, config.max_blocks, |b, methods| {
                ldpc_block(config, &code, &cons, pilot, nv, b, nsym, use_net, methods)
            })?;
            push_rows(&mut rows, &label, snr, &config.methods, &counters, code.k() as u64);
        }
    }
    Ok(BerSweep {
        rows,
        runtime: start.elapsed(),
    })
}

#[allow(clippy::too_many_arguments)]
fn ldpc_block(
    config: &ExperimentConfig,
    code: &LdpcCode,
    cons: &[Constellation],
    pilot: PilotPower,
    nv: f64,
    b: usize,
    nsym: usize,
    use_net: bool,
    methods: &[Method],
) -> Result<BlockErrors> {
    let d = draw_block(config, b, code.k(), nsym)?;
    let powers = equal_powers(config.users, 1.0);
    let ch = ChannelInstance::new(d.gains.clone(), nv, powers.clone())?;
    let est = estimate_channel(&d.gains, pilot, nv, &mut substream(config.seed, &[tag::PILOT, b as u64]))?;
    let ch_hat = ch.with_gains(est.gains_hat)?;
    let words: Vec<Vec<u8>> = d.bits.iter().map(|bits| code.encode(bits)).collect::<Result<_>>()?;
    let x: Vec<Vec<Complex64>> = words
        .iter()
        .zip(cons)
        .map(|(w, c)| c.modulate(w))
        .collect::<Result<_>>()?;
    let ys = observe(&ch, &x, &d.noise)?;
    let k = config.users;

    // Per-method, per-user metric tables for every symbol.
    let mut tables: Vec<Vec<Vec<MetricTable>>> = vec![vec![Vec::with_capacity(nsym); k]; methods.len()];
    let mut gnnd_fronts: Vec<Vec<GnndFront>> = vec![Vec::new(); k];
    let wants_gnnd = methods.contains(&Method::Gnnd);
    let exact_needed = methods.contains(&Method::Ml) || (wants_gnnd && !use_net);
    if exact_needed {
        let post = JointPosterior::new(&ch_hat, cons, &[], DEFAULT_ENUMERATION_CAP)?;
        let side = vec![None; k];
        let mut scratch = Scratch::default();
        for y in &ys {
            let marg = post.evaluate_with(y, &side, &mut scratch)?;
            for u in 0..k {
                for (mi, m) in methods.iter().enumerate() {
                    match m {
                        Method::Ml => tables[mi][u].push(ml_table(&post, &marg, u)?),
                        Method::Gnnd if !use_net => {
                            let f = optimal_front(&marg.moments(u, &cons[u])?, &cons[u])?;
                            gnnd_fronts[u].push(f);
                            tables[mi][u].push(metric_table_gnnd(&f, &cons[u]));
                        }
                        _ => {}
                    }
                }
            }
        }
    }
    let mut nets: Vec<Option<MlpModel>> = vec![None; k];
    if wants_gnnd && use_net {
        let mi = methods.iter().position(|&m| m == Method::Gnnd).expect("gnnd requested");
        for u in 0..k {
            let model = train_user_net(config, &ch_hat, cons, u, b)?;
            for y in &ys {
                let f = qpsk_gf(model.predict(y)?, cons[u].power());
                gnnd_fronts[u].push(f);
                tables[mi][u].push(metric_table_gnnd(&f, &cons[u]));
            }
            nets[u] = Some(model);
        }
    }
    if let Some(mi) = methods.iter().position(|&m| m == Method::Cl) {
        for u in 0..k {
            let front = cl_front(&ch_hat, u, 0)?;
            for y in &ys {
                tables[mi][u].push(metric_table_cl(&front, y, &[], &cons[u])?);
            }
        }
    }

    methods
        .iter()
        .enumerate()
        .map(|(mi, &m)| {
            (0..k)
                .map(|u| {
                    let scale = if m == Method::Gnnd {
                        let residual = match config.llr_scale {
                            LlrScaleMode::Unit => None,
                            LlrScaleMode::ResidualVar => Some(gnnd_residual_var(config, &ch, &ch_hat, cons, u, b, nets[u].as_ref())?),
                        };
                        Some(scale_for(config.llr_scale, residual))
                    } else {
                        None
                    };
                    let mut llr = Vec::with_capacity(code.n());
                    for t in &tables[mi][u] {
                        llr.extend(llr_init(t, &cons[u], scale, DEFAULT_LLR_CLAMP)?);
                    }
                    let r = bp_decode(code, &llr, BP_ITERATIONS)?;
                    Ok(count_errors(&code.extract_info(&r.bits), &d.bits[u]))
                })
                .collect()
        })
        .collect()
}

fn train_user_net(config: &ExperimentConfig, ch_hat: &ChannelInstance, cons: &[Constellation], u: usize, b: usize) -> Result<MlpModel> {
    let seed = config.seed ^ ((b as u64) << 20) ^ ((u as u64) << 8);
    let cfg = config.mmse_net.train_config(seed);
    let mut rng = substream(config.seed, &[tag::TRAIN, b as u64, u as u64]);
    let data = make_dataset(ch_hat, cons, u, cfg.samples, &mut rng)?;
    Ok(train(&data, &crate::mmse_net::default_sizes(ch_hat.antennas()), &cfg)?.model)
}

/// `E|g(y) - f(y) x_u|^2` with `y` from the true channel and the front built
/// on the estimated one (exact posterior or network).
fn gnnd_residual_var(
    config: &ExperimentConfig,
    ch: &ChannelInstance,
    ch_hat: &ChannelInstance,
    cons: &[Constellation],
    u: usize,
    b: usize,
    net: Option<&MlpModel>,
) -> Result<f64> {
    let stream = [b as u64, u as u64];
    match net {
        Some(model) => estimate_residual_var(
            |rng| sample_use(ch, cons, rng),
            |s| Ok(qpsk_gf(model.predict(&s.y)?, cons[u].power())),
            u,
            config.residual_samples,
            config.seed,
            &stream,
        ),
        None => {
            let post = JointPosterior::new(ch_hat, cons, &[], DEFAULT_ENUMERATION_CAP)?;
            let side = vec![None; ch.users()];
            estimate_residual_var(
                |rng| sample_use(ch, cons, rng),
                |s| optimal_front(&post.evaluate(&s.y, &side)?.moments(u, &cons[u])?, &cons[u]),
                u,
                config.residual_samples,
                config.seed,
                &stream,
            )
        }
    }
}

/// Re-encoded convolutional codeword symbols (exposed for tests).
pub fn conv_symbols(bits: &[u8], c: &Constellation) -> Result<Vec<Complex64>> {
    c.modulate(&conv_encode(bits, &ConvCode::standard()))
}
