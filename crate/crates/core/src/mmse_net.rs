//! A small fully-connected ReLU network approximating `E[x_k | y]`, trained
//! from scratch with Adam on the quadratic loss.
//!
//! Inputs are `[Re y_1 .. Re y_L, Im y_1 .. Im y_L]`; the two outputs are the
//! real and imaginary parts of the estimate.

use std::io::{BufRead, Write};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelInstance;
use crate::constellation::Constellation;
use crate::rng::{substream, tag, SimRng};
use crate::stats::RunningStats;
use crate::{Error, Result};

/// Hidden layer widths.
pub const HIDDEN: [usize; 3] = [200, 100, 50];

const CHECKPOINT_MAGIC: &str = "gnnd-mlp v1";
/// Training aborts once the loss exceeds this multiple of the initial loss...
const DIVERGENCE_FACTOR: f64 = 10.0;
/// ...for this many consecutive epochs.
const DIVERGENCE_EPOCHS: usize = 3;

/// `[2L, 200, 100, 50, 2]`.
pub fn default_sizes(antennas: usize) -> Vec<usize> {
    let mut v = vec![2 * antennas];
    v.extend(HIDDEN);
    v.push(2);
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
}

/// Output-layer init shrink: symbols have power `1/K`, so full He scaling
/// starts the loss orders of magnitude above the trivial predictor's.
pub const OUTPUT_INIT_SCALE: f64 = 0.05;

/// Learning-rate schedule over the total number of optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero.
    Cosine,
}

impl LrSchedule {
    /// Rate at `step` (0-based) of `total`.
    pub fn rate(&self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

impl TrainConfig {
    /// Reduced defaults: 100000 samples, 20 epochs of batch 64 with a
    /// cosine-decayed rate from 3e-3.
    pub fn desk(seed: u64) -> Self {
        Self {
            samples: 100_000,
            epochs: 20,
            batch_size: 64,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: LrSchedule::Cosine,
            seed,
        }
    }

    /// 400000 samples, 100 epochs of batch 2000 at a constant 1e-3.
    pub fn paper(seed: u64) -> Self {
        Self {
            samples: 400_000,
            epochs: 100,
            batch_size: 2000,
            learning_rate: 1e-3,
            schedule: LrSchedule::Constant,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epochs must be positive"));
        }
        if self.samples < self.batch_size {
            return Err(Error::invalid(format!(
                "{} samples cannot fill a batch of {}",
                self.samples, self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and nonnegative"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::invalid("Adam needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        Ok(())
    }
}

/// Paired samples: rows of `inputs` (`2L` wide) and `targets` (2 wide).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }
}

/// Real feature vector of an observation.
pub fn features(y: &[Complex64]) -> Vec<f64> {
    y.iter().map(|v| v.re).chain(y.iter().map(|v| v.im)).collect()
}

/// `samples` i.i.d. channel uses through `channel` (typically built from
/// estimated gains); targets are user `k`'s symbols.
pub fn make_dataset(
    channel: &ChannelInstance,
    constellations: &[Constellation],
    k: usize,
    samples: usize,
    rng: &mut SimRng,
) -> Result<Dataset> {
    if samples == 0 {
        return Err(Error::invalid("dataset needs at least one sample"));
    }
    if constellations.len() != channel.users() || k >= channel.users() {
        return Err(Error::ShapeMismatch {
            expected: channel.users(),
            got: constellations.len(),
        });
    }
    let l = channel.antennas();
    let mut inputs = Array2::zeros((samples, 2 * l));
    let mut targets = Array2::zeros((samples, 2));
    for i in 0..samples {
        let x: Vec<Complex64> = constellations
            .iter()
            .map(|c| c.points()[c.sample_index(rng)])
            .collect();
        let y = channel.transmit(&x, rng)?;
        for (j, v) in features(&y).into_iter().enumerate() {
            inputs[(i, j)] = v;
        }
        targets[(i, 0)] = x[k].re;
        targets[(i, 1)] = x[k].im;
    }
    Ok(Dataset { inputs, targets })
}

/// Dense ReLU network; layer `l` maps `sizes[l]` to `sizes[l+1]` with
/// weights stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

#[derive(Debug, Clone)]
struct Grads {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

impl MlpModel {
    /// All-zero parameters.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid("need at least two positive layer sizes"));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            weights: sizes.windows(2).map(|w| Array2::zeros((w[1], w[0]))).collect(),
            biases: sizes[1..].iter().map(|&n| Array1::zeros(n)).collect(),
        })
    }

    /// He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, the output
    /// layer shrunk by [`OUTPUT_INIT_SCALE`]; zero biases.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(sizes)?;
        let last = m.weights.len() - 1;
        for (l, w) in m.weights.iter_mut().enumerate() {
            let lim = (6.0 / w.ncols() as f64).sqrt() * if l == last { OUTPUT_INIT_SCALE } else { 1.0 };
            w.mapv_inplace(|_| rng.random_range(-lim..lim));
        }
        Ok(m)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("nonempty")
    }

    /// Pre-activations of every layer for a batch (rows are samples).
    fn forward_all(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut zs: Vec<Array2<f64>> = Vec::with_capacity(self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let mut z = match zs.last() {
                None => x.dot(&w.t()),
                Some(prev) => prev.mapv(|v| v.max(0.0)).dot(&w.t()),
            };
            z += b;
            zs.push(z);
        }
        zs
    }

    /// Outputs for a batch.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(self.forward_all(x).pop().expect("at least one layer"))
    }

    /// Mean over the batch of the squared output error, and its gradient.
    fn loss_grad(&self, x: ArrayView2<f64>, t: ArrayView2<f64>) -> (f64, Grads) {
        let zs = self.forward_all(x);
        let n = x.nrows() as f64;
        let out = zs.last().expect("layers");
        let diff = out - &t;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
        let mut delta = diff * (2.0 / n);
        let layers = self.weights.len();
        let mut gw = vec![Array2::zeros((0, 0)); layers];
        let mut gb = vec![Array1::zeros(0); layers];
        for l in (0..layers).rev() {
            let input = if l == 0 {
                x.to_owned()
            } else {
                zs[l - 1].mapv(|v| v.max(0.0))
            };
            gw[l] = delta.t().dot(&input);
            gb[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l]);
                back.zip_mut_with(&zs[l - 1], |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = back;
            }
        }
        (loss, Grads { weights: gw, biases: gb })
    }

    /// Mean squared error over a dataset (evaluated in batches).
    pub fn loss(&self, data: &Dataset) -> Result<f64> {
        Ok(self.squared_errors(data)?.mean())
    }

    /// Per-sample squared errors `|x_hat - x|^2`.
    pub fn squared_errors(&self, data: &Dataset) -> Result<RunningStats> {
        let mut st = RunningStats::new();
        for start in (0..data.len()).step_by(4096) {
            let end = (start + 4096).min(data.len());
            let out = self.forward(data.inputs.slice(s![start..end, ..]))?;
            let t = data.targets.slice(s![start..end, ..]);
            for (o, t) in out.rows().into_iter().zip(t.rows()) {
                st.push(o.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum());
            }
        }
        Ok(st)
    }

    /// `x_hat_k` for one observation.
    pub fn predict(&self, y: &[Complex64]) -> Result<Complex64> {
        if self.output_dim() != 2 {
            return Err(Error::invalid("model must have two outputs"));
        }
        let f = features(y);
        let x = ArrayView2::from_shape((1, f.len()), &f).map_err(|e| Error::invalid(e.to_string()))?;
        let out = self.forward(x)?;
        Ok(Complex64::new(out[(0, 0)], out[(0, 1)]))
    }

    /// Writes the versioned text checkpoint: magic line, `sizes ...`, then per
    /// layer its weight rows (row-major, `out` lines of `in` values) followed
    /// by one bias line. Values use Rust's shortest round-trip formatting.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        let sizes: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        writeln!(w, "sizes {}", sizes.join(" "))?;
        for (wt, b) in self.weights.iter().zip(&self.biases) {
            for row in wt.rows() {
                let r: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(w, "{}", r.join(" "))?;
            }
            let r: Vec<String> = b.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", r.join(" "))?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse(format!("checkpoint truncated before {what}")))?
                .map_err(Error::from)
        };
        if next("header")?.trim() != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not a gnnd-mlp v1 checkpoint".into()));
        }
        let sizes_line = next("sizes")?;
        let sizes: Vec<usize> = sizes_line
            .strip_prefix("sizes ")
            .ok_or_else(|| Error::Parse("missing sizes line".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad size {t:?}"))))
            .collect::<Result<_>>()?;
        let mut m = Self::zeros(&sizes)?;
        let parse_row = |line: String, n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad value {t:?}"))))
                .collect::<Result<_>>()?;
            if v.len() != n {
                return Err(Error::Parse(format!("expected {n} values, got {}", v.len())));
            }
            Ok(v)
        };
        for l in 0..m.weights.len() {
            let (rows, cols) = m.weights[l].dim();
            for i in 0..rows {
                let v = parse_row(next("weights")?, cols)?;
                m.weights[l].row_mut(i).assign(&Array1::from(v));
            }
            m.biases[l] = Array1::from(parse_row(next("bias")?, rows)?);
        }
        Ok(m)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .flat_map(|w| w.iter_mut())
            .chain(self.biases.iter_mut().flat_map(|b| b.iter_mut()))
    }
}

impl Grads {
    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
    }
}

/// Trained model with its loss trace: entry 0 is the initial full-dataset
/// loss, entry `e` the loss after epoch `e`.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: MlpModel,
    pub losses: Vec<f64>,
}

/// Mini-batch Adam on the quadratic loss. Samples are reshuffled every epoch;
/// the last batch of an epoch may be short.
pub fn train(data: &Dataset, sizes: &[usize], cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return Err(Error::invalid("dataset smaller than one batch"));
    }
    if sizes.first() != Some(&data.inputs.ncols()) || sizes.last() != Some(&data.targets.ncols()) {
        return Err(Error::ShapeMismatch {
            expected: data.inputs.ncols(),
            got: sizes.first().copied().unwrap_or(0),
        });
    }
    let mut model = MlpModel::init(sizes, &mut substream(cfg.seed, &[tag::INIT]))?;
    let mut shuffle_rng = substream(cfg.seed, &[tag::TRAIN]);
    let count = model.params_mut().count();
    let mut m1 = vec![0.0; count];
    let mut m2 = vec![0.0; count];
    let mut step = 0i32;
    let total_steps = cfg.epochs * data.len().div_ceil(cfg.batch_size);
    let initial = model.loss(data)?;
    let mut losses = vec![initial];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut over = 0;
    let width_in = data.inputs.ncols();
    let mut xb = Array2::zeros((cfg.batch_size, width_in));
    let mut tb = Array2::zeros((cfg.batch_size, 2));
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            if xb.nrows() != batch.len() {
                xb = Array2::zeros((batch.len(), width_in));
                tb = Array2::zeros((batch.len(), data.targets.ncols()));
            }
            for (r, &i) in batch.iter().enumerate() {
                xb.row_mut(r).assign(&data.inputs.row(i));
                tb.row_mut(r).assign(&data.targets.row(i));
            }
            let (_, g) = model.loss_grad(xb.view(), tb.view());
            let lr = cfg.schedule.rate(cfg.learning_rate, step as usize, total_steps);
            step += 1;
            let c1 = 1.0 - cfg.beta1.powi(step);
            let c2 = 1.0 - cfg.beta2.powi(step);
            for (((p, g), a), b) in model.params_mut().zip(g.values()).zip(&mut m1).zip(&mut m2) {
                *a = cfg.beta1 * *a + (1.0 - cfg.beta1) * g;
                *b = cfg.beta2 * *b + (1.0 - cfg.beta2) * g * g;
                *p -= lr * (*a / c1) / ((*b / c2).sqrt() + cfg.eps);
            }
        }
        let loss = model.loss(data)?;
        losses.push(loss);
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial {
            over += 1;
            if over >= DIVERGENCE_EPOCHS || !loss.is_finite() {
                return Err(Error::Divergence { epoch, trace: losses });
            }
        } else {
            over = 0;
        }
    }
    Ok(Trained { model, losses })
}
