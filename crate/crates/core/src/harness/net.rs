//! Stand-alone training of the conditional-mean network on one channel draw,
//! with a held-out comparison against the exact posterior mean.

use std::time::{Duration, Instant};

use num_complex::Complex64;
use serde::Serialize;

use super::config::{ExperimentConfig, ExperimentKind};
use super::sweep::draw_channel;
use crate::channel::ChannelInstance;
use crate::constellation::Constellation;
use crate::mmse_net::{default_sizes, make_dataset, train, Dataset, MlpModel};
use crate::posterior::{JointPosterior, Scratch, DEFAULT_ENUMERATION_CAP};
use crate::rng::{substream, tag};
use crate::stats::RunningStats;
use crate::{Error, Result};

/// One loss-trace row; epoch 0 is the loss before training.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRow {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct NetRun {
    pub model: MlpModel,
    pub losses: Vec<LossRow>,
    /// Held-out squared error of the network.
    pub net_mse: RunningStats,
    /// Held-out squared error of the exact posterior mean.
    pub exact_mse: RunningStats,
    pub runtime: Duration,
}

impl NetRun {
    pub fn mse_ratio(&self) -> f64 {
        self.net_mse.mean() / self.exact_mse.mean()
    }
}

/// Squared error of the exact conditional mean of user `k` over a dataset.
pub fn exact_mmse_errors(ch: &ChannelInstance, cons: &[Constellation], k: usize, data: &Dataset) -> Result<RunningStats> {
    let post = JointPosterior::new(ch, cons, &[], DEFAULT_ENUMERATION_CAP)?;
    let side = vec![None; ch.users()];
    let mut scratch = Scratch::default();
    let l = ch.antennas();
    let mut stats = RunningStats::new();
    for i in 0..data.len() {
        let y: Vec<Complex64> = (0..l)
            .map(|j| Complex64::new(data.inputs[(i, j)], data.inputs[(i, l + j)]))
            .collect();
        let m = post.evaluate_with(&y, &side, &mut scratch)?.moments(k, &cons[k])?;
        let t = Complex64::new(data.targets[(i, 0)], data.targets[(i, 1)]);
        stats.push((m.mean - t).norm_sqr());
    }
    Ok(stats)
}

/// Trains on draw 0 at the first SNR point for the configured user.
pub fn run_train_net(config: &ExperimentConfig) -> Result<NetRun> {
    config.validate()?;
    if config.kind != ExperimentKind::TrainNet {
        return Err(Error::invalid("run_train_net needs kind = train-net"));
    }
    let start = Instant::now();
    let cons = config.constellations()?;
    let ch = draw_channel(config, 0, config.snr_db[0])?;
    let k = config.user;
    let cfg = config.mmse_net.train_config(config.seed);
    let data = make_dataset(&ch, &cons, k, cfg.samples, &mut substream(config.seed, &[tag::DATA]))?;
    let held = make_dataset(&ch, &cons, k, config.mmse_net.heldout, &mut substream(config.seed, &[tag::NOISE]))?;
    let trained = train(&data, &default_sizes(config.antennas), &cfg)?;
    let net_mse = trained.model.squared_errors(&held)?;
    let exact_mse = exact_mmse_errors(&ch, &cons, k, &held)?;
    Ok(NetRun {
        model: trained.model,
        losses: trained
            .losses
            .into_iter()
            .enumerate()
            .map(|(epoch, loss)| LossRow { epoch, loss })
            .collect(),
        net_mse,
        exact_mse,
        runtime: start.elapsed(),
    })
}
