//! Experiment configuration files (TOML, unknown keys rejected).

use serde::{Deserialize, Serialize};

use crate::channel::PilotPower;
use crate::codec::LlrScale;
use crate::constellation::Constellation;
use crate::mmse_net::{LrSchedule, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    GmiSweep,
    Scatter,
    ViterbiBer,
    LdpcBer,
    TrainNet,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::GmiSweep => "gmi-sweep",
            ExperimentKind::Scatter => "scatter",
            ExperimentKind::ViterbiBer => "viterbi-ber",
            ExperimentKind::LdpcBer => "ldpc-ber",
            ExperimentKind::TrainNet => "train-net",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gnnd,
    Cl,
    Mi,
    Ml,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Gnnd => "gnnd",
            Method::Cl => "cl",
            Method::Mi => "mi",
            Method::Ml => "ml",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReceiverMode {
    #[default]
    NoSic,
    Sic,
}

/// Where SIC gets the symbols of already-processed users in coded runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SicPrefix {
    /// Decoded, re-encoded and re-modulated codewords.
    #[default]
    Decoded,
    /// The transmitted symbols.
    Genie,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LlrScaleMode {
    #[default]
    Unit,
    ResidualVar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSettings {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "defaults::net_samples")]
    pub samples: usize,
    #[serde(default = "defaults::net_epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::schedule")]
    pub schedule: LrSchedule,
    /// Held-out samples for reporting.
    #[serde(default = "defaults::heldout")]
    pub heldout: usize,
}

impl Default for NetSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            samples: defaults::net_samples(),
            epochs: defaults::net_epochs(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            schedule: defaults::schedule(),
            heldout: defaults::heldout(),
        }
    }
}

impl NetSettings {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            samples: self.samples,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            schedule: self.schedule,
            ..TrainConfig::desk(seed)
        }
    }
}

mod defaults {
    use super::{LrSchedule, TrainConfig};

    pub fn constellation() -> String {
        "qpsk".into()
    }
    pub fn pilot_power() -> Vec<String> {
        vec!["perfect".into()]
    }
    pub fn draws() -> usize {
        50
    }
    pub fn min_errors() -> u64 {
        100
    }
    pub fn max_blocks() -> usize {
        20_000
    }
    pub fn info_bits() -> usize {
        200
    }
    pub fn residual_samples() -> usize {
        10_000
    }
    pub fn net_samples() -> usize {
        100_000
    }
    pub fn net_epochs() -> usize {
        20
    }
    pub fn batch_size() -> usize {
        TrainConfig::desk(0).batch_size
    }
    pub fn learning_rate() -> f64 {
        TrainConfig::desk(0).learning_rate
    }
    pub fn schedule() -> LrSchedule {
        TrainConfig::desk(0).schedule
    }
    pub fn heldout() -> usize {
        20_000
    }
}

/// One experiment. Total transmit power is 1, split equally across users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub users: usize,
    pub antennas: usize,
    /// `qpsk` or `16qam`.
    #[serde(default = "defaults::constellation")]
    pub constellation: String,
    pub snr_db: Vec<f64>,
    #[serde(default)]
    pub receiver: ReceiverMode,
    #[serde(default)]
    pub methods: Vec<Method>,
    /// `perfect` or multiples of the total power such as `"4P"`.
    #[serde(default = "defaults::pilot_power")]
    pub pilot_power: Vec<String>,
    /// Channel realizations (rate sweeps).
    #[serde(default = "defaults::draws")]
    pub draws: usize,
    /// Monte-Carlo samples per point (rates) or scatter points.
    pub samples: Option<usize>,
    /// BER: stop a point after this many bit errors...
    #[serde(default = "defaults::min_errors")]
    pub min_errors: u64,
    /// ...or after this many blocks, whichever comes first.
    #[serde(default = "defaults::max_blocks")]
    pub max_blocks: usize,
    /// Information bits per user per convolutional block.
    #[serde(default = "defaults::info_bits")]
    pub info_bits: usize,
    pub seed: u64,
    /// SIC decoding order (user indices); natural order when absent.
    pub order: Option<Vec<usize>>,
    #[serde(default)]
    pub sic_prefix: SicPrefix,
    #[serde(default)]
    pub llr_scale: LlrScaleMode,
    #[serde(default = "defaults::residual_samples")]
    pub residual_samples: usize,
    /// Target user for scatter and train-net.
    #[serde(default)]
    pub user: usize,
    #[serde(default)]
    pub mmse_net: NetSettings,
    pub output: Option<String>,
}

/// 1-based line of `offset` in `text`.
fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line on which `key` is assigned, or 1 if it does not appear.
fn key_line(text: &str, key: &str) -> usize {
    text.lines()
        .position(|l| {
            let t = l.trim_start();
            t.strip_prefix(key).is_some_and(|r| r.trim_start().starts_with('='))
        })
        .map_or(1, |i| i + 1)
}

impl ExperimentConfig {
    /// Parses and validates; errors carry the offending line.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            line: e.span().map_or(1, |s| line_at(text, s.start)),
            message: e.message().to_string(),
        })?;
        if let Err((key, message)) = cfg.check() {
            return Err(Error::Config {
                line: key_line(text, key),
                message,
            });
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(_, message)| Error::invalid(message))
    }

    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let bad = |key: &'static str, msg: String| Err((key, msg));
        if self.users == 0 {
            return bad("users", "users must be positive".into());
        }
        if self.antennas == 0 {
            return bad("antennas", "antennas must be positive".into());
        }
        if self.snr_db.is_empty() {
            return bad("snr_db", "snr grid must not be empty".into());
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return bad("snr_db", "snr values must be finite".into());
        }
        if let Err(e) = self.constellations() {
            return bad("constellation", e.to_string());
        }
        if self.pilot_power.is_empty() {
            return bad("pilot_power", "pilot power list must not be empty".into());
        }
        if let Err(e) = self.pilot_powers() {
            return bad("pilot_power", e.to_string());
        }
        if self.draws == 0 {
            return bad("draws", "draws must be positive".into());
        }
        if self.samples == Some(0) {
            return bad("samples", "samples must be positive".into());
        }
        if self.min_errors == 0 || self.max_blocks == 0 {
            let key = if self.min_errors == 0 { "min_errors" } else { "max_blocks" };
            return bad(key, "stopping-rule counts must be positive".into());
        }
        if self.info_bits == 0 {
            return bad("info_bits", "info_bits must be positive".into());
        }
        if self.residual_samples == 0 {
            return bad("residual_samples", "residual_samples must be positive".into());
        }
        if self.user >= self.users {
            return bad("user", format!("user {} out of range for {} users", self.user, self.users));
        }
        if let Some(order) = &self.order {
            let mut seen = vec![false; self.users];
            if order.len() != self.users || order.iter().any(|&u| u >= self.users || std::mem::replace(&mut seen[u], true)) {
                return bad("order", format!("order must be a permutation of 0..{}", self.users));
            }
        }
        let allowed: &[Method] = match self.kind {
            ExperimentKind::GmiSweep => &[Method::Gnnd, Method::Cl, Method::Mi],
            ExperimentKind::ViterbiBer | ExperimentKind::LdpcBer => &[Method::Gnnd, Method::Cl, Method::Ml],
            ExperimentKind::Scatter | ExperimentKind::TrainNet => &[],
        };
        if !allowed.is_empty() {
            if self.methods.is_empty() {
                return bad("methods", "method list must not be empty".into());
            }
            if let Some(m) = self.methods.iter().find(|m| !allowed.contains(m)) {
                return bad("methods", format!("method {:?} is not available for {}", m.as_str(), self.kind.as_str()));
            }
            let mut dedup = self.methods.clone();
            dedup.sort_by_key(|m| m.as_str());
            dedup.dedup();
            if dedup.len() != self.methods.len() {
                return bad("methods", "methods must not repeat".into());
            }
        }
        if self.kind == ExperimentKind::LdpcBer && self.receiver == ReceiverMode::Sic {
            return bad("receiver", "ldpc-ber runs without SIC".into());
        }
        if self.mmse_net.enabled || self.kind == ExperimentKind::TrainNet {
            if let Err(e) = self.mmse_net.train_config(self.seed).validate() {
                return bad("mmse_net", e.to_string());
            }
        }
        Ok(())
    }

    /// Per-user constellations at power `1 / users`.
    pub fn constellations(&self) -> Result<Vec<Constellation>> {
        let p = 1.0 / self.users as f64;
        let c = match self.constellation.to_ascii_lowercase().as_str() {
            "qpsk" => Constellation::qpsk(p)?,
            "16qam" | "qam16" => Constellation::qam16(p)?,
            other => return Err(Error::invalid(format!("unknown constellation {other:?}"))),
        };
        Ok(vec![c; self.users])
    }

    pub fn pilot_powers(&self) -> Result<Vec<PilotPower>> {
        self.pilot_power.iter().map(|s| PilotPower::parse(s, 1.0)).collect()
    }

    /// SIC order (natural when unset).
    pub fn sic_order(&self) -> Vec<usize> {
        self.order.clone().unwrap_or_else(|| (0..self.users).collect())
    }

    pub fn llr_scale_mode(&self) -> LlrScaleMode {
        self.llr_scale
    }

    /// Samples per rate point / scatter points, with the desk default.
    pub fn samples_or_default(&self) -> usize {
        self.samples.unwrap_or(match self.kind {
            ExperimentKind::Scatter => 2_000,
            _ => crate::inforate::DEFAULT_SAMPLES,
        })
    }

    /// Switches desk defaults to the larger offline configuration.
    pub fn apply_paper_scale(&mut self) {
        self.samples = Some(self.samples_or_default().max(1_000_000));
        self.max_blocks = self.max_blocks.max(200_000);
        let paper = TrainConfig::paper(self.seed);
        self.mmse_net.samples = paper.samples;
        self.mmse_net.epochs = paper.epochs;
        self.mmse_net.batch_size = paper.batch_size;
        self.mmse_net.learning_rate = paper.learning_rate;
        self.mmse_net.schedule = paper.schedule;
    }
}

/// Unit-scale placeholder kept for the residual-variance mode, whose value is
/// only known per block.
pub(crate) fn scale_for(mode: LlrScaleMode, residual: Option<f64>) -> LlrScale {
    match (mode, residual) {
        (LlrScaleMode::ResidualVar, Some(v)) => LlrScale::ResidualVar(v),
        _ => LlrScale::Unit,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "kind = \"gmi-sweep\"\nusers = 2\nantennas = 2\nsnr_db = [0, 10]\nmethods = [\"gnnd\", \"mi\"]\nseed = 7\n";

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_toml(BASE).unwrap();
        assert_eq!(c.kind, ExperimentKind::GmiSweep);
        assert_eq!(c.draws, 50);
        assert_eq!(c.min_errors, 100);
        assert_eq!(c.receiver, ReceiverMode::NoSic);
        assert_eq!(c.constellations().unwrap()[0].power(), 0.5);
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let text = format!("{BASE}bogus = 3\n");
        match ExperimentConfig::from_toml(&text) {
            Err(Error::Config { line, message }) => {
                assert_eq!(line, 7);
                assert!(message.contains("bogus"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_methods_rejected_on_their_line() {
        let text = BASE.replace("methods = [\"gnnd\", \"mi\"]", "methods = []");
        match ExperimentConfig::from_toml(&text) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_failures() {
        for (from, to, key_line) in [
            ("users = 2", "users = 0", 2),
            ("snr_db = [0, 10]", "snr_db = []", 4),
            ("methods = [\"gnnd\", \"mi\"]", "methods = [\"ml\"]", 5),
            ("methods = [\"gnnd\", \"mi\"]", "methods = [\"gnnd\", \"gnnd\"]", 5),
            ("kind = \"gmi-sweep\"", "kind = \"nope\"", 1),
            ("seed = 7", "seed = -1", 6),
        ] {
            let text = BASE.replace(from, to);
            match ExperimentConfig::from_toml(&text) {
                Err(Error::Config { line, .. }) => assert_eq!(line, key_line, "{to}"),
                other => panic!("{to}: {other:?}"),
            }
        }
        let missing_seed = BASE.replace("seed = 7\n", "");
        assert!(ExperimentConfig::from_toml(&missing_seed).is_err());
        let bad_order = format!("{BASE}order = [1, 1]\n");
        assert!(ExperimentConfig::from_toml(&bad_order).is_err());
        let bad_pilot = format!("{BASE}pilot_power = [\"xP\"]\n");
        assert!(ExperimentConfig::from_toml(&bad_pilot).is_err());
    }

    #[test]
    fn nested_net_table() {
        let text = format!("{BASE}[mmse_net]\nenabled = true\nepochs = 3\n");
        let c = ExperimentConfig::from_toml(&text).unwrap();
        assert!(c.mmse_net.enabled);
        assert_eq!(c.mmse_net.epochs, 3);
        assert_eq!(c.mmse_net.samples, 100_000);
        let bad = format!("{BASE}[mmse_net]\nwidth = 3\n");
        match ExperimentConfig::from_toml(&bad) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 8),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn paper_scale_raises_counts() {
        let mut c = ExperimentConfig::from_toml(BASE).unwrap();
        c.apply_paper_scale();
        assert_eq!(c.mmse_net.samples, 400_000);
        assert_eq!(c.mmse_net.epochs, 100);
        assert_eq!(c.mmse_net.batch_size, 2000);
        assert_eq!(c.mmse_net.schedule, LrSchedule::Constant);
        assert!(c.samples.unwrap() >= 1_000_000);
    }
}
