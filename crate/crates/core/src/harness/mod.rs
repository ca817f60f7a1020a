//! Config-driven experiments producing CSV output.
//!
//! * [`config`] – the TOML experiment description.
//! * [`sweep`] – rate sweeps and scattergrams.
//! * [`ber`] – Viterbi and LDPC bit-error-rate runs, SIC assembly.
//! * [`output`] – CSV with a `# ` metadata header.
//! * [`net`] – stand-alone training of the conditional-mean network.

pub mod ber;
pub mod config;
pub mod net;
pub mod output;
pub mod sweep;

pub use ber::{required_snr, run_ldpc_ber, run_viterbi_ber, sic_receiver, BerRow, BerSweep};
pub use config::{ExperimentConfig, ExperimentKind, Method, ReceiverMode};
pub use net::{run_train_net, NetRun};
pub use output::{csv_string, write_csv, Metadata};
pub use sweep::{run_gmi_sweep, run_scatter, RateRow, RateSummaryRow, RateSweep, Scatter, ScatterRow};
