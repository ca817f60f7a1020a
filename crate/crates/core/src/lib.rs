//! Generalized nearest neighbor decoding (GNND) for finite input constellations.
//!
//! The crate is organised bottom-up:
//!
//! * [`constellation`] – finite alphabets, bit labelings, modulation.
//! * [`channel`] – multiuser uplink realizations, transmission and pilot-based estimation.
//! * [`posterior`] – exact conditional moments by enumeration over the joint alphabet.
//! * [`gnnd`] – decoding fronts (GNND, channel linearization, ML) and their metric tables.
//! * [`inforate`] – Monte-Carlo GMI / mutual information / KL-gap estimators.
//! * [`codec`] – convolutional + Viterbi and quasi-cyclic LDPC + belief propagation.
//! * [`mmse_net`] – a small MLP approximating the conditional-mean operator.
//! * [`harness`] – config-driven experiments producing CSV output.

pub mod channel;
pub mod codec;
pub mod constellation;
mod error;
mod kernels;
pub mod gnnd;
pub mod harness;
pub mod inforate;
pub mod mmse_net;
pub mod posterior;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use num_complex::Complex64;

/// Library version string written into every output header.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Converts an SNR in dB to the linear power ratio.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}
