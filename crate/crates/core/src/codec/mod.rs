//! Channel codes and soft decoders driven by per-symbol metric tables.
//!
//! * [`conv`] – rate-1/n convolutional codes with a Viterbi decoder whose
//!   branch metric is any GNND / CL / ML table.
//! * [`ldpc`] – quasi-cyclic LDPC codes and sum-product decoding.
//! * [`llr`] – bit LLRs from metric tables.

pub mod conv;
pub mod ldpc;
pub mod llr;

pub use conv::{conv_encode, encode_symbols, viterbi, ConvCode};
pub use ldpc::{bp_decode, bp_decode_with, ldpc_build, BpOptions, BpResult, LdpcCode, QcBase};
pub use llr::{awgn_table, estimate_residual_var, llr_init, residual_var_exact, LlrScale, DEFAULT_LLR_CLAMP};
