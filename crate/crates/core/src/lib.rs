//! Privacy-aware learned joint source-channel coding.
//!
//! An encoder splits every image codeword into a public part `y_t` and a
//! private part `y_s`. Training makes `y_s` carry the private attribute and
//! makes `y_t` statistically independent of `y_s`; at deployment only
//! `concat[y_t, 0]` is transmitted, so an eavesdropper at any SNR sees no
//! private information. The crate also contains an adversarially trained
//! baseline and the attack/evaluation harness used to compare the two.

pub mod attack;
pub mod channel;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod selftest;
pub mod training;

pub use error::{Error, Result};

/// Version string embedded in every artifact.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// The guide's chapters, compiled so their code listings run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/channel.md")]
    mod channel {}
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
}
