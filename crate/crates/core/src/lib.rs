//! Downlink cell-free massive-MIMO FBMC/OQAM link simulation with
//! asynchronous reception.
//!
//! The crate covers the whole chain: deployment geometry and time offsets,
//! tapped-delay-line channels, the PHYDYAS filter bank, multi-tap precoders
//! with phase compensation on a multiple-interpolation transmitter, the
//! per-realization SINR bookkeeping, closed-form expected-power matrices for
//! MRC and ZF, a CP-OFDM baseline and Monte Carlo experiment drivers.

pub mod channel;
pub mod closedform;
pub mod error;
pub mod filterbank;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod linkmetrics;
pub mod ofdm;
pub mod precoder;
pub mod qam;
pub mod rng;
pub mod selftest;

pub use error::{Error, Result};
pub use num_complex::Complex64;
