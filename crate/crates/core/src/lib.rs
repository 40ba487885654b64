//! Data-driven synthesis of polynomial state-feedback controllers with
//! input-to-state stability certificates.
//!
//! The pipeline runs from noisy samples of an unknown control-affine
//! polynomial system to a matrix-ellipsoid set of consistent models, then
//! to sum-of-squares programs whose solutions are a controller and an
//! ISS-Lyapunov function valid for every model in that set.

extern crate openblas_src;

pub mod benchmark;
pub mod consistency;
pub mod data;
pub mod experiment;
pub mod poly;
pub mod sdp;
pub mod sos;
pub mod synth;
pub mod verify;

mod serde_mat;

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
