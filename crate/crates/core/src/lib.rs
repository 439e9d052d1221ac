//! Correspondence-based 3D registration that stays correct under extreme
//! outlier rates, with optional optimality certificates for the rotation.
//!
//! The estimate is decoupled: scale from length ratios, rotation from
//! pairwise differences, translation last. See [`pipeline::register`].

pub mod bench;
pub mod certifier;
pub mod clique;
pub mod error;
pub mod geometry;
pub mod invariants;
pub mod pipeline;
pub mod ply;
pub mod ransac;
pub mod rotation;
pub mod scalar_tls;
pub mod synth;

pub use error::{RegError, Result};
pub use geometry::{CorrespondenceSet, RigidTransform, TlsConfig, UnitQuaternion, Vec3};
