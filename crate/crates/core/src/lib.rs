//! Place recognition re-ranking by multi-scale geometric verification and
//! keypoint-free coarse-to-fine point-cloud registration.
//!
//! The pipeline runs `pointcloud` → `octree` → `descriptors` → `retrieval`
//! → `msgv` → `registration`; `harness` ties it together for benchmarks.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod descriptors;
pub mod error;
pub mod harness;
pub mod morton;
pub mod msgv;
pub mod octree;
pub mod pointcloud;
pub mod registration;
pub mod retrieval;

pub use error::{Error, Result};
