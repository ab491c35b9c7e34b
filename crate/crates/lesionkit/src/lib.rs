//! Volumetric lesion classification toolkit.
//!
//! The crate covers the full desk-scale pipeline: loading and resampling
//! multiparametric volumes into a common 1 mm world frame, refining lesion
//! centers on DWI, slicing multi-view 32x32x3 training samples, training a
//! small convolutional network from scratch, extracting GLCM radiomics
//! features for a boosted-tree baseline, and blending everything with greedy
//! ensemble selection. Every stage is deterministic under a fixed seed.

pub mod augment;
pub mod ensemble;
pub mod gbm;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod radiomics;
pub mod runcfg;
pub mod volgrid;
pub mod xmasnet;

pub use volgrid::{CaseBundle, Finding, Modality, Volume};
