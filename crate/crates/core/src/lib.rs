//! Automated patellofemoral osteoarthritis (PFOA) detection from lateral knee
//! radiographs.
//!
//! The crate is organised along the pipeline:
//!
//! * [`datamodel`]: knee records, the radiographic PFOA rule, manifests.
//! * [`imaging`]: intensity normalisation, resampling, orientation, cropping.
//! * [`roi`]: confidence-gated patellar region selection and a sliding-window
//!   stand-in detector.
//! * [`neuralnet`]: a small CNN with exact backward passes and SGD training.
//! * [`gbm`]: gradient-boosted trees for the clinical reference models,
//!   with exact TreeSHAP attributions.
//! * [`evalstats`]: subject-wise stratified folds, ROC/PR metrics, bootstrap
//!   confidence intervals, DeLong's test and subgroup reports.
//! * [`synth`]: a deterministic synthetic cohort and phantom radiographs.
//! * [`pipeline`]: the end-to-end commands driven by the `pfoa` binary.

pub mod datamodel;
pub mod error;
pub mod evalstats;
pub mod gbm;
pub mod imaging;
pub mod neuralnet;
pub mod pipeline;
pub mod rng;
pub mod roi;
pub mod synth;

pub use error::{Error, Result};
