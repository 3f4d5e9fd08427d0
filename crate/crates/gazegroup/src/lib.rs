//! Desk-scale detection of shared-attention groups in synthetic gaze scenes.
//!
//! The crate is organized bottom-up: a small reverse-mode autodiff tape
//! (`autodiff`), heatmap grid utilities (`grid`), a procedural scene
//! generator (`scene`), the person/scene attention network (`model`), the
//! learnable group-query head (`groups`), membership-weighted heatmap
//! aggregation with one refinement round (`pipeline`), Hungarian-matched
//! training losses (`assignment`, `training`), the dual-criteria average
//! precision protocol plus clustering baselines (`metrics`, `baselines`),
//! and the experiment harness behind the CLI (`experiment`, `plot`).

pub mod assignment;
pub mod autodiff;
pub mod baselines;
pub mod experiment;
pub mod grid;
pub mod groups;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod plot;
pub mod scene;
pub mod training;
