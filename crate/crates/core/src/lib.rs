//! Joint embeddings of taxonomy concepts and image-derived feature vectors.
//!
//! The crate builds a concept DAG from hypernym edges, learns a nonnegative
//! order-embedding space in which ancestors sit coordinatewise below their
//! descendants, maps feature vectors into the same space through a trainable
//! affine head, and evaluates closed-set and open-vocabulary predictions with
//! flat and hierarchical metrics.
//!
//! Modules:
//! - [`taxonomy`]: concept graph construction, ancestry, LCA, information content
//! - [`embedding`]: scoring functions, losses with analytic gradients, the pixel embedder
//! - [`training`]: pair generation, Adam, concept pretraining, joint two-stream training
//! - [`inference`]: closed-set / zero-shot prediction, threshold calibration, baselines
//! - [`metrics`]: flat segmentation metrics and hierarchical open-vocabulary metrics
//! - [`conceptops`]: concept search over feature grids, min/max synthesis, retrieval
//! - [`dataset`]: labeled feature sets / grids and their binary file formats
//! - [`synthetic`]: hierarchical Gaussian data generation for benchmarks

pub mod conceptops;
pub mod dataset;
pub mod embedding;
pub mod inference;
pub mod metrics;
mod seeding;
pub mod synthetic;
pub mod taxonomy;
pub mod training;

pub use taxonomy::{ConceptGraph, ConceptId, InformationContentTable};
