//! Hierarchical Gaussian data generation.
//!
//! Class means follow the taxonomy: every node's mean is its parent's mean
//! plus an isotropic Gaussian drift, so sibling classes end up closer to each
//! other than to unrelated classes. Observations add per-sample noise around
//! the leaf mean. All draws are keyed on `(seed, node, stream)` so output is
//! independent of traversal order and reproducible byte for byte.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::dataset::{FeatureDataset, FeatureGrid};
use crate::seeding::derive_seed;
use crate::taxonomy::{ConceptGraph, ConceptId};

#[derive(Error, Debug)]
pub enum SyntheticError {
    #[error("sigma values must be positive")]
    BadSigma,
    #[error("no leaf classes given")]
    NoLeafClasses,
    #[error("held-out class {0} is not among the leaf classes")]
    HeldOutNotLeaf(u32),
    #[error("held-out set covers all leaf classes; nothing remains for training")]
    AllLeavesHeldOut,
    #[error("concept id {0} is outside the graph")]
    UnknownConcept(u32),
}

/// Recipe for one synthetic world.
#[derive(Clone, Debug)]
pub struct SyntheticSpec<'a> {
    pub graph: &'a ConceptGraph,
    /// Classes that receive observations; normally the graph's leaves.
    pub leaf_classes: Vec<ConceptId>,
    pub feature_dim: usize,
    /// Std of the per-level mean drift.
    pub sigma_level: f64,
    /// Std of the per-observation noise.
    pub sigma_obs: f64,
    /// Training samples per non-held-out class. Validation gets a quarter of
    /// this (at least one), zero-shot test the full count per held-out class.
    pub samples_per_class: usize,
    pub held_out: Vec<ConceptId>,
    pub seed: u64,
}

pub struct SyntheticData {
    pub train: FeatureDataset,
    pub validation: FeatureDataset,
    pub zero_shot_test: FeatureDataset,
    /// Mean vector per concept, by id; the hierarchy's random walk output.
    pub means: Vec<Vec<f64>>,
}

const STREAM_MEANS: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_VALIDATION: u64 = 3;
const STREAM_TEST: u64 = 4;
const STREAM_GRID: u64 = 5;
const STREAM_CLASS_SAMPLE: u64 = 6;

/// Mean vectors for every concept: root at the origin, child mean = parent
/// mean + N(0, sigma_level² I). Multi-parent nodes walk from their
/// smallest-id parent.
pub fn class_means(
    graph: &ConceptGraph,
    feature_dim: usize,
    sigma_level: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut means: Vec<Vec<f64>> = vec![Vec::new(); graph.len()];
    means[0] = vec![0.0; feature_dim];
    for &v in graph.topo_order() {
        if v == ConceptId::ROOT {
            continue;
        }
        let parent = graph.parents(v)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_MEANS, v.0 as u64));
        let mean: Vec<f64> = means[parent.idx()]
            .iter()
            .map(|&m| {
                let drift: f64 = StandardNormal.sample(&mut rng);
                m + sigma_level * drift
            })
            .collect();
        means[v.idx()] = mean;
    }
    means
}

fn sample_class(
    ds: &mut FeatureDataset,
    class: ConceptId,
    mean: &[f64],
    sigma_obs: f64,
    count: usize,
    seed: u64,
    stream: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, class.0 as u64));
    let noise = Normal::new(0.0, sigma_obs).unwrap();
    let mut feature = vec![0.0; mean.len()];
    for _ in 0..count {
        for (slot, &m) in feature.iter_mut().zip(mean) {
            *slot = m + noise.sample(&mut rng);
        }
        ds.push(class, &feature).expect("dims fixed by construction");
    }
}

/// Generate train / validation / zero-shot splits for a synthetic world.
/// Held-out classes appear only in the zero-shot split.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData, SyntheticError> {
    if spec.sigma_level <= 0.0 || spec.sigma_obs <= 0.0 {
        return Err(SyntheticError::BadSigma);
    }
    if spec.leaf_classes.is_empty() {
        return Err(SyntheticError::NoLeafClasses);
    }
    for &c in spec.leaf_classes.iter().chain(&spec.held_out) {
        if c.idx() >= spec.graph.len() {
            return Err(SyntheticError::UnknownConcept(c.0));
        }
    }
    for &h in &spec.held_out {
        if !spec.leaf_classes.contains(&h) {
            return Err(SyntheticError::HeldOutNotLeaf(h.0));
        }
    }
    let training: Vec<ConceptId> = spec
        .leaf_classes
        .iter()
        .copied()
        .filter(|c| !spec.held_out.contains(c))
        .collect();
    if training.is_empty() {
        return Err(SyntheticError::AllLeavesHeldOut);
    }

    let means = class_means(spec.graph, spec.feature_dim, spec.sigma_level, spec.seed);
    let mut train = FeatureDataset::new(spec.feature_dim);
    let mut validation = FeatureDataset::new(spec.feature_dim);
    let mut zero_shot_test = FeatureDataset::new(spec.feature_dim);

    let val_count = (spec.samples_per_class / 4).max(1);
    for &c in &training {
        sample_class(
            &mut train,
            c,
            &means[c.idx()],
            spec.sigma_obs,
            spec.samples_per_class,
            spec.seed,
            STREAM_TRAIN,
        );
        sample_class(
            &mut validation,
            c,
            &means[c.idx()],
            spec.sigma_obs,
            val_count,
            spec.seed,
            STREAM_VALIDATION,
        );
    }
    for &c in &spec.held_out {
        sample_class(
            &mut zero_shot_test,
            c,
            &means[c.idx()],
            spec.sigma_obs,
            spec.samples_per_class,
            spec.seed,
            STREAM_TEST,
        );
    }

    Ok(SyntheticData {
        train,
        validation,
        zero_shot_test,
        means,
    })
}

/// Synthetic scene grid: square blocks of cells, each block drawn from one
/// random leaf class of the spec.
pub fn generate_grid(
    spec: &SyntheticSpec,
    height: usize,
    width: usize,
    block: usize,
) -> Result<FeatureGrid, SyntheticError> {
    if spec.sigma_level <= 0.0 || spec.sigma_obs <= 0.0 {
        return Err(SyntheticError::BadSigma);
    }
    if spec.leaf_classes.is_empty() {
        return Err(SyntheticError::NoLeafClasses);
    }
    let means = class_means(spec.graph, spec.feature_dim, spec.sigma_level, spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_GRID, 0));
    let noise = Normal::new(0.0, spec.sigma_obs).unwrap();
    let block = block.max(1);
    let mut grid = FeatureGrid::new(height, width, spec.feature_dim);
    let blocks_per_row = width.div_ceil(block);
    let blocks_per_col = height.div_ceil(block);
    let mut block_class = Vec::with_capacity(blocks_per_col * blocks_per_row);
    for _ in 0..blocks_per_col * blocks_per_row {
        block_class.push(spec.leaf_classes[rng.random_range(0..spec.leaf_classes.len())]);
    }
    let mut feature = vec![0.0; spec.feature_dim];
    for r in 0..height {
        for c in 0..width {
            let class = block_class[(r / block) * blocks_per_row + c / block];
            for (slot, &m) in feature.iter_mut().zip(&means[class.idx()]) {
                *slot = m + noise.sample(&mut rng);
            }
            grid.set_cell(r, c, class, &feature);
        }
    }
    Ok(grid)
}

/// Sample `count` classes by inverse-CDF over the class frequency
/// histogram, without replacement: frequent classes are proportionally more
/// likely to land in the sample. Drives the diversity experiment's
/// training-class selection.
pub fn sample_classes_by_frequency(
    ic: &crate::taxonomy::InformationContentTable,
    classes: &[ConceptId],
    count: usize,
    seed: u64,
) -> Vec<ConceptId> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_CLASS_SAMPLE, 0));
    let mut pool: Vec<(ConceptId, f64)> = classes
        .iter()
        .map(|&c| (c, ic.frequency(c).max(1e-12)))
        .collect();
    let mut picked = Vec::with_capacity(count);
    while picked.len() < count && !pool.is_empty() {
        let total: f64 = pool.iter().map(|(_, f)| f).sum();
        let mut u = rng.random::<f64>() * total;
        let mut idx = pool.len() - 1;
        for (i, (_, f)) in pool.iter().enumerate() {
            if u < *f {
                idx = i;
                break;
            }
            u -= f;
        }
        picked.push(pool.swap_remove(idx).0);
    }
    picked.sort_unstable();
    picked
}

/// Random recursive tree taxonomy with `n_nodes` concepts rooted at
/// "entity": each new node attaches to a uniformly random earlier node.
pub fn random_tree_edges(n_nodes: usize, seed: u64) -> Vec<(String, String)> {
    assert!(n_nodes >= 2, "a tree taxonomy needs at least two nodes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let name = |i: usize| {
        if i == 0 {
            "entity".to_string()
        } else {
            format!("c{i}")
        }
    };
    (1..n_nodes)
        .map(|i| (name(i), name(rng.random_range(0..i))))
        .collect()
}
