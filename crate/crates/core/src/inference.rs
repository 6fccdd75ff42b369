//! Closed-set prediction, zero-shot thresholded prediction, threshold
//! calibration, and the baseline predictors.
//!
//! Zero-shot predictions accept every vocabulary concept scoring at or above
//! a cutoff and order them most-specific-first; the primary prediction is
//! the deepest accepted concept. When nothing qualifies the root is returned
//! as the most general possible answer, so a prediction always exists.

use std::collections::{BTreeMap, HashSet};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::FeatureDataset;
use crate::embedding::{score, EmbedError, EmbeddingTable, ScoreKind};
use crate::metrics::hierarchical_scores;
use crate::seeding::derive_seed;
use crate::taxonomy::{ConceptGraph, ConceptId};
use crate::training::{TrainConfig, TrainError, TrainedModel};

const STREAM_BASELINE_SHUFFLE: u64 = 0x30;

#[derive(Error, Debug)]
pub enum InferError {
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("no trained sibling head at concept {0}")]
    UntrainedHead(u32),
    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),
    #[error("dataset label {0} is outside the candidate set")]
    LabelOutsideCandidates(u32),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PredictionMode {
    ClosedSet,
    ZeroShot,
}

/// One sample's prediction. In zero-shot mode `accepted` is ordered by depth
/// descending then score descending, and `primary` is its first element; in
/// closed-set mode `accepted` holds exactly the argmax.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub primary: ConceptId,
    pub accepted: Vec<(ConceptId, f64)>,
    pub mode: PredictionMode,
}

/// TSV dump, one line per sample: `index<TAB>primary<TAB>name:score,...`.
pub fn predictions_tsv(graph: &ConceptGraph, predictions: &[Prediction]) -> String {
    let mut out = String::new();
    for (i, p) in predictions.iter().enumerate() {
        let accepted: Vec<String> = p
            .accepted
            .iter()
            .map(|(c, s)| format!("{}:{}", graph.name(*c), s))
            .collect();
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            i,
            graph.name(p.primary),
            accepted.join(",")
        ));
    }
    out
}

/// Score a concept against a pixel embedding; scoring failures (for example
/// the zero-vector root under cosine) rank as negative infinity.
fn concept_score(table: &EmbeddingTable, c: ConceptId, pixel: &[f64], kind: ScoreKind) -> f64 {
    score(table.get(c), pixel, kind).unwrap_or(f64::NEG_INFINITY)
}

/// Argmax of `S(f(c), g(feature))` over the candidates; ties break toward
/// the smallest id. Degenerate pixel embeddings propagate as errors.
pub fn classify_closed(
    model: &TrainedModel,
    feature: &[f64],
    candidates: &[ConceptId],
) -> Result<Prediction, InferError> {
    if candidates.is_empty() {
        return Err(InferError::EmptyCandidates);
    }
    let pixel = model.embedder.embed_feature(feature)?;
    let kind = model.config.image_score_kind;
    let mut best = candidates[0];
    let mut best_score = f64::NEG_INFINITY;
    for &c in candidates {
        let s = concept_score(&model.table, c, &pixel, kind);
        if s > best_score || (s == best_score && c < best) {
            best_score = s;
            best = c;
        }
    }
    Ok(Prediction {
        primary: best,
        accepted: vec![(best, best_score)],
        mode: PredictionMode::ClosedSet,
    })
}

/// Closed-set predictions for a whole dataset, evaluated in parallel with a
/// deterministic output order.
pub fn classify_closed_all(
    model: &TrainedModel,
    dataset: &FeatureDataset,
    candidates: &[ConceptId],
) -> Result<Vec<Prediction>, InferError> {
    (0..dataset.len())
        .into_par_iter()
        .map(|i| classify_closed(model, &dataset.feature_f64(i), candidates))
        .collect()
}

/// Vocabulary concepts sorted into zero-shot acceptance order for one pixel:
/// depth descending, then score descending, then id.
fn ranked_vocab_scores(
    model: &TrainedModel,
    pixel: Option<&[f64]>,
    vocabulary: &[ConceptId],
) -> Vec<(ConceptId, f64)> {
    let kind = model.config.image_score_kind;
    let mut scored: Vec<(ConceptId, f64)> = vocabulary
        .iter()
        .map(|&c| {
            let s = match pixel {
                Some(pixel) => concept_score(&model.table, c, pixel, kind),
                None => f64::NEG_INFINITY,
            };
            (c, s)
        })
        .collect();
    scored.sort_by(|a, b| {
        let da = model.graph.depth(a.0);
        let db = model.graph.depth(b.0);
        db.cmp(&da)
            .then(b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.0.cmp(&b.0))
    });
    scored
}

fn zero_shot_from_ranked(
    model: &TrainedModel,
    ranked: &[(ConceptId, f64)],
    pixel: Option<&[f64]>,
    cutoff: f64,
) -> Prediction {
    let accepted: Vec<(ConceptId, f64)> = ranked
        .iter()
        .filter(|(_, s)| *s >= cutoff)
        .copied()
        .collect();
    if accepted.is_empty() {
        let root = model.graph.root();
        let root_score = match pixel {
            Some(pixel) => concept_score(&model.table, root, pixel, model.config.image_score_kind),
            None => f64::NEG_INFINITY,
        };
        return Prediction {
            primary: root,
            accepted: vec![(root, root_score)],
            mode: PredictionMode::ZeroShot,
        };
    }
    Prediction {
        primary: accepted[0].0,
        accepted,
        mode: PredictionMode::ZeroShot,
    }
}

/// Accept every vocabulary concept scoring at or above `cutoff`, ordered
/// depth-first; fall back to the root when nothing qualifies. A degenerate
/// pixel embedding yields the root fallback rather than an error.
pub fn predict_zero_shot(
    model: &TrainedModel,
    feature: &[f64],
    vocabulary: &[ConceptId],
    cutoff: f64,
) -> Result<Prediction, InferError> {
    let pixel = match model.embedder.embed_feature(feature) {
        Ok(p) => Some(p),
        Err(EmbedError::DegenerateEmbedding) => None,
        Err(e) => return Err(e.into()),
    };
    let ranked = ranked_vocab_scores(model, pixel.as_deref(), vocabulary);
    Ok(zero_shot_from_ranked(model, &ranked, pixel.as_deref(), cutoff))
}

/// Zero-shot predictions for a whole dataset, in parallel.
pub fn predict_zero_shot_all(
    model: &TrainedModel,
    dataset: &FeatureDataset,
    vocabulary: &[ConceptId],
    cutoff: f64,
) -> Result<Vec<Prediction>, InferError> {
    (0..dataset.len())
        .into_par_iter()
        .map(|i| predict_zero_shot(model, &dataset.feature_f64(i), vocabulary, cutoff))
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct Calibration {
    pub cutoff: f64,
    pub mean_hf: f64,
}

pub const CALIBRATION_GRID_STEPS: usize = 50;

/// Core of the calibration: grid-search the cutoff over the empirical score
/// range, maximizing the mean hierarchical F-score of the primary
/// prediction. The maximum typically forms a plateau; the midpoint of the
/// longest maximal run is returned, which keeps the cutoff away from the
/// cliff edges on either side.
fn calibrate_from_ranked(
    model: &TrainedModel,
    samples: &[(ConceptId, Vec<(ConceptId, f64)>)],
    steps: usize,
) -> Calibration {
    let finite: Vec<f64> = samples
        .iter()
        .flat_map(|(_, ranked)| ranked.iter().map(|(_, s)| *s))
        .filter(|s| s.is_finite())
        .collect();
    let (lo, hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        });
    let (lo, hi) = if finite.is_empty() { (0.0, 0.0) } else { (lo, hi) };

    let steps = steps.max(1);
    let grid: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let scores: Vec<f64> = grid
        .iter()
        .map(|&cutoff| {
            let mut hf = 0.0;
            for (gt, ranked) in samples {
                let pred = zero_shot_from_ranked(model, ranked, None, cutoff);
                hf += hierarchical_scores(&model.graph, *gt, pred.primary).2;
            }
            hf / samples.len() as f64
        })
        .collect();
    let best_hf = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    // Longest contiguous run of grid points achieving the maximum; the
    // trailing `false` closes a run that reaches the last grid point.
    let mut best_run = (0usize, 0usize);
    let mut run_start = None;
    let at_max_flags = scores
        .iter()
        .map(|&s| s >= best_hf - 1e-12)
        .chain(std::iter::once(false));
    for (i, at_max) in at_max_flags.enumerate() {
        match (run_start, at_max) {
            (None, true) => run_start = Some(i),
            (Some(s), false) => {
                if i - s > best_run.1 - best_run.0 {
                    best_run = (s, i);
                }
                run_start = None;
            }
            _ => {}
        }
    }
    let mid = (best_run.0 + best_run.1 - 1) / 2;
    Calibration {
        cutoff: grid[mid],
        mean_hf: scores[mid],
    }
}

/// Find the zero-shot cutoff on a labeled validation set by grid search
/// (50 steps over the empirical score range), maximizing mean hierarchical
/// F-score of the primary predictions.
pub fn calibrate_threshold(
    model: &TrainedModel,
    validation: &FeatureDataset,
    vocabulary: &[ConceptId],
) -> Result<Calibration, InferError> {
    if validation.is_empty() {
        return Err(InferError::EmptyValidation);
    }
    let samples: Vec<(ConceptId, Vec<(ConceptId, f64)>)> = (0..validation.len())
        .into_par_iter()
        .map(|i| {
            let pixel = model.embedder.embed_feature(&validation.feature_f64(i)).ok();
            let ranked = ranked_vocab_scores(model, pixel.as_deref(), vocabulary);
            (validation.label(i), ranked)
        })
        .collect();
    Ok(calibrate_from_ranked(model, &samples, CALIBRATION_GRID_STEPS))
}

/// Multinomial logistic regression over a fixed candidate set.
#[derive(Clone, Debug)]
pub struct SoftmaxBaseline {
    dim: usize,
    candidates: Vec<ConceptId>,
    /// Row-major `dim × |candidates|` weights.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl SoftmaxBaseline {
    pub fn zeroed(dim: usize, candidates: Vec<ConceptId>) -> Self {
        let classes = candidates.len();
        SoftmaxBaseline {
            dim,
            candidates,
            weights: vec![0.0; dim * classes],
            bias: vec![0.0; classes],
        }
    }

    pub fn candidates(&self) -> &[ConceptId] {
        &self.candidates
    }

    fn logits(&self, feature: &[f64]) -> Vec<f64> {
        let classes = self.candidates.len();
        let mut logits = self.bias.clone();
        for (d, &x) in feature.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (c, logit) in logits.iter_mut().enumerate() {
                *logit += self.weights[d * classes + c] * x;
            }
        }
        logits
    }

    /// Class probabilities; they sum to one.
    pub fn probabilities(&self, feature: &[f64]) -> Result<Vec<f64>, InferError> {
        if feature.len() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dim,
                got: feature.len(),
            }
            .into());
        }
        Ok(stable_softmax(&self.logits(feature)))
    }

    /// Argmax class as a closed-set prediction; ties break to smallest id.
    pub fn predict(&self, feature: &[f64]) -> Result<Prediction, InferError> {
        let probs = self.probabilities(feature)?;
        let mut best = 0usize;
        for (c, &p) in probs.iter().enumerate() {
            if p > probs[best] || (p == probs[best] && self.candidates[c] < self.candidates[best])
            {
                best = c;
            }
        }
        Ok(Prediction {
            primary: self.candidates[best],
            accepted: vec![(self.candidates[best], probs[best])],
            mode: PredictionMode::ClosedSet,
        })
    }
}

fn stable_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Train the softmax baseline with mini-batch Adam cross-entropy.
pub fn train_softmax_baseline(
    dataset: &FeatureDataset,
    candidates: &[ConceptId],
    config: &TrainConfig,
) -> Result<SoftmaxBaseline, InferError> {
    if candidates.is_empty() {
        return Err(InferError::EmptyCandidates);
    }
    let class_of: BTreeMap<ConceptId, usize> = candidates
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    for &l in dataset.labels() {
        if !class_of.contains_key(&l) {
            return Err(InferError::LabelOutsideCandidates(l.0));
        }
    }
    let classes = candidates.len();
    let dim = dataset.dim();
    let mut model = SoftmaxBaseline::zeroed(dim, candidates.to_vec());

    // One flat parameter block: weights then bias.
    let n_params = dim * classes + classes;
    let mut adam = crate::training::Adam::new(config.lr, n_params);
    let mut grad = vec![0.0; n_params];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut feature = Vec::with_capacity(dim);

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            STREAM_BASELINE_SHUFFLE,
            epoch as u64,
        ));
        order.shuffle(&mut rng);
        let steps = dataset.len().div_ceil(config.batch_size).max(1);
        for step in 0..steps {
            let lo = (step * dataset.len()) / steps;
            let hi = ((step + 1) * dataset.len()) / steps;
            if lo == hi {
                continue;
            }
            grad.fill(0.0);
            for &i in &order[lo..hi] {
                dataset.feature_into(i, &mut feature);
                let probs = stable_softmax(&model.logits(&feature));
                let y = class_of[&dataset.label(i)];
                for c in 0..classes {
                    let d = probs[c] - if c == y { 1.0 } else { 0.0 };
                    for (dd, &x) in feature.iter().enumerate() {
                        grad[dd * classes + c] += d * x;
                    }
                    grad[dim * classes + c] += d;
                }
            }
            let mut params: Vec<f64> = model
                .weights
                .iter()
                .chain(model.bias.iter())
                .copied()
                .collect();
            adam.step(&mut params, &grad)?;
            model.weights.copy_from_slice(&params[..dim * classes]);
            model.bias.copy_from_slice(&params[dim * classes..]);
        }
    }
    Ok(model)
}

/// One sibling softmax head: conditional distribution over a parent's
/// children given a feature vector.
#[derive(Clone, Debug)]
pub struct SiblingHead {
    pub children: Vec<ConceptId>,
    /// Row-major `dim × |children|` weights.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl SiblingHead {
    fn zeroed(dim: usize, children: Vec<ConceptId>) -> Self {
        let n = children.len();
        SiblingHead {
            children,
            weights: vec![0.0; dim * n],
            bias: vec![0.0; n],
        }
    }

    /// Conditional probabilities over this head's children.
    pub fn conditionals(&self, feature: &[f64]) -> Vec<f64> {
        let n = self.children.len();
        let mut logits = self.bias.clone();
        for (d, &x) in feature.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (c, logit) in logits.iter_mut().enumerate() {
                *logit += self.weights[d * n + c] * x;
            }
        }
        stable_softmax(&logits)
    }
}

/// Hierarchical classifier: softmax only among siblings, absolute
/// probabilities multiplied along root paths (max over paths in a DAG).
#[derive(Clone, Debug)]
pub struct ConditionalSoftmax {
    pub dim: usize,
    pub heads: BTreeMap<ConceptId, SiblingHead>,
}

impl ConditionalSoftmax {
    /// Absolute probability per concept: root 1, otherwise the best parent's
    /// absolute probability times the conditional of this node given it.
    pub fn absolute_probabilities(
        &self,
        graph: &ConceptGraph,
        feature: &[f64],
    ) -> Result<Vec<f64>, InferError> {
        let mut conds: BTreeMap<ConceptId, Vec<f64>> = BTreeMap::new();
        for (&parent, head) in &self.heads {
            conds.insert(parent, head.conditionals(feature));
        }
        let mut prob = vec![0.0; graph.len()];
        prob[0] = 1.0;
        for &v in graph.topo_order() {
            if v == ConceptId::ROOT {
                continue;
            }
            let mut best = 0.0f64;
            for &p in graph.parents(v) {
                let cond = if graph.children(p).len() == 1 {
                    1.0
                } else {
                    let head = self.heads.get(&p).ok_or(InferError::UntrainedHead(p.0))?;
                    let idx = head
                        .children
                        .iter()
                        .position(|&c| c == v)
                        .ok_or(InferError::UntrainedHead(p.0))?;
                    conds[&p][idx]
                };
                best = best.max(prob[p.idx()] * cond);
            }
            prob[v.idx()] = best;
        }
        Ok(prob)
    }

    /// Argmax absolute probability over the candidates.
    pub fn predict(
        &self,
        graph: &ConceptGraph,
        feature: &[f64],
        candidates: &[ConceptId],
    ) -> Result<Prediction, InferError> {
        if candidates.is_empty() {
            return Err(InferError::EmptyCandidates);
        }
        let prob = self.absolute_probabilities(graph, feature)?;
        let mut best = candidates[0];
        for &c in candidates {
            if prob[c.idx()] > prob[best.idx()] || (prob[c.idx()] == prob[best.idx()] && c < best)
            {
                best = c;
            }
        }
        Ok(Prediction {
            primary: best,
            accepted: vec![(best, prob[best.idx()])],
            mode: PredictionMode::ClosedSet,
        })
    }
}

/// Train sibling heads for every internal node with at least two children.
/// Each sample contributes one example to the head of each ancestor whose
/// child leads toward the sample's label.
pub fn train_conditional_softmax(
    graph: &ConceptGraph,
    dataset: &FeatureDataset,
    config: &TrainConfig,
) -> Result<ConditionalSoftmax, InferError> {
    let dim = dataset.dim();
    let mut heads: BTreeMap<ConceptId, SiblingHead> = BTreeMap::new();
    for v in graph.ids() {
        if graph.children(v).len() >= 2 {
            heads.insert(v, SiblingHead::zeroed(dim, graph.children(v).to_vec()));
        }
    }
    // Per-head training examples: (sample index, child class index).
    let mut examples: BTreeMap<ConceptId, Vec<(usize, usize)>> = BTreeMap::new();
    for i in 0..dataset.len() {
        let label = dataset.label(i);
        for &a in graph.ancestors(label) {
            if a == label || !heads.contains_key(&a) {
                continue;
            }
            let head = &heads[&a];
            for (ci, &child) in head.children.iter().enumerate() {
                if graph.is_ancestor(child, label) {
                    examples.entry(a).or_default().push((i, ci));
                }
            }
        }
    }

    let mut feature = Vec::with_capacity(dim);
    for (&parent, head) in heads.iter_mut() {
        let Some(rows) = examples.get(&parent) else {
            continue;
        };
        let classes = head.children.len();
        let n_params = dim * classes + classes;
        let mut adam = crate::training::Adam::new(config.lr, n_params);
        let mut grad = vec![0.0; n_params];
        let mut order: Vec<usize> = (0..rows.len()).collect();
        for epoch in 0..config.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                config.seed ^ parent.0 as u64,
                STREAM_BASELINE_SHUFFLE,
                epoch as u64,
            ));
            order.shuffle(&mut rng);
            let steps = rows.len().div_ceil(config.batch_size).max(1);
            for step in 0..steps {
                let lo = (step * rows.len()) / steps;
                let hi = ((step + 1) * rows.len()) / steps;
                if lo == hi {
                    continue;
                }
                grad.fill(0.0);
                for &oi in &order[lo..hi] {
                    let (i, y) = rows[oi];
                    dataset.feature_into(i, &mut feature);
                    let probs = head.conditionals(&feature);
                    for c in 0..classes {
                        let d = probs[c] - if c == y { 1.0 } else { 0.0 };
                        for (dd, &x) in feature.iter().enumerate() {
                            grad[dd * classes + c] += d * x;
                        }
                        grad[dim * classes + c] += d;
                    }
                }
                let mut params: Vec<f64> = head
                    .weights
                    .iter()
                    .chain(head.bias.iter())
                    .copied()
                    .collect();
                adam.step(&mut params, &grad)?;
                head.weights.copy_from_slice(&params[..dim * classes]);
                head.bias.copy_from_slice(&params[dim * classes..]);
            }
        }
    }
    Ok(ConditionalSoftmax { dim, heads })
}

/// Convex combination of candidate embeddings under a probability vector.
/// The result feeds nearest-concept retrieval for zero-shot prediction.
pub fn convex_combination_embed(
    probabilities: &[f64],
    candidates: &[ConceptId],
    table: &EmbeddingTable,
) -> Result<Vec<f64>, InferError> {
    if probabilities.len() != candidates.len() {
        return Err(InferError::InvalidProbabilities(format!(
            "{} probabilities for {} candidates",
            probabilities.len(),
            candidates.len()
        )));
    }
    if probabilities.iter().any(|&p| p < 0.0) {
        return Err(InferError::InvalidProbabilities("negative entry".into()));
    }
    let sum: f64 = probabilities.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(InferError::InvalidProbabilities(format!("sum {sum} != 1")));
    }
    let mut v = vec![0.0; table.dim()];
    for (&p, &c) in probabilities.iter().zip(candidates) {
        for (slot, &x) in v.iter_mut().zip(table.get(c)) {
            *slot += p * x;
        }
    }
    Ok(v)
}

/// Distinct candidate set check used by evaluation drivers.
pub fn require_subset(
    labels: &[ConceptId],
    candidates: &[ConceptId],
) -> Result<(), InferError> {
    let set: HashSet<ConceptId> = candidates.iter().copied().collect();
    for &l in labels {
        if !set.contains(&l) {
            return Err(InferError::LabelOutsideCandidates(l.0));
        }
    }
    Ok(())
}
