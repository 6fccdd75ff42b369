//! Embedding storage, scoring functions, loss functions and their analytic
//! gradients.
//!
//! Concept vectors live in the nonnegative orthant; the root concept is
//! anchored at the origin so that generality decreases with distance from it.
//! The hypernym score `-‖max(0, x−y)‖_p^p` is zero exactly when `x ≤ y`
//! coordinatewise, which makes it an order score: `x` scores as a hypernym
//! of `y` when its coordinates all sit below `y`'s.

use std::collections::HashMap;

use thiserror::Error;

use crate::taxonomy::{ConceptGraph, ConceptId};

#[derive(Error, Debug)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cosine score undefined for a zero vector")]
    ZeroVectorCosine,
    #[error("degenerate embedding: rectified output is all zero")]
    DegenerateEmbedding,
    #[error("image loss requires at least one negative")]
    EmptyNegatives,
    #[error("bad embedding dump: {0}")]
    BadDump(String),
}

/// Similarity score between two embedding vectors.
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum ScoreKind {
    /// `−‖x−y‖_p^p`, a symmetric distance score.
    Lp { p: f64 },
    /// Normalized cosine similarity.
    Cosine,
    /// Raw dot product; the unnormalized cosine variant.
    Dot,
    /// `−‖max(0, x−y)‖_p^p`; zero iff `x ≤ y` coordinatewise, asymmetric.
    Hyper { p: f64 },
}

impl ScoreKind {
    pub fn l2() -> Self {
        ScoreKind::Lp { p: 2.0 }
    }

    pub fn hyper2() -> Self {
        ScoreKind::Hyper { p: 2.0 }
    }

    pub fn token(&self) -> &'static str {
        match self {
            ScoreKind::Lp { .. } => "l2",
            ScoreKind::Cosine => "cosine",
            ScoreKind::Dot => "dot",
            ScoreKind::Hyper { .. } => "hyper",
        }
    }
}

impl std::str::FromStr for ScoreKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "l2" => Ok(ScoreKind::l2()),
            "cosine" => Ok(ScoreKind::Cosine),
            "dot" => Ok(ScoreKind::Dot),
            "hyper" => Ok(ScoreKind::hyper2()),
            other => Err(format!("unknown score kind {other:?} (expected l2|cosine|dot|hyper)")),
        }
    }
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<(), EmbedError> {
    if x.len() != y.len() {
        return Err(EmbedError::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(())
}

#[inline]
fn pow_abs(d: f64, p: f64) -> f64 {
    if p == 2.0 {
        d * d
    } else {
        d.abs().powf(p)
    }
}

#[inline]
fn dpow(d: f64, p: f64) -> f64 {
    // d/dd |d|^p = p |d|^(p-1) sign(d)
    if p == 2.0 {
        2.0 * d
    } else {
        p * d.abs().powf(p - 1.0) * d.signum()
    }
}

/// Evaluate `S(x, y)` under the given scoring kind.
pub fn score(x: &[f64], y: &[f64], kind: ScoreKind) -> Result<f64, EmbedError> {
    check_dims(x, y)?;
    match kind {
        ScoreKind::Lp { p } => Ok(-x
            .iter()
            .zip(y)
            .map(|(a, b)| pow_abs(a - b, p))
            .sum::<f64>()),
        ScoreKind::Dot => Ok(x.iter().zip(y).map(|(a, b)| a * b).sum()),
        ScoreKind::Cosine => {
            let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nx == 0.0 || ny == 0.0 {
                return Err(EmbedError::ZeroVectorCosine);
            }
            Ok(dot / (nx * ny))
        }
        ScoreKind::Hyper { p } => Ok(-x
            .iter()
            .zip(y)
            .map(|(a, b)| pow_abs((a - b).max(0.0), p))
            .sum::<f64>()),
    }
}

/// Score plus gradients with respect to both arguments.
pub fn score_with_grad(
    x: &[f64],
    y: &[f64],
    kind: ScoreKind,
) -> Result<(f64, Vec<f64>, Vec<f64>), EmbedError> {
    check_dims(x, y)?;
    let n = x.len();
    let mut gx = vec![0.0; n];
    let mut gy = vec![0.0; n];
    let s = match kind {
        ScoreKind::Lp { p } => {
            let mut s = 0.0;
            for i in 0..n {
                let d = x[i] - y[i];
                s -= pow_abs(d, p);
                let g = dpow(d, p);
                gx[i] = -g;
                gy[i] = g;
            }
            s
        }
        ScoreKind::Dot => {
            gx.copy_from_slice(y);
            gy.copy_from_slice(x);
            x.iter().zip(y).map(|(a, b)| a * b).sum()
        }
        ScoreKind::Cosine => {
            let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nx == 0.0 || ny == 0.0 {
                return Err(EmbedError::ZeroVectorCosine);
            }
            let c = dot / (nx * ny);
            for i in 0..n {
                gx[i] = y[i] / (nx * ny) - c * x[i] / (nx * nx);
                gy[i] = x[i] / (nx * ny) - c * y[i] / (ny * ny);
            }
            c
        }
        ScoreKind::Hyper { p } => {
            let mut s = 0.0;
            for i in 0..n {
                let m = (x[i] - y[i]).max(0.0);
                if m > 0.0 {
                    s -= pow_abs(m, p);
                    let g = dpow(m, p);
                    gx[i] = -g;
                    gy[i] = g;
                }
            }
            s
        }
    };
    Ok((s, gx, gy))
}

/// Max-margin hypernym loss for one concept pair with exact subgradients.
///
/// Positive pairs (`u` an ancestor of `v`) are pulled into order by
/// `−S_hyper(fu, fv)`; negative pairs are pushed `alpha` apart through the
/// hinge `max(0, alpha + S_hyper(fu, fv))`. Flat sides of the hinge and of
/// the coordinate rectifier contribute subgradient zero.
pub struct ConceptLoss {
    pub loss: f64,
    pub grad_u: Vec<f64>,
    pub grad_v: Vec<f64>,
}

pub fn concept_loss(
    fu: &[f64],
    fv: &[f64],
    positive: bool,
    alpha: f64,
    p: f64,
) -> Result<ConceptLoss, EmbedError> {
    let (s, gx, gy) = score_with_grad(fu, fv, ScoreKind::Hyper { p })?;
    if positive {
        Ok(ConceptLoss {
            loss: -s,
            grad_u: gx.iter().map(|g| -g).collect(),
            grad_v: gy.iter().map(|g| -g).collect(),
        })
    } else {
        let h = alpha + s;
        if h > 0.0 {
            Ok(ConceptLoss {
                loss: h,
                grad_u: gx,
                grad_v: gy,
            })
        } else {
            let n = fu.len();
            Ok(ConceptLoss {
                loss: 0.0,
                grad_u: vec![0.0; n],
                grad_v: vec![0.0; n],
            })
        }
    }
}

/// Loss value and gradients for one pixel against its label and negatives.
pub struct ImageLoss {
    pub loss: f64,
    pub grad_pixel: Vec<f64>,
    pub grad_true: Vec<f64>,
    pub grad_negatives: Vec<Vec<f64>>,
}

/// Softmax retrieval loss: `−log e^{S(true,pix)} / (e^{S(true,pix)} + Σ e^{S(neg,pix)})`.
///
/// Scores follow the `S(label, pixel)` argument order, with the label
/// embedding first.
pub fn image_loss_softmax(
    pixel: &[f64],
    true_label: &[f64],
    negatives: &[&[f64]],
    kind: ScoreKind,
) -> Result<ImageLoss, EmbedError> {
    if negatives.is_empty() {
        return Err(EmbedError::EmptyNegatives);
    }
    let (s0, g_true, g_pix0) = score_with_grad(true_label, pixel, kind)?;
    let mut neg_scores = Vec::with_capacity(negatives.len());
    let mut neg_grads = Vec::with_capacity(negatives.len());
    for neg in negatives {
        let (s, g_neg, g_pix) = score_with_grad(neg, pixel, kind)?;
        neg_scores.push(s);
        neg_grads.push((g_neg, g_pix));
    }

    // Stable log-sum-exp over {true} ∪ negatives.
    let max = neg_scores.iter().copied().fold(s0, f64::max);
    let mut z = (s0 - max).exp();
    for &s in &neg_scores {
        z += (s - max).exp();
    }
    let loss = -(s0 - max - z.ln());
    let p0 = (s0 - max).exp() / z;

    let n = pixel.len();
    let mut grad_pixel = vec![0.0; n];
    let c0 = p0 - 1.0;
    let mut grad_true = vec![0.0; n];
    for i in 0..n {
        grad_true[i] = c0 * g_true[i];
        grad_pixel[i] = c0 * g_pix0[i];
    }
    let mut grad_negatives = Vec::with_capacity(negatives.len());
    for (j, (g_neg, g_pix)) in neg_grads.iter().enumerate() {
        let pj = (neg_scores[j] - max).exp() / z;
        grad_negatives.push(g_neg.iter().map(|g| pj * g).collect());
        for i in 0..n {
            grad_pixel[i] += pj * g_pix[i];
        }
    }
    Ok(ImageLoss {
        loss,
        grad_pixel,
        grad_true,
        grad_negatives,
    })
}

/// Max-margin ranking loss: `Σ_neg max(0, beta − S(true,pix) + S(neg,pix))`.
pub fn image_loss_margin(
    pixel: &[f64],
    true_label: &[f64],
    negatives: &[&[f64]],
    beta: f64,
    kind: ScoreKind,
) -> Result<ImageLoss, EmbedError> {
    if negatives.is_empty() {
        return Err(EmbedError::EmptyNegatives);
    }
    let (s0, g_true, g_pix0) = score_with_grad(true_label, pixel, kind)?;
    let n = pixel.len();
    let mut loss = 0.0;
    let mut grad_pixel = vec![0.0; n];
    let mut grad_true = vec![0.0; n];
    let mut grad_negatives = Vec::with_capacity(negatives.len());
    let mut active = 0usize;
    for neg in negatives {
        let (s, g_neg, g_pix) = score_with_grad(neg, pixel, kind)?;
        let hinge = beta - s0 + s;
        if hinge > 0.0 {
            loss += hinge;
            active += 1;
            grad_negatives.push(g_neg);
            for i in 0..n {
                grad_pixel[i] += g_pix[i];
            }
        } else {
            grad_negatives.push(vec![0.0; n]);
        }
    }
    let a = active as f64;
    for i in 0..n {
        grad_true[i] = -a * g_true[i];
        grad_pixel[i] -= a * g_pix0[i];
    }
    Ok(ImageLoss {
        loss,
        grad_pixel,
        grad_true,
        grad_negatives,
    })
}

/// Affine map from feature space into the embedding space, followed by
/// rectification and projection onto a fixed Euclidean norm.
#[derive(Clone, Debug)]
pub struct PixelEmbedder {
    dim_in: usize,
    dim_out: usize,
    /// Row-major `dim_in × dim_out` weights; `weights[d * dim_out + n]`.
    weights: Vec<f64>,
    target_norm: f64,
}

/// Intermediate state of one forward pass, kept for backpropagation.
pub struct EmbedTrace {
    pub rectified: Vec<f64>,
    pub norm: f64,
    pub output: Vec<f64>,
}

impl PixelEmbedder {
    pub fn new(dim_in: usize, dim_out: usize, weights: Vec<f64>, target_norm: f64) -> Self {
        assert_eq!(weights.len(), dim_in * dim_out);
        PixelEmbedder {
            dim_in,
            dim_out,
            weights,
            target_norm,
        }
    }

    /// Gaussian init with std `sqrt(2 / (dim_in + dim_out))`.
    pub fn random_init<R: rand::Rng>(
        dim_in: usize,
        dim_out: usize,
        target_norm: f64,
        rng: &mut R,
    ) -> Self {
        use rand_distr::{Distribution, Normal};
        let std = (2.0 / (dim_in + dim_out) as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let weights = (0..dim_in * dim_out).map(|_| normal.sample(rng)).collect();
        PixelEmbedder::new(dim_in, dim_out, weights, target_norm)
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn target_norm(&self) -> f64 {
        self.target_norm
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Embed a feature vector: rectify the affine image, then rescale to the
    /// target norm. Errors when the rectified vector is all zero.
    pub fn embed_feature(&self, feature: &[f64]) -> Result<Vec<f64>, EmbedError> {
        Ok(self.embed_traced(feature)?.output)
    }

    /// Forward pass that also returns the state needed for [`Self::backprop`].
    pub fn embed_traced(&self, feature: &[f64]) -> Result<EmbedTrace, EmbedError> {
        if feature.len() != self.dim_in {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dim_in,
                got: feature.len(),
            });
        }
        let mut rectified = vec![0.0; self.dim_out];
        for (d, &f) in feature.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            let row = &self.weights[d * self.dim_out..(d + 1) * self.dim_out];
            for (n, &w) in row.iter().enumerate() {
                rectified[n] += w * f;
            }
        }
        for v in rectified.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let norm = rectified.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbedError::DegenerateEmbedding);
        }
        let scale = self.target_norm / norm;
        let output = rectified.iter().map(|v| v * scale).collect();
        Ok(EmbedTrace {
            rectified,
            norm,
            output,
        })
    }

    /// Gradient of a scalar loss with respect to the weights, given the
    /// gradient with respect to the embedder output. Differentiates through
    /// the norm projection and the rectifier (subgradient zero at the kink).
    pub fn backprop(&self, feature: &[f64], trace: &EmbedTrace, grad_output: &[f64]) -> Vec<f64> {
        let t = self.target_norm;
        let r = trace.norm;
        let gv: f64 = grad_output
            .iter()
            .zip(&trace.rectified)
            .map(|(g, v)| g * v)
            .sum();
        // dL/dv_j = t*g_j/r − t*(g·v)*v_j/r³, masked by the rectifier.
        let mut grad_z = vec![0.0; self.dim_out];
        for j in 0..self.dim_out {
            if trace.rectified[j] > 0.0 {
                grad_z[j] = t * grad_output[j] / r - t * gv * trace.rectified[j] / (r * r * r);
            }
        }
        let mut grad_w = vec![0.0; self.weights.len()];
        for (d, &f) in feature.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            let row = &mut grad_w[d * self.dim_out..(d + 1) * self.dim_out];
            for (n, g) in grad_z.iter().enumerate() {
                row[n] = g * f;
            }
        }
        grad_w
    }

    /// Binary dump: magic `OVSW`, u32 version=1, u32 D, u32 N, then D×N
    /// float32 little-endian row-major weights.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.weights.len() * 4);
        out.extend_from_slice(b"OVSW");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.dim_in as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim_out as u32).to_le_bytes());
        for &w in &self.weights {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
        out
    }

    /// Parse an `OVSW` dump. The target norm is not part of the format and
    /// must be supplied by configuration.
    pub fn from_bytes(bytes: &[u8], target_norm: f64) -> Result<Self, EmbedError> {
        if bytes.len() < 16 {
            return Err(EmbedError::BadDump("truncated header".into()));
        }
        if &bytes[0..4] != b"OVSW" {
            return Err(EmbedError::BadDump(format!(
                "bad magic {:?}",
                &bytes[0..4]
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != 1 {
            return Err(EmbedError::BadDump(format!("unsupported version {version}")));
        }
        let d = u32_at(8) as usize;
        let n = u32_at(12) as usize;
        let need = 16 + d * n * 4;
        if bytes.len() != need {
            return Err(EmbedError::BadDump(format!(
                "expected {need} bytes, got {}",
                bytes.len()
            )));
        }
        let mut weights = Vec::with_capacity(d * n);
        for i in 0..d * n {
            let o = 16 + i * 4;
            weights.push(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64);
        }
        Ok(PixelEmbedder::new(d, n, weights, target_norm))
    }
}

/// Concept id → embedding vector, stored flat for in-place optimization.
/// The root row is pinned to the origin and every entry stays nonnegative.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(len: usize, dim: usize) -> Self {
        EmbeddingTable {
            dim,
            data: vec![0.0; len * dim],
        }
    }

    /// Uniform random init in `[0, scale)` per coordinate, root at origin.
    pub fn random_init<R: rand::Rng>(len: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        let mut table = EmbeddingTable {
            dim,
            data: (0..len * dim).map(|_| rng.random_range(0.0..scale)).collect(),
        };
        table.zero_root();
        table
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, id: ConceptId) -> &[f64] {
        &self.data[id.idx() * self.dim..(id.idx() + 1) * self.dim]
    }

    pub fn get_mut(&mut self, id: ConceptId) -> &mut [f64] {
        &mut self.data[id.idx() * self.dim..(id.idx() + 1) * self.dim]
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Clamp every coordinate at zero and re-pin the root to the origin.
    pub fn project_valid(&mut self) {
        for v in self.data.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.zero_root();
    }

    pub fn zero_root(&mut self) {
        for v in &mut self.data[0..self.dim] {
            *v = 0.0;
        }
    }

    /// TSV dump: `concept_name<TAB>c1,c2,...,cN`, one line per concept in id
    /// order, full round-trip precision.
    pub fn to_tsv(&self, graph: &ConceptGraph) -> String {
        let mut out = String::new();
        for id in graph.ids() {
            out.push_str(graph.name(id));
            out.push('\t');
            let coords: Vec<String> = self.get(id).iter().map(|c| c.to_string()).collect();
            out.push_str(&coords.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str, graph: &ConceptGraph) -> Result<Self, EmbedError> {
        let mut rows: HashMap<ConceptId, Vec<f64>> = HashMap::new();
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (name, coords) = line.split_once('\t').ok_or_else(|| {
                EmbedError::BadDump(format!("line {}: missing tab", lineno + 1))
            })?;
            let id = graph.id_of(name).ok_or_else(|| {
                EmbedError::BadDump(format!("line {}: unknown concept {name:?}", lineno + 1))
            })?;
            let vec: Vec<f64> = coords
                .split(',')
                .map(|c| {
                    c.parse::<f64>().map_err(|_| {
                        EmbedError::BadDump(format!("line {}: bad coordinate {c:?}", lineno + 1))
                    })
                })
                .collect::<Result<_, _>>()?;
            match dim {
                None => dim = Some(vec.len()),
                Some(d) if d != vec.len() => {
                    return Err(EmbedError::BadDump(format!(
                        "line {}: dimension {} != {}",
                        lineno + 1,
                        vec.len(),
                        d
                    )))
                }
                _ => {}
            }
            rows.insert(id, vec);
        }
        let dim = dim.ok_or_else(|| EmbedError::BadDump("empty dump".into()))?;
        let mut table = EmbeddingTable::zeros(graph.len(), dim);
        for id in graph.ids() {
            let row = rows
                .remove(&id)
                .ok_or_else(|| EmbedError::BadDump(format!("missing concept {:?}", graph.name(id))))?;
            table.get_mut(id).copy_from_slice(&row);
        }
        Ok(table)
    }
}
