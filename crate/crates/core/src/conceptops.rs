//! Embedding-space interpretation tools: pixel-level concept search over
//! feature grids, nearest-concept retrieval, and concept synthesis through
//! coordinatewise min/max.
//!
//! `max(a, b)` sits above both inputs in the coordinatewise order, so it
//! behaves as their common specialization (intersection of concepts);
//! `min(a, b)` sits below both and acts as the common generalization.

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::FeatureGrid;
use crate::embedding::{score, EmbedError, EmbeddingTable, ScoreKind};
use crate::taxonomy::{ConceptGraph, ConceptId};
use crate::training::TrainedModel;

#[derive(Error, Debug)]
pub enum ConceptOpsError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("grid feature dimension {got} does not match embedder input {expected}")]
    GridDimMismatch { expected: usize, got: usize },
    #[error("bad query expression: {0}")]
    BadQuery(String),
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Per-cell scores of one query over a feature grid. Cells whose embedding
/// is degenerate carry `-inf` and are counted in `degenerate_cells`.
#[derive(Clone, Debug)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    /// Row-major H×W scores.
    pub scores: Vec<f64>,
    /// Human-readable description of the query.
    pub query: String,
    pub degenerate_cells: usize,
}

impl ScoreMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.width + col]
    }

    /// ASCII PGM (P2, 255 levels) with min-max normalization over the finite
    /// scores; non-finite cells render as 0. Normalization happens only
    /// here, never in the stored scores.
    pub fn to_pgm(&self) -> String {
        let finite: Vec<f64> = self.scores.iter().copied().filter(|s| s.is_finite()).collect();
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let mut out = format!("P2\n{} {}\n255\n", self.width, self.height);
        for row in 0..self.height {
            let cells: Vec<String> = (0..self.width)
                .map(|col| {
                    let s = self.get(row, col);
                    let level = if !s.is_finite() || span <= 0.0 {
                        0
                    } else {
                        ((s - lo) / span * 255.0).round() as u32
                    };
                    level.to_string()
                })
                .collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }

    /// Raw scores as CSV, one grid row per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in 0..self.height {
            let cells: Vec<String> = (0..self.width)
                .map(|col| self.get(row, col).to_string())
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// What to search for: a concept from the table or a synthesized vector.
#[derive(Clone, Debug)]
pub enum SearchQuery {
    Concept(ConceptId),
    Vector { description: String, coords: Vec<f64> },
}

impl SearchQuery {
    fn resolve<'a>(&'a self, table: &'a EmbeddingTable) -> (&'a [f64], String) {
        match self {
            SearchQuery::Concept(id) => (table.get(*id), format!("concept {}", id.0)),
            SearchQuery::Vector { description, coords } => (coords, description.clone()),
        }
    }
}

/// Score every grid cell against the query under the model's scoring kind.
pub fn concept_search(
    model: &TrainedModel,
    grid: &FeatureGrid,
    query: &SearchQuery,
) -> Result<ScoreMap, ConceptOpsError> {
    if grid.dim != model.embedder.dim_in() {
        return Err(ConceptOpsError::GridDimMismatch {
            expected: model.embedder.dim_in(),
            got: grid.dim,
        });
    }
    let (query_vec, description) = query.resolve(&model.table);
    if query_vec.len() != model.table.dim() {
        return Err(ConceptOpsError::DimensionMismatch {
            left: query_vec.len(),
            right: model.table.dim(),
        });
    }
    let kind = model.config.image_score_kind;
    let scores: Vec<f64> = (0..grid.height * grid.width)
        .into_par_iter()
        .map(|i| {
            let (row, col) = (i / grid.width, i % grid.width);
            let feature: Vec<f64> = grid
                .cell_feature(row, col)
                .iter()
                .map(|&v| v as f64)
                .collect();
            match model.embedder.embed_feature(&feature) {
                Ok(pixel) => score(query_vec, &pixel, kind).unwrap_or(f64::NEG_INFINITY),
                Err(_) => f64::NEG_INFINITY,
            }
        })
        .collect();
    let degenerate = scores.iter().filter(|s| !s.is_finite()).count();
    Ok(ScoreMap {
        height: grid.height,
        width: grid.width,
        scores,
        query: description,
        degenerate_cells: degenerate,
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SynthOp {
    Min,
    Max,
}

/// Coordinatewise min or max of two embedding vectors.
pub fn synth_concept(a: &[f64], b: &[f64], op: SynthOp) -> Result<Vec<f64>, ConceptOpsError> {
    if a.len() != b.len() {
        return Err(ConceptOpsError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| match op {
            SynthOp::Min => x.min(y),
            SynthOp::Max => x.max(y),
        })
        .collect())
}

/// Top-k concepts by score against `v`, ranked `S(f(c), v)` descending with
/// ties broken by id. Asking for more than the table holds returns the full
/// ranking with the second value set.
pub fn nearest_concepts(
    table: &EmbeddingTable,
    v: &[f64],
    k: usize,
    kind: ScoreKind,
) -> (Vec<(ConceptId, f64)>, bool) {
    let clamped = k > table.len();
    let mut scored: Vec<(ConceptId, f64)> = (0..table.len() as u32)
        .map(|i| {
            let id = ConceptId(i);
            let s = score(table.get(id), v, kind).unwrap_or(f64::NEG_INFINITY);
            (id, s)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    scored.truncate(k.min(scored.len()));
    (scored, clamped)
}

/// Parse a search query: either a bare concept name or a nested
/// `min(a,b)` / `max(a,b)` expression over concept names.
pub fn parse_query(
    text: &str,
    graph: &ConceptGraph,
    table: &EmbeddingTable,
) -> Result<SearchQuery, ConceptOpsError> {
    let expr = text.trim();
    if !expr.contains('(') {
        let id = graph
            .id_of(expr)
            .ok_or_else(|| ConceptOpsError::UnknownConcept(expr.to_string()))?;
        return Ok(SearchQuery::Concept(id));
    }
    let (coords, rest) = parse_expr(expr, graph, table)?;
    if !rest.trim_start().is_empty() {
        return Err(ConceptOpsError::BadQuery(format!(
            "trailing input {rest:?}"
        )));
    }
    Ok(SearchQuery::Vector {
        description: expr.to_string(),
        coords,
    })
}

/// Recursive descent over `expr := name | ("min"|"max") "(" expr "," expr ")"`.
fn parse_expr<'a>(
    input: &'a str,
    graph: &ConceptGraph,
    table: &EmbeddingTable,
) -> Result<(Vec<f64>, &'a str), ConceptOpsError> {
    let input = input.trim_start();
    for (token, op) in [("min", SynthOp::Min), ("max", SynthOp::Max)] {
        if let Some(rest) = input.strip_prefix(token) {
            let after = rest.trim_start();
            if let Some(body) = after.strip_prefix('(') {
                let (a, rest) = parse_expr(body, graph, table)?;
                let rest = rest.trim_start();
                let rest = rest.strip_prefix(',').ok_or_else(|| {
                    ConceptOpsError::BadQuery(format!("expected ',' near {rest:?}"))
                })?;
                let (b, rest) = parse_expr(rest, graph, table)?;
                let rest = rest.trim_start();
                let rest = rest.strip_prefix(')').ok_or_else(|| {
                    ConceptOpsError::BadQuery(format!("expected ')' near {rest:?}"))
                })?;
                return Ok((synth_concept(&a, &b, op)?, rest));
            }
        }
    }
    // A concept name: everything up to the next delimiter.
    let end = input
        .find([',', ')', '('])
        .unwrap_or(input.len());
    if input[end..].starts_with('(') {
        return Err(ConceptOpsError::BadQuery(format!(
            "unknown function near {input:?}"
        )));
    }
    let name = input[..end].trim();
    if name.is_empty() {
        return Err(ConceptOpsError::BadQuery(format!("missing name near {input:?}")));
    }
    let id = graph
        .id_of(name)
        .ok_or_else(|| ConceptOpsError::UnknownConcept(name.to_string()))?;
    Ok((table.get(id).to_vec(), &input[end..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::PixelEmbedder;
    use crate::training::TrainConfig;
    use std::collections::HashMap;

    fn graph_and_table() -> (ConceptGraph, EmbeddingTable) {
        let edges: Vec<(String, String)> = vec![
            ("a".into(), "entity".into()),
            ("b".into(), "entity".into()),
        ];
        let (graph, _) = crate::taxonomy::build_graph(&edges, &HashMap::new()).unwrap();
        let mut table = EmbeddingTable::zeros(graph.len(), 2);
        table
            .get_mut(graph.id_of("a").unwrap())
            .copy_from_slice(&[1.0, 3.0]);
        table
            .get_mut(graph.id_of("b").unwrap())
            .copy_from_slice(&[2.0, 2.0]);
        (graph, table)
    }

    #[test]
    fn synth_min_max_cases() {
        let v = vec![0.5, 2.0];
        assert_eq!(synth_concept(&v, &v, SynthOp::Min).unwrap(), v);
        assert_eq!(synth_concept(&v, &v, SynthOp::Max).unwrap(), v);
        let a = [1.0, 3.0];
        let b = [2.0, 2.0];
        assert_eq!(synth_concept(&a, &b, SynthOp::Max).unwrap(), vec![2.0, 3.0]);
        assert_eq!(synth_concept(&a, &b, SynthOp::Min).unwrap(), vec![1.0, 2.0]);
        assert!(synth_concept(&a, &[1.0], SynthOp::Min).is_err());
    }

    #[test]
    fn min_max_bound_inputs_exactly() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let a: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..3.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..3.0)).collect();
            let lo = synth_concept(&a, &b, SynthOp::Min).unwrap();
            let hi = synth_concept(&a, &b, SynthOp::Max).unwrap();
            // min is a hypernym of both, max a hyponym of both: exact zeros.
            assert_eq!(score(&lo, &a, ScoreKind::hyper2()).unwrap(), 0.0);
            assert_eq!(score(&lo, &b, ScoreKind::hyper2()).unwrap(), 0.0);
            assert_eq!(score(&a, &hi, ScoreKind::hyper2()).unwrap(), 0.0);
            assert_eq!(score(&b, &hi, ScoreKind::hyper2()).unwrap(), 0.0);
        }
    }

    #[test]
    fn nearest_concepts_basic() {
        let (graph, table) = graph_and_table();
        let a = graph.id_of("a").unwrap();
        let (hits, clamped) = nearest_concepts(&table, &[1.0, 3.0], 1, ScoreKind::Cosine);
        assert!(!clamped);
        assert_eq!(hits[0].0, a);
        assert!((hits[0].1 - 1.0).abs() < 1e-12);

        let (hits, clamped) = nearest_concepts(&table, &[1.0, 3.0], 10, ScoreKind::Cosine);
        assert!(clamped);
        assert_eq!(hits.len(), table.len());
    }

    #[test]
    fn nearest_concepts_matches_full_sort() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut table = EmbeddingTable::zeros(20, 4);
        for i in 1..20 {
            for v in table.get_mut(ConceptId(i)).iter_mut() {
                *v = rng.random_range(0.0..1.0);
            }
        }
        for _ in 0..200 {
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let (hits, _) = nearest_concepts(&table, &q, 5, ScoreKind::hyper2());
            // Oracle: full sort of all ids.
            let mut all: Vec<(ConceptId, f64)> = (0..20)
                .map(|i| {
                    let id = ConceptId(i);
                    (id, score(table.get(id), &q, ScoreKind::hyper2()).unwrap())
                })
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            assert_eq!(hits, all[..5].to_vec());
        }
    }

    fn grid_model(kind: ScoreKind) -> (TrainedModel, FeatureGrid) {
        let (graph, table) = graph_and_table();
        // Identity embedder 2 -> 2.
        let embedder = PixelEmbedder::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], 30.0);
        let model = TrainedModel {
            graph,
            table,
            embedder,
            config: TrainConfig {
                dim: 2,
                image_score_kind: kind,
                ..TrainConfig::default()
            },
            log: vec![],
        };
        let mut grid = FeatureGrid::new(1, 2, 2);
        grid.set_cell(0, 0, ConceptId(1), &[3.0, 4.0]);
        grid.set_cell(0, 1, ConceptId(2), &[-1.0, -1.0]); // degenerate cell
        (model, grid)
    }

    #[test]
    fn search_scores_cells_and_counts_degenerates() {
        let (model, grid) = grid_model(ScoreKind::Cosine);
        let a = model.graph.id_of("a").unwrap();
        let map = concept_search(&model, &grid, &SearchQuery::Concept(a)).unwrap();
        assert_eq!(map.degenerate_cells, 1);
        assert!(map.get(0, 0).is_finite());
        assert_eq!(map.get(0, 1), f64::NEG_INFINITY);
    }

    #[test]
    fn search_cell_matching_query_scores_one_under_cosine() {
        let (model, mut grid) = grid_model(ScoreKind::Cosine);
        // Make the cell's embedding parallel to the query vector.
        grid.set_cell(0, 0, ConceptId(1), &[1.0, 3.0]);
        let q = SearchQuery::Vector {
            description: "probe".into(),
            coords: vec![1.0, 3.0],
        };
        let map = concept_search(&model, &grid, &q).unwrap();
        assert!((map.get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn search_root_under_hyper_scores_zero_everywhere_defined() {
        let (model, grid) = grid_model(ScoreKind::hyper2());
        let map = concept_search(&model, &grid, &SearchQuery::Concept(ConceptId::ROOT)).unwrap();
        assert_eq!(map.get(0, 0), 0.0);
        assert_eq!(map.get(0, 1), f64::NEG_INFINITY);
    }

    #[test]
    fn uniform_grid_gives_constant_map() {
        let (model, mut grid) = grid_model(ScoreKind::Cosine);
        grid.set_cell(0, 0, ConceptId(1), &[2.0, 1.0]);
        grid.set_cell(0, 1, ConceptId(1), &[2.0, 1.0]);
        let a = model.graph.id_of("a").unwrap();
        let map = concept_search(&model, &grid, &SearchQuery::Concept(a)).unwrap();
        assert_eq!(map.get(0, 0), map.get(0, 1));
    }

    #[test]
    fn pgm_and_csv_export() {
        let map = ScoreMap {
            height: 1,
            width: 3,
            scores: vec![0.0, 0.5, 1.0],
            query: "q".into(),
            degenerate_cells: 0,
        };
        let pgm = map.to_pgm();
        assert!(pgm.starts_with("P2\n3 1\n255\n"));
        assert!(pgm.contains("0 128 255"));
        assert_eq!(map.to_csv(), "0,0.5,1\n");
    }

    #[test]
    fn query_parser_handles_names_and_expressions() {
        let (graph, table) = graph_and_table();
        match parse_query("a", &graph, &table).unwrap() {
            SearchQuery::Concept(id) => assert_eq!(id, graph.id_of("a").unwrap()),
            other => panic!("expected concept, got {other:?}"),
        }
        match parse_query("max(a, b)", &graph, &table).unwrap() {
            SearchQuery::Vector { coords, .. } => assert_eq!(coords, vec![2.0, 3.0]),
            other => panic!("expected vector, got {other:?}"),
        }
        match parse_query("min(max(a,b), a)", &graph, &table).unwrap() {
            SearchQuery::Vector { coords, .. } => assert_eq!(coords, vec![1.0, 3.0]),
            other => panic!("expected vector, got {other:?}"),
        }
        assert!(matches!(
            parse_query("max(a)", &graph, &table),
            Err(ConceptOpsError::BadQuery(_))
        ));
        assert!(matches!(
            parse_query("nothere", &graph, &table),
            Err(ConceptOpsError::UnknownConcept(_))
        ));
        assert!(matches!(
            parse_query("max(a,b) trailing", &graph, &table),
            Err(ConceptOpsError::BadQuery(_))
        ));
    }
}
