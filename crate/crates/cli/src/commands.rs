//! Implementations of the CLI subcommands: each validates its inputs, runs
//! the corresponding library pipeline, and writes its artifacts plus a run
//! manifest into the output location.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ovparse_core::conceptops::{concept_search, nearest_concepts, parse_query, SearchQuery};
use ovparse_core::dataset::{FeatureDataset, FeatureGrid};
use ovparse_core::embedding::{EmbeddingTable, PixelEmbedder, ScoreKind};
use ovparse_core::inference::{
    calibrate_threshold, classify_closed_all, predictions_tsv, predict_zero_shot_all,
};
use ovparse_core::metrics::aggregate;
use ovparse_core::synthetic::{
    generate_grid, generate_synthetic, sample_classes_by_frequency, SyntheticSpec,
};
use ovparse_core::taxonomy::{
    build_graph, export_dot, parse_frequency_tsv, parse_taxonomy_tsv, ConceptGraph, ConceptId,
    InformationContentTable,
};
use ovparse_core::training::{
    train_concepts, train_joint, training_log_csv, ImageLossKind, TrainConfig, TrainedModel,
};

use crate::manifest::Manifest;

/// Exit code 1: the command or its inputs are invalid.
/// Exit code 2: the computation itself failed.
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| validation(format!("cannot read {}: {e}", path.display())))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| validation(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, content: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)
                .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
        }
    }
    fs::write(path, content).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn load_taxonomy(
    taxonomy: &Path,
    freqs: Option<&Path>,
) -> Result<(ConceptGraph, InformationContentTable), CliError> {
    let edges = parse_taxonomy_tsv(&read_file(taxonomy)?).map_err(validation)?;
    let counts = match freqs {
        Some(path) => parse_frequency_tsv(&read_file(path)?).map_err(validation)?,
        None => HashMap::new(),
    };
    build_graph(&edges, &counts).map_err(validation)
}

fn load_config(config: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig, CliError> {
    let mut c = match config {
        Some(path) => TrainConfig::from_kv_text(&read_file(path)?).map_err(validation)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        c.seed = seed;
    }
    Ok(c)
}

fn load_table(path: &Path, graph: &ConceptGraph) -> Result<EmbeddingTable, CliError> {
    EmbeddingTable::from_tsv(&read_file(path)?, graph).map_err(validation)
}

fn load_dataset(path: &Path) -> Result<FeatureDataset, CliError> {
    FeatureDataset::from_bytes(&read_bytes(path)?).map_err(validation)
}

fn parse_names(graph: &ConceptGraph, text: &str) -> Result<Vec<ConceptId>, CliError> {
    text.lines()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|name| {
            graph
                .id_of(name)
                .ok_or_else(|| validation(format!("unknown concept {name:?}")))
        })
        .collect()
}

fn names_arg(graph: &ConceptGraph, csv: &str) -> Result<Vec<ConceptId>, CliError> {
    csv.split(',')
        .map(|n| n.trim())
        .filter(|n| !n.is_empty())
        .map(|name| {
            graph
                .id_of(name)
                .ok_or_else(|| validation(format!("unknown concept {name:?}")))
        })
        .collect()
}

/// Reconstruct an inference-ready model from dumped artifacts.
fn load_model(
    graph: ConceptGraph,
    embeddings: &Path,
    embedder: &Path,
    score: ScoreKind,
    target_norm: f64,
) -> Result<TrainedModel, CliError> {
    let table = load_table(embeddings, &graph)?;
    let embedder =
        PixelEmbedder::from_bytes(&read_bytes(embedder)?, target_norm).map_err(validation)?;
    let config = TrainConfig {
        dim: table.dim(),
        image_score_kind: score,
        target_norm,
        ..TrainConfig::default()
    };
    Ok(TrainedModel {
        graph,
        table,
        embedder,
        config,
        log: vec![],
    })
}

fn warn_zero_frequency(graph: &ConceptGraph, ic: &InformationContentTable) {
    if !ic.zero_frequency.is_empty() {
        let names: Vec<&str> = ic
            .zero_frequency
            .iter()
            .take(8)
            .map(|&c| graph.name(c))
            .collect();
        eprintln!(
            "warning: {} concepts were never observed (finite information sentinel applied): {}{}",
            ic.zero_frequency.len(),
            names.join(", "),
            if ic.zero_frequency.len() > 8 { ", ..." } else { "" }
        );
    }
}

pub struct BuildTaxonomyArgs {
    pub taxonomy: PathBuf,
    pub freqs: Option<PathBuf>,
    pub out: PathBuf,
    pub dot: Option<PathBuf>,
}

pub fn build_taxonomy(args: &BuildTaxonomyArgs) -> Result<(), CliError> {
    let (graph, ic) = load_taxonomy(&args.taxonomy, args.freqs.as_deref())?;
    warn_zero_frequency(&graph, &ic);

    let mut concepts = String::from("id\tname\tdepth\tfrequency\tinformation\n");
    for id in graph.ids() {
        concepts.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            id,
            graph.name(id),
            graph.depth(id),
            ic.frequency(id),
            ic.information(id)
        ));
    }
    write_file(&args.out.join("concepts.tsv"), concepts)?;
    if let Some(dot) = &args.dot {
        write_file(dot, export_dot(&graph, &ic))?;
    }

    let mut m = Manifest::new("build-taxonomy");
    m.push_flag("taxonomy", args.taxonomy.display());
    m.push_opt_flag("freqs", args.freqs.as_ref().map(|p| p.display().to_string()));
    m.push_opt_flag("dot", args.dot.as_ref().map(|p| p.display().to_string()));
    m.push_flag("out", args.out.display());
    m.push("concepts", graph.len());
    write_file(&args.out.join("manifest.txt"), m.render())?;
    println!("built taxonomy with {} concepts", graph.len());
    Ok(())
}

pub struct GenDataArgs {
    pub taxonomy: PathBuf,
    pub out: PathBuf,
    pub feat_dim: usize,
    pub sigma_level: f64,
    pub sigma_obs: f64,
    pub samples_per_class: usize,
    pub held_out: Option<String>,
    pub seed: u64,
    pub grid: Option<String>,
    pub grid_block: usize,
}

pub fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let (graph, _) = load_taxonomy(&args.taxonomy, None)?;
    let leaves = graph.leaves();
    let held_out = match &args.held_out {
        Some(csv) => names_arg(&graph, csv)?,
        None => vec![],
    };
    let spec = SyntheticSpec {
        graph: &graph,
        leaf_classes: leaves,
        feature_dim: args.feat_dim,
        sigma_level: args.sigma_level,
        sigma_obs: args.sigma_obs,
        samples_per_class: args.samples_per_class,
        held_out,
        seed: args.seed,
    };
    let data = generate_synthetic(&spec).map_err(validation)?;
    write_file(&args.out.join("train.ovsf"), data.train.to_bytes())?;
    write_file(&args.out.join("val.ovsf"), data.validation.to_bytes())?;
    write_file(&args.out.join("zeroshot.ovsf"), data.zero_shot_test.to_bytes())?;

    // Own pixel counts of the generated world: samples drawn per class.
    let mut freq_lines: Vec<(ConceptId, usize)> = Vec::new();
    for &c in &spec.leaf_classes {
        let count = if spec.held_out.contains(&c) {
            data.zero_shot_test.labels().iter().filter(|&&l| l == c).count()
        } else {
            data.train.labels().iter().filter(|&&l| l == c).count()
        };
        freq_lines.push((c, count));
    }
    let mut freqs = String::new();
    for (c, count) in freq_lines {
        freqs.push_str(&format!("{}\t{}\n", graph.name(c), count));
    }
    write_file(&args.out.join("freqs.tsv"), freqs)?;

    if let Some(hw) = &args.grid {
        let (h, w) = hw
            .split_once('x')
            .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)))
            .ok_or_else(|| validation(format!("bad --grid {hw:?}, expected HxW")))?;
        let grid = generate_grid(&spec, h, w, args.grid_block).map_err(validation)?;
        write_file(&args.out.join("scene.ovsg"), grid.to_bytes())?;
    }

    let mut m = Manifest::new("gen-data");
    m.push_flag("taxonomy", args.taxonomy.display());
    m.push_flag("out", args.out.display());
    m.push_flag("feat-dim", args.feat_dim);
    m.push_flag("sigma-level", args.sigma_level);
    m.push_flag("sigma-obs", args.sigma_obs);
    m.push_flag("samples-per-class", args.samples_per_class);
    m.push_opt_flag("held-out", args.held_out.as_ref());
    m.push_opt_flag("grid", args.grid.as_ref());
    m.push_flag("grid-block", args.grid_block);
    m.push_flag("seed", args.seed);
    m.push("train_samples", data.train.len());
    m.push("validation_samples", data.validation.len());
    m.push("zero_shot_samples", data.zero_shot_test.len());
    write_file(&args.out.join("manifest.txt"), m.render())?;
    println!(
        "generated {} train / {} validation / {} zero-shot samples",
        data.train.len(),
        data.validation.len(),
        data.zero_shot_test.len()
    );
    Ok(())
}

pub struct TrainConceptsArgs {
    pub taxonomy: PathBuf,
    pub freqs: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

pub fn train_concepts_cmd(args: &TrainConceptsArgs) -> Result<(), CliError> {
    let (graph, ic) = load_taxonomy(&args.taxonomy, args.freqs.as_deref())?;
    warn_zero_frequency(&graph, &ic);
    let config = load_config(args.config.as_deref(), args.seed)?;
    let result = train_concepts(&graph, &config).map_err(runtime)?;
    write_file(&args.out.join("embeddings.tsv"), result.table.to_tsv(&graph))?;
    write_file(&args.out.join("trainlog.csv"), training_log_csv(&result.log))?;

    let mut m = Manifest::new("train-concepts");
    m.push_flag("taxonomy", args.taxonomy.display());
    m.push_opt_flag("freqs", args.freqs.as_ref().map(|p| p.display().to_string()));
    m.push_opt_flag("config", args.config.as_ref().map(|p| p.display().to_string()));
    m.push_opt_flag("seed", args.seed);
    m.push_flag("out", args.out.display());
    m.push_config(&config);
    write_file(&args.out.join("manifest.txt"), m.render())?;
    println!(
        "trained {} concept embeddings for {} epochs (final loss {})",
        graph.len(),
        config.epochs,
        result.log.last().map(|e| e.total).unwrap_or(f64::NAN)
    );
    Ok(())
}

pub struct TrainJointArgs {
    pub taxonomy: PathBuf,
    pub freqs: Option<PathBuf>,
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub init_embeddings: Option<PathBuf>,
    pub seed: Option<u64>,
    pub score: Option<ScoreKind>,
    pub loss: Option<ImageLossKind>,
    pub ic_weighting: bool,
    pub out: PathBuf,
}

pub fn train_joint_cmd(args: &TrainJointArgs) -> Result<(), CliError> {
    let (graph, ic) = load_taxonomy(&args.taxonomy, args.freqs.as_deref())?;
    warn_zero_frequency(&graph, &ic);
    let mut config = load_config(args.config.as_deref(), args.seed)?;
    if let Some(score) = args.score {
        config.image_score_kind = score;
    }
    if let Some(loss) = args.loss {
        config.image_loss = loss;
    }
    if args.ic_weighting {
        config.ic_weighting = true;
    }
    let dataset = load_dataset(&args.data)?;
    dataset.validate_labels(&graph).map_err(validation)?;
    let candidates = dataset.distinct_labels();

    let init = match &args.init_embeddings {
        Some(path) => {
            let table = load_table(path, &graph)?;
            if table.dim() != config.dim {
                return Err(validation(format!(
                    "init embeddings have dim {}, config says {}",
                    table.dim(),
                    config.dim
                )));
            }
            table
        }
        None => train_concepts(&graph, &config).map_err(runtime)?.table,
    };
    let model = train_joint(&graph, &ic, &dataset, &candidates, &config, init).map_err(runtime)?;
    write_file(&args.out.join("embeddings.tsv"), model.table.to_tsv(&graph))?;
    write_file(&args.out.join("embedder.ovsw"), model.embedder.to_bytes())?;
    write_file(&args.out.join("trainlog.csv"), training_log_csv(&model.log))?;

    let mut m = Manifest::new("train-joint");
    m.push_flag("taxonomy", args.taxonomy.display());
    m.push_opt_flag("freqs", args.freqs.as_ref().map(|p| p.display().to_string()));
    m.push_flag("data", args.data.display());
    m.push_opt_flag("config", args.config.as_ref().map(|p| p.display().to_string()));
    m.push_opt_flag(
        "init-embeddings",
        args.init_embeddings.as_ref().map(|p| p.display().to_string()),
    );
    m.push_opt_flag("seed", args.seed);
    m.push_opt_flag("score", args.score.map(|s| s.token()));
    m.push_opt_flag("loss", args.loss.map(|l| l.token()));
    m.push_flag("ic-weighting", args.ic_weighting);
    m.push_flag("out", args.out.display());
    m.push_config(&config);
    write_file(&args.out.join("manifest.txt"), m.render())?;
    println!(
        "joint training done: {} candidates, final total loss {}",
        candidates.len(),
        model.log.last().map(|e| e.total).unwrap_or(f64::NAN)
    );
    Ok(())
}

pub struct EvalArgs {
    pub taxonomy: PathBuf,
    pub freqs: Option<PathBuf>,
    pub data: PathBuf,
    pub embeddings: PathBuf,
    pub embedder: PathBuf,
    pub score: ScoreKind,
    pub target_norm: f64,
    pub candidates: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn eval_closed(args: &EvalArgs) -> Result<(), CliError> {
    let (graph, ic) = load_taxonomy(&args.taxonomy, args.freqs.as_deref())?;
    let dataset = load_dataset(&args.data)?;
    dataset.validate_labels(&graph).map_err(validation)?;
    let model = load_model(
        graph,
        &args.embeddings,
        &args.embedder,
        args.score,
        args.target_norm,
    )?;
    let candidates = match &args.candidates {
        Some(path) => parse_names(&model.graph, &read_file(path)?)?,
        None => dataset.distinct_labels(),
    };
    let predictions = classify_closed_all(&model, &dataset, &candidates).map_err(runtime)?;
    let primaries: Vec<ConceptId> = predictions.iter().map(|p| p.primary).collect();
    let report = aggregate(&model.graph, &ic, &primaries, dataset.labels(), None)
        .map_err(runtime)?;

    write_file(&args.out.join("predictions.tsv"), predictions_tsv(&model.graph, &predictions))?;
    write_file(&args.out.join("report.csv"), report.to_csv(&model.graph))?;
    write_file(&args.out.join("report.txt"), report.to_table(&model.graph))?;

    let mut m = Manifest::new("eval-closed");
    m.push_flag("taxonomy", args.taxonomy.display());
    m.push_opt_flag("freqs", args.freqs.as_ref().map(|p| p.display().to_string()));
    m.push_flag("data", args.data.display());
    m.push_flag("embeddings", args.embeddings.display());
    m.push_flag("embedder", args.embedder.display());
    m.push_flag("score", args.score.token());
    m.push_flag("target-norm", args.target_norm);
    m.push_opt_flag("candidates", args.candidates.as_ref().map(|p| p.display().to_string()));
    m.push_flag("out", args.out.display());
    write_file(&args.out.join("manifest.txt"), m.render())?;
    println!("{}", report.to_table(&model.graph));
    Ok(())
}

pub struct CalibrateArgs {
    pub taxonomy: PathBuf,
    pub freqs: Option<PathBuf>,
    pub data: PathBuf,
    pub embeddings: PathBuf,
    pub embedder: PathBuf,
    pub score: ScoreKind,
    pub target_norm: f64,
    pub vocab: Option<PathBuf>,
    pub out: PathBuf,
}

fn vocabulary_for(model: &TrainedModel, vocab: Option<&Path>) -> Result<Vec<ConceptId>, CliError> {
    match vocab {
        Some(path) => parse_names(&model.graph, &read_file(path)?),
        None => Ok(model.graph.ids().collect()),
    }
}

pub fn calibrate(args: &CalibrateArgs) -> Result<(), CliError> {
    let (graph, _) = load_taxonomy(&args.taxonomy, args.freqs.as_deref())?;
    let dataset = load_dataset(&args.data)?;
    dataset.validate_labels(&graph).map_err(validation)?;
    let model = load_model(
        graph,
        &args.embeddings,
        &args.embedder,
        args.score,
        args.target_norm,
    )?;
    let vocab = vocabulary_for(&model, args.vocab.as_deref())?;
    let cal = calibrate_threshold(&model, &dataset, &vocab).map_err(runtime)?;
    write_file(
        &args.out.join("cutoff.txt"),
        format!("cutoff={}\nvalidation_hf={}\n", cal.cutoff, cal.mean_hf),
    )?;

    let mut m = Manifest::new("calibrate");
    m.push_flag("taxonomy", args.taxonomy.display());
    m.push_opt_flag("freqs", args.freqs.as_ref().map(|p| p.display().to_string()));
    m.push_flag("data", args.data.display());
    m.push_flag("embeddings", args.embeddings.display());
    m.push_flag("embedder", args.embedder.display());
    m.push_flag("score", args.score.token());
    m.push_flag("target-norm", args.target_norm);
    m.push_opt_flag("vocab", args.vocab.as_ref().map(|p| p.display().to_string()));
    m.push_flag("out", args.out.display());
    write_file(&args.out.join("manifest.txt"), m.render())?;
    println!("calibrated cutoff {} (validation HF {})", cal.cutoff, cal.mean_hf);
    Ok(())
}

pub struct EvalZeroShotArgs {
    pub taxonomy: PathBuf,
    pub freqs: Option<PathBuf>,
    pub data: PathBuf,
    pub embeddings: PathBuf,
    pub embedder: PathBuf,
    pub score: ScoreKind,
    pub target_norm: f64,
    pub cutoff: Option<f64>,
    pub calibrate_with: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn eval_zeroshot(args: &EvalZeroShotArgs) -> Result<(), CliError> {
    let (graph, ic) = load_taxonomy(&args.taxonomy, args.freqs.as_deref())?;
    let dataset = load_dataset(&args.data)?;
    dataset.validate_labels(&graph).map_err(validation)?;
    let model = load_model(
        graph,
        &args.embeddings,
        &args.embedder,
        args.score,
        args.target_norm,
    )?;
    let vocab = vocabulary_for(&model, args.vocab.as_deref())?;
    let cutoff = match (args.cutoff, &args.calibrate_with) {
        (Some(c), _) => c,
        (None, Some(path)) => {
            let validation_set = load_dataset(path)?;
            validation_set.validate_labels(&model.graph).map_err(validation)?;
            calibrate_threshold(&model, &validation_set, &vocab)
                .map_err(runtime)?
                .cutoff
        }
        (None, None) => {
            return Err(validation(
                "eval-zeroshot needs either --cutoff or --calibrate-with",
            ))
        }
    };
    let predictions = predict_zero_shot_all(&model, &dataset, &vocab, cutoff).map_err(runtime)?;
    let primaries: Vec<ConceptId> = predictions.iter().map(|p| p.primary).collect();
    let report = aggregate(&model.graph, &ic, &primaries, dataset.labels(), None)
        .map_err(runtime)?;

    write_file(&args.out.join("predictions.tsv"), predictions_tsv(&model.graph, &predictions))?;
    write_file(&args.out.join("report.csv"), report.to_csv(&model.graph))?;
    write_file(&args.out.join("report.txt"), report.to_table(&model.graph))?;
    write_file(&args.out.join("cutoff.txt"), format!("cutoff={cutoff}\n"))?;

    let mut m = Manifest::new("eval-zeroshot");
    m.push_flag("taxonomy", args.taxonomy.display());
    m.push_opt_flag("freqs", args.freqs.as_ref().map(|p| p.display().to_string()));
    m.push_flag("data", args.data.display());
    m.push_flag("embeddings", args.embeddings.display());
    m.push_flag("embedder", args.embedder.display());
    m.push_flag("score", args.score.token());
    m.push_flag("target-norm", args.target_norm);
    m.push_opt_flag("cutoff", args.cutoff);
    m.push_opt_flag(
        "calibrate-with",
        args.calibrate_with.as_ref().map(|p| p.display().to_string()),
    );
    m.push_opt_flag("vocab", args.vocab.as_ref().map(|p| p.display().to_string()));
    m.push_flag("out", args.out.display());
    write_file(&args.out.join("manifest.txt"), m.render())?;
    println!("{}", report.to_table(&model.graph));
    Ok(())
}

pub struct SearchArgs {
    pub taxonomy: PathBuf,
    pub embeddings: PathBuf,
    pub embedder: PathBuf,
    pub grid: PathBuf,
    pub query: String,
    pub score: ScoreKind,
    pub target_norm: f64,
    pub out: PathBuf,
}

pub fn search(args: &SearchArgs) -> Result<(), CliError> {
    let (graph, _) = load_taxonomy(&args.taxonomy, None)?;
    let model = load_model(
        graph,
        &args.embeddings,
        &args.embedder,
        args.score,
        args.target_norm,
    )?;
    let grid = FeatureGrid::from_bytes(&read_bytes(&args.grid)?).map_err(validation)?;
    let query = parse_query(&args.query, &model.graph, &model.table).map_err(validation)?;
    let map = concept_search(&model, &grid, &query).map_err(runtime)?;
    if map.degenerate_cells > 0 {
        eprintln!("warning: {} grid cells had degenerate embeddings", map.degenerate_cells);
    }
    let stem = args.out.as_path();
    write_file(&stem.with_extension("pgm"), map.to_pgm())?;
    write_file(&stem.with_extension("csv"), map.to_csv())?;

    let mut m = Manifest::new("search");
    m.push_flag("taxonomy", args.taxonomy.display());
    m.push_flag("embeddings", args.embeddings.display());
    m.push_flag("embedder", args.embedder.display());
    m.push_flag("grid", args.grid.display());
    m.push_flag("query", &args.query);
    m.push_flag("score", args.score.token());
    m.push_flag("target-norm", args.target_norm);
    m.push_flag("out", args.out.display());
    m.push("degenerate_cells", map.degenerate_cells);
    write_file(&stem.with_extension("manifest.txt"), m.render())?;
    println!(
        "searched {}x{} grid for {:?} ({} degenerate cells)",
        map.height, map.width, map.query, map.degenerate_cells
    );
    Ok(())
}

pub struct SynthArgs {
    pub taxonomy: PathBuf,
    pub embeddings: PathBuf,
    pub expr: String,
    pub k: usize,
    pub score: ScoreKind,
    pub out: PathBuf,
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let (graph, _) = load_taxonomy(&args.taxonomy, None)?;
    let table = load_table(&args.embeddings, &graph)?;
    let query = parse_query(&args.expr, &graph, &table).map_err(validation)?;
    let coords = match &query {
        SearchQuery::Concept(id) => table.get(*id).to_vec(),
        SearchQuery::Vector { coords, .. } => coords.clone(),
    };
    let rendered: Vec<String> = coords.iter().map(|c| c.to_string()).collect();
    write_file(
        &args.out.join("synth.tsv"),
        format!("{}\t{}\n", args.expr, rendered.join(",")),
    )?;
    let (hits, clamped) = nearest_concepts(&table, &coords, args.k, args.score);
    if clamped {
        eprintln!("warning: k exceeds table size; returning the full ranking");
    }
    let mut nearest = String::new();
    for (c, s) in &hits {
        nearest.push_str(&format!("{}\t{}\n", graph.name(*c), s));
    }
    write_file(&args.out.join("nearest.tsv"), nearest)?;

    let mut m = Manifest::new("synth");
    m.push_flag("taxonomy", args.taxonomy.display());
    m.push_flag("embeddings", args.embeddings.display());
    m.push_flag("expr", &args.expr);
    m.push_flag("k", args.k);
    m.push_flag("score", args.score.token());
    m.push_flag("out", args.out.display());
    write_file(&args.out.join("manifest.txt"), m.render())?;
    println!("synthesized {:?}; top match {}", args.expr, graph.name(hits[0].0));
    Ok(())
}

pub struct DiversityArgs {
    pub taxonomy: PathBuf,
    pub freqs: PathBuf,
    pub train_classes: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub feat_dim: usize,
    pub sigma_level: f64,
    pub sigma_obs: f64,
    pub samples_per_class: usize,
    pub out: PathBuf,
}

/// Diversity test: for each requested training-class count, sample that many
/// leaf classes by inverse-CDF over the class frequency histogram, train a
/// hyper-scored joint model with information-content loss weighting on them,
/// and evaluate zero-shot metrics on the remaining leaves.
pub fn diversity(args: &DiversityArgs) -> Result<(), CliError> {
    let (graph, ic) = load_taxonomy(&args.taxonomy, Some(&args.freqs))?;
    let mut config = load_config(args.config.as_deref(), args.seed)?;
    config.image_score_kind = ScoreKind::hyper2();
    config.ic_weighting = true;
    let leaves = graph.leaves();
    let counts: Result<Vec<usize>, CliError> = args
        .train_classes
        .split(',')
        .map(|c| {
            c.trim()
                .parse::<usize>()
                .map_err(|_| validation(format!("bad class count {c:?}")))
        })
        .collect();
    let counts = counts?;
    for &count in &counts {
        if count == 0 || count >= leaves.len() {
            return Err(validation(format!(
                "train class count {count} must be in 1..{}",
                leaves.len()
            )));
        }
    }

    let mut csv = String::from("train_classes,cutoff,hier_precision,hier_recall,hier_f,info_ratio\n");
    for &count in &counts {
        let training = sample_classes_by_frequency(&ic, &leaves, count, config.seed);
        let held_out: Vec<ConceptId> = leaves
            .iter()
            .copied()
            .filter(|l| !training.contains(l))
            .collect();
        let spec = SyntheticSpec {
            graph: &graph,
            leaf_classes: leaves.clone(),
            feature_dim: args.feat_dim,
            sigma_level: args.sigma_level,
            sigma_obs: args.sigma_obs,
            samples_per_class: args.samples_per_class,
            held_out,
            seed: config.seed,
        };
        let data = generate_synthetic(&spec).map_err(validation)?;
        let init = train_concepts(&graph, &config).map_err(runtime)?.table;
        let model = train_joint(&graph, &ic, &data.train, &training, &config, init)
            .map_err(runtime)?;
        let vocab: Vec<ConceptId> = graph.ids().collect();
        let cal = calibrate_threshold(&model, &data.validation, &vocab).map_err(runtime)?;
        let predictions =
            predict_zero_shot_all(&model, &data.zero_shot_test, &vocab, cal.cutoff)
                .map_err(runtime)?;
        let primaries: Vec<ConceptId> = predictions.iter().map(|p| p.primary).collect();
        let report = aggregate(
            &model.graph,
            &ic,
            &primaries,
            data.zero_shot_test.labels(),
            None,
        )
        .map_err(runtime)?;
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            count, cal.cutoff, report.hier_precision, report.hier_recall, report.hier_f,
            report.info_ratio
        ));
    }
    write_file(&args.out.join("diversity.csv"), &csv)?;

    let mut m = Manifest::new("diversity");
    m.push_flag("taxonomy", args.taxonomy.display());
    m.push_flag("freqs", args.freqs.display());
    m.push_flag("train-classes", &args.train_classes);
    m.push_opt_flag("config", args.config.as_ref().map(|p| p.display().to_string()));
    m.push_opt_flag("seed", args.seed);
    m.push_flag("feat-dim", args.feat_dim);
    m.push_flag("sigma-level", args.sigma_level);
    m.push_flag("sigma-obs", args.sigma_obs);
    m.push_flag("samples-per-class", args.samples_per_class);
    m.push_flag("out", args.out.display());
    m.push_config(&config);
    write_file(&args.out.join("manifest.txt"), m.render())?;
    println!("{csv}");
    Ok(())
}

