//! Flat segmentation metrics and hierarchical open-vocabulary metrics.
//!
//! Flat metrics treat labels as an unordered class set. Hierarchical scores
//! compare a prediction to its label through their lowest common ancestor:
//! precision divides the LCA depth by the prediction depth, recall by the
//! label depth, and the F-score is their harmonic mean. The information
//! content ratio replaces depths with `-ln` frequencies so rare concepts
//! weigh more.

use std::collections::HashMap;

use thiserror::Error;

use crate::taxonomy::{lca, ConceptGraph, ConceptId, InformationContentTable};

#[derive(Error, Debug)]
pub enum MetricsError {
    #[error("shape mismatch: prediction has {pred} entries, ground truth {gt}")]
    ShapeMismatch { pred: usize, gt: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    InvalidLabel { label: u32, num_classes: u32 },
    #[error("all pixels carry the ignore label; metrics undefined")]
    AllIgnored,
    #[error("information ratio undefined: both concepts carry zero information")]
    UndefinedInfoRatio,
    #[error("weights length {weights} does not match {samples} samples")]
    WeightsMismatch { weights: usize, samples: usize },
}

/// The four classic parsing scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlatMetrics {
    pub pixel_accuracy: f64,
    pub mean_accuracy: f64,
    pub mean_iou: f64,
    pub weighted_iou: f64,
}

/// Per-class accuracy and IoU next to its ground-truth pixel count.
#[derive(Clone, Debug)]
pub struct ClassScore {
    pub label: u32,
    pub gt_pixels: u64,
    pub accuracy: f64,
    pub iou: f64,
}

struct Confusion {
    /// (gt pixels, predicted pixels, true positives) per class.
    counts: HashMap<u32, (u64, u64, u64)>,
    correct: u64,
    total: u64,
}

fn confusion(
    pred: &[u32],
    gt: &[u32],
    num_classes: u32,
    ignore_label: Option<u32>,
) -> Result<Confusion, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let mut counts: HashMap<u32, (u64, u64, u64)> = HashMap::new();
    let mut correct = 0u64;
    let mut total = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        if Some(g) == ignore_label {
            continue;
        }
        for label in [p, g] {
            if label >= num_classes && Some(label) != ignore_label {
                return Err(MetricsError::InvalidLabel {
                    label,
                    num_classes,
                });
            }
        }
        total += 1;
        counts.entry(g).or_default().0 += 1;
        if Some(p) != ignore_label {
            counts.entry(p).or_default().1 += 1;
        }
        if p == g {
            correct += 1;
            counts.entry(g).or_default().2 += 1;
        }
    }
    if total == 0 {
        return Err(MetricsError::AllIgnored);
    }
    Ok(Confusion {
        counts,
        correct,
        total,
    })
}

fn flat_from_confusion(c: &Confusion) -> (FlatMetrics, Vec<ClassScore>) {
    let mut labels: Vec<u32> = c.counts.keys().copied().collect();
    labels.sort_unstable();

    let mut acc_sum = 0.0;
    let mut acc_classes = 0usize;
    let mut iou_sum = 0.0;
    let mut iou_classes = 0usize;
    let mut weighted = 0.0;
    let mut per_class = Vec::with_capacity(labels.len());
    for &label in &labels {
        let (gt, pred, tp) = c.counts[&label];
        let union = gt + pred - tp;
        let iou = if union > 0 { tp as f64 / union as f64 } else { 0.0 };
        let accuracy = if gt > 0 { tp as f64 / gt as f64 } else { 0.0 };
        if gt > 0 {
            acc_sum += accuracy;
            acc_classes += 1;
            weighted += gt as f64 / c.total as f64 * iou;
        }
        // Mean IoU runs over classes present in gt or predictions.
        iou_sum += iou;
        iou_classes += 1;
        per_class.push(ClassScore {
            label,
            gt_pixels: gt,
            accuracy,
            iou,
        });
    }
    let flat = FlatMetrics {
        pixel_accuracy: c.correct as f64 / c.total as f64,
        mean_accuracy: acc_sum / acc_classes as f64,
        mean_iou: iou_sum / iou_classes as f64,
        weighted_iou: weighted,
    };
    (flat, per_class)
}

/// Flat metrics over a predicted and a ground-truth label map.
///
/// Pixels whose ground truth equals `ignore_label` are excluded everywhere.
/// Mean accuracy averages over classes present in the ground truth; mean IoU
/// over classes present in either map.
pub fn flat_metrics(
    pred: &[u32],
    gt: &[u32],
    num_classes: u32,
    ignore_label: Option<u32>,
) -> Result<FlatMetrics, MetricsError> {
    let c = confusion(pred, gt, num_classes, ignore_label)?;
    Ok(flat_from_confusion(&c).0)
}

/// Hierarchical precision, recall and F-score of predicting `p` for label `l`.
pub fn hierarchical_scores(graph: &ConceptGraph, l: ConceptId, p: ConceptId) -> (f64, f64, f64) {
    let a = lca(graph, l, p);
    let d_lca = graph.depth(a) as f64;
    let d_l = graph.depth(l) as f64;
    let d_p = graph.depth(p) as f64;
    let s_hp = d_lca / d_p;
    let s_hr = d_lca / d_l;
    let s_hf = 2.0 * d_lca / (d_l + d_p);
    (s_hp, s_hr, s_hf)
}

/// Information content ratio `2·I(LCA) / (I(l) + I(p))` with natural-log
/// information. Undefined when both concepts carry zero information (only
/// the root under monotone frequencies).
pub fn info_content_ratio(
    graph: &ConceptGraph,
    ic: &InformationContentTable,
    l: ConceptId,
    p: ConceptId,
) -> Result<f64, MetricsError> {
    let denom = ic.information(l) + ic.information(p);
    if denom == 0.0 {
        return Err(MetricsError::UndefinedInfoRatio);
    }
    Ok(2.0 * ic.information(lca(graph, l, p)) / denom)
}

/// Aggregate report over a dataset: flat metrics from the concept-level
/// confusion counts plus (optionally pixel-count-weighted) means of the
/// per-sample hierarchical scores.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub flat: FlatMetrics,
    pub hier_precision: f64,
    pub hier_recall: f64,
    pub hier_f: f64,
    pub info_ratio: f64,
    pub per_class: Vec<ClassScore>,
    /// Samples skipped in the information-ratio mean because the ratio was
    /// undefined for them.
    pub info_ratio_skipped: usize,
}

pub fn aggregate(
    graph: &ConceptGraph,
    ic: &InformationContentTable,
    predictions: &[ConceptId],
    ground_truth: &[ConceptId],
    weights: Option<&[f64]>,
) -> Result<MetricsReport, MetricsError> {
    if predictions.len() != ground_truth.len() {
        return Err(MetricsError::ShapeMismatch {
            pred: predictions.len(),
            gt: ground_truth.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != predictions.len() {
            return Err(MetricsError::WeightsMismatch {
                weights: w.len(),
                samples: predictions.len(),
            });
        }
    }

    let pred_raw: Vec<u32> = predictions.iter().map(|c| c.0).collect();
    let gt_raw: Vec<u32> = ground_truth.iter().map(|c| c.0).collect();
    let c = confusion(&pred_raw, &gt_raw, graph.len() as u32, None)?;
    let (flat, per_class) = flat_from_confusion(&c);

    let mut hp = 0.0;
    let mut hr = 0.0;
    let mut hf = 0.0;
    let mut si = 0.0;
    let mut si_weight = 0.0;
    let mut total_weight = 0.0;
    let mut skipped = 0usize;
    for (i, (&p, &l)) in predictions.iter().zip(ground_truth).enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let (s_hp, s_hr, s_hf) = hierarchical_scores(graph, l, p);
        hp += w * s_hp;
        hr += w * s_hr;
        hf += w * s_hf;
        total_weight += w;
        match info_content_ratio(graph, ic, l, p) {
            Ok(s) => {
                si += w * s;
                si_weight += w;
            }
            Err(_) => skipped += 1,
        }
    }
    Ok(MetricsReport {
        flat,
        hier_precision: hp / total_weight,
        hier_recall: hr / total_weight,
        hier_f: hf / total_weight,
        info_ratio: if si_weight > 0.0 { si / si_weight } else { 0.0 },
        per_class,
        info_ratio_skipped: skipped,
    })
}

impl MetricsReport {
    /// Machine-readable CSV: a `metric,value` block then a `class,acc,iou`
    /// block (class name resolved through the graph).
    pub fn to_csv(&self, graph: &ConceptGraph) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("pixel_accuracy,{}\n", self.flat.pixel_accuracy));
        out.push_str(&format!("mean_accuracy,{}\n", self.flat.mean_accuracy));
        out.push_str(&format!("mean_iou,{}\n", self.flat.mean_iou));
        out.push_str(&format!("weighted_iou,{}\n", self.flat.weighted_iou));
        out.push_str(&format!("hier_precision,{}\n", self.hier_precision));
        out.push_str(&format!("hier_recall,{}\n", self.hier_recall));
        out.push_str(&format!("hier_f,{}\n", self.hier_f));
        out.push_str(&format!("info_ratio,{}\n", self.info_ratio));
        out.push_str("class,acc,iou\n");
        for c in &self.per_class {
            out.push_str(&format!(
                "{},{},{}\n",
                graph.name(ConceptId(c.label)),
                c.accuracy,
                c.iou
            ));
        }
        out
    }

    /// Human-readable table.
    pub fn to_table(&self, graph: &ConceptGraph) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "pixel accuracy   {:.4}\nmean accuracy    {:.4}\nmean IoU         {:.4}\nweighted IoU     {:.4}\n",
            self.flat.pixel_accuracy, self.flat.mean_accuracy, self.flat.mean_iou, self.flat.weighted_iou
        ));
        out.push_str(&format!(
            "hier precision   {:.4}\nhier recall      {:.4}\nhier F-score     {:.4}\ninfo ratio       {:.4}\n",
            self.hier_precision, self.hier_recall, self.hier_f, self.info_ratio
        ));
        out.push_str("class                            acc     iou\n");
        for c in &self.per_class {
            out.push_str(&format!(
                "{:<30} {:>7.4} {:>7.4}\n",
                graph.name(ConceptId(c.label)),
                c.accuracy,
                c.iou
            ));
        }
        out
    }
}
