//! Whole-case evaluation: sliding-window inference, argmax, Dice and NSD.

use serde::{Deserialize, Serialize};

use crate::decoder::predict_labels;
use crate::infer::{sliding_window_infer, Segmenter, SlidingWindowConfig};
use crate::metrics::{case_metrics, mean, MetricsReport};
use crate::volume::{LabelMap, Volume};
use crate::Result;

/// A preprocessed image with optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub image: Volume,
    pub labels: Option<LabelMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub cases: usize,
    /// Mean over cases, per class.
    pub class_dice: Vec<f64>,
    pub class_nsd: Vec<f64>,
    /// Mean over cases per class, then over classes.
    pub mean_dice: f64,
    pub mean_nsd: f64,
    /// Mean over classes per case, then over cases.
    pub case_mean_dice: f64,
    pub case_mean_nsd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub reports: Vec<MetricsReport>,
    /// Ids of cases without ground truth.
    pub skipped: Vec<String>,
    pub aggregate: Option<Aggregate>,
}

pub fn aggregate(reports: &[MetricsReport]) -> Option<Aggregate> {
    let k = reports.iter().map(|r| r.dice.len()).min()?;
    let per_class = |f: fn(&MetricsReport) -> &Vec<f64>| -> Vec<f64> {
        (0..k).map(|c| mean(&reports.iter().map(|r| f(r)[c]).collect::<Vec<_>>())).collect()
    };
    let class_dice = per_class(|r| &r.dice);
    let class_nsd = per_class(|r| &r.nsd);
    Some(Aggregate {
        cases: reports.len(),
        mean_dice: mean(&class_dice),
        mean_nsd: mean(&class_nsd),
        case_mean_dice: mean(&reports.iter().map(|r| r.mean_dice).collect::<Vec<_>>()),
        case_mean_nsd: mean(&reports.iter().map(|r| r.mean_nsd).collect::<Vec<_>>()),
        class_dice,
        class_nsd,
    })
}

/// Predicted label map for one image.
pub fn segment(image: &Volume, seg: &dyn Segmenter, sw: &SlidingWindowConfig) -> Result<LabelMap> {
    let logits = sliding_window_infer(image, seg, sw)?;
    predict_labels(&logits, image.spacing())
}

pub fn evaluate(cases: &[Case], seg: &dyn Segmenter, sw: &SlidingWindowConfig, tolerance_mm: &[f64]) -> Result<EvalOutcome> {
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for case in cases {
        let Some(gt) = &case.labels else {
            log::warn!("case {} has no ground truth; skipped", case.id);
            skipped.push(case.id.clone());
            continue;
        };
        let pred = segment(&case.image, seg, sw)?;
        reports.push(case_metrics(&case.id, &pred, gt, tolerance_mm)?);
    }
    let aggregate = aggregate(&reports);
    Ok(EvalOutcome {
        reports,
        skipped,
        aggregate,
    })
}

/// Fixed-width table of per-case and aggregate means.
pub fn render_table(outcome: &EvalOutcome) -> String {
    let mut s = format!("{:<16} {:>9} {:>9}\n", "case", "dice %", "nsd %");
    for r in &outcome.reports {
        s += &format!("{:<16} {:>9.2} {:>9.2}\n", r.case_id, r.mean_dice, r.mean_nsd);
    }
    if let Some(a) = &outcome.aggregate {
        s += &format!("{:<16} {:>9.2} {:>9.2}\n", "mean", a.mean_dice, a.mean_nsd);
    }
    for id in &outcome.skipped {
        s += &format!("{id:<16} skipped (no ground truth)\n");
    }
    s
}
