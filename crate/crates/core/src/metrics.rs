//! Dice and normalized surface distance, both in percent.

use serde::{Deserialize, Serialize};

use crate::volume::{flat_index, LabelMap, Spacing};
use crate::{Error, Result};

fn check_shapes(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Contract(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    Ok(())
}

/// `2|P∩G| / (|P| + |G|) · 100`; 100 when both are empty, 0 when one is.
pub fn dice_score(pred: &LabelMap, gt: &LabelMap, class_id: u8) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut inter, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p == class_id, g == class_id);
        np += p as usize;
        ng += g as usize;
        inter += (p && g) as usize;
    }
    Ok(match (np, ng) {
        (0, 0) => 100.0,
        _ => 2.0 * inter as f64 / (np + ng) as f64 * 100.0,
    })
}

/// Foreground voxels with at least one face neighbour outside the mask;
/// the volume border counts as outside.
pub fn surface(mask: &[bool], shape: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    let inside = |d: usize, h: usize, w: usize| mask[flat_index(shape, d, h, w)];
    for d in 0..shape[0] {
        for h in 0..shape[1] {
            for w in 0..shape[2] {
                if !inside(d, h, w) {
                    continue;
                }
                let border = d == 0 || h == 0 || w == 0 || d + 1 == shape[0] || h + 1 == shape[1] || w + 1 == shape[2];
                if border
                    || !inside(d - 1, h, w)
                    || !inside(d + 1, h, w)
                    || !inside(d, h - 1, w)
                    || !inside(d, h + 1, w)
                    || !inside(d, h, w - 1)
                    || !inside(d, h, w + 1)
                {
                    out.push([d, h, w]);
                }
            }
        }
    }
    out
}

/// Squared physical distance between voxel centres.
#[inline]
pub fn dist2(a: [usize; 3], b: [usize; 3], spacing: Spacing) -> f64 {
    (0..3)
        .map(|i| {
            let x = (a[i] as f64 - b[i] as f64) * spacing[i];
            x * x
        })
        .sum()
}

/// Number of points of `from` with some point of `to` within `tol`.
fn count_within(from: &[[usize; 3]], to: &[[usize; 3]], to_mask: &[bool], shape: [usize; 3], tol: f64, spacing: Spacing) -> usize {
    let tol2 = tol * tol;
    // one extra voxel of reach absorbs rounding in tol / spacing
    let reach = [0, 1, 2].map(|a| (tol / spacing[a]).floor() as usize + 1);
    let box_size: f64 = reach.iter().map(|&r| (2 * r + 1) as f64).product();
    if box_size >= to.len() as f64 {
        return from.iter().filter(|&&p| to.iter().any(|&q| dist2(p, q, spacing) <= tol2)).count();
    }
    from.iter()
        .filter(|&&p| {
            let lo = [0, 1, 2].map(|a| p[a].saturating_sub(reach[a]));
            let hi = [0, 1, 2].map(|a| (p[a] + reach[a]).min(shape[a] - 1));
            for d in lo[0]..=hi[0] {
                for h in lo[1]..=hi[1] {
                    for w in lo[2]..=hi[2] {
                        if to_mask[flat_index(shape, d, h, w)] && dist2(p, [d, h, w], spacing) <= tol2 {
                            return true;
                        }
                    }
                }
            }
            false
        })
        .count()
}

/// Two-sided surface agreement within `tolerance_mm`, in percent.
pub fn nsd_score(pred: &LabelMap, gt: &LabelMap, class_id: u8, tolerance_mm: f64, spacing: Spacing) -> Result<f64> {
    check_shapes(pred, gt)?;
    if !(tolerance_mm.is_finite() && tolerance_mm > 0.0) {
        return Err(Error::Contract(format!("NSD tolerance must be positive, got {tolerance_mm}")));
    }
    crate::volume::validate_spacing(&spacing)?;
    let shape = pred.shape();
    let sp = surface(&pred.mask(class_id), shape);
    let sg = surface(&gt.mask(class_id), shape);
    match (sp.len(), sg.len()) {
        (0, 0) => return Ok(100.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let mut sp_mask = vec![false; pred.data().len()];
    let mut sg_mask = vec![false; pred.data().len()];
    sp.iter().for_each(|&[d, h, w]| sp_mask[flat_index(shape, d, h, w)] = true);
    sg.iter().for_each(|&[d, h, w]| sg_mask[flat_index(shape, d, h, w)] = true);
    let a = count_within(&sp, &sg, &sg_mask, shape, tolerance_mm, spacing);
    let b = count_within(&sg, &sp, &sp_mask, shape, tolerance_mm, spacing);
    Ok((a + b) as f64 / (sp.len() + sg.len()) as f64 * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case_id: String,
    /// Indexed by class `1..=K` (position 0 is class 1).
    pub dice: Vec<f64>,
    pub nsd: Vec<f64>,
    pub mean_dice: f64,
    pub mean_nsd: f64,
    pub tolerance_mm: Vec<f64>,
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Expands one tolerance to every class, or checks a per-class list.
pub fn class_tolerances(tolerance_mm: &[f64], classes: usize) -> Result<Vec<f64>> {
    match tolerance_mm.len() {
        1 => Ok(vec![tolerance_mm[0]; classes]),
        n if n == classes => Ok(tolerance_mm.to_vec()),
        n => Err(Error::Contract(format!("{n} NSD tolerances for {classes} classes"))),
    }
}

/// Per-class metrics over foreground classes `1..=K`.
pub fn case_metrics(case_id: &str, pred: &LabelMap, gt: &LabelMap, tolerance_mm: &[f64]) -> Result<MetricsReport> {
    let k = gt.num_classes().max(pred.num_classes()).max(1);
    let tol = class_tolerances(tolerance_mm, k as usize)?;
    let spacing = gt.spacing();
    let mut dice = Vec::with_capacity(k as usize);
    let mut nsd = Vec::with_capacity(k as usize);
    for c in 1..=k {
        dice.push(dice_score(pred, gt, c)?);
        nsd.push(nsd_score(pred, gt, c, tol[c as usize - 1], spacing)?);
    }
    Ok(MetricsReport {
        case_id: case_id.to_string(),
        mean_dice: mean(&dice),
        mean_nsd: mean(&nsd),
        dice,
        nsd,
        tolerance_mm: tol,
    })
}
