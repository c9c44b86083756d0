//! Depth error statistics, correct-rate AUC and segmentation IoU.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sonovis_diff::par;

use crate::error::{CoreError, Result};
use crate::image::{DepthImage, LabelMap};

/// Lower clamp for relative-error denominators and log arguments.
pub const CLAMP: f64 = 1e-6;
/// Number of AUC intervals: thresholds 0, 0.01, ..., 0.30.
pub const CRR_STEPS: usize = 30;
pub const CRR_SPACING: f64 = 0.01;
/// Classes below this IoU under every compared method are dropped.
pub const IOU_EXCLUSION: f64 = 0.01;

/// Which value divides the error in `abs_rel` and `sqr_rel`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    #[default]
    Prediction,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetricReport {
    pub abs_rel: f64,
    pub sqr_rel: f64,
    pub rmse_lin: f64,
    pub rmse_log: f64,
    pub auc_crr: f64,
    pub n_images: usize,
    pub denominator: Denominator,
}

impl DepthMetricReport {
    pub const AGGREGATION: &'static str =
        "per-image mean over pixels with gt > 0, then mean over images; rmse = sqrt of the image-averaged mean square";
}

#[derive(Default)]
struct ImageStats {
    abs_rel: f64,
    sqr_rel: f64,
    mse_lin: f64,
    mse_log: f64,
    /// Crr at each threshold index 0..CRR_STEPS.
    crr: Vec<f64>,
}

fn check_pairs(preds: &[DepthImage], gts: &[DepthImage]) -> Result<()> {
    if preds.is_empty() {
        return Err(CoreError::invalid("no images to evaluate"));
    }
    if preds.len() != gts.len() {
        return Err(CoreError::invalid(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.dims() != g.dims() {
            return Err(CoreError::invalid(format!("image {i}: prediction {:?} vs ground truth {:?}", p.dims(), g.dims())));
        }
    }
    Ok(())
}

pub fn threshold(t: usize) -> f64 {
    t as f64 / 100.0
}

fn image_stats(pred: &DepthImage, gt: &DepthImage, denom: Denominator, index: usize) -> Result<ImageStats> {
    let mut s = ImageStats {
        crr: vec![0.0; CRR_STEPS],
        ..Default::default()
    };
    let mut n = 0usize;
    let mut counts = vec![0usize; CRR_STEPS];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p as f64, g as f64);
        if !(g > 0.0) {
            continue;
        }
        n += 1;
        let err = (g - p).abs();
        let d = match denom {
            Denominator::Prediction => p,
            Denominator::GroundTruth => g,
        }
        .max(CLAMP);
        s.abs_rel += err / d;
        s.sqr_rel += err * err / d;
        s.mse_lin += err * err;
        let l = g.max(CLAMP).ln() - p.max(CLAMP).ln();
        s.mse_log += l * l;
        let rel = err / g;
        for (t, c) in counts.iter_mut().enumerate() {
            if rel < threshold(t) {
                *c += 1;
            }
        }
    }
    if n == 0 {
        return Err(CoreError::invalid(format!("image {index} has no valid ground-truth pixels")));
    }
    let n = n as f64;
    s.abs_rel /= n;
    s.sqr_rel /= n;
    s.mse_lin /= n;
    s.mse_log /= n;
    for (c, &k) in s.crr.iter_mut().zip(&counts) {
        *c = k as f64 / n;
    }
    Ok(s)
}

fn all_stats(preds: &[DepthImage], gts: &[DepthImage], denom: Denominator) -> Result<Vec<ImageStats>> {
    check_pairs(preds, gts)?;
    par::map_range(preds.len(), |i| image_stats(&preds[i], &gts[i], denom, i))
        .into_iter()
        .collect()
}

fn mean_of(stats: &[ImageStats], f: impl Fn(&ImageStats) -> f64) -> f64 {
    let v: Vec<f64> = stats.iter().map(f).collect();
    par::pairwise_sum(&v) / v.len() as f64
}

fn auc_from(stats: &[ImageStats]) -> f64 {
    let crr: Vec<f64> = (0..CRR_STEPS).map(|t| mean_of(stats, |s| s.crr[t])).collect();
    crr.iter().sum::<f64>() * CRR_SPACING
}

pub fn depth_metrics(preds: &[DepthImage], gts: &[DepthImage], denom: Denominator) -> Result<DepthMetricReport> {
    let stats = all_stats(preds, gts, denom)?;
    Ok(DepthMetricReport {
        abs_rel: mean_of(&stats, |s| s.abs_rel),
        sqr_rel: mean_of(&stats, |s| s.sqr_rel),
        rmse_lin: mean_of(&stats, |s| s.mse_lin).sqrt(),
        rmse_log: mean_of(&stats, |s| s.mse_log).sqrt(),
        auc_crr: auc_from(&stats),
        n_images: stats.len(),
        denominator: denom,
    })
}

/// Fraction of valid pixels with `|y - y_hat| / y < tau`.
pub fn crr(pred: &DepthImage, gt: &DepthImage, tau: f64) -> Result<f64> {
    if !(tau >= 0.0) {
        return Err(CoreError::invalid("threshold must be non-negative"));
    }
    check_pairs(std::slice::from_ref(pred), std::slice::from_ref(gt))?;
    let (mut hit, mut n) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p as f64, g as f64);
        if g > 0.0 {
            n += 1;
            if (g - p).abs() / g < tau {
                hit += 1;
            }
        }
    }
    if n == 0 {
        return Err(CoreError::invalid("image has no valid ground-truth pixels"));
    }
    Ok(hit as f64 / n as f64)
}

pub fn auc_crr(preds: &[DepthImage], gts: &[DepthImage]) -> Result<f64> {
    Ok(auc_from(&all_stats(preds, gts, Denominator::Prediction)?))
}

fn check_labels(preds: &[LabelMap], gts: &[LabelMap]) -> Result<()> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(CoreError::invalid(format!("{} predicted maps for {} ground truths", preds.len(), gts.len())));
    }
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.dims() != g.dims() {
            return Err(CoreError::invalid(format!("map {i}: prediction {:?} vs ground truth {:?}", p.dims(), g.dims())));
        }
    }
    Ok(())
}

/// Intersection and union pixel counts of one class over a set of maps.
fn class_counts(preds: &[LabelMap], gts: &[LabelMap], class: u8) -> (u64, u64) {
    let per: Vec<(u64, u64)> = par::map_range(preds.len(), |i| {
        preds[i].data().iter().zip(gts[i].data()).fold((0, 0), |(i, u), (&p, &g)| {
            let (a, b) = (p == class, g == class);
            (i + (a && b) as u64, u + (a || b) as u64)
        })
    });
    per.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
}

/// IoU of one class on one map pair; `None` when neither map contains it.
pub fn iou(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<Option<f64>> {
    check_labels(std::slice::from_ref(pred), std::slice::from_ref(gt))?;
    let (i, u) = class_counts(std::slice::from_ref(pred), std::slice::from_ref(gt), class);
    Ok((u > 0).then(|| i as f64 / u as f64))
}

/// IoU per class for each compared method: `method -> class -> iou`.
pub type IouTable = BTreeMap<String, BTreeMap<u8, f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetricReport {
    pub per_class_iou: BTreeMap<u8, f64>,
    pub miou: f64,
    pub included_classes: Vec<u8>,
    /// Classes under the exclusion threshold for every compared method.
    pub excluded_classes: Vec<u8>,
    /// Classes present in neither predictions nor ground truth.
    pub absent_classes: Vec<u8>,
    pub n_images: usize,
}

impl SegMetricReport {
    pub const AGGREGATION: &'static str = "global confusion counts over all images";
}

/// Dataset-level IoU per class with the low-IoU exclusion rule. Without an
/// external table the rule uses this run's IoUs.
pub fn miou(preds: &[LabelMap], gts: &[LabelMap], classes: &[u8], external: Option<&IouTable>) -> Result<SegMetricReport> {
    check_labels(preds, gts)?;
    let mut per_class_iou = BTreeMap::new();
    let mut absent_classes = Vec::new();
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &c in &sorted {
        let (i, u) = class_counts(preds, gts, c);
        if u == 0 {
            absent_classes.push(c);
        } else {
            per_class_iou.insert(c, i as f64 / u as f64);
        }
    }
    let excluded = |c: u8, own: f64| match external {
        Some(table) if !table.is_empty() => table
            .values()
            .all(|m| m.get(&c).copied().unwrap_or(0.0) < IOU_EXCLUSION),
        _ => own < IOU_EXCLUSION,
    };
    let (mut included_classes, mut excluded_classes) = (Vec::new(), Vec::new());
    for (&c, &v) in &per_class_iou {
        if excluded(c, v) {
            excluded_classes.push(c);
        } else {
            included_classes.push(c);
        }
    }
    if included_classes.is_empty() {
        return Err(CoreError::invalid("no classes left after the IoU exclusion rule"));
    }
    let miou = included_classes.iter().map(|c| per_class_iou[c]).sum::<f64>() / included_classes.len() as f64;
    Ok(SegMetricReport {
        per_class_iou,
        miou,
        included_classes,
        excluded_classes,
        absent_classes,
        n_images: preds.len(),
    })
}
