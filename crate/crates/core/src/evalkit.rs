//! Box recall metrics for ranked proposals.

use crate::error::{contract, Result};
use crate::imagecore::BBox;
use crate::inference::{proposals_from_segmentations, MergePolicy, SegmentedImage};
use crate::rnnmodel::ModelParams;

/// The ten IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_grid() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

pub fn iou_box(a: &BBox, b: &BBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return contract(format!("degenerate box in IoU: {a:?} / {b:?}"));
    }
    Ok(iou(a, b))
}

pub(crate) fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Best IoU of every gt against the top `n` proposals of its image.
fn best_ious(proposals: &[Vec<BBox>], gts: &[Vec<BBox>], n: usize) -> Result<Vec<f64>> {
    if proposals.len() != gts.len() {
        return contract(format!("{} proposal lists for {} images", proposals.len(), gts.len()));
    }
    let mut best = Vec::new();
    for (props, gt) in proposals.iter().zip(gts) {
        for g in gt {
            let mut top = 0.0f64;
            for p in props.iter().take(n) {
                top = top.max(iou_box(p, g)?);
            }
            best.push(top);
        }
    }
    if best.is_empty() {
        return contract("recall needs at least one ground-truth object");
    }
    Ok(best)
}

fn covered_fraction(best: &[f64], threshold: f64) -> f64 {
    best.iter().filter(|&&v| v >= threshold).count() as f64 / best.len() as f64
}

fn mean_over_grid(best: &[f64]) -> f64 {
    iou_grid().iter().map(|&t| covered_fraction(best, t)).sum::<f64>() / 10.0
}

/// Fraction of gts (pooled over images) with IoU >= `threshold` against
/// some proposal among the first `n` of the same image.
pub fn recall_at(proposals: &[Vec<BBox>], gts: &[Vec<BBox>], threshold: f64, n: usize) -> Result<f64> {
    Ok(covered_fraction(&best_ious(proposals, gts, n)?, threshold))
}

/// Mean of [`recall_at`] over [`iou_grid`].
pub fn average_recall(proposals: &[Vec<BBox>], gts: &[Vec<BBox>], n: usize) -> Result<f64> {
    Ok(mean_over_grid(&best_ious(proposals, gts, n)?))
}

/// Default size buckets as canvas fractions: below 2%, 2-10%, above 10%.
pub const DEFAULT_SIZE_EDGES: [f64; 2] = [0.02, 0.10];

/// AR per size bucket. `areas` holds each gt's pixel area as a fraction of
/// its canvas; `edges` split the area axis into `edges.len() + 1` buckets
/// (lower edge inclusive). Empty buckets give `None`.
pub fn ar_by_size(
    proposals: &[Vec<BBox>],
    gts: &[Vec<BBox>],
    areas: &[Vec<f64>],
    n: usize,
    edges: &[f64],
) -> Result<Vec<Option<f64>>> {
    let best = best_ious(proposals, gts, n)?;
    let flat: Vec<f64> = areas.iter().flatten().copied().collect();
    if flat.len() != best.len() {
        return contract("one area per ground-truth object expected");
    }
    let bucket_of = |a: f64| edges.iter().take_while(|&&e| a >= e).count();
    Ok((0..=edges.len())
        .map(|b| {
            let inside: Vec<f64> =
                best.iter().zip(&flat).filter(|(_, &a)| bucket_of(a) == b).map(|(&v, _)| v).collect();
            (!inside.is_empty()).then(|| mean_over_grid(&inside))
        })
        .collect())
}

/// One image prepared for evaluation.
#[derive(Clone, Debug)]
pub struct EvalImage {
    pub segs: Vec<SegmentedImage>,
    pub gt_boxes: Vec<BBox>,
    /// Pixel area of each gt over the canvas area.
    pub gt_areas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub policy: String,
    pub budgets: Vec<usize>,
    /// `recall[b][t]` for budget `b` and grid threshold `t`.
    pub recall: Vec<Vec<f64>>,
    pub ar: Vec<f64>,
    /// `ar_by_size[b][bucket]`.
    pub ar_by_size: Vec<Vec<Option<f64>>>,
    pub gt_count: usize,
    pub image_count: usize,
}

impl EvalReport {
    pub fn from_proposals(
        policy: &str,
        proposals: &[Vec<BBox>],
        gts: &[Vec<BBox>],
        areas: &[Vec<f64>],
        budgets: &[usize],
    ) -> Result<Self> {
        let mut recall = Vec::new();
        let mut ar = Vec::new();
        let mut by_size = Vec::new();
        for &n in budgets {
            let best = best_ious(proposals, gts, n)?;
            recall.push(iou_grid().iter().map(|&t| covered_fraction(&best, t)).collect());
            ar.push(mean_over_grid(&best));
            by_size.push(ar_by_size(proposals, gts, areas, n, &DEFAULT_SIZE_EDGES)?);
        }
        Ok(EvalReport {
            policy: policy.to_string(),
            budgets: budgets.to_vec(),
            recall,
            ar,
            ar_by_size: by_size,
            gt_count: gts.iter().map(Vec::len).sum(),
            image_count: gts.len(),
        })
    }

    /// Recall at a grid threshold (0.5, 0.55, ...) for the `b`-th budget.
    pub fn recall_at_grid(&self, b: usize, threshold: f64) -> Option<f64> {
        let t = iou_grid().iter().position(|&g| (g - threshold).abs() < 1e-9)?;
        Some(self.recall[b][t])
    }
}

pub fn evaluate_policy(
    images: &[EvalImage],
    params: &ModelParams,
    name: &str,
    policy: &MergePolicy,
    budgets: &[usize],
) -> Result<EvalReport> {
    let max_budget = budgets.iter().copied().max().unwrap_or(0);
    let mut proposals = Vec::with_capacity(images.len());
    for img in images {
        let props = proposals_from_segmentations(&img.segs, params, policy, max_budget)?;
        proposals.push(props.into_iter().map(|p| p.bbox).collect());
    }
    let gts: Vec<Vec<BBox>> = images.iter().map(|i| i.gt_boxes.clone()).collect();
    let areas: Vec<Vec<f64>> = images.iter().map(|i| i.gt_areas.clone()).collect();
    EvalReport::from_proposals(name, &proposals, &gts, &areas, budgets)
}

/// Evaluates several named policies on the same segmentations and model.
pub fn compare_policies(
    images: &[EvalImage],
    params: &ModelParams,
    policies: &[(String, MergePolicy)],
    budgets: &[usize],
) -> Result<Vec<EvalReport>> {
    if policies.len() < 2 {
        return contract("comparison needs at least two policies");
    }
    policies.iter().map(|(name, p)| evaluate_policy(images, params, name, p, budgets)).collect()
}

fn fmt_threshold(t: f64) -> String {
    format!("{t:.2}")
}

/// `policy,budget,threshold,recall` rows for every budget and grid
/// threshold, then summary rows with threshold `AR` and the size buckets
/// `AR_small`, `AR_medium`, `AR_large` (`N/A` when a bucket is empty).
pub fn report_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("policy,budget,threshold,recall\n");
    for r in reports {
        for (b, &n) in r.budgets.iter().enumerate() {
            for (t, &thr) in iou_grid().iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", r.policy, n, fmt_threshold(thr), r.recall[b][t]));
            }
        }
    }
    let names = ["AR_small", "AR_medium", "AR_large"];
    for r in reports {
        for (b, &n) in r.budgets.iter().enumerate() {
            out.push_str(&format!("{},{},AR,{}\n", r.policy, n, r.ar[b]));
            for (name, v) in names.iter().zip(&r.ar_by_size[b]) {
                let v = v.map_or_else(|| "N/A".to_string(), |v| v.to_string());
                out.push_str(&format!("{},{},{},{}\n", r.policy, n, name, v));
            }
        }
    }
    out
}

/// Compact comparison table: `policy,budget,R@0.5,R@0.8,AR`.
pub fn comparison_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("policy,budget,R@0.5,R@0.8,AR\n");
    for r in reports {
        for (b, &n) in r.budgets.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.policy,
                n,
                r.recall[b][0],
                r.recall_at_grid(b, 0.8).unwrap_or(f64::NAN),
                r.ar[b]
            ));
        }
    }
    out
}
