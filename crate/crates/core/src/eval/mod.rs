//! Localization and detection metrics, robustness sweeps and report files.

mod report;
mod robustness;

use crate::error::{Error, Result};
use crate::imgproc::BinaryMask;

pub use report::{
    write_report, AblationRow, AblationTable, Curve, CurvePoint, DatasetScores, EvalReport, REPORT_CSV, REPORT_JSON,
    REPORT_SVG,
};
pub use robustness::{degrade, robustness_sweep, Degradation, BLUR_LEVELS, JPEG_LEVELS};

/// `2TP / (2TP + FP + FN)` over manipulated pixels. Two empty masks score 1,
/// exactly one empty mask scores 0.
pub fn pixel_f1(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if !pred.same_dims(gt) {
        return Err(Error::shape(
            "pixel_f1",
            format!("{}x{} vs {}x{}", pred.width(), pred.height(), gt.width(), gt.height()),
        ));
    }
    let (mut tp, mut fp, mut fnn) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fnn == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fnn) as f64)
}

/// ROC AUC as the Mann-Whitney statistic over positive/negative pairs,
/// with tied scores counting one half.
pub fn image_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("image_auc", format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks, 1-based
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Mean of per-image F1 scores; an empty list is an error.
pub fn mean_pixel_f1(pairs: &[(BinaryMask, BinaryMask)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no masks to score".into()));
    }
    let mut s = 0.0;
    for (p, g) in pairs {
        s += pixel_f1(p, g)?;
    }
    Ok(s / pairs.len() as f64)
}
