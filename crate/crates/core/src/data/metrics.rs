use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Bad-pixel rule: error above `abs_px`, and also above `rel · gt` when
/// `use_rel` is set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct D1Threshold {
    pub abs_px: f64,
    pub rel: f64,
    pub use_rel: bool,
}

impl Default for D1Threshold {
    fn default() -> Self {
        Self {
            abs_px: 3.0,
            rel: 0.05,
            use_rel: false,
        }
    }
}

impl D1Threshold {
    pub fn is_bad(&self, pred: f64, gt: f64) -> bool {
        let e = (pred - gt).abs();
        e > self.abs_px && (!self.use_rel || e > self.rel * gt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub d1_percent: f64,
    /// Mean absolute disparity error over valid pixels.
    pub epe: f64,
    pub bad_pixels: u64,
    pub valid_pixels: u64,
    pub threshold: D1Threshold,
}

/// D1 and end-point error over pixels where `valid > 0`.
pub fn d1_error(pred: &Tensor4, gt: &Tensor4, valid: &Tensor4, threshold: D1Threshold) -> Result<MetricReport> {
    if pred.shape() != gt.shape() || valid.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "d1_error",
            left: pred.shape(),
            right: gt.shape(),
        });
    }
    let (mut bad, mut count, mut abs_sum) = (0u64, 0u64, 0.0);
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(valid.data()) {
        if m > 0.0 {
            count += 1;
            abs_sum += (p - g).abs();
            bad += threshold.is_bad(p, g) as u64;
        }
    }
    if count == 0 {
        return Err(Error::Empty("d1_error: no valid pixels".into()));
    }
    Ok(MetricReport {
        d1_percent: 100.0 * bad as f64 / count as f64,
        epe: abs_sum / count as f64,
        bad_pixels: bad,
        valid_pixels: count,
        threshold,
    })
}

/// Valid-pixel-weighted combination of per-sample reports.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    let first = reports.first().ok_or_else(|| Error::Empty("no reports to aggregate".into()))?;
    let bad: u64 = reports.iter().map(|r| r.bad_pixels).sum();
    let count: u64 = reports.iter().map(|r| r.valid_pixels).sum();
    // summed in sorted order so the result does not depend on report order
    let mut terms: Vec<f64> = reports.iter().map(|r| r.epe * r.valid_pixels as f64).collect();
    terms.sort_by(f64::total_cmp);
    let abs_sum: f64 = terms.iter().sum();
    Ok(MetricReport {
        d1_percent: 100.0 * bad as f64 / count as f64,
        epe: abs_sum / count as f64,
        bad_pixels: bad,
        valid_pixels: count,
        threshold: first.threshold,
    })
}
