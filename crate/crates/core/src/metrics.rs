//! Depth evaluation: Rel, RMSE, δ accuracies and %val over gt-valid pixels, split by
//! whether an initial estimate existed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::DepthMap;
use crate::image::Mask;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("map sizes differ: {0:?} vs {1:?}")]
    SizeMismatch((usize, usize), (usize, usize)),
}

/// Metrics of one region; `None` values when the region is empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub region: String,
    /// Gt-valid pixels in the region.
    pub pixels: usize,
    pub rel: Option<f64>,
    pub rmse: Option<f64>,
    pub delta1: Option<f64>,
    pub delta2: Option<f64>,
    pub delta3: Option<f64>,
    pub pct_valid: Option<f64>,
}

impl MetricsReport {
    pub fn is_empty(&self) -> bool {
        self.pixels == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub whole: MetricsReport,
    pub with_initial: MetricsReport,
    pub without_initial: MetricsReport,
}

impl RegionMetrics {
    pub fn regions(&self) -> [&MetricsReport; 3] {
        [&self.whole, &self.with_initial, &self.without_initial]
    }
}

/// Pairwise (cascade) summation; deterministic for a given order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Metrics over the pixels of `region`; predictions are scored where they are valid and
/// `pct_valid` is the valid share of the region.
pub fn region_metrics(name: &str, pred: &DepthMap, gt: &DepthMap, region: &Mask) -> MetricsReport {
    let mut abs_rel = Vec::new();
    let mut sq = Vec::new();
    let mut hits = [0usize; 3];
    let mut pixels = 0;
    let thresholds = [1.25, 1.25f64.powi(2), 1.25f64.powi(3)];
    for i in 0..region.data().len() {
        if !region.data()[i] {
            continue;
        }
        pixels += 1;
        if !pred.valid.data()[i] {
            continue;
        }
        let (p, g) = (pred.image.data()[i], gt.image.data()[i]);
        abs_rel.push((p - g).abs() / g);
        sq.push((p - g) * (p - g));
        let ratio = (p / g).max(g / p);
        for (h, t) in hits.iter_mut().zip(thresholds) {
            if ratio < t {
                *h += 1;
            }
        }
    }
    let mut report = MetricsReport { region: name.to_string(), pixels, ..Default::default() };
    if pixels == 0 {
        return report;
    }
    let n_valid = abs_rel.len();
    report.pct_valid = Some(100.0 * n_valid as f64 / pixels as f64);
    if n_valid > 0 {
        let n = n_valid as f64;
        report.rel = Some(pairwise_sum(&abs_rel) / n);
        report.rmse = Some((pairwise_sum(&sq) / n).sqrt());
        report.delta1 = Some(hits[0] as f64 / n);
        report.delta2 = Some(hits[1] as f64 / n);
        report.delta3 = Some(hits[2] as f64 / n);
    }
    report
}

/// Region masks: gt-valid, gt-valid with an initial value, gt-valid without one.
pub fn region_masks(gt: &DepthMap, initial: &DepthMap) -> (Mask, Mask, Mask) {
    let whole = gt.valid.clone();
    let with = whole.and(&initial.valid);
    let without = whole.and(&initial.valid.not());
    (whole, with, without)
}

pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, initial: &DepthMap) -> Result<RegionMetrics, MetricsError> {
    let dims = (gt.width(), gt.height());
    for m in [pred, initial] {
        if (m.width(), m.height()) != dims {
            return Err(MetricsError::SizeMismatch(dims, (m.width(), m.height())));
        }
    }
    let (whole, with, without) = region_masks(gt, initial);
    let whole = region_metrics("whole", pred, gt, &whole);
    // %val always refers to the whole gt-valid domain.
    let split = |name: &str, mask: &Mask| {
        let mut r = region_metrics(name, pred, gt, mask);
        if !r.is_empty() {
            r.pct_valid = whole.pct_valid;
        }
        r
    };
    Ok(RegionMetrics {
        with_initial: split("with_initial", &with),
        without_initial: split("without_initial", &without),
        whole,
    })
}

fn fmt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

/// Aligned text table of the three regions.
pub fn format_table(m: &RegionMetrics) -> String {
    let mut out = format!(
        "{:<16} {:>8} {:>8} {:>8} {:>7} {:>7} {:>7} {:>7}\n",
        "region", "pixels", "Rel", "RMSE", "d1", "d2", "d3", "%val"
    );
    for r in m.regions() {
        out.push_str(&format!(
            "{:<16} {:>8} {:>8} {:>8} {:>7} {:>7} {:>7} {:>7}\n",
            r.region,
            r.pixels,
            fmt(r.rel, 3),
            fmt(r.rmse, 3),
            fmt(r.delta1, 3),
            fmt(r.delta2, 3),
            fmt(r.delta3, 3),
            fmt(r.pct_valid, 1),
        ));
    }
    out
}
