use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{EvalReport, MetricsError};

/// Percentile of ascending `sorted` values with linear interpolation between
/// closest ranks (`p` in percent). NaN for an empty slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl MetricSummary {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            n: v.len(),
            min: v[0],
            q1: percentile(&v, 25.0),
            median: percentile(&v, 50.0),
            q3: percentile(&v, 75.0),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub outliers: usize,
    pub outlier_rate: f64,
    pub dice: MetricSummary,
    /// Undefined distances are excluded; `null` if none are defined.
    pub assd: Option<MetricSummary>,
    pub hd95: Option<MetricSummary>,
}

pub fn summarize(reports: &[EvalReport]) -> Result<SummaryStats, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyReportList);
    }
    let dice: Vec<f64> = reports.iter().map(|r| r.dice).collect();
    let assd: Vec<f64> = reports.iter().filter_map(|r| r.assd).collect();
    let hd95: Vec<f64> = reports.iter().filter_map(|r| r.hd95).collect();
    let outliers = reports.iter().filter(|r| r.outlier).count();
    Ok(SummaryStats {
        n: reports.len(),
        outliers,
        outlier_rate: outliers as f64 / reports.len() as f64,
        dice: MetricSummary::of(&dice).expect("non-empty"),
        assd: MetricSummary::of(&assd),
        hd95: MetricSummary::of(&hd95),
    })
}

/// Tukey box-plot geometry for one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxPlot {
    /// `[q1, median, q3]`.
    pub quartiles: [f64; 3],
    /// Most extreme values within 1.5 IQR of the box.
    pub whiskers: [f64; 2],
    pub outliers: Vec<f64>,
}

impl BoxPlot {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q1 = percentile(&v, 25.0);
        let q3 = percentile(&v, 75.0);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside: Vec<f64> = v.iter().copied().filter(|x| *x >= lo_fence && *x <= hi_fence).collect();
        Some(Self {
            quartiles: [q1, percentile(&v, 50.0), q3],
            whiskers: [inside[0], inside[inside.len() - 1]],
            outliers: v.iter().copied().filter(|x| *x < lo_fence || *x > hi_fence).collect(),
        })
    }
}

/// Box-plot data keyed by metric name (`dice`, `assd`, `hd95`).
pub fn box_plot(reports: &[EvalReport]) -> BTreeMap<String, BoxPlot> {
    let mut out = BTreeMap::new();
    let series: [(&str, Vec<f64>); 3] = [
        ("dice", reports.iter().map(|r| r.dice).collect()),
        ("assd", reports.iter().filter_map(|r| r.assd).collect()),
        ("hd95", reports.iter().filter_map(|r| r.hd95).collect()),
    ];
    for (name, values) in series {
        if let Some(b) = BoxPlot::of(&values) {
            out.insert(name.to_string(), b);
        }
    }
    out
}

/// CSV export with a header row; undefined distances are empty cells.
pub fn write_csv<W: Write>(out: W, reports: &[EvalReport]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["image_id", "dice", "assd", "hd95", "outlier", "band_mm"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        w.write_record([
            r.image_id.clone(),
            r.dice.to_string(),
            opt(r.assd),
            opt(r.hd95),
            r.outlier.to_string(),
            r.band_mm.to_string(),
        ])?;
    }
    w.flush()
}
