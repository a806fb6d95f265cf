//! Depth accuracy metrics and boundary precision/recall/F1.

use serde::{Deserialize, Serialize};

use crate::depth_geometry::{sobel_raw, DepthMap};
use crate::error::{Error, Result};

/// RMSE, AbsRel, log10 and the three threshold accuracies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rmse: f64,
    pub abs_rel: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

/// Over the ground-truth valid pixels.
pub fn depth_metrics(gt: &DepthMap, pred: &DepthMap) -> Result<DepthMetrics> {
    gt.ensure_same_dims(pred)?;
    let (mut se, mut rel, mut lg) = (0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    let mut n = 0usize;
    let thresholds = [1.25, 1.25f64.powi(2), 1.25f64.powi(3)];
    for (i, (&g, &p)) in gt.values().iter().zip(pred.values()).enumerate() {
        if !gt.valid()[i] {
            continue;
        }
        if !p.is_finite() {
            return Err(Error::NonFinite("predicted depth"));
        }
        if p <= 0.0 {
            return Err(Error::NonPositiveDepth {
                u: i % gt.width(),
                v: i / gt.width(),
                value: p,
            });
        }
        n += 1;
        let d = p - g;
        se += d * d;
        rel += d.abs() / g;
        lg += (p.log10() - g.log10()).abs();
        let ratio = (p / g).max(g / p);
        for (h, t) in hits.iter_mut().zip(thresholds) {
            if ratio < t {
                *h += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::AllInvalid);
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        rmse: (se / nf).sqrt(),
        abs_rel: rel / nf,
        log10: lg / nf,
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeMetricConfig {
    /// Sobel-magnitude thresholds on metric depth, strictly increasing.
    pub thresholds: Vec<f64>,
}

impl Default for EdgeMetricConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.25, 0.5, 1.0],
        }
    }
}

impl EdgeMetricConfig {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        let cfg = Self { thresholds };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Config("edge thresholds must not be empty".into()));
        }
        if self.thresholds.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(Error::Config("edge thresholds must be positive".into()));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("edge thresholds must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Parses a comma-separated list such as `0.25,0.5,1.0`.
    pub fn parse(list: &str) -> Result<Self> {
        let thresholds = list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad edge threshold {s:?} in {list:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(thresholds)
    }
}

/// Pixels whose Sobel magnitude `|gx| + |gy|` exceeds `threshold`.
pub fn edge_map(depth: &DepthMap, threshold: f64) -> Result<Vec<bool>> {
    edge_map_masked(depth.values(), depth.valid(), depth.width(), depth.height(), threshold)
}

fn edge_map_masked(values: &[f64], valid: &[bool], w: usize, h: usize, threshold: f64) -> Result<Vec<bool>> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("edge threshold must be > 0, got {threshold}")));
    }
    let g = sobel_raw(values, valid, w, h)?;
    Ok((0..values.len())
        .map(|i| valid[i] && g.gx[i].abs() + g.gy[i].abs() > threshold)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeScores {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision/recall/F1 from raw set sizes, with the empty-set conventions:
/// P = 1 for an empty prediction set, R = 1 for an empty truth set, F1 = 0
/// when P + R = 0.
pub fn prf_from_counts(pred_count: usize, gt_count: usize, both: usize) -> (f64, f64, f64) {
    let p = if pred_count == 0 { 1.0 } else { both as f64 / pred_count as f64 };
    let r = if gt_count == 0 { 1.0 } else { both as f64 / gt_count as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Edge P/R/F1 per threshold; prediction edges are extracted over the
/// ground-truth valid pixels.
pub fn edge_prf(gt: &DepthMap, pred: &DepthMap, cfg: &EdgeMetricConfig) -> Result<Vec<EdgeScores>> {
    gt.ensure_same_dims(pred)?;
    cfg.validate()?;
    let (w, h) = (gt.width(), gt.height());
    cfg.thresholds
        .iter()
        .map(|&t| {
            let eg = edge_map_masked(gt.values(), gt.valid(), w, h, t)?;
            let ep = edge_map_masked(pred.values(), gt.valid(), w, h, t)?;
            let pc = ep.iter().filter(|&&b| b).count();
            let gc = eg.iter().filter(|&&b| b).count();
            let both = eg.iter().zip(&ep).filter(|(a, b)| **a && **b).count();
            let (precision, recall, f1) = prf_from_counts(pc, gc, both);
            Ok(EdgeScores {
                threshold: t,
                precision,
                recall,
                f1,
            })
        })
        .collect()
}

/// One row of an evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub abs_rel: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    /// Ascending by threshold.
    pub edge: Vec<EdgeScores>,
}

impl MetricsReport {
    pub fn from_parts(d: DepthMetrics, edge: Vec<EdgeScores>) -> Self {
        Self {
            rmse: d.rmse,
            abs_rel: d.abs_rel,
            log10: d.log10,
            delta1: d.delta1,
            delta2: d.delta2,
            delta3: d.delta3,
            edge,
        }
    }

    /// Column names: `rmse,abs_rel,log10,d1,d2,d3` then `p@t,r@t,f1@t` per threshold.
    pub fn csv_header(thresholds: &[f64]) -> String {
        let mut cols: Vec<String> = ["rmse", "abs_rel", "log10", "d1", "d2", "d3"].map(String::from).to_vec();
        for t in thresholds {
            cols.extend([format!("p@{t}"), format!("r@{t}"), format!("f1@{t}")]);
        }
        cols.join(",")
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.edge.iter().map(|e| e.threshold).collect()
    }

    pub fn csv_row(&self) -> String {
        let mut vals = vec![self.rmse, self.abs_rel, self.log10, self.delta1, self.delta2, self.delta3];
        for e in &self.edge {
            vals.extend([e.precision, e.recall, e.f1]);
        }
        vals.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
    }

    pub fn edge_at(&self, threshold: f64) -> Option<&EdgeScores> {
        self.edge.iter().find(|e| e.threshold == threshold)
    }

    /// Arithmetic mean of reports that share a threshold list.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Config("cannot average zero reports".into()))?;
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let mut edge = Vec::with_capacity(first.edge.len());
        for (k, e) in first.edge.iter().enumerate() {
            if reports.iter().any(|r| r.edge.get(k).map(|x| x.threshold) != Some(e.threshold)) {
                return Err(Error::ShapeMismatch("reports use different edge thresholds".into()));
            }
            edge.push(EdgeScores {
                threshold: e.threshold,
                precision: avg(&|r| r.edge[k].precision),
                recall: avg(&|r| r.edge[k].recall),
                f1: avg(&|r| r.edge[k].f1),
            });
        }
        Ok(MetricsReport {
            rmse: avg(&|r| r.rmse),
            abs_rel: avg(&|r| r.abs_rel),
            log10: avg(&|r| r.log10),
            delta1: avg(&|r| r.delta1),
            delta2: avg(&|r| r.delta2),
            delta3: avg(&|r| r.delta3),
            edge,
        })
    }
}

/// Full report for one prediction.
pub fn evaluate_pair(gt: &DepthMap, pred: &DepthMap, cfg: &EdgeMetricConfig) -> Result<MetricsReport> {
    Ok(MetricsReport::from_parts(depth_metrics(gt, pred)?, edge_prf(gt, pred, cfg)?))
}
