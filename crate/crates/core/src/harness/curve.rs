//! Aggregation of run records into accuracy-versus-FLOPs curves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{Protocol, RunRecord, STATUS_OK};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Mean cumulative training FLOPs of the contributing records.
    pub flops: f64,
    pub mean_accuracy: f64,
    /// Standard error over seeds of the per-seed task mean.
    pub stderr: f64,
    /// Number of seeds.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    pub protocol: Protocol,
    pub kind: String,
    pub method: String,
    /// Sorted by FLOPs.
    pub points: Vec<CurvePoint>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation over `sqrt(n)`; zero for a single value.
fn stderr(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

/// One curve per (protocol, task kind, method). Each point averages the
/// records sharing a step: accuracy is averaged over tasks within a seed,
/// then over seeds. Failed records are excluded.
pub fn tradeoff_curves(records: &[RunRecord]) -> Vec<TradeoffCurve> {
    type Key = (Protocol, String, String);
    // step -> seed -> (accuracies, flops)
    let mut groups: BTreeMap<Key, BTreeMap<usize, BTreeMap<u64, Vec<(f64, f64)>>>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.status == STATUS_OK) {
        groups
            .entry((r.protocol, r.task_kind.clone(), r.method.clone()))
            .or_default()
            .entry(r.step)
            .or_default()
            .entry(r.seed)
            .or_default()
            .push((r.eval_accuracy, r.train_flops_cum as f64));
    }
    groups
        .into_iter()
        .map(|((protocol, kind, method), steps)| {
            let mut points: Vec<CurvePoint> = steps
                .into_values()
                .map(|seeds| {
                    let seed_means: Vec<f64> = seeds
                        .values()
                        .map(|v| mean(&v.iter().map(|(a, _)| *a).collect::<Vec<_>>()))
                        .collect();
                    let flops: Vec<f64> = seeds.values().flatten().map(|(_, f)| *f).collect();
                    CurvePoint {
                        flops: mean(&flops),
                        mean_accuracy: mean(&seed_means),
                        stderr: stderr(&seed_means),
                        n: seed_means.len(),
                    }
                })
                .collect();
            points.sort_by(|a, b| a.flops.total_cmp(&b.flops));
            TradeoffCurve {
                protocol,
                kind,
                method,
                points,
            }
        })
        .collect()
}

fn positive(curve: &TradeoffCurve) -> Vec<&CurvePoint> {
    curve.points.iter().filter(|p| p.flops > 0.0).collect()
}

/// Accuracy at `budget` FLOPs, interpolated linearly in log-FLOPs between
/// the bracketing points. Zero-FLOP points are outside the log domain and
/// ignored.
pub fn accuracy_at_flops(curve: &TradeoffCurve, budget: f64) -> Result<f64> {
    let pts = positive(curve);
    let (Some(first), Some(last)) = (pts.first(), pts.last()) else {
        return Err(Error::BudgetOutOfRange { budget, lo: f64::NAN, hi: f64::NAN });
    };
    if !(budget >= first.flops && budget <= last.flops) {
        return Err(Error::BudgetOutOfRange {
            budget,
            lo: first.flops,
            hi: last.flops,
        });
    }
    if let Some(p) = pts.iter().find(|p| p.flops == budget) {
        return Ok(p.mean_accuracy);
    }
    let i = pts.partition_point(|p| p.flops < budget);
    let (a, b) = (pts[i - 1], pts[i]);
    let t = (budget / a.flops).ln() / (b.flops / a.flops).ln();
    Ok(a.mean_accuracy + t * (b.mean_accuracy - a.mean_accuracy))
}

/// `count` log-spaced budgets covered by every curve, from the largest
/// first point to the smallest last point. `None` if the ranges are
/// disjoint.
pub fn matched_budgets(curves: &[&TradeoffCurve], count: usize) -> Option<Vec<f64>> {
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    for c in curves {
        let pts = positive(c);
        lo = lo.max(pts.first()?.flops);
        hi = hi.min(pts.last()?.flops);
    }
    if lo > hi || count == 0 {
        return None;
    }
    if count == 1 {
        return Some(vec![lo]);
    }
    let ratio = (hi / lo).ln();
    Some(
        (0..count)
            .map(|k| match k {
                0 => lo,
                k if k == count - 1 => hi,
                k => lo * (ratio * k as f64 / (count - 1) as f64).exp(),
            })
            .collect(),
    )
}
