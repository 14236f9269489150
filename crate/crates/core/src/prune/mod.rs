//! Zero-shot local pruning: every prunable layer is pruned at the same rate
//! using only its own weights, and the rate is searched so that the compacted
//! model meets a FLOP budget.

mod compact;
mod score;

use serde::{Deserialize, Serialize};

pub use crate::flops::Granularity;
pub use compact::{
    compact_channels, compact_filters, gather_filters, gather_in_channels, gather_out_channels, mask_model, KeepSet,
};
pub use score::{
    pruned_count, score_channels, score_filters, score_weights, select_filter_keep, select_keep, Signal,
};

use crate::error::{Error, Result};
use crate::flops::{flop_report, required_channel_rate, FlopReport};
use crate::model::{Model, TrainabilityConfig};
use crate::rng::{derive_seed, name_hash};

pub const DEFAULT_TOLERANCE: f64 = 0.01;
const BISECTION_STEPS: usize = 60;

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningPlan {
    pub granularity: Granularity,
    pub signal: Signal,
    /// Fraction of prunable-layer FLOPs to remove (for weight granularity:
    /// fraction of weights masked).
    pub target: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

impl PruningPlan {
    pub fn new(granularity: Granularity, signal: Signal, target: f64) -> Self {
        Self {
            granularity,
            signal,
            target,
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target) {
            return Err(Error::OutOfRange {
                what: "target",
                value: self.target.to_string(),
                allowed: "[0, 1)",
            });
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::OutOfRange {
                what: "tolerance",
                value: self.tolerance.to_string(),
                allowed: "> 0",
            });
        }
        Ok(())
    }

    /// Short method label, e.g. `filter_magnitude_0.5`.
    pub fn label(&self) -> String {
        format!("{}_{}_{}", self.granularity.as_str(), self.signal.as_str(), self.target)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult {
    pub plan: PruningPlan,
    /// Per-layer rate the search settled on.
    pub rate: f64,
    pub keep_sets: Vec<KeepSet>,
    /// FLOP fraction removed over the prunable layers.
    pub achieved: f64,
    /// FLOP fraction removed over the whole training step.
    pub achieved_model: f64,
    /// The budget could not be met within tolerance because of integer
    /// counts; `achieved` is the nearest reachable value.
    pub integer_pinned: bool,
    pub masked_model: Model,
    /// Absent for weight granularity.
    pub compacted_model: Option<Model>,
}

/// Ids of the layers pruning may touch: both convs of every block.
pub fn prunable_layers(model: &Model) -> Vec<String> {
    model
        .blocks
        .iter()
        .flat_map(|b| [b.conv1.id.clone(), b.conv2.id.clone()])
        .collect()
}

fn is_prunable(id: &str) -> bool {
    id.starts_with("block") && (id.ends_with(".conv1") || id.ends_with(".conv2"))
}

fn prunable_flops(r: &FlopReport) -> u64 {
    r.sum_where(is_prunable)
}

fn layer_seed(plan: &PruningPlan, layer: &str) -> u64 {
    derive_seed(plan.seed, &[name_hash(layer), plan.granularity as u64])
}

/// Scores of every prunable layer under the plan's signal.
fn scores(model: &Model, plan: &PruningPlan) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::new();
    for id in prunable_layers(model) {
        if plan.granularity == Granularity::Channel && !id.ends_with(".conv1") {
            continue;
        }
        let layer = model.conv(&id).expect("prunable ids come from the model");
        if layer.layout.is_some() {
            return Err(Error::InvalidPlan(format!("{id} is already compacted")));
        }
        let w = &layer.weight.value;
        let seed = layer_seed(plan, &id);
        let s = match plan.granularity {
            Granularity::Weight => score_weights(w, plan.signal, seed),
            Granularity::Filter => score_filters(w, plan.signal, seed),
            Granularity::Channel => score_channels(w, plan.signal, seed),
        };
        out.push((id, s));
    }
    Ok(out)
}

fn keep_sets_at(model: &Model, plan: &PruningPlan, scores: &[(String, Vec<f64>)], rate: f64) -> Vec<KeepSet> {
    scores
        .iter()
        .map(|(id, s)| {
            let kept = match plan.granularity {
                Granularity::Filter => {
                    let g = model.conv(id).expect("scored layer exists").geometry;
                    select_filter_keep(s, g.out_channels, g.in_channels, rate)
                }
                _ => select_keep(s, rate),
            };
            KeepSet {
                layer: id.clone(),
                granularity: plan.granularity,
                total: s.len(),
                kept,
            }
        })
        .collect()
}

fn compact(model: &Model, g: Granularity, keep: &[KeepSet]) -> Result<Model> {
    match g {
        Granularity::Filter => compact_filters(model, keep),
        Granularity::Channel => compact_channels(model, keep),
        Granularity::Weight => Ok(model.clone()),
    }
}

/// Prunes `model` according to `plan` without looking at any data.
///
/// Weight plans mask `floor(target * n)` weights per layer and save no
/// FLOPs. Filter and channel plans search the shared per-layer rate by
/// bisection on the exact FLOP report of the compacted model, starting from
/// the closed-form rate.
pub fn prune(model: &Model, plan: &PruningPlan) -> Result<PruneResult> {
    plan.validate()?;
    if model.is_pruned() {
        return Err(Error::InvalidPlan("model is already pruned".into()));
    }
    let scores = scores(model, plan)?;
    let full = TrainabilityConfig::full(model);
    let dense = flop_report(model, &full)?;
    let dense_prunable = prunable_flops(&dense) as f64;

    if plan.granularity == Granularity::Weight {
        let keep_sets = keep_sets_at(model, plan, &scores, plan.target);
        let masked = mask_model(model, &keep_sets)?;
        return Ok(PruneResult {
            plan: *plan,
            rate: plan.target,
            keep_sets,
            achieved: 0.0,
            achieved_model: 0.0,
            integer_pinned: false,
            masked_model: masked,
            compacted_model: None,
        });
    }

    let removed_at = |rate: f64| -> Result<(f64, f64)> {
        let keep = keep_sets_at(model, plan, &scores, rate);
        let m = compact(model, plan.granularity, &keep)?;
        let r = flop_report(&m, &TrainabilityConfig::full(&m))?;
        Ok((
            1.0 - prunable_flops(&r) as f64 / dense_prunable,
            1.0 - r.flops_per_example as f64 / dense.flops_per_example as f64,
        ))
    };

    // smallest rate whose removed fraction reaches the target
    let initial = match plan.granularity {
        Granularity::Channel => required_channel_rate(plan.target),
        _ => plan.target,
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    if removed_at(initial)?.0 >= plan.target {
        hi = initial;
    } else {
        lo = initial;
    }
    if removed_at(lo)?.0 >= plan.target {
        hi = lo;
    }
    for _ in 0..BISECTION_STEPS {
        if hi - lo <= f64::EPSILON {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if removed_at(mid)?.0 >= plan.target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (above, below) = (removed_at(hi)?, removed_at(lo)?);
    let rate = if (above.0 - plan.target).abs() <= (plan.target - below.0).abs() {
        hi
    } else {
        lo
    };
    let (achieved, achieved_model) = if rate == hi { above } else { below };
    let miss = (achieved - plan.target).abs();
    if miss > 5.0 * plan.tolerance {
        return Err(Error::BudgetUnreachable {
            target: plan.target,
            nearest: achieved,
        });
    }
    let keep_sets = keep_sets_at(model, plan, &scores, rate);
    Ok(PruneResult {
        plan: *plan,
        rate,
        masked_model: mask_model(model, &keep_sets)?,
        compacted_model: Some(compact(model, plan.granularity, &keep_sets)?),
        keep_sets,
        achieved,
        achieved_model,
        integer_pinned: miss > plan.tolerance,
    })
}
