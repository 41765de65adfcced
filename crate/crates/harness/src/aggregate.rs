//! Mean and population standard deviation of group metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::experiment::{GroupReport, Setup};
use crate::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    pub std: f64,
    /// Groups that reported the metric.
    pub groups: usize,
}

/// Metrics of one subject under one setup, across its groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub setup: Setup,
    pub subject: String,
    pub metrics: BTreeMap<String, MetricStat>,
}

pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(HarnessError::Aggregate(format!(
            "standard deviation needs at least 2 groups, got {}",
            values.len()
        )));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Ok((values[0], 0.0));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Summarizes groups sharing one setup and subject. A metric reported by
/// fewer than two groups is left out.
pub fn aggregate(groups: &[GroupReport]) -> Result<Summary> {
    let first = groups
        .first()
        .ok_or_else(|| HarnessError::Aggregate("no groups to aggregate".into()))?;
    if groups.len() < 2 {
        return Err(HarnessError::Aggregate(format!(
            "{}/{}: a single group has no standard deviation",
            first.setup, first.subject
        )));
    }
    if groups.iter().any(|g| g.setup != first.setup || g.subject != first.subject) {
        return Err(HarnessError::Aggregate("groups mix setups or subjects".into()));
    }
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for g in groups {
        for (k, &v) in &g.metrics {
            values.entry(k).or_default().push(v);
        }
    }
    let mut metrics = BTreeMap::new();
    for (k, v) in values {
        if v.len() >= 2 {
            let (mean, std) = mean_std(&v)?;
            metrics.insert(k.to_string(), MetricStat { mean, std, groups: v.len() });
        }
    }
    Ok(Summary {
        setup: first.setup,
        subject: first.subject.clone(),
        metrics,
    })
}

/// One summary per (setup, subject), in key order.
pub fn summarize(groups: &[GroupReport]) -> Result<Vec<Summary>> {
    let mut by_key: BTreeMap<(Setup, &str), Vec<GroupReport>> = BTreeMap::new();
    for g in groups {
        by_key.entry((g.setup, &g.subject)).or_default().push(g.clone());
    }
    by_key.values().map(|gs| aggregate(gs)).collect()
}

/// Signed change `variant − base` of mean and std for metrics both share.
pub fn deltas(variant: &Summary, base: &Summary) -> Result<Summary> {
    if variant.subject != base.subject {
        return Err(HarnessError::Aggregate(format!(
            "delta between subjects {} and {}",
            variant.subject, base.subject
        )));
    }
    let metrics = variant
        .metrics
        .iter()
        .filter_map(|(k, v)| {
            base.metrics.get(k).map(|b| {
                (
                    k.clone(),
                    MetricStat {
                        mean: v.mean - b.mean,
                        std: v.std - b.std,
                        groups: v.groups.min(b.groups),
                    },
                )
            })
        })
        .collect();
    Ok(Summary {
        setup: variant.setup,
        subject: variant.subject.clone(),
        metrics,
    })
}

/// Deltas of every non-base summary against the base summary of its subject.
pub fn delta_tables(summaries: &[Summary]) -> Result<Vec<Summary>> {
    summaries
        .iter()
        .filter(|s| s.setup != Setup::Base)
        .filter_map(|s| {
            summaries
                .iter()
                .find(|b| b.setup == Setup::Base && b.subject == s.subject)
                .map(|b| deltas(s, b))
        })
        .collect()
}
