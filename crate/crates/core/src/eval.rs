//! Metrics and the analysis suite: overall RMSE/Corr/MAE, severity
//! breakdown, per-system macro summary with win counts, and the temporal
//! shift sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Item, ManifestRow};
use crate::error::{Error, Result};
use crate::fusion::{FusionKind, STEP_MS};
use crate::head::Severity;
use crate::model::Model;
use crate::training::ensemble_predict_shifted;

pub const SHIFT_DELTAS: [i64; 7] = [-4, -2, -1, 0, 1, 2, 4];

fn check_pair(op: &'static str, pred: &[f64], target: &[f64], min: usize) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::dim(op, format!("{} predictions vs {} targets", pred.len(), target.len())));
    }
    if pred.len() < min {
        return Err(Error::arg(op, format!("needs at least {min} items, got {}", pred.len())));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair("rmse", pred, target, 1)?;
    let ss: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair("mae", pred, target, 1)?;
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    /// One side had zero variance; `value` is then 0.
    pub degenerate: bool,
}

/// Pearson correlation from centered sums.
pub fn pearson(pred: &[f64], target: &[f64]) -> Result<Correlation> {
    check_pair("pearson", pred, target, 2)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = target.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation { value: 0.0, degenerate: true });
    }
    Ok(Correlation { value: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0), degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub rmse: f64,
    pub corr: f64,
    pub corr_degenerate: bool,
    pub mae: f64,
}

impl MetricsReport {
    /// Groups with a single item get a degenerate zero correlation.
    pub fn compute(pred: &[f64], target: &[f64]) -> Result<Self> {
        let corr = if pred.len() >= 2 { pearson(pred, target)? } else { Correlation { value: 0.0, degenerate: true } };
        Ok(Self {
            n: pred.len(),
            rmse: rmse(pred, target)?,
            corr: corr.value,
            corr_degenerate: corr.degenerate,
            mae: mae(pred, target)?,
        })
    }
}

/// Unweighted means of per-group values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub rmse: f64,
    pub corr: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    /// Group key and metrics, in a stable order.
    pub groups: Vec<(String, MetricsReport)>,
    pub macro_avg: MacroAverage,
}

impl GroupReport {
    fn from_groups(groups: Vec<(String, MetricsReport)>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::data("no non-empty groups"));
        }
        let k = groups.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| groups.iter().map(|(_, m)| f(m)).sum::<f64>() / k;
        let macro_avg = MacroAverage { rmse: mean(|m| m.rmse), corr: mean(|m| m.corr), mae: mean(|m| m.mae) };
        Ok(Self { groups, macro_avg })
    }

    pub fn get(&self, key: &str) -> Option<&MetricsReport> {
        self.groups.iter().find(|(k, _)| k == key).map(|(_, m)| m)
    }

    /// Group-wise mean of several reports over the same groups, e.g. one
    /// per seed. A group's correlation is flagged if any input flags it.
    pub fn mean_over(reports: &[GroupReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::arg("mean_over", "no reports"))?;
        let k = reports.len() as f64;
        let mut groups = Vec::with_capacity(first.groups.len());
        for (i, (key, m0)) in first.groups.iter().enumerate() {
            let mut acc = MetricsReport { n: m0.n, rmse: 0.0, corr: 0.0, corr_degenerate: false, mae: 0.0 };
            for r in reports {
                let (rk, m) = r.groups.get(i).ok_or_else(|| Error::data("reports cover different groups"))?;
                if rk != key || m.n != m0.n {
                    return Err(Error::data(format!("group {key} differs between reports")));
                }
                acc.rmse += m.rmse / k;
                acc.corr += m.corr / k;
                acc.mae += m.mae / k;
                acc.corr_degenerate |= m.corr_degenerate;
            }
            groups.push((key.clone(), acc));
        }
        if reports.iter().any(|r| r.groups.len() != groups.len()) {
            return Err(Error::data("reports cover different groups"));
        }
        Self::from_groups(groups)
    }
}

fn grouped<K: Ord + Clone>(preds: &[f64], rows: &[&ManifestRow], key: impl Fn(&ManifestRow) -> K) -> Result<BTreeMap<K, (Vec<f64>, Vec<f64>)>> {
    if preds.len() != rows.len() {
        return Err(Error::dim("group report", format!("{} predictions vs {} rows", preds.len(), rows.len())));
    }
    let mut out: BTreeMap<K, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (&p, r) in preds.iter().zip(rows) {
        let g = out.entry(key(r)).or_default();
        g.0.push(p);
        g.1.push(r.label);
    }
    Ok(out)
}

/// Per-severity metrics in mild → moderately severe order. Absent
/// severities are omitted with a warning.
pub fn severity_report(preds: &[f64], rows: &[&ManifestRow]) -> Result<GroupReport> {
    let mut by = grouped(preds, rows, |r| r.severity)?;
    let mut groups = Vec::new();
    for s in Severity::ALL {
        match by.remove(&s) {
            Some((p, t)) => groups.push((s.as_str().to_string(), MetricsReport::compute(&p, &t)?)),
            None => log::warn!("severity group {s} is empty and omitted"),
        }
    }
    GroupReport::from_groups(groups)
}

/// Per-group win counts of a candidate over a baseline. Ties are not wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wins {
    pub rmse: usize,
    pub corr: usize,
    pub mae: usize,
    pub groups: usize,
}

impl Wins {
    pub fn rate(count: usize, groups: usize) -> f64 {
        count as f64 / groups as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemComparison {
    pub baseline: GroupReport,
    pub candidate: GroupReport,
    pub wins: Wins,
}

/// Per-system metrics, ordered by system id.
pub fn system_groups(preds: &[f64], rows: &[&ManifestRow]) -> Result<GroupReport> {
    let by = grouped(preds, rows, |r| r.system_id.clone())?;
    let groups = by.into_iter().map(|(k, (p, t))| Ok((k, MetricsReport::compute(&p, &t)?))).collect::<Result<_>>()?;
    GroupReport::from_groups(groups)
}

/// Per-system metrics of a baseline and a candidate over the same rows,
/// with the candidate's strict wins per metric.
pub fn system_report(baseline: &[f64], candidate: &[f64], rows: &[&ManifestRow]) -> Result<SystemComparison> {
    let baseline = system_groups(baseline, rows)?;
    let candidate = system_groups(candidate, rows)?;
    let wins = count_wins(&baseline, &candidate)?;
    Ok(SystemComparison { baseline, candidate, wins })
}

/// Groups where the candidate is strictly better: lower RMSE or MAE,
/// higher correlation.
pub fn count_wins(baseline: &GroupReport, candidate: &GroupReport) -> Result<Wins> {
    if baseline.groups.len() != candidate.groups.len() {
        return Err(Error::data("baseline and candidate cover different groups"));
    }
    let mut wins = Wins { rmse: 0, corr: 0, mae: 0, groups: baseline.groups.len() };
    for ((ka, ma), (kb, mb)) in baseline.groups.iter().zip(&candidate.groups) {
        if ka != kb {
            return Err(Error::data(format!("group {ka} has no counterpart (found {kb})")));
        }
        wins.rmse += usize::from(mb.rmse < ma.rmse);
        wins.corr += usize::from(mb.corr > ma.corr);
        wins.mae += usize::from(mb.mae < ma.mae);
    }
    Ok(wins)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub delta_steps: i64,
    pub shift_ms: i64,
    pub metrics: MetricsReport,
}

/// Re-evaluates frozen frame-aligned checkpoints (averaged when several)
/// with each extra shift applied to the prepared fine stream.
pub fn shift_sweep(models: &[Model], items: &[&Item], deltas: &[i64]) -> Result<Vec<ShiftRow>> {
    for m in models {
        if m.config.fusion.kind != FusionKind::FrameAligned {
            return Err(Error::Config(format!(
                "shift sweep needs a frame_aligned model, got {}",
                m.config.fusion.kind.as_str()
            )));
        }
    }
    let targets: Vec<f64> = items.iter().map(|it| it.row.label).collect();
    deltas
        .iter()
        .map(|&delta| {
            let preds = ensemble_predict_shifted(models, items, delta)?;
            Ok(ShiftRow { delta_steps: delta, shift_ms: delta * STEP_MS, metrics: MetricsReport::compute(&preds, &targets)? })
        })
        .collect()
}
