//! Anomaly scores, ROC metrics and angle histograms.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ClassMap, Condition, Manifest, Split};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::losses::{margin_logits, softmax, LossConfig};
use crate::model::{CosineLogits, Model};
use crate::trainer::Checkpoint;

/// Default upper false-positive rate for the partial AUC.
pub const DEFAULT_P: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredClip {
    pub machine_type: String,
    pub machine_id: u32,
    pub condition: Condition,
    /// Higher is more anomalous.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleRecord {
    pub machine_type: String,
    pub machine_id: u32,
    pub condition: Condition,
    /// Radians between the embedding and its own class center.
    pub theta_true: f64,
}

/// `1 - softmax(s cos)[y]`, summed over the other classes so that confident
/// clips keep their precision. With `margin`, the true logit uses `cos(θ+m)`.
pub fn anomaly_score(cos: &CosineLogits, true_class: usize, loss: &LossConfig, margin: bool) -> Result<f64> {
    let k = cos.cos.len();
    if true_class >= k {
        return Err(Error::Metric(format!("class {true_class} out of range for {k} classes")));
    }
    let logits = if margin {
        margin_logits(&cos.cos, true_class, loss)
    } else {
        cos.cos.iter().map(|c| loss.scale * c).collect()
    };
    let p = softmax(&logits);
    Ok(p.iter().enumerate().filter(|&(i, _)| i != true_class).map(|(_, v)| v).sum())
}

fn split_scores(clips: &[ScoredClip]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut anomalies = Vec::new();
    let mut normals = Vec::new();
    for c in clips {
        if !c.score.is_finite() {
            return Err(Error::Metric(format!(
                "non-finite score for {} id {}",
                c.machine_type, c.machine_id
            )));
        }
        match c.condition {
            Condition::Anomaly => anomalies.push(c.score),
            Condition::Normal => normals.push(c.score),
        }
    }
    if anomalies.is_empty() || normals.is_empty() {
        return Err(Error::Metric(format!(
            "need both conditions, got {} anomalies and {} normals",
            anomalies.len(),
            normals.len()
        )));
    }
    Ok((anomalies, normals))
}

/// Twice the Mann-Whitney count: 2 per anomaly-normal pair ordered correctly,
/// 1 per tie.
pub fn doubled_pair_count(anomalies: &[f64], normals: &[f64]) -> u64 {
    let mut n = normals.to_vec();
    n.sort_by(f64::total_cmp);
    anomalies
        .iter()
        .map(|&a| {
            let below = n.partition_point(|&x| x < a) as u64;
            let not_above = n.partition_point(|&x| x <= a) as u64;
            2 * below + (not_above - below)
        })
        .sum()
}

pub fn auc(clips: &[ScoredClip]) -> Result<f64> {
    let (a, n) = split_scores(clips)?;
    let pairs = 2 * a.len() as u64 * n.len() as u64;
    Ok(doubled_pair_count(&a, &n) as f64 / pairs as f64)
}

/// ROC vertices `(fpr, tpr)` from the highest threshold down; tied scores
/// form a single diagonal step.
pub fn roc_vertices(anomalies: &[f64], normals: &[f64]) -> Vec<(f64, f64)> {
    let mut all: Vec<(f64, bool)> = anomalies
        .iter()
        .map(|&s| (s, true))
        .chain(normals.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|x, y| y.0.total_cmp(&x.0));
    let (na, nn) = (anomalies.len() as f64, normals.len() as f64);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut out = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((fp as f64 / nn, tp as f64 / na));
    }
    out
}

/// Area under the ROC for FPR in `[0, p]`, divided by `p`.
pub fn pauc(clips: &[ScoredClip], p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Metric(format!("p must lie in (0, 1], got {p}")));
    }
    let (a, n) = split_scores(clips)?;
    let v = roc_vertices(&a, &n);
    let mut area = 0.0;
    for w in v.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= p {
            break;
        }
        if x1 <= p {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (p - x0) / (x1 - x0);
            area += (p - x0) * (y0 + y) / 2.0;
        }
    }
    Ok(area / p)
}

fn by_machine(clips: &[ScoredClip]) -> BTreeMap<String, BTreeMap<u32, Vec<ScoredClip>>> {
    let mut out: BTreeMap<String, BTreeMap<u32, Vec<ScoredClip>>> = BTreeMap::new();
    for c in clips {
        out.entry(c.machine_type.clone())
            .or_default()
            .entry(c.machine_id)
            .or_default()
            .push(c.clone());
    }
    out
}

fn has_both(group: &[ScoredClip]) -> bool {
    group.iter().any(|c| c.condition == Condition::Normal) && group.iter().any(|c| c.condition == Condition::Anomaly)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaucReport {
    pub per_type: BTreeMap<String, f64>,
    pub average: f64,
}

/// Worst per-ID AUC within each machine type, then the mean over types.
/// Groups lacking a condition are skipped with a warning.
pub fn mauc(clips: &[ScoredClip]) -> Result<MaucReport> {
    let mut per_type = BTreeMap::new();
    for (ty, ids) in by_machine(clips) {
        let mut worst: Option<f64> = None;
        for (id, group) in ids {
            if !has_both(&group) {
                log::warn!("{ty} id {id}: only one condition, excluded from mAUC");
                continue;
            }
            let a = auc(&group)?;
            worst = Some(worst.map_or(a, |w| w.min(a)));
        }
        if let Some(w) = worst {
            per_type.insert(ty, w);
        }
    }
    if per_type.is_empty() {
        return Err(Error::Metric("no machine ID has both conditions".into()));
    }
    let average = per_type.values().sum::<f64>() / per_type.len() as f64;
    Ok(MaucReport { per_type, average })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdMetrics {
    pub auc: f64,
    pub pauc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeMetrics {
    pub auc: f64,
    pub pauc: f64,
    pub mauc: f64,
    pub ids: BTreeMap<u32, IdMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub p: f64,
    pub per_type: BTreeMap<String, TypeMetrics>,
    pub average: TypeAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeAverage {
    pub auc: f64,
    pub pauc: f64,
    pub mauc: f64,
}

/// Per-ID AUC and pAUC, their means per type, mAUC per type, and the
/// averages over types.
pub fn metrics_report(clips: &[ScoredClip], p: f64) -> Result<MetricsReport> {
    let mut per_type = BTreeMap::new();
    for (ty, groups) in by_machine(clips) {
        let mut ids = BTreeMap::new();
        for (id, group) in groups {
            if !has_both(&group) {
                log::warn!("{ty} id {id}: only one condition, excluded from the report");
                continue;
            }
            ids.insert(
                id,
                IdMetrics {
                    auc: auc(&group)?,
                    pauc: pauc(&group, p)?,
                },
            );
        }
        if ids.is_empty() {
            continue;
        }
        let n = ids.len() as f64;
        let auc_mean = ids.values().map(|m| m.auc).sum::<f64>() / n;
        let pauc_mean = ids.values().map(|m| m.pauc).sum::<f64>() / n;
        let worst = ids.values().map(|m| m.auc).fold(f64::INFINITY, f64::min);
        per_type.insert(
            ty,
            TypeMetrics {
                auc: auc_mean,
                pauc: pauc_mean,
                mauc: worst,
                ids,
            },
        );
    }
    if per_type.is_empty() {
        return Err(Error::Metric("no machine ID has both conditions".into()));
    }
    let n = per_type.len() as f64;
    let mean = |f: fn(&TypeMetrics) -> f64| per_type.values().map(f).sum::<f64>() / n;
    let average = TypeAverage {
        auc: mean(|t| t.auc),
        pauc: mean(|t| t.pauc),
        mauc: mean(|t| t.mauc),
    };
    Ok(MetricsReport { p, per_type, average })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count_normal: u64,
    pub count_anomaly: u64,
}

/// Fixed-width bins over `[0, π]`; θ = π lands in the last bin.
pub fn angle_histogram(records: &[AngleRecord], bins: usize) -> Result<Vec<AngleBin>> {
    if bins == 0 {
        return Err(Error::Config("bins must be at least 1".into()));
    }
    let width = PI / bins as f64;
    let mut out: Vec<AngleBin> = (0..bins)
        .map(|b| AngleBin {
            bin_low: b as f64 * width,
            bin_high: if b + 1 == bins { PI } else { (b + 1) as f64 * width },
            count_normal: 0,
            count_anomaly: 0,
        })
        .collect();
    for r in records {
        if !(0.0..=PI).contains(&r.theta_true) {
            return Err(Error::Metric(format!("angle {} outside [0, π]", r.theta_true)));
        }
        let b = ((r.theta_true / width) as usize).min(bins - 1);
        match r.condition {
            Condition::Normal => out[b].count_normal += 1,
            Condition::Anomaly => out[b].count_anomaly += 1,
        }
    }
    Ok(out)
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// A trained model ready for scoring, with the class map and scale it was
/// trained with.
pub struct Scorer {
    pub model: Model,
    pub class_map: ClassMap,
    pub loss: LossConfig,
    pub include_margin: bool,
    fx: FeatureExtractor,
}

impl Scorer {
    pub fn from_checkpoint(ckpt: &Checkpoint, include_margin: bool) -> Result<Self> {
        let model = ckpt.model()?;
        let fx = FeatureExtractor::new(model.dims.mel.clone())?;
        Ok(Scorer {
            model,
            class_map: ckpt.header.class_map.clone(),
            loss: ckpt.header.train.loss.clone(),
            include_margin,
            fx,
        })
    }

    /// Scores and true-class angles for every record of `split`.
    pub fn score_split(&self, manifest: &Manifest, split: Split) -> Result<(Vec<ScoredClip>, Vec<AngleRecord>)> {
        let mut scores = Vec::new();
        let mut angles = Vec::new();
        for r in manifest.split(split) {
            let class = self.class_map.index(&r.machine_type, r.machine_id)?;
            let w = r.load(&manifest.base_dir)?;
            let (_, cos) = self.model.infer(&self.fx, &w)?;
            scores.push(ScoredClip {
                machine_type: r.machine_type.clone(),
                machine_id: r.machine_id,
                condition: r.condition,
                score: anomaly_score(&cos, class, &self.loss, self.include_margin)?,
            });
            angles.push(AngleRecord {
                machine_type: r.machine_type.clone(),
                machine_id: r.machine_id,
                condition: r.condition,
                theta_true: cos.theta[class],
            });
        }
        Ok((scores, angles))
    }
}

pub fn write_scores_csv(path: impl AsRef<Path>, clips: &[ScoredClip]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["machine_type", "machine_id", "condition", "score"])?;
    for c in clips {
        w.write_record([
            c.machine_type.clone(),
            c.machine_id.to_string(),
            c.condition.to_string(),
            c.score.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_histogram_csv(path: impl AsRef<Path>, bins: &[AngleBin]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for b in bins {
        w.serialize(b)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_report_json(path: impl AsRef<Path>, report: &MetricsReport) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
