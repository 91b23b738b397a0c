//! Label-free performance alarms: threshold calibration on corrupted
//! surrogate domains, alarm decisions, F1 against ground truth, and the
//! output-confidence baselines (AC, ANE, ATC).
//!
//! Scores are dissimilarities: larger means further from the reference, and
//! an alarm fires when the score reaches the calibrated threshold. Baselines
//! whose values grow with expected accuracy are negated before calibration.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax, Tensor};

pub const DEFAULT_SUBSET_SIZE: usize = 10;
pub const DEFAULT_REPETITIONS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub domain_id: String,
    pub corruption: String,
    pub severity: u8,
    pub perf: f64,
    pub css: f64,
}

pub const CALIBRATION_HEADER: &str = "domain_id,corruption,severity,perf,css";

pub fn calibration_csv(curve: &[CalibrationPoint]) -> String {
    let mut out = format!("{CALIBRATION_HEADER}\n");
    for p in curve {
        out.push_str(&format!("{},{},{},{},{}\n", p.domain_id, p.corruption, p.severity, p.perf, p.css));
    }
    out
}

pub fn parse_calibration_csv(text: &str) -> Result<Vec<CalibrationPoint>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next() != Some(CALIBRATION_HEADER) {
        return Err(Error::Format(format!("calibration file must start with `{CALIBRATION_HEADER}`")));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("malformed calibration row {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("bad number {s:?}: {e}")));
            Ok(CalibrationPoint {
                domain_id: f[0].into(),
                corruption: f[1].into(),
                severity: f[2].parse().map_err(|e| Error::Format(format!("bad severity {:?}: {e}", f[2])))?,
                perf: num(f[3])?,
                css: num(f[4])?,
            })
        })
        .collect()
}

pub fn save_calibration(path: &Path, curve: &[CalibrationPoint]) -> Result<()> {
    std::fs::File::create(path)?.write_all(calibration_csv(curve).as_bytes())?;
    Ok(())
}

/// Score of the surrogate whose performance is nearest `delta`; ties go to
/// the lower-performance point.
pub fn calibrate_threshold(curve: &[CalibrationPoint], delta: f64) -> Result<f64> {
    let mut best: Option<&CalibrationPoint> = None;
    for p in curve {
        if !p.css.is_finite() {
            return Err(Error::Numeric(format!("non-finite score for {}", p.domain_id)));
        }
        best = match best {
            None => Some(p),
            Some(b) => {
                let (dp, db) = ((p.perf - delta).abs(), (b.perf - delta).abs());
                if dp < db - 1e-12 || ((dp - db).abs() <= 1e-12 && p.perf < b.perf) {
                    Some(p)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.map(|p| p.css).ok_or_else(|| Error::arg("calibration curve is empty"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmDecision {
    pub domain_id: String,
    pub css: f64,
    pub threshold: f64,
    pub alarm: bool,
}

pub fn raise_alarm(domain_id: impl Into<String>, css: f64, threshold: f64) -> AlarmDecision {
    AlarmDecision {
        domain_id: domain_id.into(),
        css,
        threshold,
        alarm: css >= threshold,
    }
}

/// F1 of the alarms against `perf < delta`. A monitor that stays silent when
/// nothing is wrong scores 1.
pub fn alarm_f1(decisions: &[AlarmDecision], gt_perf: &[f64], delta: f64) -> Result<f64> {
    if decisions.len() != gt_perf.len() {
        return Err(Error::arg(format!(
            "{} decisions but {} ground-truth values",
            decisions.len(),
            gt_perf.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (d, &p) in decisions.iter().zip(gt_perf) {
        match (d.alarm, p < delta) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// A domain to be judged: its score and its (held-back) true performance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDomain {
    pub domain_id: String,
    pub score: f64,
    pub perf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub delta: f64,
    pub threshold: f64,
    pub decisions: Vec<AlarmDecision>,
    pub f1: f64,
    /// Mean and standard deviation of F1 over calibration subsets.
    pub subset_f1_mean: f64,
    pub subset_f1_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmReport {
    pub metric: String,
    pub subset_size: usize,
    pub repetitions: usize,
    pub per_delta: Vec<DeltaReport>,
}

impl AlarmReport {
    pub fn mean_f1(&self) -> f64 {
        if self.per_delta.is_empty() {
            return 0.0;
        }
        self.per_delta.iter().map(|d| d.f1).sum::<f64>() / self.per_delta.len() as f64
    }
}

fn judge(curve: &[CalibrationPoint], domains: &[EvalDomain], delta: f64) -> Result<(f64, Vec<AlarmDecision>, f64)> {
    let threshold = calibrate_threshold(curve, delta)?;
    let decisions: Vec<AlarmDecision> = domains.iter().map(|d| raise_alarm(&d.domain_id, d.score, threshold)).collect();
    let perf: Vec<f64> = domains.iter().map(|d| d.perf).collect();
    let f1 = alarm_f1(&decisions, &perf, delta)?;
    Ok((threshold, decisions, f1))
}

/// Calibrates on the full surrogate curve for every `delta`, and repeats the
/// calibration on `repetitions` random subsets of `subset_size` surrogates.
pub fn evaluate_alarms(
    metric: &str,
    curve: &[CalibrationPoint],
    domains: &[EvalDomain],
    deltas: &[f64],
    subset_size: usize,
    repetitions: usize,
    seed: u64,
) -> Result<AlarmReport> {
    for &d in deltas {
        if !(d > 0.0 && d < 1.0) {
            return Err(Error::arg(format!("delta must lie in (0, 1), got {d}")));
        }
    }
    if curve.is_empty() {
        return Err(Error::arg("calibration curve is empty"));
    }
    let size = subset_size.clamp(1, curve.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subsets: Vec<Vec<CalibrationPoint>> = (0..repetitions)
        .map(|_| {
            let mut idx = sample(&mut rng, curve.len(), size).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| curve[i].clone()).collect()
        })
        .collect();
    let per_delta = deltas
        .iter()
        .map(|&delta| {
            let (threshold, decisions, f1) = judge(curve, domains, delta)?;
            let f1s = subsets
                .iter()
                .map(|s| judge(s, domains, delta).map(|r| r.2))
                .collect::<Result<Vec<f64>>>()?;
            let (mean, std) = mean_std(&f1s);
            Ok(DeltaReport {
                delta,
                threshold,
                decisions,
                f1,
                subset_f1_mean: mean,
                subset_f1_std: std,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlarmReport {
        metric: metric.to_string(),
        subset_size: size,
        repetitions,
        per_delta,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

fn rows(logits: &Tensor) -> Result<(usize, usize)> {
    match logits.shape() {
        [n, c] if *n > 0 && *c > 0 => Ok((*n, *c)),
        [0, _] => Err(Error::arg("no samples")),
        s => Err(Error::arg(format!("logits must be [n, classes], got {s:?}"))),
    }
}

fn confidences(logits: &Tensor) -> Result<Vec<f64>> {
    let (n, _) = rows(logits)?;
    Ok((0..n)
        .map(|i| softmax(logits.row(i)).into_iter().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

/// Mean maximum softmax probability.
pub fn avg_confidence(logits: &Tensor) -> Result<f64> {
    let c = confidences(logits)?;
    Ok(c.iter().sum::<f64>() / c.len() as f64)
}

/// Mean of `Σ_c p_c ln p_c`.
pub fn avg_neg_entropy(logits: &Tensor) -> Result<f64> {
    let (n, _) = rows(logits)?;
    let total: f64 = (0..n)
        .map(|i| {
            softmax(logits.row(i))
                .into_iter()
                .filter(|&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>()
        })
        .sum();
    Ok(total / n as f64)
}

/// Confidence threshold `t` such that a fraction of ID samples equal to the
/// ID accuracy have confidence above `t`.
pub fn atc_threshold(id_logits: &Tensor, id_labels: &[usize]) -> Result<f64> {
    let conf = confidences(id_logits)?;
    if conf.len() != id_labels.len() {
        return Err(Error::arg("ID logits and labels differ in length"));
    }
    if conf.iter().all(|&c| c == conf[0]) {
        return Err(Error::degenerate("all ID confidences are equal; no threshold separates them"));
    }
    let n = conf.len();
    let correct = (0..n)
        .filter(|&i| crate::nn::argmax(id_logits.row(i)) == id_labels[i])
        .count();
    threshold_for_fraction(&conf, correct as f64 / n as f64)
}

pub(crate) fn threshold_for_fraction(conf: &[f64], frac: f64) -> Result<f64> {
    let mut sorted = conf.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = (frac * sorted.len() as f64).round() as usize;
    Ok(if k >= sorted.len() { f64::NEG_INFINITY } else { sorted[k] })
}

/// Predicted OOD accuracy: fraction of OOD confidences above the ATC threshold.
pub fn atc_score(id_logits: &Tensor, id_labels: &[usize], ood_logits: &Tensor) -> Result<f64> {
    let t = atc_threshold(id_logits, id_labels)?;
    let conf = confidences(ood_logits)?;
    Ok(conf.iter().filter(|&&c| c > t).count() as f64 / conf.len() as f64)
}
