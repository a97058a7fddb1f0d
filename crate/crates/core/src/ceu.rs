//! Confidence evaluation: the generalised Best-vs-Second-Best metric,
//! the confidence gate, and the tuner that fits (M, N, th) to a user
//! error tolerance.
//!
//! gBvSB sorts a prediction's probability vector and takes the top-M sum
//! minus the following N-M sum; a prediction terminates at the
//! low-precision stage when the metric reaches the threshold. The tuner
//! grid-searches (M, N) and sweeps th over the gBvSB values observed on
//! the evaluation set, which is lossless: the gate outcome is piecewise
//! constant between observed values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold strictly above the gBvSB range [-1, 1]; a config carrying
/// it forwards every sample. Kept finite so configs serialise cleanly.
pub const ALL_FORWARD_THRESHOLD: f64 = 2.0;

/// Threshold at or below the gBvSB lower bound; keeps every sample.
pub const KEEP_ALL_THRESHOLD: f64 = -1.0;

/// Gate parameters: top-`m` mass against the next `n - m` runners-up,
/// compared to threshold `th`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CeuConfig {
    pub m: usize,
    pub n: usize,
    pub th: f64,
}

impl CeuConfig {
    /// Config that forwards every sample to the high-precision stage.
    pub fn all_forward() -> Self {
        Self {
            m: 1,
            n: 1,
            th: ALL_FORWARD_THRESHOLD,
        }
    }
}

fn check_params(m: usize, n: usize, classes: usize) -> Result<()> {
    if m < 1 || m > n || n > classes {
        return Err(Error::InvalidGbvsbParams { m, n, classes });
    }
    Ok(())
}

/// Generalised Best-vs-Second-Best of a probability vector: sum of the
/// `m` largest entries minus the sum of entries `m+1..=n` in sorted
/// order. Ties in the sort cannot affect the value.
pub fn gbvsb(p: &[f64], m: usize, n: usize) -> Result<f64> {
    check_params(m, n, p.len())?;
    let mut sorted = p.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let top: f64 = sorted[..m].iter().sum();
    let next: f64 = sorted[m..n].iter().sum();
    Ok(top - next)
}

/// True when the prediction is confident enough to terminate at the
/// low-precision stage: `gbvsb(p, m, n) >= th`.
pub fn is_confident(p: &[f64], cfg: &CeuConfig) -> Result<bool> {
    Ok(gbvsb(p, cfg.m, cfg.n)? >= cfg.th)
}

/// Gate outcome statistics over an evaluation set.
///
/// `induced_error` counts samples the gate kept although the
/// low-precision prediction disagrees with the reference (the cascade's
/// error source); `false_negative_fraction` counts samples the gate
/// forwarded although the low-precision prediction already matched the
/// reference (the cascade's overhead source).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub kept_fraction: f64,
    pub forwarded_fraction: f64,
    pub induced_error: f64,
    pub false_negative_fraction: f64,
}

/// Search ranges for the tuner; `m` runs over `1..=m_max` and `n` over
/// `m..=n_max`, both clipped to the class count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuneGrid {
    pub m_max: usize,
    pub n_max: usize,
}

impl Default for TuneGrid {
    fn default() -> Self {
        Self {
            m_max: 5,
            n_max: 10,
        }
    }
}

/// Tuner output; `feasible` is false when no grid point met the
/// tolerance and the all-forward fallback was returned instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub config: CeuConfig,
    pub stats: GateStats,
    pub feasible: bool,
}

#[derive(Clone, Copy)]
struct Counts {
    kept: usize,
    induced: usize,
}

/// Exhaustively search the grid for the config that keeps the largest
/// fraction of samples subject to `induced_error <= error_tolerance`.
///
/// `lpu_probs` are the low-precision probability vectors; `ref_labels`
/// the reference predictions (or ground-truth labels) the induced error
/// is accounted against. Ties break towards smaller induced error, then
/// lexicographically smaller `(m, n, th)`. When nothing is feasible the
/// all-forward config is returned with `feasible: false`.
pub fn tune(
    lpu_probs: &[Vec<f64>],
    ref_labels: &[usize],
    error_tolerance: f64,
    grid: &TuneGrid,
) -> Result<TuneResult> {
    if lpu_probs.is_empty() {
        return Err(Error::EmptyInput("tune: no predictions"));
    }
    if lpu_probs.len() != ref_labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} reference labels",
            lpu_probs.len(),
            ref_labels.len()
        )));
    }
    if error_tolerance < 0.0 {
        return Err(Error::InvalidArgument(
            "error tolerance must be >= 0".into(),
        ));
    }
    let classes = lpu_probs[0].len();
    if classes == 0 || lpu_probs.iter().any(|p| p.len() != classes) {
        return Err(Error::ShapeMismatch(
            "prediction vectors have inconsistent lengths".into(),
        ));
    }
    let total = lpu_probs.len();

    // Sort each prediction once; per (m, n) the metric is then the same
    // two slice sums [`gbvsb`] computes, bit for bit.
    let mut sorted_probs: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut correct: Vec<bool> = Vec::with_capacity(total);
    for (probs, &label) in lpu_probs.iter().zip(ref_labels) {
        let mut sorted = probs.clone();
        sorted.sort_unstable_by(|a, b| b.total_cmp(a));
        sorted_probs.push(sorted);
        let predicted = argmax(probs);
        correct.push(predicted == label);
    }
    let max_induced = (error_tolerance * total as f64).min(total as f64);

    let mut best: Option<(Counts, CeuConfig)> = None;
    let m_hi = grid.m_max.min(classes);
    for m in 1..=m_hi {
        let n_hi = grid.n_max.min(classes);
        for n in m..=n_hi {
            let mut scored: Vec<(f64, bool)> = sorted_probs
                .iter()
                .zip(&correct)
                .map(|(sorted, &ok)| {
                    let top: f64 = sorted[..m].iter().sum();
                    let next: f64 = sorted[m..n].iter().sum();
                    (top - next, ok)
                })
                .collect();
            scored.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));

            // Candidate thresholds: the keep-all anchor plus every
            // distinct observed value, ascending for the lex tie-break.
            let mut thresholds = vec![KEEP_ALL_THRESHOLD];
            for &(g, _) in &scored {
                thresholds.push(g);
            }
            thresholds.sort_unstable_by(f64::total_cmp);
            thresholds.dedup();

            for &th in &thresholds {
                // Kept = samples with g >= th; scored is descending.
                let kept = scored.partition_point(|&(g, _)| g >= th);
                let induced = scored[..kept].iter().filter(|&&(_, ok)| !ok).count();
                if induced as f64 > max_induced {
                    continue;
                }
                let candidate = Counts { kept, induced };
                let better = match &best {
                    None => true,
                    Some((cur, _)) => {
                        candidate.kept > cur.kept
                            || (candidate.kept == cur.kept && candidate.induced < cur.induced)
                    }
                };
                if better {
                    best = Some((candidate, CeuConfig { m, n, th }));
                }
            }
        }
    }

    match best {
        Some((counts, config)) => {
            let stats = stats_from_counts(counts, &correct, total);
            Ok(TuneResult {
                config,
                stats,
                feasible: true,
            })
        }
        None => {
            let correct_total = correct.iter().filter(|&&ok| ok).count();
            let stats = GateStats {
                kept_fraction: 0.0,
                forwarded_fraction: 1.0,
                induced_error: 0.0,
                false_negative_fraction: correct_total as f64 / total as f64,
            };
            Ok(TuneResult {
                config: CeuConfig::all_forward(),
                stats,
                feasible: false,
            })
        }
    }
}

fn stats_from_counts(counts: Counts, correct: &[bool], total: usize) -> GateStats {
    let kept_correct = counts.kept - counts.induced;
    let correct_total = correct.iter().filter(|&&ok| ok).count();
    let forwarded_correct = correct_total - kept_correct;
    let kept_fraction = counts.kept as f64 / total as f64;
    GateStats {
        kept_fraction,
        forwarded_fraction: 1.0 - kept_fraction,
        induced_error: counts.induced as f64 / total as f64,
        false_negative_fraction: forwarded_correct as f64 / total as f64,
    }
}

/// Gate statistics of a fixed config on an evaluation set.
pub fn evaluate_gate(
    lpu_probs: &[Vec<f64>],
    ref_labels: &[usize],
    cfg: &CeuConfig,
) -> Result<GateStats> {
    if lpu_probs.is_empty() {
        return Err(Error::EmptyInput("evaluate_gate: no predictions"));
    }
    if lpu_probs.len() != ref_labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} reference labels",
            lpu_probs.len(),
            ref_labels.len()
        )));
    }
    let total = lpu_probs.len();
    let mut kept = 0;
    let mut induced = 0;
    let mut correct = Vec::with_capacity(total);
    for (probs, &label) in lpu_probs.iter().zip(ref_labels) {
        let ok = argmax(probs) == label;
        correct.push(ok);
        if is_confident(probs, cfg)? {
            kept += 1;
            if !ok {
                induced += 1;
            }
        }
    }
    Ok(stats_from_counts(Counts { kept, induced }, &correct, total))
}

/// Per-sample gate decisions `(gbvsb value, kept)` under a config.
pub fn gate_decisions(lpu_probs: &[Vec<f64>], cfg: &CeuConfig) -> Result<Vec<(f64, bool)>> {
    lpu_probs
        .iter()
        .map(|p| {
            let g = gbvsb(p, cfg.m, cfg.n)?;
            Ok((g, g >= cfg.th))
        })
        .collect()
}

/// Render per-sample gate decisions as CSV (`sample_id,gbvsb,kept`).
pub fn decisions_to_csv(decisions: &[(f64, bool)]) -> String {
    let mut csv = String::from("sample_id,gbvsb,kept\n");
    for (i, (g, kept)) in decisions.iter().enumerate() {
        csv.push_str(&format!("{i},{g},{kept}\n"));
    }
    csv
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in p.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
