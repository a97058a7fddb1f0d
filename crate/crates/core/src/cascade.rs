//! End-to-end two-stage simulation: the low-precision unit processes the
//! whole batch, the confidence gate keeps or forwards each prediction,
//! the high-precision unit re-processes the forwarded samples, and the
//! batch time model adds the device reconfiguration between the stages.
//!
//! Batch time accounts the low-precision and confidence-evaluation
//! latency for the whole batch, the high-precision latency for the
//! re-classified samples only, and the reconfiguration time. The
//! confidence evaluation runs on the host CPU; in the default pipelined
//! mode its latency hides behind the accelerator (the front end costs
//! `max` of the two rates instead of their sum).

use serde::{Deserialize, Serialize};

use crate::ceu::{self, CeuConfig, TuneGrid};
use crate::dataset::EvalSet;
use crate::dse::{self, PlatformModel};
use crate::engine::{self, TileConfig};
use crate::error::{Error, Result};
use crate::fixedpoint::{LayerSpecs, QuantScheme};
use crate::netmodel::Network;
use crate::quantizer::{self, Metric, QuantizerConfig, SchemeTable};

/// One cascade stage: its quantisation scheme, tile configuration and
/// achieved clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub scheme: QuantScheme,
    pub tiles: TileConfig,
    pub clk_hz: f64,
}

/// How the host-side confidence evaluation overlaps the accelerator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CeuTiming {
    /// CPU and accelerator pipeline across batches; the front end costs
    /// the slower of the two.
    Pipelined,
    /// CPU latency adds to the accelerator latency.
    Sequential,
}

/// Host-side confidence evaluation rate relative to the low-precision
/// stage; the measured CPU side runs about four times faster than the
/// accelerator side.
pub const DEFAULT_CEU_TIME_RATIO: f64 = 0.25;

/// Full two-stage plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadePlan {
    pub lpu: StageConfig,
    pub hpu: StageConfig,
    pub ceu: CeuConfig,
    pub batch: usize,
    pub t_batch: usize,
    pub reconfig_time: f64,
    /// Reconfigurations charged per batch (the return reconfiguration
    /// may amortise into the next batch).
    pub reconfig_count: u32,
    pub ceu_time_ratio: f64,
    pub ceu_timing: CeuTiming,
}

impl CascadePlan {
    pub fn validate(&self, net: &Network) -> Result<()> {
        if self.lpu.scheme.wordlength >= self.hpu.scheme.wordlength {
            return Err(Error::InvalidArgument(format!(
                "LPU wordlength {} must be below HPU wordlength {}",
                self.lpu.scheme.wordlength, self.hpu.scheme.wordlength
            )));
        }
        if self.batch == 0 || !self.batch.is_multiple_of(self.t_batch) {
            return Err(Error::InvalidArgument(format!(
                "batch {} must be a positive multiple of t_batch {}",
                self.batch, self.t_batch
            )));
        }
        if self.reconfig_time < 0.0 || self.ceu_time_ratio < 0.0 {
            return Err(Error::InvalidArgument(
                "times and ratios must be non-negative".into(),
            ));
        }
        net.check_scheme(&self.lpu.scheme)?;
        net.check_scheme(&self.hpu.scheme)?;
        Ok(())
    }
}

/// Which stage produced a sample's final prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Lpu,
    Hpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeResult {
    pub predictions: Vec<Prediction>,
    pub forwarded_fraction: f64,
    pub modeled_time: f64,
    pub modeled_throughput: f64,
    pub accuracy_vs_reference: f64,
}

fn stage_sample_time(net: &Network, stage: &StageConfig) -> Result<f64> {
    Ok(engine::per_sample_cycles(net, &stage.tiles)? / stage.clk_hz)
}

fn frontend_time(batch: usize, t_lpu: f64, ceu_ratio: f64, timing: CeuTiming) -> f64 {
    let t_ceu = ceu_ratio * t_lpu;
    batch as f64
        * match timing {
            CeuTiming::Pipelined => t_lpu.max(t_ceu),
            CeuTiming::Sequential => t_lpu + t_ceu,
        }
}

/// Run the cascade over `inputs`: every sample gets a low-precision
/// prediction, the gate keeps or forwards it, forwarded samples are
/// re-run at high precision and their low-precision prediction is
/// discarded. `reference` provides the per-sample classes the cascade
/// accuracy is measured against.
pub fn run_cascade(
    net: &Network,
    plan: &CascadePlan,
    inputs: &ndarray::Array4<f64>,
    reference: &[usize],
) -> Result<CascadeResult> {
    plan.validate(net)?;
    let batch = inputs.dim().0;
    if batch != plan.batch {
        return Err(Error::ShapeMismatch(format!(
            "plan batch {} vs {} input samples",
            plan.batch, batch
        )));
    }
    if reference.len() != batch {
        return Err(Error::ShapeMismatch(format!(
            "{} reference classes vs {batch} input samples",
            reference.len()
        )));
    }

    let (lpu_probs, _) = engine::run_quantized(net, &plan.lpu.scheme, inputs, &plan.lpu.tiles)?;
    let lpu_classes = engine::argmax_classes(&lpu_probs);

    let mut forwarded_idx = Vec::new();
    let mut predictions: Vec<Prediction> = Vec::with_capacity(batch);
    for (i, class) in lpu_classes.iter().enumerate() {
        let row: Vec<f64> = lpu_probs.row(i).to_vec();
        if ceu::is_confident(&row, &plan.ceu)? {
            predictions.push(Prediction {
                class: *class,
                source: Source::Lpu,
            });
        } else {
            forwarded_idx.push(i);
            predictions.push(Prediction {
                class: usize::MAX, // filled from the HPU below
                source: Source::Hpu,
            });
        }
    }

    if !forwarded_idx.is_empty() {
        let (_, c, h, w) = inputs.dim();
        let mut forwarded = ndarray::Array4::<f64>::zeros((forwarded_idx.len(), c, h, w));
        for (k, &i) in forwarded_idx.iter().enumerate() {
            forwarded
                .slice_mut(ndarray::s![k, .., .., ..])
                .assign(&inputs.index_axis(ndarray::Axis(0), i));
        }
        let (hpu_probs, _) =
            engine::run_quantized(net, &plan.hpu.scheme, &forwarded, &plan.hpu.tiles)?;
        let hpu_classes = engine::argmax_classes(&hpu_probs);
        for (k, &i) in forwarded_idx.iter().enumerate() {
            predictions[i].class = hpu_classes[k];
        }
    }

    let t_lpu = stage_sample_time(net, &plan.lpu)?;
    let t_hpu = stage_sample_time(net, &plan.hpu)?;
    let modeled_time = frontend_time(batch, t_lpu, plan.ceu_time_ratio, plan.ceu_timing)
        + plan.reconfig_count as f64 * plan.reconfig_time
        + forwarded_idx.len() as f64 * t_hpu;
    let hits = predictions
        .iter()
        .zip(reference)
        .filter(|(p, r)| p.class == **r)
        .count();
    Ok(CascadeResult {
        forwarded_fraction: forwarded_idx.len() as f64 / batch as f64,
        modeled_time,
        modeled_throughput: batch as f64 / modeled_time,
        accuracy_vs_reference: hits as f64 / batch as f64,
        predictions,
    })
}

/// Throughput gain of the cascade over a single-stage baseline run on
/// the same batch: `baseline_time / cascade_time`.
pub fn model_speedup(cascade_time_s: f64, baseline_time_s: f64) -> Result<f64> {
    if cascade_time_s <= 0.0 || baseline_time_s <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "times must be positive (cascade {cascade_time_s}, baseline {baseline_time_s})"
        )));
    }
    Ok(baseline_time_s / cascade_time_s)
}

// ---------------------------------------------------------------------------
// Tolerance sweep
// ---------------------------------------------------------------------------

/// Per-sample gate inputs for a sweep: low-precision probability rows,
/// high-precision classes for every sample, and the reference classes.
#[derive(Debug, Clone)]
pub struct GateInputs<'a> {
    pub lpu_probs: &'a [Vec<f64>],
    pub hpu_classes: &'a [usize],
    pub ref_labels: &'a [usize],
}

/// Per-sample times and batch bookkeeping for the time model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub t_lpu_sample: f64,
    pub t_hpu_sample: f64,
    pub ceu_time_ratio: f64,
    pub ceu_timing: CeuTiming,
    pub reconfig_time: f64,
    pub reconfig_count: u32,
    pub batch: usize,
}

/// A single-stage design the cascade is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineOption {
    pub wordlength: u8,
    pub accuracy: f64,
    pub t_sample: f64,
}

/// One row of the tolerance sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tolerance: f64,
    pub m: usize,
    pub n: usize,
    pub th: f64,
    pub forwarded_fraction: f64,
    pub achieved_error: f64,
    pub cascade_time_s: f64,
    pub baseline_time_s: f64,
    pub speedup: f64,
    /// True when the baseline outperforms the cascade and a single-stage
    /// design should ship instead.
    pub single_stage: bool,
    pub hpu_wordlength: u8,
    pub baseline_wordlength: u8,
    pub cascade_accuracy: f64,
    pub gate_feasible: bool,
}

/// Tune the gate at one tolerance and assemble the sweep row.
///
/// The baseline is the smallest-wordlength option whose accuracy is at
/// least the cascade's; when none qualifies the most accurate option is
/// used. A row whose cascade is slower than its baseline is flagged
/// `single_stage`.
pub fn sweep_row(
    inputs: &GateInputs<'_>,
    times: &StageTimes,
    baselines: &[BaselineOption],
    grid: &TuneGrid,
    tolerance: f64,
    hpu_wordlength: u8,
) -> Result<SweepRow> {
    let n = inputs.lpu_probs.len();
    if n == 0 {
        return Err(Error::EmptyInput("sweep_row: no samples"));
    }
    if inputs.hpu_classes.len() != n || inputs.ref_labels.len() != n {
        return Err(Error::ShapeMismatch(
            "gate inputs have inconsistent lengths".into(),
        ));
    }
    if baselines.is_empty() {
        return Err(Error::EmptyInput("sweep_row: no baseline options"));
    }
    let tuned = ceu::tune(inputs.lpu_probs, inputs.ref_labels, tolerance, grid)?;

    let mut hits = 0usize;
    let mut forwarded = 0usize;
    for (i, probs) in inputs.lpu_probs.iter().enumerate() {
        let class = if ceu::is_confident(probs, &tuned.config)? {
            argmax(probs)
        } else {
            forwarded += 1;
            inputs.hpu_classes[i]
        };
        if class == inputs.ref_labels[i] {
            hits += 1;
        }
    }
    let cascade_accuracy = hits as f64 / n as f64;
    let forwarded_fraction = forwarded as f64 / n as f64;

    let cascade_time = frontend_time(
        times.batch,
        times.t_lpu_sample,
        times.ceu_time_ratio,
        times.ceu_timing,
    ) + times.reconfig_count as f64 * times.reconfig_time
        + forwarded_fraction * times.batch as f64 * times.t_hpu_sample;

    let baseline = baselines
        .iter()
        .find(|b| b.accuracy >= cascade_accuracy - 1e-12)
        .or_else(|| {
            baselines.iter().max_by(|a, b| {
                a.accuracy
                    .total_cmp(&b.accuracy)
                    .then(b.wordlength.cmp(&a.wordlength))
            })
        })
        .expect("non-empty baselines");
    let baseline_time = times.batch as f64 * baseline.t_sample;
    let speedup = model_speedup(cascade_time, baseline_time)?;

    Ok(SweepRow {
        tolerance,
        m: tuned.config.m,
        n: tuned.config.n,
        th: tuned.config.th,
        forwarded_fraction,
        achieved_error: tuned.stats.induced_error,
        cascade_time_s: cascade_time,
        baseline_time_s: baseline_time,
        speedup,
        single_stage: speedup < 1.0,
        hpu_wordlength,
        baseline_wordlength: baseline.wordlength,
        cascade_accuracy,
        gate_feasible: tuned.feasible,
    })
}

/// Sweep a fixed LPU/HPU pair across ascending tolerances.
pub fn run_tolerance_sweep(
    inputs: &GateInputs<'_>,
    times: &StageTimes,
    baselines: &[BaselineOption],
    grid: &TuneGrid,
    tolerances: &[f64],
    hpu_wordlength: u8,
) -> Result<Vec<SweepRow>> {
    check_tolerances(tolerances)?;
    tolerances
        .iter()
        .map(|&tol| sweep_row(inputs, times, baselines, grid, tol, hpu_wordlength))
        .collect()
}

fn check_tolerances(tolerances: &[f64]) -> Result<()> {
    if tolerances.is_empty() {
        return Err(Error::EmptyInput("tolerance list is empty"));
    }
    if tolerances.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument(
            "tolerances must be sorted ascending".into(),
        ));
    }
    if tolerances[0] < 0.0 {
        return Err(Error::InvalidArgument(
            "tolerances must be non-negative".into(),
        ));
    }
    Ok(())
}

/// Options for the full-pipeline tolerance sweep.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub metric: Metric,
    /// Deployment batch size used for architecture selection and the
    /// batch time model.
    pub batch: usize,
    pub grid: TuneGrid,
    pub quantizer: QuantizerConfig,
    /// Pre-selected low-precision scheme (e.g. from an earlier toolflow
    /// stage); derived from the catastrophic-loss rule when absent.
    pub lpu_override: Option<QuantScheme>,
    pub ceu_time_ratio: f64,
    pub ceu_timing: CeuTiming,
    pub reconfig_count: u32,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            metric: Metric::Top1,
            batch: 64,
            grid: TuneGrid::default(),
            quantizer: QuantizerConfig::default(),
            lpu_override: None,
            ceu_time_ratio: DEFAULT_CEU_TIME_RATIO,
            ceu_timing: CeuTiming::Pipelined,
            reconfig_count: 1,
        }
    }
}

/// Sweep output plus the context shared by all rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub lpu_wordlength: u8,
    pub batch: usize,
    pub t_lpu_sample: f64,
}

/// Full-pipeline tolerance sweep: per tolerance, pick the smallest
/// high-precision wordlength within the tolerance, tune the gate, model
/// the batch time against the matched-accuracy single-stage baseline,
/// and flag rows where the single-stage design wins.
pub fn sweep_tolerance(
    net: &Network,
    platform: &PlatformModel,
    eval: &EvalSet,
    tolerances: &[f64],
    opts: &PipelineOptions,
) -> Result<SweepReport> {
    check_tolerances(tolerances)?;
    platform.validate()?;

    let float_probs = engine::run_float(net, &eval.inputs)?;
    let float_acc = quantizer::accuracy(&float_probs, &eval.labels, opts.metric)?;
    let ref_labels = engine::argmax_classes(&float_probs);

    let mut table = SchemeTable::new(net, eval, opts.quantizer);

    // Low-precision stage: override or smallest non-catastrophic.
    let lpu_scheme = match &opts.lpu_override {
        Some(s) => {
            net.check_scheme(s)?;
            s.clone()
        }
        None => {
            let floor = quantizer::catastrophic_floor(net.class_count(), float_acc);
            let mut chosen = None;
            for wl in crate::fixedpoint::MIN_WORDLENGTH..=crate::fixedpoint::MAX_WORDLENGTH {
                let cand = table.best(wl)?;
                if cand.network_accuracy >= floor {
                    chosen = Some(cand.scheme);
                    break;
                }
            }
            chosen.ok_or(Error::NoFeasibleDesign {
                constraint: "no wordlength avoids catastrophic accuracy loss".into(),
            })?
        }
    };
    let lpu_wl = lpu_scheme.wordlength;

    // Memoised per-wordlength machinery.
    let mut arch_cache: std::collections::BTreeMap<u8, (TileConfig, f64)> = Default::default();
    let mut classes_cache: std::collections::BTreeMap<u8, Vec<usize>> = Default::default();
    let select_arch = |wl: u8,
                       cache: &mut std::collections::BTreeMap<u8, (TileConfig, f64)>|
     -> Result<(TileConfig, f64)> {
        if let Some(hit) = cache.get(&wl) {
            return Ok(*hit);
        }
        let (sel, _) = dse::select_architecture(net, platform, wl, opts.batch)?;
        cache.insert(wl, (sel.tiles, sel.clk_hz));
        Ok((sel.tiles, sel.clk_hz))
    };

    let (lpu_tiles, lpu_clk) = select_arch(lpu_wl, &mut arch_cache)?;
    let t_lpu_sample = engine::per_sample_cycles(net, &lpu_tiles)? / lpu_clk;

    let scheme_specs = |scheme: &QuantScheme| -> Result<Vec<Option<LayerSpecs>>> {
        (0..net.matrix_layer_count())
            .map(|i| scheme.layer_specs(i).map(Some))
            .collect()
    };
    let lpu_probs_arr = engine::run_hybrid(net, &scheme_specs(&lpu_scheme)?, &eval.inputs)?;
    let lpu_probs: Vec<Vec<f64>> = lpu_probs_arr
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect();

    let mut rows = Vec::with_capacity(tolerances.len());
    for &tol in tolerances {
        // Smallest wordlength whose best scheme stays within tolerance.
        let mut hpu: Option<(u8, QuantScheme)> = None;
        for wl in crate::fixedpoint::MIN_WORDLENGTH..=crate::fixedpoint::MAX_WORDLENGTH {
            let cand = table.best(wl)?;
            if cand.accuracy_drop_vs_float <= tol {
                hpu = Some((wl, cand.scheme));
                break;
            }
        }
        let (hpu_wl, hpu_scheme) = hpu.ok_or(Error::InfeasibleTolerance(tol))?;

        if let std::collections::btree_map::Entry::Vacant(slot) = classes_cache.entry(hpu_wl) {
            let probs = engine::run_hybrid(net, &scheme_specs(&hpu_scheme)?, &eval.inputs)?;
            slot.insert(engine::argmax_classes(&probs));
        }
        let (hpu_tiles, hpu_clk) = select_arch(hpu_wl, &mut arch_cache)?;
        let t_hpu_sample = engine::per_sample_cycles(net, &hpu_tiles)? / hpu_clk;

        // Baseline options: every wordlength the scheme table has
        // evaluated so far, with its reference agreement and modeled
        // per-sample time.
        let evaluated: Vec<(u8, QuantScheme)> = table
            .evaluated()
            .map(|(wl, cand)| (wl, cand.scheme.clone()))
            .collect();
        let mut baselines = Vec::new();
        for (wl, scheme) in evaluated {
            if let std::collections::btree_map::Entry::Vacant(slot) = classes_cache.entry(wl) {
                let probs = engine::run_hybrid(net, &scheme_specs(&scheme)?, &eval.inputs)?;
                slot.insert(engine::argmax_classes(&probs));
            }
            let agreement = {
                let classes = &classes_cache[&wl];
                let hits = classes
                    .iter()
                    .zip(&ref_labels)
                    .filter(|(a, b)| a == b)
                    .count();
                hits as f64 / classes.len() as f64
            };
            let (tiles, clk) = select_arch(wl, &mut arch_cache)?;
            baselines.push(BaselineOption {
                wordlength: wl,
                accuracy: agreement,
                t_sample: engine::per_sample_cycles(net, &tiles)? / clk,
            });
        }

        let inputs = GateInputs {
            lpu_probs: &lpu_probs,
            hpu_classes: &classes_cache[&hpu_wl],
            ref_labels: &ref_labels,
        };
        let times = StageTimes {
            t_lpu_sample,
            t_hpu_sample,
            ceu_time_ratio: opts.ceu_time_ratio,
            ceu_timing: opts.ceu_timing,
            reconfig_time: platform.reconfig_time,
            reconfig_count: opts.reconfig_count,
            batch: opts.batch,
        };
        rows.push(sweep_row(
            &inputs, &times, &baselines, &opts.grid, tol, hpu_wl,
        )?);
    }

    Ok(SweepReport {
        rows,
        lpu_wordlength: lpu_wl,
        batch: opts.batch,
        t_lpu_sample,
    })
}

/// Render sweep rows as CSV.
pub fn sweep_rows_to_csv(rows: &[SweepRow]) -> String {
    let mut csv = String::from(
        "tolerance,m,n,th,forwarded_fraction,achieved_error,cascade_time_s,\
         baseline_time_s,speedup,design,hpu_wordlength,baseline_wordlength\n",
    );
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.tolerance,
            r.m,
            r.n,
            r.th,
            r.forwarded_fraction,
            r.achieved_error,
            r.cascade_time_s,
            r.baseline_time_s,
            r.speedup,
            if r.single_stage {
                "single-stage"
            } else {
                "cascade"
            },
            r.hpu_wordlength,
            r.baseline_wordlength,
        ));
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
