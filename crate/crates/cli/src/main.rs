//! Command-line toolflow: generate the shipped fixture, quantise a
//! network against an error tolerance, tune the confidence gate, explore
//! the hardware design space, simulate the two-stage cascade, and merge
//! the stage reports.
//!
//! Every command is deterministic given identical inputs (and seed, for
//! fixture generation): re-running rewrites byte-identical outputs.
//! Exit codes: 0 success, 2 bad input, 3 infeasible request, 4 internal.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use qcascade::cascade::{self, PipelineOptions};
use qcascade::ceu::{self, TuneGrid};
use qcascade::dataset;
use qcascade::dse::{self, PlatformModel};
use qcascade::engine;
use qcascade::error::Error as CoreError;
use qcascade::fixedpoint::QuantScheme;
use qcascade::fixture;
use qcascade::netmodel::{load_network, save_network, Network};
use qcascade::quantizer::{self, Metric, QuantizerConfig};

/// Samples used to tune the gate when the caller does not override it.
const DEFAULT_TUNE_SAMPLES: usize = 200;

/// Tolerances every simulation sweeps in addition to the requested one.
const TOLERANCE_LADDER: [f64; 5] = [0.005, 0.01, 0.02, 0.05, 0.10];

#[derive(Parser)]
#[command(
    name = "qcascade",
    version,
    about = "Two-stage cascade toolflow for post-training-quantised CNNs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the deterministic toy model, evaluation set and platform.
    GenFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        samples: usize,
    },
    /// Select the stage wordlengths and per-layer scalings.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "eval-set")]
        eval_set: PathBuf,
        #[arg(long)]
        tolerance: f64,
        #[arg(long, default_value = "top1")]
        metric: Metric,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune the confidence gate against the error tolerance.
    TuneCeu {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "eval-set")]
        eval_set: PathBuf,
        #[arg(long)]
        tolerance: f64,
        #[arg(long, default_value_t = DEFAULT_TUNE_SAMPLES)]
        tune_samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Explore tile configurations for both stage precisions.
    Dse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        platform: PathBuf,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep error tolerances through the end-to-end cascade model.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "eval-set")]
        eval_set: PathBuf,
        #[arg(long)]
        platform: PathBuf,
        #[arg(long)]
        tolerance: f64,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge the per-stage summaries into one report.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    Core(CoreError),
    MissingArtifact {
        path: PathBuf,
        produced_by: &'static str,
    },
    Internal(String),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(
                CoreError::NoFeasibleDesign { .. }
                | CoreError::InfeasibleTolerance(_)
                | CoreError::EmptySurvivorSet { .. },
            ) => 3,
            CliError::Core(_) | CliError::MissingArtifact { .. } => 2,
            CliError::Internal(_) => 4,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Core(e) => e.to_string(),
            CliError::MissingArtifact { path, produced_by } => format!(
                "missing artifact {}; run `qcascade {produced_by}` first",
                path.display()
            ),
            CliError::Internal(msg) => format!("internal: {msg}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenFixture { out, seed, samples } => gen_fixture(&out, seed, samples),
        Command::Quantize {
            model,
            eval_set,
            tolerance,
            metric,
            out,
        } => quantize(&model, &eval_set, tolerance, metric, &out),
        Command::TuneCeu {
            model,
            eval_set,
            tolerance,
            tune_samples,
            out,
        } => tune_ceu(&model, &eval_set, tolerance, tune_samples, &out),
        Command::Dse {
            model,
            platform,
            batch,
            out,
        } => run_dse(&model, &platform, batch, &out),
        Command::Simulate {
            model,
            eval_set,
            platform,
            tolerance,
            batch,
            out,
        } => simulate(&model, &eval_set, &platform, tolerance, batch, &out),
        Command::Report { out } => report(&out),
    }
}

// ---------------------------------------------------------------------------
// IO helpers
// ---------------------------------------------------------------------------

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)
        .map_err(|e| CliError::Internal(format!("writing {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Internal(format!("serialising {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

fn read_artifact<T: DeserializeOwned>(path: &Path, produced_by: &'static str) -> CliResult<T> {
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            path: path.to_path_buf(),
            produced_by,
        });
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::Core(e.into()))?;
    serde_json::from_str(&text).map_err(|e| CliError::Core(e.into()))
}

fn ensure_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CliError::Core(e.into()))
}

fn load_model(model: &Path) -> CliResult<Network> {
    let manifest = if model.is_dir() {
        model.join("manifest.json")
    } else {
        model.to_path_buf()
    };
    Ok(load_network(&manifest)?)
}

fn probs_to_rows(probs: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    probs.rows().into_iter().map(|r| r.to_vec()).collect()
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn gen_fixture(out: &Path, seed: u64, samples: usize) -> CliResult<()> {
    ensure_out(out)?;
    let net = fixture::toy_network(seed);
    let manifest = save_network(&net, &out.join("model"))?;
    let eval = fixture::toy_eval_set(&net, seed.wrapping_add(1), samples);
    dataset::save_eval_set(&eval, &out.join("eval"))?;
    fixture::toy_platform().save(&out.join("platform.json"))?;
    println!("fixture written: {}", out.display());
    println!("  model:    {}", manifest.display());
    println!(
        "  eval set: {} ({} samples)",
        out.join("eval").display(),
        samples
    );
    println!("  platform: {}", out.join("platform.json").display());
    Ok(())
}

#[derive(Serialize)]
struct WordlengthRow {
    wordlength: u8,
    network_accuracy: f64,
    accuracy_drop_vs_float: f64,
}

#[derive(Serialize)]
struct QuantizeSummary {
    error_tolerance: f64,
    metric: Metric,
    float_accuracy: f64,
    lpu_wordlength: u8,
    hpu_wordlength: u8,
    single_stage: bool,
    lpu_accuracy: f64,
    hpu_accuracy: f64,
    evaluated: Vec<WordlengthRow>,
}

fn quantize(
    model: &Path,
    eval_set: &Path,
    tolerance: f64,
    metric: Metric,
    out: &Path,
) -> CliResult<()> {
    ensure_out(out)?;
    let net = load_model(model)?;
    let eval = dataset::load_eval_set(eval_set)?;
    let cfg = QuantizerConfig {
        metric,
        ..QuantizerConfig::default()
    };
    let outcome = quantizer::pick_stage_wordlengths(&net, &eval, tolerance, &cfg)?;
    let sel = &outcome.selection;
    write_json(&out.join("lpu_scheme.json"), &sel.lpu.scheme)?;
    write_json(&out.join("hpu_scheme.json"), &sel.hpu.scheme)?;
    write_text(
        &out.join("quant_sweep.csv"),
        &quantizer::sweeps_to_csv(&outcome.sweeps),
    )?;
    let summary = QuantizeSummary {
        error_tolerance: tolerance,
        metric,
        float_accuracy: sel.float_accuracy,
        lpu_wordlength: sel.lpu_wordlength,
        hpu_wordlength: sel.hpu_wordlength,
        single_stage: sel.single_stage,
        lpu_accuracy: sel.lpu.network_accuracy,
        hpu_accuracy: sel.hpu.network_accuracy,
        evaluated: outcome
            .evaluated
            .iter()
            .map(|(wl, cand)| WordlengthRow {
                wordlength: *wl,
                network_accuracy: cand.network_accuracy,
                accuracy_drop_vs_float: cand.accuracy_drop_vs_float,
            })
            .collect(),
    };
    write_json(&out.join("quantize_summary.json"), &summary)?;
    println!(
        "quantize: LPU {} bits (accuracy {:.4}), HPU {} bits (accuracy {:.4}){}",
        sel.lpu_wordlength,
        sel.lpu.network_accuracy,
        sel.hpu_wordlength,
        sel.hpu.network_accuracy,
        if sel.single_stage {
            " [single-stage]"
        } else {
            ""
        }
    );
    Ok(())
}

#[derive(Serialize)]
struct CeuSummary {
    error_tolerance: f64,
    tune_samples_used: usize,
    feasible: bool,
    config: ceu::CeuConfig,
    tune_stats: ceu::GateStats,
    full_stats: ceu::GateStats,
}

fn tune_ceu(
    model: &Path,
    eval_set: &Path,
    tolerance: f64,
    tune_samples: usize,
    out: &Path,
) -> CliResult<()> {
    ensure_out(out)?;
    let scheme: QuantScheme = read_artifact(&out.join("lpu_scheme.json"), "quantize")?;
    let net = load_model(model)?;
    let eval = dataset::load_eval_set(eval_set)?;
    net.check_scheme(&scheme)?;

    let specs: Vec<_> = (0..net.matrix_layer_count())
        .map(|i| scheme.layer_specs(i).map(Some))
        .collect::<Result<_, _>>()?;
    let lpu_probs = engine::run_hybrid(&net, &specs, &eval.inputs)?;
    dataset::save_predictions(&lpu_probs, &out.join("lpu_predictions.csv"))?;
    let float_probs = engine::run_float(&net, &eval.inputs)?;
    dataset::save_predictions(&float_probs, &out.join("reference_predictions.csv"))?;

    let rows = probs_to_rows(&lpu_probs);
    let refs = engine::argmax_classes(&float_probs);
    let used = tune_samples.min(rows.len()).max(1);
    let result = ceu::tune(
        &rows[..used],
        &refs[..used],
        tolerance,
        &TuneGrid::default(),
    )?;

    write_json(&out.join("ceu_config.json"), &result.config)?;
    let decisions = ceu::gate_decisions(&rows, &result.config)?;
    write_text(
        &out.join("gate_decisions.csv"),
        &ceu::decisions_to_csv(&decisions),
    )?;
    let full_stats = ceu::evaluate_gate(&rows, &refs, &result.config)?;
    let summary = CeuSummary {
        error_tolerance: tolerance,
        tune_samples_used: used,
        feasible: result.feasible,
        config: result.config,
        tune_stats: result.stats,
        full_stats,
    };
    write_json(&out.join("ceu_summary.json"), &summary)?;
    println!(
        "tune-ceu: m={} n={} th={}{} (kept {:.1}% of the tuning set)",
        result.config.m,
        result.config.n,
        result.config.th,
        if result.feasible {
            ""
        } else {
            " [infeasible: forwarding everything]"
        },
        result.stats.kept_fraction * 100.0
    );
    Ok(())
}

#[derive(Serialize)]
struct DseSummary {
    batch: usize,
    lpu: dse::DseSelection,
    hpu: dse::DseSelection,
}

fn run_dse(model: &Path, platform: &Path, batch: usize, out: &Path) -> CliResult<()> {
    ensure_out(out)?;
    let lpu_scheme: QuantScheme = read_artifact(&out.join("lpu_scheme.json"), "quantize")?;
    let hpu_scheme: QuantScheme = read_artifact(&out.join("hpu_scheme.json"), "quantize")?;
    let net = load_model(model)?;
    let platform = PlatformModel::load(platform)?;

    let (lpu_sel, lpu_points) =
        dse::select_architecture(&net, &platform, lpu_scheme.wordlength, batch)?;
    let (hpu_sel, hpu_points) =
        dse::select_architecture(&net, &platform, hpu_scheme.wordlength, batch)?;
    write_text(
        &out.join("dse_lpu.csv"),
        &dse::arch_points_to_csv(&lpu_points),
    )?;
    write_text(
        &out.join("dse_hpu.csv"),
        &dse::arch_points_to_csv(&hpu_points),
    )?;
    let summary = DseSummary {
        batch,
        lpu: lpu_sel.clone(),
        hpu: hpu_sel.clone(),
    };
    write_json(&out.join("dse_summary.json"), &summary)?;
    println!(
        "dse: LPU tiles ({}, {}, {}, t_batch {}) {:.3e} ops/s; HPU tiles ({}, {}, {}, t_batch {}) {:.3e} ops/s",
        lpu_sel.tiles.t_r,
        lpu_sel.tiles.t_p,
        lpu_sel.tiles.t_c,
        lpu_sel.tiles.t_batch,
        lpu_sel.predicted_ops_per_s,
        hpu_sel.tiles.t_r,
        hpu_sel.tiles.t_p,
        hpu_sel.tiles.t_c,
        hpu_sel.tiles.t_batch,
        hpu_sel.predicted_ops_per_s,
    );
    Ok(())
}

#[derive(Serialize)]
struct SimulateSummary {
    requested_tolerance: f64,
    batch: usize,
    lpu_wordlength: u8,
    t_lpu_sample: f64,
    headline: cascade::SweepRow,
    rows: Vec<cascade::SweepRow>,
}

fn simulate(
    model: &Path,
    eval_set: &Path,
    platform: &Path,
    tolerance: f64,
    batch: usize,
    out: &Path,
) -> CliResult<()> {
    ensure_out(out)?;
    let lpu_scheme: QuantScheme = read_artifact(&out.join("lpu_scheme.json"), "quantize")?;
    let net = load_model(model)?;
    let eval = dataset::load_eval_set(eval_set)?;
    let platform = PlatformModel::load(platform)?;

    let mut tolerances: Vec<f64> = TOLERANCE_LADDER.to_vec();
    tolerances.push(tolerance);
    tolerances.sort_unstable_by(f64::total_cmp);
    tolerances.dedup();

    let opts = PipelineOptions {
        batch,
        lpu_override: Some(lpu_scheme),
        ..PipelineOptions::default()
    };
    let report = cascade::sweep_tolerance(&net, &platform, &eval, &tolerances, &opts)?;
    write_text(
        &out.join("cascade_sweep.csv"),
        &cascade::sweep_rows_to_csv(&report.rows),
    )?;
    let headline = report
        .rows
        .iter()
        .find(|r| r.tolerance == tolerance)
        .expect("requested tolerance is in the sweep")
        .clone();
    let summary = SimulateSummary {
        requested_tolerance: tolerance,
        batch: report.batch,
        lpu_wordlength: report.lpu_wordlength,
        t_lpu_sample: report.t_lpu_sample,
        headline: headline.clone(),
        rows: report.rows,
    };
    write_json(&out.join("simulate_summary.json"), &summary)?;
    println!(
        "simulate: tolerance {} -> {} (speedup {:.2}x, forwarded {:.1}%, achieved error {:.4})",
        tolerance,
        if headline.single_stage {
            "single-stage"
        } else {
            "cascade"
        },
        headline.speedup,
        headline.forwarded_fraction * 100.0,
        headline.achieved_error,
    );
    Ok(())
}

fn report(out: &Path) -> CliResult<()> {
    let sources: [(&str, &str, &'static str); 4] = [
        ("quantize", "quantize_summary.json", "quantize"),
        ("ceu", "ceu_summary.json", "tune-ceu"),
        ("dse", "dse_summary.json", "dse"),
        ("simulate", "simulate_summary.json", "simulate"),
    ];
    let mut merged = serde_json::Map::new();
    for (key, file, produced_by) in sources {
        let value: serde_json::Value = read_artifact(&out.join(file), produced_by)?;
        merged.insert(key.to_string(), value);
    }
    write_json(&out.join("report.json"), &serde_json::Value::Object(merged))?;
    println!("report: {}", out.join("report.json").display());
    Ok(())
}
