//! Quantisation-space search: per-layer scaling sweeps at each candidate
//! wordlength, a combination search for the best network-level scheme,
//! and the selection of the low- and high-precision stage wordlengths
//! against the user error tolerance.
//!
//! The sweep quantises one layer at a time (weights and activations over
//! a window of scaling factors) while the rest of the network runs in
//! float, then keeps every scaling pair within a threshold of that
//! layer's best. The surviving pairs form the combination space, which a
//! deterministic coordinate descent searches starting from the per-layer
//! argmax.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::EvalSet;
use crate::engine::{self, argmax_classes};
use crate::error::{Error, Result};
use crate::fixedpoint::{
    FixedSpec, LayerQuant, LayerSpecs, QuantScheme, MAX_WORDLENGTH, MIN_WORDLENGTH,
};
use crate::netmodel::Network;

/// Accuracy metric used throughout the toolflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Top1,
    Top5,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(Metric::Top1),
            "top5" => Ok(Metric::Top5),
            other => Err(Error::InvalidArgument(format!(
                "unknown metric `{other}` (expected top1 or top5)"
            ))),
        }
    }
}

/// Fraction of samples whose label is the top prediction (top-1) or
/// among the five largest probabilities (top-5).
pub fn accuracy(probs: &Array2<f64>, labels: &[usize], metric: Metric) -> Result<f64> {
    if probs.nrows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} prediction rows vs {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("accuracy: no samples"));
    }
    let mut hits = 0usize;
    match metric {
        Metric::Top1 => {
            let classes = argmax_classes(probs);
            hits = classes.iter().zip(labels).filter(|(c, l)| c == l).count();
        }
        Metric::Top5 => {
            for (row, &label) in probs.rows().into_iter().zip(labels) {
                let target = row[label];
                // Rank = how many entries strictly exceed the label's
                // probability; ties resolve in the label's favour.
                let rank = row.iter().filter(|&&v| v > target).count();
                if rank < 5 {
                    hits += 1;
                }
            }
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Sweep and search parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub metric: Metric,
    /// Scaling pairs within this of the layer's best accuracy survive
    /// into the combination search.
    pub layer_threshold: f64,
    /// Sweep window: fractional bits run from `frac_lo` to
    /// `wordlength + frac_margin`, inclusive.
    pub frac_lo: i32,
    pub frac_margin: i32,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Top1,
            layer_threshold: 0.01,
            frac_lo: -2,
            frac_margin: 2,
        }
    }
}

impl QuantizerConfig {
    fn frac_range(&self, wordlength: u8) -> std::ops::RangeInclusive<i32> {
        self.frac_lo..=(wordlength as i32 + self.frac_margin)
    }
}

/// Accuracy of one (layer, wordlength, scaling pair) sweep point,
/// measured with only that layer quantised and the rest in float.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub layer_index: usize,
    pub wordlength: u8,
    pub frac_bits_weights: i32,
    pub frac_bits_activations: i32,
    pub eval_accuracy: f64,
}

/// Sweep every scaling pair of one CONV/FC layer (`layer_index` in the
/// full layer list) at `wordlength`.
pub fn sweep_layer(
    net: &Network,
    layer_index: usize,
    wordlength: u8,
    eval: &EvalSet,
    cfg: &QuantizerConfig,
) -> Result<Vec<SweepRecord>> {
    if eval.is_empty() {
        return Err(Error::EmptyInput("sweep_layer: empty evaluation set"));
    }
    let indices = net.matrix_layer_indices();
    let m_idx = indices
        .iter()
        .position(|&i| i == layer_index)
        .ok_or_else(|| Error::NotMatrixLayer {
            index: layer_index,
            kind: net
                .layers()
                .get(layer_index)
                .map(|l| l.kind_name().to_string())
                .unwrap_or_else(|| "out of range".to_string()),
        })?;

    // Everything before the swept layer is float and identical for all
    // sweep points: run it once.
    let prefix = engine::float_prefix(net, m_idx, &eval.inputs)?;
    let suffix_len = indices.len() - m_idx;

    let mut records = Vec::new();
    for frac_w in cfg.frac_range(wordlength) {
        for frac_a in cfg.frac_range(wordlength) {
            let mut specs: Vec<Option<LayerSpecs>> = vec![None; suffix_len];
            specs[0] = Some(LayerSpecs {
                weights: FixedSpec::new(wordlength, frac_w)?,
                activations: FixedSpec::new(wordlength, frac_a)?,
            });
            let probs = engine::hybrid_suffix(net, m_idx, prefix.clone(), &specs)?;
            records.push(SweepRecord {
                layer_index,
                wordlength,
                frac_bits_weights: frac_w,
                frac_bits_activations: frac_a,
                eval_accuracy: accuracy(&probs, &eval.labels, cfg.metric)?,
            });
        }
    }
    Ok(records)
}

/// A full network scheme with its measured accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeCandidate {
    pub scheme: QuantScheme,
    pub network_accuracy: f64,
    pub accuracy_drop_vs_float: f64,
}

fn eval_scheme(
    net: &Network,
    wordlength: u8,
    per_layer: &[LayerQuant],
    eval: &EvalSet,
    metric: Metric,
) -> Result<f64> {
    let specs: Vec<Option<LayerSpecs>> = per_layer
        .iter()
        .map(|lq| {
            Ok(Some(LayerSpecs {
                weights: FixedSpec::new(wordlength, lq.frac_weights)?,
                activations: FixedSpec::new(wordlength, lq.frac_activations)?,
            }))
        })
        .collect::<Result<_>>()?;
    let probs = engine::run_hybrid(net, &specs, &eval.inputs)?;
    accuracy(&probs, &eval.labels, metric)
}

/// Outcome of [`select_scheme`] including the per-layer sweep records
/// for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeSearch {
    pub candidate: SchemeCandidate,
    pub sweeps: Vec<SweepRecord>,
}

/// Best network-level scheme at `wordlength`.
///
/// Per layer, every scaling pair within `cfg.layer_threshold` of that
/// layer's sweep maximum survives; coordinate descent starts from the
/// per-layer argmax and cycles layers, adopting strictly better pairs,
/// until a full pass yields no gain.
pub fn select_scheme(
    net: &Network,
    wordlength: u8,
    eval: &EvalSet,
    cfg: &QuantizerConfig,
) -> Result<SchemeSearch> {
    let indices = net.matrix_layer_indices();
    if indices.is_empty() {
        return Err(Error::EmptyInput("network has no CONV/FC layers"));
    }

    let mut all_sweeps = Vec::new();
    let mut survivors: Vec<Vec<LayerQuant>> = Vec::new();
    let mut current: Vec<LayerQuant> = Vec::new();
    for &layer_index in &indices {
        let records = sweep_layer(net, layer_index, wordlength, eval, cfg)?;
        let best = records
            .iter()
            .map(|r| r.eval_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        let keep: Vec<LayerQuant> = records
            .iter()
            .filter(|r| r.eval_accuracy >= best - cfg.layer_threshold)
            .map(|r| LayerQuant {
                frac_weights: r.frac_bits_weights,
                frac_activations: r.frac_bits_activations,
            })
            .collect();
        if keep.is_empty() {
            return Err(Error::EmptySurvivorSet {
                layer: layer_index,
                threshold: cfg.layer_threshold,
            });
        }
        // Records iterate (frac_w, frac_a) ascending, so the first
        // maximum is the lexicographically smallest argmax.
        let argmax = records
            .iter()
            .find(|r| r.eval_accuracy == best)
            .expect("non-empty sweep");
        current.push(LayerQuant {
            frac_weights: argmax.frac_bits_weights,
            frac_activations: argmax.frac_bits_activations,
        });
        survivors.push(keep);
        all_sweeps.extend(records);
    }

    let mut current_acc = eval_scheme(net, wordlength, &current, eval, cfg.metric)?;
    let initial_acc = current_acc;
    loop {
        let mut improved = false;
        for layer in 0..current.len() {
            let mut best_pair = current[layer];
            let mut best_acc = current_acc;
            for &pair in &survivors[layer] {
                if pair == current[layer] {
                    continue;
                }
                let mut trial = current.clone();
                trial[layer] = pair;
                let acc = eval_scheme(net, wordlength, &trial, eval, cfg.metric)?;
                if acc > best_acc {
                    best_acc = acc;
                    best_pair = pair;
                }
            }
            if best_pair != current[layer] {
                current[layer] = best_pair;
                current_acc = best_acc;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    debug_assert!(current_acc >= initial_acc);

    let float_probs = engine::run_float(net, &eval.inputs)?;
    let float_acc = accuracy(&float_probs, &eval.labels, cfg.metric)?;
    Ok(SchemeSearch {
        candidate: SchemeCandidate {
            scheme: QuantScheme::new(wordlength, current)?,
            network_accuracy: current_acc,
            accuracy_drop_vs_float: float_acc - current_acc,
        },
        sweeps: all_sweeps,
    })
}

/// Chosen wordlengths and schemes for the two cascade stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSelection {
    pub lpu_wordlength: u8,
    pub hpu_wordlength: u8,
    pub lpu: SchemeCandidate,
    pub hpu: SchemeCandidate,
    pub float_accuracy: f64,
    /// True when no wordlength below the HPU's avoided catastrophic
    /// loss; the caller should build a single-stage design.
    pub single_stage: bool,
}

/// Lazily evaluated per-wordlength scheme table; memoises
/// [`select_scheme`] results so wordlengths are swept at most once.
pub struct SchemeTable<'a> {
    net: &'a Network,
    eval: &'a EvalSet,
    cfg: QuantizerConfig,
    cache: BTreeMap<u8, SchemeSearch>,
}

impl<'a> SchemeTable<'a> {
    pub fn new(net: &'a Network, eval: &'a EvalSet, cfg: QuantizerConfig) -> Self {
        Self {
            net,
            eval,
            cfg,
            cache: BTreeMap::new(),
        }
    }

    pub fn search(&mut self, wordlength: u8) -> Result<&SchemeSearch> {
        if !self.cache.contains_key(&wordlength) {
            let search = select_scheme(self.net, wordlength, self.eval, &self.cfg)?;
            self.cache.insert(wordlength, search);
        }
        Ok(&self.cache[&wordlength])
    }

    pub fn best(&mut self, wordlength: u8) -> Result<SchemeCandidate> {
        Ok(self.search(wordlength)?.candidate.clone())
    }

    /// Wordlengths evaluated so far with their candidates, ascending.
    pub fn evaluated(&self) -> impl Iterator<Item = (u8, &SchemeCandidate)> {
        self.cache.iter().map(|(wl, s)| (*wl, &s.candidate))
    }
}

/// Accuracy floor below which a stage counts as catastrophically lossy:
/// twice the chance rate or a quarter of the float accuracy, whichever
/// is larger.
pub fn catastrophic_floor(class_count: usize, float_accuracy: f64) -> f64 {
    (2.0 / class_count as f64).max(0.25 * float_accuracy)
}

/// Everything the wordlength selection produced: the stage choice, the
/// raw sweep records, and the best candidate of every examined
/// wordlength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeOutcome {
    pub selection: StageSelection,
    pub sweeps: Vec<SweepRecord>,
    pub evaluated: Vec<(u8, SchemeCandidate)>,
}

/// Pick the two stage wordlengths: the LPU takes the smallest wordlength
/// whose best scheme avoids catastrophic loss, the HPU the smallest
/// whose accuracy drop against the float reference stays within
/// `error_tolerance`. When they collide the selection degenerates to a
/// single stage at the HPU precision.
pub fn pick_stage_wordlengths(
    net: &Network,
    eval: &EvalSet,
    error_tolerance: f64,
    cfg: &QuantizerConfig,
) -> Result<QuantizeOutcome> {
    if error_tolerance < 0.0 {
        return Err(Error::InvalidArgument(
            "error tolerance must be >= 0".into(),
        ));
    }
    let float_probs = engine::run_float(net, &eval.inputs)?;
    let float_acc = accuracy(&float_probs, &eval.labels, cfg.metric)?;
    let floor = catastrophic_floor(net.class_count(), float_acc);

    let mut table = SchemeTable::new(net, eval, *cfg);
    let mut lpu: Option<(u8, SchemeCandidate)> = None;
    let mut hpu: Option<(u8, SchemeCandidate)> = None;
    let mut sweeps = Vec::new();
    let mut evaluated = Vec::new();
    for wl in MIN_WORDLENGTH..=MAX_WORDLENGTH {
        let search = table.search(wl)?;
        sweeps.extend(search.sweeps.iter().copied());
        let cand = search.candidate.clone();
        evaluated.push((wl, cand.clone()));
        if lpu.is_none() && cand.network_accuracy >= floor {
            lpu = Some((wl, cand.clone()));
        }
        if hpu.is_none() && cand.accuracy_drop_vs_float <= error_tolerance {
            hpu = Some((wl, cand));
        }
        if lpu.is_some() && hpu.is_some() {
            break;
        }
    }
    let (hpu_wl, hpu_cand) = hpu.ok_or(Error::InfeasibleTolerance(error_tolerance))?;
    let (lpu_wl, lpu_cand, single_stage) = match lpu {
        Some((wl, cand)) if wl < hpu_wl => (wl, cand, false),
        _ => (hpu_wl, hpu_cand.clone(), true),
    };
    Ok(QuantizeOutcome {
        selection: StageSelection {
            lpu_wordlength: lpu_wl,
            hpu_wordlength: hpu_wl,
            lpu: lpu_cand,
            hpu: hpu_cand,
            float_accuracy: float_acc,
            single_stage,
        },
        sweeps,
        evaluated,
    })
}

/// Render sweep records as CSV
/// (`layer_index,wordlength,frac_w,frac_a,accuracy`).
pub fn sweeps_to_csv(records: &[SweepRecord]) -> String {
    let mut csv = String::from(
        "layer_index,wordlength,frac_bits_weights,frac_bits_activations,eval_accuracy\n",
    );
    for r in records {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.layer_index,
            r.wordlength,
            r.frac_bits_weights,
            r.frac_bits_activations,
            r.eval_accuracy
        ));
    }
    csv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture;
    use crate::netmodel::{ConvShape, LayerDesc, LayerWeights};
    use ndarray::{Array2, Array4};

    fn small_cfg() -> QuantizerConfig {
        QuantizerConfig::default()
    }

    #[test]
    fn top5_counts_label_in_top_five() {
        let probs = Array2::from_shape_vec(
            (2, 6),
            vec![
                0.3, 0.25, 0.2, 0.1, 0.08, 0.07, // label 5: rank 6 -> miss
                0.3, 0.25, 0.2, 0.1, 0.08, 0.07, // label 4: rank 5 -> hit
            ],
        )
        .unwrap();
        assert_eq!(accuracy(&probs, &[5, 4], Metric::Top5).unwrap(), 0.5);
        assert_eq!(accuracy(&probs, &[0, 1], Metric::Top1).unwrap(), 0.5);
    }

    #[test]
    fn sweep_rejects_non_matrix_layers() {
        let net = fixture::toy_network(1);
        let eval = fixture::toy_eval_set(&net, 2, 16);
        // Layer 1 of the toy network is ReLU.
        assert!(matches!(
            sweep_layer(&net, 1, 8, &eval, &small_cfg()),
            Err(Error::NotMatrixLayer { index: 1, .. })
        ));
    }

    #[test]
    fn wordlength_16_sweep_reaches_float_accuracy() {
        let net = fixture::toy_network(3);
        let eval = fixture::toy_eval_set(&net, 4, 120);
        let float_probs = engine::run_float(&net, &eval.inputs).unwrap();
        let float_acc = accuracy(&float_probs, &eval.labels, Metric::Top1).unwrap();
        for layer_index in net.matrix_layer_indices() {
            let records = sweep_layer(&net, layer_index, 16, &eval, &small_cfg()).unwrap();
            let best = records
                .iter()
                .map(|r| r.eval_accuracy)
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(best, float_acc, "layer {layer_index}");
        }
    }

    #[test]
    fn zero_weights_make_accuracy_independent_of_weight_scaling() {
        // Conv weights are all zero, so every weight scaling quantises
        // them to exact zeros and the accuracy only moves with frac_a.
        let shape = ConvShape {
            h: 3,
            w: 3,
            n_in: 1,
            n_out: 2,
            k_h: 2,
            k_w: 2,
            s_h: 1,
            s_w: 1,
            z: 0,
        };
        let net = Network::new(
            vec![
                LayerDesc::Conv(shape),
                LayerDesc::fc(8, 2),
                LayerDesc::Softmax,
            ],
            vec![
                LayerWeights {
                    matrix: Array2::zeros((4, 2)),
                    bias: None,
                },
                LayerWeights {
                    matrix: Array2::from_shape_fn((8, 2), |(i, j)| {
                        ((i + 2 * j) % 5) as f64 * 0.25 - 0.5
                    }),
                    bias: None,
                },
            ],
            2,
        )
        .unwrap();
        let inputs = Array4::from_shape_fn((20, 1, 3, 3), |(s, _, y, x)| {
            ((s + y + x) % 7) as f64 * 0.125 - 0.375
        });
        let labels = vec![0; 20];
        let eval = EvalSet { inputs, labels };
        let records = sweep_layer(&net, 0, 6, &eval, &small_cfg()).unwrap();
        let mut by_frac_a: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
        for r in records {
            by_frac_a
                .entry(r.frac_bits_activations)
                .or_default()
                .push(r.eval_accuracy);
        }
        for (frac_a, accs) in by_frac_a {
            for a in &accs {
                assert_eq!(*a, accs[0], "frac_a={frac_a}");
            }
        }
    }

    #[test]
    fn accuracy_surface_peaks_away_from_window_edges() {
        let net = fixture::toy_network(5);
        let eval = fixture::toy_eval_set(&net, 6, 120);
        let records = sweep_layer(&net, 0, 8, &eval, &small_cfg()).unwrap();
        let best = records
            .iter()
            .max_by(|a, b| a.eval_accuracy.total_cmp(&b.eval_accuracy))
            .unwrap();
        let range = small_cfg().frac_range(8);
        assert!(best.frac_bits_weights > *range.start());
        assert!(best.frac_bits_weights < *range.end());
        assert!(best.frac_bits_activations > *range.start());
        assert!(best.frac_bits_activations < *range.end());
    }

    #[test]
    fn single_layer_network_returns_its_argmax() {
        let net = Network::new(
            vec![LayerDesc::fc(4, 2), LayerDesc::Softmax],
            vec![LayerWeights {
                matrix: Array2::from_shape_fn((4, 2), |(i, j)| {
                    ((2 * i + j) % 5) as f64 * 0.3 - 0.6
                }),
                bias: None,
            }],
            2,
        )
        .unwrap();
        let inputs = Array4::from_shape_fn((24, 4, 1, 1), |(s, c, _, _)| {
            ((s * 3 + c * 7) % 11) as f64 * 0.2 - 1.0
        });
        let labels = argmax_classes(&engine::run_float(&net, &inputs).unwrap());
        let eval = EvalSet { inputs, labels };
        let search = select_scheme(&net, 5, &eval, &small_cfg()).unwrap();
        let records = sweep_layer(&net, 0, 5, &eval, &small_cfg()).unwrap();
        let best = records
            .iter()
            .map(|r| r.eval_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        let argmax = records.iter().find(|r| r.eval_accuracy == best).unwrap();
        assert_eq!(
            search.candidate.scheme.per_layer[0],
            LayerQuant {
                frac_weights: argmax.frac_bits_weights,
                frac_activations: argmax.frac_bits_activations,
            }
        );
        assert_eq!(search.candidate.network_accuracy, best);
    }

    #[test]
    fn coordinate_descent_matches_exhaustive_search_on_two_layers() {
        let net = fixture::toy_network(11);
        let eval = fixture::toy_eval_set(&net, 12, 80);
        let cfg = QuantizerConfig {
            layer_threshold: 0.05,
            ..small_cfg()
        };
        let wl = 4;
        let search = select_scheme(&net, wl, &eval, &cfg).unwrap();

        // Brute force over the surviving cross-product.
        let indices = net.matrix_layer_indices();
        let mut survivors = Vec::new();
        for &layer_index in &indices {
            let records = sweep_layer(&net, layer_index, wl, &eval, &cfg).unwrap();
            let best = records
                .iter()
                .map(|r| r.eval_accuracy)
                .fold(f64::NEG_INFINITY, f64::max);
            survivors.push(
                records
                    .iter()
                    .filter(|r| r.eval_accuracy >= best - cfg.layer_threshold)
                    .map(|r| LayerQuant {
                        frac_weights: r.frac_bits_weights,
                        frac_activations: r.frac_bits_activations,
                    })
                    .collect::<Vec<_>>(),
            );
        }
        let mut best_acc = f64::NEG_INFINITY;
        for &a in &survivors[0] {
            for &b in &survivors[1] {
                let acc = eval_scheme(&net, wl, &[a, b], &eval, cfg.metric).unwrap();
                if acc > best_acc {
                    best_acc = acc;
                }
            }
        }
        assert_eq!(search.candidate.network_accuracy, best_acc);
    }

    #[test]
    fn descent_never_regresses_from_the_argmax_init() {
        let net = fixture::toy_network(9);
        let eval = fixture::toy_eval_set(&net, 10, 80);
        for wl in [3u8, 5, 8] {
            let search = select_scheme(&net, wl, &eval, &small_cfg()).unwrap();
            let indices = net.matrix_layer_indices();
            let mut init = Vec::new();
            for &layer_index in &indices {
                let records = sweep_layer(&net, layer_index, wl, &eval, &small_cfg()).unwrap();
                let best = records
                    .iter()
                    .map(|r| r.eval_accuracy)
                    .fold(f64::NEG_INFINITY, f64::max);
                let argmax = records.iter().find(|r| r.eval_accuracy == best).unwrap();
                init.push(LayerQuant {
                    frac_weights: argmax.frac_bits_weights,
                    frac_activations: argmax.frac_bits_activations,
                });
            }
            let init_acc = eval_scheme(&net, wl, &init, &eval, Metric::Top1).unwrap();
            assert!(search.candidate.network_accuracy >= init_acc, "wl={wl}");
        }
    }

    #[test]
    fn wordlength_16_drop_is_negligible() {
        let net = fixture::toy_network(11);
        let eval = fixture::toy_eval_set(&net, 12, 150);
        let search = select_scheme(&net, 16, &eval, &small_cfg()).unwrap();
        assert!(search.candidate.accuracy_drop_vs_float <= 0.005);
    }

    #[test]
    fn stage_selection_respects_tolerance_and_ordering() {
        let net = fixture::toy_network(13);
        let eval = fixture::toy_eval_set(&net, 14, 150);
        let sel = pick_stage_wordlengths(&net, &eval, 0.05, &small_cfg())
            .unwrap()
            .selection;
        assert!(sel.hpu.accuracy_drop_vs_float <= 0.05);
        let floor = catastrophic_floor(net.class_count(), sel.float_accuracy);
        assert!(sel.lpu.network_accuracy >= floor);
        if !sel.single_stage {
            assert!(sel.lpu_wordlength < sel.hpu_wordlength);
        }
        // Both stages quantise the same float weights; no retraining
        // happens anywhere, so re-deriving the weight codes from the
        // stored float tensors reproduces the schemes' inputs exactly.
        for (m_idx, lq) in sel.lpu.scheme.per_layer.iter().enumerate() {
            let spec = FixedSpec::new(sel.lpu.scheme.wordlength, lq.frac_weights).unwrap();
            for &w in net.layer_weights(m_idx).matrix.iter() {
                let once = crate::fixedpoint::quantize(w, &spec).unwrap();
                let again = crate::fixedpoint::quantize(w, &spec).unwrap();
                assert_eq!(once, again);
            }
        }
    }

    #[test]
    fn zero_tolerance_on_an_eight_bit_grid_net_pins_hpu_at_eight_bits() {
        // Weights on the 2^-4 grid spanning the full 8-bit code range:
        // +/-7.9375 needs codes +/-127 at frac 4, and the 1/16-grid
        // smalls need frac >= 4. Decision margins are +/-1/256, so any
        // 7-bit-or-narrower scheme (saturation or resolution loss)
        // flips samples, while the 8-bit scheme is exact and reproduces
        // every float prediction.
        let weights = Array2::from_shape_vec(
            (4, 2),
            vec![
                7.9375, 7.875, //
                0.0625, 0.125, //
                -7.9375, -7.875, //
                0.1875, 0.125,
            ],
        )
        .unwrap();
        let net = Network::new(
            vec![LayerDesc::fc(4, 2), LayerDesc::Softmax],
            vec![LayerWeights {
                matrix: weights,
                bias: None,
            }],
            2,
        )
        .unwrap();
        // Inputs on the same grid; each has logit margin +/-0.0625/16.
        let samples: Vec<[f64; 4]> = vec![
            [7.9375, 1.0, 1.0, -5.875],
            [-7.9375, -1.0, -1.0, 5.875],
            [3.0, -1.0625, 4.0, -0.125],
            [-3.0, 1.0625, -4.0, 0.125],
            [5.0, 2.5, 2.5, 0.0625],
            [-5.0, -2.5, -2.5, -0.0625],
            [1.0, -3.9375, 2.0, -2.875],
            [-1.0, 3.9375, -2.0, 2.875],
            [6.25, 3.0, 3.0, -0.1875],
            [-6.25, -3.0, -3.0, 0.1875],
        ];
        let inputs = Array4::from_shape_fn((samples.len(), 4, 1, 1), |(s, c, _, _)| samples[s][c]);
        let labels = argmax_classes(&engine::run_float(&net, &inputs).unwrap());
        let eval = EvalSet { inputs, labels };

        let outcome = pick_stage_wordlengths(&net, &eval, 0.0, &small_cfg()).unwrap();
        assert_eq!(outcome.selection.hpu_wordlength, 8);
        assert_eq!(outcome.selection.hpu.accuracy_drop_vs_float, 0.0);
        for (wl, cand) in &outcome.evaluated {
            if *wl < 8 {
                assert!(
                    cand.accuracy_drop_vs_float > 0.0,
                    "wordlength {wl} must lose accuracy on this net"
                );
            }
        }
    }

    #[test]
    fn zero_tolerance_beyond_sixteen_bits_is_infeasible() {
        // Same construction scaled to a 2^-12 grid spanning +/-128:
        // exactness needs 20-bit codes, so every wordlength up to 16
        // saturates or loses resolution and flips at least one of the
        // margin-of-one-grid-step samples. Zero tolerance then has no
        // admissible wordlength.
        let d = 1.0 / 4096.0;
        let big = 128.0 - d;
        let weights = Array2::from_shape_vec(
            (4, 2),
            vec![big, big - d, d, 2.0 * d, -big, -(big - d), 3.0 * d, 2.0 * d],
        )
        .unwrap();
        let net = Network::new(
            vec![LayerDesc::fc(4, 2), LayerDesc::Softmax],
            vec![LayerWeights {
                matrix: weights,
                bias: None,
            }],
            2,
        )
        .unwrap();
        // Each sample's x0 - x1 - x2 + x3 is one to three grid steps, so
        // the logit margins sit at d^2 scale.
        let samples: Vec<[f64; 4]> = vec![
            [big, 1.0, 1.0, -126.0 + 2.0 * d],
            [-big, -1.0, -1.0, 126.0 - 2.0 * d],
            [3.0, -1.0 - d, 4.0, -2.0 * d],
            [-3.0, 1.0 + d, -4.0, 2.0 * d],
            [1.0, -64.0 + d, 2.0, -63.0 - 2.0 * d],
            [-1.0, 64.0 - d, -2.0, 63.0 + 2.0 * d],
        ];
        let inputs = Array4::from_shape_fn((samples.len(), 4, 1, 1), |(s, c, _, _)| samples[s][c]);
        let labels = argmax_classes(&engine::run_float(&net, &inputs).unwrap());
        let eval = EvalSet { inputs, labels };
        assert!(matches!(
            pick_stage_wordlengths(&net, &eval, 0.0, &small_cfg()),
            Err(Error::InfeasibleTolerance(_))
        ));
    }

    #[test]
    fn huge_tolerance_degenerates_to_single_stage() {
        let net = fixture::toy_network(15);
        let eval = fixture::toy_eval_set(&net, 16, 60);
        let sel = pick_stage_wordlengths(&net, &eval, 1.0, &small_cfg())
            .unwrap()
            .selection;
        // Tolerance 100%: the HPU lands on the smallest wordlength, so
        // the LPU cannot undercut it.
        assert_eq!(sel.hpu_wordlength, MIN_WORDLENGTH);
        assert!(sel.single_stage);
        assert_eq!(sel.lpu_wordlength, sel.hpu_wordlength);
    }

    #[test]
    fn best_scheme_accuracy_never_improves_as_wordlength_shrinks() {
        let net = fixture::toy_network(17);
        let eval = fixture::toy_eval_set(&net, 18, 200);
        let mut table = SchemeTable::new(&net, &eval, small_cfg());
        let mut prev = f64::INFINITY;
        for wl in [16u8, 8, 4, 2] {
            let acc = table.best(wl).unwrap().network_accuracy;
            assert!(
                acc <= prev + 1e-12,
                "wordlength {wl} accuracy {acc} exceeds previous {prev}"
            );
            prev = acc;
        }
    }
}
