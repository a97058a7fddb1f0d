//! Deterministic toy fixtures: a small trained-looking network, a
//! labelled evaluation set, and a matching platform file.
//!
//! All randomness flows from the caller's seed through a counter-based
//! generator, so identical seeds reproduce identical fixtures byte for
//! byte. Labels come from the float reference predictions and samples
//! with a thin decision margin are resampled, which keeps the float
//! model's accuracy at exactly 1.0 and gives the quantisation sweeps a
//! clean degradation signal.

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::EvalSet;
use crate::dse::{
    affine_lut_per_macc_table, default_clk_table, default_macc_per_dsp_table, PlatformModel,
};
use crate::engine;
use crate::fixedpoint::{FixedSpec, LayerQuant, LayerSpecs, QuantScheme};
use crate::netmodel::{ConvShape, LayerDesc, LayerWeights, Network, PoolShape};

/// Minimum probability gap between the top two float predictions of a
/// fixture sample; thinner samples are resampled.
const MARGIN: f64 = 0.02;

fn snap(v: f64) -> f64 {
    v as f32 as f64
}

/// Signed weight with log-uniform magnitude. The wide within-layer
/// dynamic range is what makes narrow wordlengths genuinely lossy: no
/// single scaling keeps both the large and the small weights alive.
fn logu_weight(rng: &mut ChaCha8Rng) -> f64 {
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let magnitude = 10f64.powf(rng.gen_range(-1.5..0.0));
    snap(sign * magnitude)
}

/// Four-class toy network: 6x6 single-channel input, one 3x3 CONV with
/// four filters, ReLU, 2x2 max-pool, one FC layer, softmax.
pub fn toy_network(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = ConvShape {
        h: 6,
        w: 6,
        n_in: 1,
        n_out: 4,
        k_h: 3,
        k_w: 3,
        s_h: 1,
        s_w: 1,
        z: 0,
    };
    let conv_w = Array2::from_shape_fn((conv.inner_dim(), conv.n_out), |_| logu_weight(&mut rng));
    let conv_b: Vec<f64> = (0..conv.n_out)
        .map(|_| snap(rng.gen_range(-0.25..0.25)))
        .collect();
    let fc_w = Array2::from_shape_fn((16, 4), |_| logu_weight(&mut rng));
    let fc_b: Vec<f64> = (0..4).map(|_| snap(rng.gen_range(-0.25..0.25))).collect();
    Network::new(
        vec![
            LayerDesc::Conv(conv),
            LayerDesc::Relu,
            LayerDesc::MaxPool(PoolShape {
                k_h: 2,
                k_w: 2,
                s_h: 2,
                s_w: 2,
            }),
            LayerDesc::fc(16, 4),
            LayerDesc::Softmax,
        ],
        vec![
            LayerWeights {
                matrix: conv_w,
                bias: Some(conv_b),
            },
            LayerWeights {
                matrix: fc_w,
                bias: Some(fc_b),
            },
        ],
        4,
    )
    .expect("fixture network is well-formed")
}

/// Labelled evaluation set for `net`: uniform-noise inputs labelled by
/// the float reference, margin-filtered.
pub fn toy_eval_set(net: &Network, seed: u64, count: usize) -> EvalSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = net.input_shape();
    let mut inputs = Array4::<f64>::zeros((count, c, h, w));
    let mut labels = Vec::with_capacity(count);
    for s in 0..count {
        // Resample until the float prediction has a clear margin.
        loop {
            let candidate = Array4::from_shape_fn((1, c, h, w), |_| snap(rng.gen_range(-1.0..1.0)));
            let probs =
                engine::run_float(net, &candidate).expect("fixture inputs match the network");
            let row: Vec<f64> = probs.row(0).to_vec();
            let mut sorted = row.clone();
            sorted.sort_unstable_by(|a, b| b.total_cmp(a));
            if sorted[0] - sorted[1] < MARGIN {
                continue;
            }
            let label = engine::argmax_classes(&probs)[0];
            inputs
                .slice_mut(ndarray::s![s, .., .., ..])
                .assign(&candidate.index_axis(ndarray::Axis(0), 0));
            labels.push(label);
            break;
        }
    }
    EvalSet { inputs, labels }
}

/// Small platform sized so the toy network's design space has feasible
/// and rejected points at every precision, and so narrow wordlengths
/// buy real parallelism: the steep LUT cost curve makes a 2-bit MACC
/// an order of magnitude cheaper than a 16-bit one.
pub fn toy_platform() -> PlatformModel {
    PlatformModel {
        avail_lut: 600,
        avail_dsp: 4,
        lut_per_macc: affine_lut_per_macc_table((2, 10.0), (16, 420.0)),
        macc_per_dsp: default_macc_per_dsp_table(),
        clk: default_clk_table(),
        mem_bandwidth: 2e10,
        onchip_capacity: 12_000,
        offchip_capacity: 10_000_000,
        // Scaled to the microsecond-sized toy workload so batch timing
        // shows the same reconfiguration-amortisation trade-off as a
        // real device on a real network.
        reconfig_time: 2e-6,
        notes: Some("synthetic toy device for the shipped fixture".into()),
    }
}

/// Range-fitted specs for every CONV/FC layer: activation scalings from
/// the float activations feeding each layer, weight scalings from the
/// stored weights.
pub fn fitted_specs(
    net: &Network,
    inputs: &Array4<f64>,
    wordlength: u8,
) -> Vec<Option<LayerSpecs>> {
    let count = net.matrix_layer_count();
    let mut specs = Vec::with_capacity(count);
    for m_idx in 0..count {
        let volume =
            engine::float_prefix(net, m_idx, inputs).expect("prefix of a validated network");
        let act_max = volume.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let w_max = net
            .layer_weights(m_idx)
            .matrix
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        specs.push(Some(LayerSpecs {
            weights: FixedSpec::fit(wordlength, w_max).expect("finite weights"),
            activations: FixedSpec::fit(wordlength, act_max).expect("finite activations"),
        }));
    }
    specs
}

/// Range-fitted scheme, the [`fitted_specs`] scalings as a [`QuantScheme`].
pub fn fitted_scheme(net: &Network, inputs: &Array4<f64>, wordlength: u8) -> QuantScheme {
    let per_layer = fitted_specs(net, inputs, wordlength)
        .into_iter()
        .map(|s| {
            let s = s.expect("fitted_specs returns Some for every layer");
            LayerQuant {
                frac_weights: s.weights.frac_bits,
                frac_activations: s.activations.frac_bits,
            }
        })
        .collect();
    QuantScheme::new(wordlength, per_layer).expect("valid wordlength")
}
