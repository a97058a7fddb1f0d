//! Network execution in float or fixed point, on the tiled
//! matrix-multiplication datapath, with exact cycle accounting.
//!
//! The datapath computes an output tile `T_R x T_C` by accumulating
//! `ceil(P/T_P)` tile products. A processing element unrolls the
//! `T_P`-long dot product fully, `T_C` elements run in parallel, and the
//! `T_R` rows of a tile are pipelined one per cycle; edge tiles are
//! zero-padded and still cost the full `T_R` rows. The trip count of
//! that loop nest, [`ii_cycles`], is shared verbatim with the roofline
//! model so the simulator and the performance model can never diverge.

use ndarray::{Array2, Array4};
use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::{self, FixedSpec, LayerSpecs, QuantScheme};
use crate::netmodel::{im2col_batch, matrix_dims, LayerDesc, MatrixDims, Network};

/// Tile sizes for the matrix-multiply unit plus the batch tile that
/// replaces the batch size in FC row counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    pub t_r: usize,
    pub t_p: usize,
    pub t_c: usize,
    pub t_batch: usize,
}

/// Batch tiles are restricted to powers of two or multiples of 1024 to
/// keep the design space exhaustively searchable.
pub fn is_valid_batch_tile(t: usize) -> bool {
    t >= 1 && (t.is_power_of_two() || t.is_multiple_of(1024))
}

impl TileConfig {
    pub fn new(t_r: usize, t_p: usize, t_c: usize, t_batch: usize) -> Result<Self> {
        if t_r == 0 || t_p == 0 || t_c == 0 {
            return Err(Error::InvalidTileConfig("tile sizes must be >= 1".into()));
        }
        if !is_valid_batch_tile(t_batch) {
            return Err(Error::InvalidTileConfig(format!(
                "t_batch {t_batch} is neither a power of two nor a multiple of 1024"
            )));
        }
        Ok(Self {
            t_r,
            t_p,
            t_c,
            t_batch,
        })
    }

    /// Tiles covering the whole matrix in one pass.
    pub fn full(dims: &MatrixDims) -> Self {
        Self {
            t_r: dims.r,
            t_p: dims.p,
            t_c: dims.c,
            t_batch: 1,
        }
    }
}

/// Cycles for one pass of the tiled loop nest over an `r x p` by
/// `p x c` product: `ceil(R/T_R) * ceil(P/T_P) * ceil(C/T_C) * T_R`.
pub fn ii_cycles(dims: &MatrixDims, tiles: &TileConfig) -> u64 {
    dims.r.div_ceil(tiles.t_r) as u64
        * dims.p.div_ceil(tiles.t_p) as u64
        * dims.c.div_ceil(tiles.t_c) as u64
        * tiles.t_r as u64
}

/// Element types accepted by the tiled datapath.
pub trait MaccScalar:
    Copy + Zero + std::ops::Add<Output = Self> + std::ops::Mul<Output = Self>
{
}
impl MaccScalar for i64 {}
impl MaccScalar for f64 {}

/// Tiled matrix multiplication with cycle counting.
///
/// The product equals naive multiplication (exactly for integers); the
/// returned cycle count increments once per pipelined row of each tile
/// pass and therefore equals [`ii_cycles`] of the same dimensions.
pub fn tiled_matmul<T: MaccScalar>(
    a: &Array2<T>,
    b: &Array2<T>,
    tiles: &TileConfig,
) -> Result<(Array2<T>, u64)> {
    let (r, pa) = a.dim();
    let (pb, c) = b.dim();
    if pa != pb {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dims differ: {pa} vs {pb}"
        )));
    }
    if r == 0 || pa == 0 || c == 0 {
        return Err(Error::ShapeMismatch("matmul dims must be >= 1".into()));
    }
    let p = pa;
    let (t_r, t_p, t_c) = (tiles.t_r, tiles.t_p, tiles.t_c);
    let mut out = Array2::<T>::zeros((r, c));
    let mut cycles = 0u64;

    let mut reg_rp = vec![T::zero(); t_r * t_p];
    let mut reg_pc = vec![T::zero(); t_p * t_c];
    let mut reg_rc = vec![T::zero(); t_r * t_c];

    let mut r0 = 0;
    while r0 < r {
        let mut c0 = 0;
        while c0 < c {
            for v in reg_rc.iter_mut() {
                *v = T::zero();
            }
            let mut p0 = 0;
            while p0 < p {
                // Load tiles, zero-padding past the matrix edges.
                for rr in 0..t_r {
                    for pp in 0..t_p {
                        reg_rp[rr * t_p + pp] = if r0 + rr < r && p0 + pp < p {
                            a[(r0 + rr, p0 + pp)]
                        } else {
                            T::zero()
                        };
                    }
                }
                for pp in 0..t_p {
                    for cc in 0..t_c {
                        reg_pc[pp * t_c + cc] = if p0 + pp < p && c0 + cc < c {
                            b[(p0 + pp, c0 + cc)]
                        } else {
                            T::zero()
                        };
                    }
                }
                // Rows of the T_R x T_P tile are pipelined: one cycle each.
                for rr in 0..t_r {
                    cycles += 1;
                    for cc in 0..t_c {
                        let mut dot = T::zero();
                        for pp in 0..t_p {
                            dot = dot + reg_rp[rr * t_p + pp] * reg_pc[pp * t_c + cc];
                        }
                        reg_rc[rr * t_c + cc] = reg_rc[rr * t_c + cc] + dot;
                    }
                }
                p0 += t_p;
            }
            for rr in 0..t_r.min(r - r0) {
                for cc in 0..t_c.min(c - c0) {
                    out[(r0 + rr, c0 + cc)] = reg_rc[rr * t_c + cc];
                }
            }
            c0 += t_c;
        }
        r0 += t_r;
    }
    Ok((out, cycles))
}

/// Cycle accounting of one quantised run.
///
/// `per_layer_ii` holds the cycles of a single datapath pass per CONV/FC
/// layer: CONV layers are executed once per sample (R from a single
/// sample), FC layers once per batch tile (R = `t_batch`).
/// `total_cycles` multiplies each by its execution count over the batch;
/// `workload_ops` counts useful operations (2 per MACC), excluding
/// padded-tile work.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleReport {
    pub per_layer_ii: Vec<u64>,
    pub total_cycles: u64,
    pub workload_ops: u64,
}

/// Per-execution MM dimensions of a CONV/FC layer: per-sample rows for
/// CONV, one batch tile of rows for FC.
pub fn execution_dims(layer: &LayerDesc, tiles: &TileConfig) -> Result<MatrixDims> {
    match layer {
        LayerDesc::Conv(_) => matrix_dims(layer, 1),
        LayerDesc::Fc(_) => matrix_dims(layer, tiles.t_batch),
        _ => matrix_dims(layer, 1), // propagates the non-matrix-layer error
    }
}

fn cycle_report(net: &Network, tiles: &TileConfig, batch: usize) -> Result<CycleReport> {
    let mut per_layer_ii = Vec::new();
    let mut total = 0u64;
    let mut workload = 0u64;
    for idx in net.matrix_layer_indices() {
        let layer = &net.layers()[idx];
        let dims = execution_dims(layer, tiles)?;
        let ii = ii_cycles(&dims, tiles);
        per_layer_ii.push(ii);
        let executions = match layer {
            LayerDesc::Conv(_) => batch as u64,
            _ => batch.div_ceil(tiles.t_batch) as u64,
        };
        total += executions * ii;
        // Useful ops over the whole batch: CONV rows scale with batch,
        // FC folds the batch into R (one row per sample).
        let batch_rows = match layer {
            LayerDesc::Conv(_) => dims.r as u64 * batch as u64,
            _ => batch as u64,
        };
        workload += 2 * batch_rows * dims.p as u64 * dims.c as u64;
    }
    Ok(CycleReport {
        per_layer_ii,
        total_cycles: total,
        workload_ops: workload,
    })
}

/// Average datapath cycles per input sample: CONV passes run per sample,
/// FC passes amortise over the batch tile.
pub fn per_sample_cycles(net: &Network, tiles: &TileConfig) -> Result<f64> {
    let mut cycles = 0.0;
    for idx in net.matrix_layer_indices() {
        let layer = &net.layers()[idx];
        let dims = execution_dims(layer, tiles)?;
        let ii = ii_cycles(&dims, tiles) as f64;
        cycles += match layer {
            LayerDesc::Conv(_) => ii,
            _ => ii / tiles.t_batch as f64,
        };
    }
    Ok(cycles)
}

// ---------------------------------------------------------------------------
// Forward execution
// ---------------------------------------------------------------------------

fn quantize_matrix(m: &Array2<f64>, spec: &FixedSpec) -> Result<Array2<i64>> {
    let mut codes = Vec::with_capacity(m.len());
    for &v in m.iter() {
        codes.push(fixedpoint::quantize(v, spec)?);
    }
    Ok(Array2::from_shape_vec(m.dim(), codes).expect("same length"))
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn max_pool(volume: &Array4<f64>, pool: &crate::netmodel::PoolShape) -> Array4<f64> {
    let (b, ch, h, w) = volume.dim();
    let oh = (h - (pool.k_h - 1)).div_ceil(pool.s_h);
    let ow = (w - (pool.k_w - 1)).div_ceil(pool.s_w);
    Array4::from_shape_fn((b, ch, oh, ow), |(s, c, y, x)| {
        let mut best = f64::NEG_INFINITY;
        for ky in 0..pool.k_h {
            for kx in 0..pool.k_w {
                let iy = y * pool.s_h + ky;
                let ix = x * pool.s_w + kx;
                if iy < h && ix < w {
                    best = best.max(volume[(s, c, iy, ix)]);
                }
            }
        }
        best
    })
}

fn flatten_volume(volume: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = volume.dim();
    let flat = c * h * w;
    volume
        .to_shape((b, flat, 1, 1))
        .expect("flatten preserves length")
        .to_owned()
}

/// Matrix product of one layer under an optional quantisation spec.
///
/// Quantised layers quantise the input matrix and the weights, multiply
/// exactly on integer codes, add the bias at the product scale and
/// dequantise; float layers multiply in f64. When `tiles` is given the
/// product runs on the tiled datapath, otherwise on a plain matmul (the
/// results coincide; the tiled path exists for the cycle semantics and
/// is exercised against the plain one in tests).
fn layer_matmul(
    a: &Array2<f64>,
    weights: &Array2<f64>,
    bias: Option<&[f64]>,
    specs: Option<&LayerSpecs>,
    tiles: Option<&TileConfig>,
) -> Result<Array2<f64>> {
    match specs {
        Some(ls) => {
            let a_codes = quantize_matrix(a, &ls.activations)?;
            let w_codes = quantize_matrix(weights, &ls.weights)?;
            let acc = match tiles {
                Some(t) => tiled_matmul(&a_codes, &w_codes, t)?.0,
                None => a_codes.dot(&w_codes),
            };
            // Bias joins the accumulator at the product scale
            // 2^-(frac_a + frac_w); the accumulator is wide, so no
            // saturation applies here.
            let scale_bits = ls.activations.frac_bits + ls.weights.frac_bits;
            let scale = 2.0f64.powi(scale_bits);
            let inv_scale = 2.0f64.powi(-scale_bits);
            let mut out = Array2::<f64>::zeros(acc.dim());
            let bias_codes: Option<Vec<i64>> = match bias {
                Some(b) => {
                    let mut codes = Vec::with_capacity(b.len());
                    for &v in b {
                        let bc = (v * scale).round();
                        if !bc.is_finite() {
                            return Err(Error::NonFinite(v));
                        }
                        codes.push(bc as i64);
                    }
                    Some(codes)
                }
                None => None,
            };
            for ((i, j), v) in acc.indexed_iter() {
                let mut code = *v;
                if let Some(bc) = &bias_codes {
                    code += bc[j];
                }
                out[(i, j)] = code as f64 * inv_scale;
            }
            Ok(out)
        }
        None => {
            let mut out = match tiles {
                Some(t) => tiled_matmul(a, weights, t)?.0,
                None => a.dot(weights),
            };
            if let Some(b) = bias {
                for mut row in out.rows_mut() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v += b[j];
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Run layers `[start_layer..]` on `volume`, with `specs` indexed by
/// CONV/FC layer counted from `start_matrix_idx`. Returns per-sample
/// probability vectors.
fn forward_from(
    net: &Network,
    start_layer: usize,
    start_matrix_idx: usize,
    volume: Array4<f64>,
    specs: &[Option<LayerSpecs>],
    tiles: Option<&TileConfig>,
) -> Result<Array2<f64>> {
    let mut volume = volume;
    let mut m_idx = start_matrix_idx;
    let mut softmax_done = false;
    for layer in &net.layers()[start_layer..] {
        softmax_done = false;
        match layer {
            LayerDesc::Conv(shape) | LayerDesc::Fc(shape) => {
                if matches!(layer, LayerDesc::Fc(_)) {
                    volume = flatten_volume(&volume);
                }
                let b = volume.dim().0;
                let a = im2col_batch(&volume, shape)?;
                let lw = net.layer_weights(m_idx);
                let spec = specs.get(m_idx - start_matrix_idx).copied().flatten();
                let out = layer_matmul(&a, &lw.matrix, lw.bias.as_deref(), spec.as_ref(), tiles)?;
                let rows = shape.rows_per_sample();
                let (oh, ow) = (shape.out_h(), shape.out_w());
                volume = Array4::from_shape_fn((b, shape.n_out, oh, ow), |(s, c, y, x)| {
                    out[(s * rows + y * ow + x, c)]
                });
                m_idx += 1;
            }
            LayerDesc::Relu => {
                volume.mapv_inplace(|v| v.max(0.0));
            }
            LayerDesc::MaxPool(p) => {
                volume = max_pool(&volume, p);
            }
            LayerDesc::Softmax => {
                let (b, c, h, w) = volume.dim();
                let flat = volume
                    .to_shape((b, c * h * w))
                    .expect("flatten preserves length")
                    .to_owned();
                let probs = softmax_rows(&flat);
                let k = c * h * w;
                volume = probs
                    .to_shape((b, k, 1, 1))
                    .expect("reshape preserves length")
                    .to_owned();
                softmax_done = true;
            }
        }
    }
    let (b, c, h, w) = volume.dim();
    let flat = volume
        .to_shape((b, c * h * w))
        .expect("flatten preserves length")
        .to_owned();
    Ok(if softmax_done {
        flat
    } else {
        softmax_rows(&flat)
    })
}

fn check_input(net: &Network, inputs: &Array4<f64>) -> Result<()> {
    let (b, c, h, w) = inputs.dim();
    if b == 0 {
        return Err(Error::EmptyInput("input batch is empty"));
    }
    if (c, h, w) != net.input_shape() {
        return Err(Error::ShapeMismatch(format!(
            "input volume ({c}, {h}, {w}) does not match network input {:?}",
            net.input_shape()
        )));
    }
    Ok(())
}

/// Float reference path: every layer in f64, softmax on the logits.
/// Output rows are per-sample probability vectors.
pub fn run_float(net: &Network, inputs: &Array4<f64>) -> Result<Array2<f64>> {
    check_input(net, inputs)?;
    let specs = vec![None; net.matrix_layer_count()];
    forward_from(net, 0, 0, inputs.clone(), &specs, None)
}

/// Mixed-precision path: CONV/FC layers with a `Some` entry run on
/// integer codes, the rest in float. Used by the per-layer quantisation
/// sweeps.
pub fn run_hybrid(
    net: &Network,
    specs: &[Option<LayerSpecs>],
    inputs: &Array4<f64>,
) -> Result<Array2<f64>> {
    check_input(net, inputs)?;
    if specs.len() != net.matrix_layer_count() {
        return Err(Error::SchemeMismatch(format!(
            "{} spec entries for {} CONV/FC layers",
            specs.len(),
            net.matrix_layer_count()
        )));
    }
    forward_from(net, 0, 0, inputs.clone(), specs, None)
}

/// Float execution of every layer before the `m_idx`-th CONV/FC layer;
/// returns the volume entering it.
pub fn float_prefix(net: &Network, m_idx: usize, inputs: &Array4<f64>) -> Result<Array4<f64>> {
    check_input(net, inputs)?;
    let indices = net.matrix_layer_indices();
    let stop = *indices.get(m_idx).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "matrix layer {m_idx} out of range ({} CONV/FC layers)",
            indices.len()
        ))
    })?;
    let mut volume = inputs.clone();
    let mut w_idx = 0;
    for layer in &net.layers()[..stop] {
        match layer {
            LayerDesc::Conv(shape) | LayerDesc::Fc(shape) => {
                if matches!(layer, LayerDesc::Fc(_)) {
                    volume = flatten_volume(&volume);
                }
                let b = volume.dim().0;
                let a = im2col_batch(&volume, shape)?;
                let lw = net.layer_weights(w_idx);
                let out = layer_matmul(&a, &lw.matrix, lw.bias.as_deref(), None, None)?;
                let rows = shape.rows_per_sample();
                let (oh, ow) = (shape.out_h(), shape.out_w());
                volume = Array4::from_shape_fn((b, shape.n_out, oh, ow), |(s, c, y, x)| {
                    out[(s * rows + y * ow + x, c)]
                });
                w_idx += 1;
            }
            LayerDesc::Relu => volume.mapv_inplace(|v| v.max(0.0)),
            LayerDesc::MaxPool(p) => volume = max_pool(&volume, p),
            LayerDesc::Softmax => {
                return Err(Error::InvalidArgument(
                    "softmax before a CONV/FC layer is unsupported in prefix runs".into(),
                ))
            }
        }
    }
    Ok(volume)
}

/// Continue from the volume entering the `m_idx`-th CONV/FC layer;
/// `specs` covers matrix layers `m_idx..`.
pub fn hybrid_suffix(
    net: &Network,
    m_idx: usize,
    volume: Array4<f64>,
    specs: &[Option<LayerSpecs>],
) -> Result<Array2<f64>> {
    let indices = net.matrix_layer_indices();
    let start = *indices.get(m_idx).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "matrix layer {m_idx} out of range ({} CONV/FC layers)",
            indices.len()
        ))
    })?;
    if specs.len() != indices.len() - m_idx {
        return Err(Error::SchemeMismatch(format!(
            "{} spec entries for {} remaining CONV/FC layers",
            specs.len(),
            indices.len() - m_idx
        )));
    }
    forward_from(net, start, m_idx, volume, specs, None)
}

/// Fixed-point execution of the whole network under `scheme` on the
/// tiled datapath: per layer, the input matrix is quantised with the
/// layer's activation spec, the weights with its weight spec, the
/// product accumulates exactly on integer codes, the bias joins at the
/// product scale, and activations apply on the dequantised reals.
/// Softmax runs in float on the dequantised logits.
pub fn run_quantized(
    net: &Network,
    scheme: &QuantScheme,
    inputs: &Array4<f64>,
    tiles: &TileConfig,
) -> Result<(Array2<f64>, CycleReport)> {
    check_input(net, inputs)?;
    net.check_scheme(scheme)?;
    let specs: Vec<Option<LayerSpecs>> = (0..net.matrix_layer_count())
        .map(|i| scheme.layer_specs(i).map(Some))
        .collect::<Result<_>>()?;
    let probs = forward_from(net, 0, 0, inputs.clone(), &specs, Some(tiles))?;
    let report = cycle_report(net, tiles, inputs.dim().0)?;
    Ok((probs, report))
}

/// Per-sample class predictions: argmax of each probability row, ties
/// resolved to the smallest class index.
pub fn argmax_classes(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (i, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            best
        })
        .collect()
}
