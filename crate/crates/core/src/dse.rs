//! Roofline-based design-space exploration for the tiled
//! matrix-multiplication datapath.
//!
//! For every candidate tile triplet the attainable performance is the
//! datapath throughput `2RPC / II * clk` capped by the memory roof
//! `op_intensity * bandwidth`. Points whose MACC array exceeds the
//! compute roof (MACCs map onto both LUTs and DSPs, with a pair of
//! narrow MACCs packed per DSP at wordlengths up to 5 bits) or whose
//! double-buffered tiles exceed on-chip memory are excluded. Per-layer
//! results aggregate into one shared architecture by weighting each
//! layer's performance with its share of processing cycles per batch.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{ii_cycles, TileConfig};
use crate::error::{Error, Result};
use crate::fixedpoint::{MAX_WORDLENGTH, MIN_WORDLENGTH};
use crate::netmodel::{matrix_dims, LayerDesc, MatrixDims, Network};

/// Device resources and precision-dependent cost tables.
///
/// Tables map wordlength (2..=16) to the achieved clock, the LUT cost of
/// one MACC, and the number of MACCs packed on one DSP. Capacities are
/// in bits, bandwidth in bits/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatformModel {
    pub avail_lut: u64,
    pub avail_dsp: u64,
    pub lut_per_macc: BTreeMap<u8, f64>,
    pub macc_per_dsp: BTreeMap<u8, f64>,
    pub clk: BTreeMap<u8, f64>,
    pub mem_bandwidth: f64,
    pub onchip_capacity: u64,
    pub offchip_capacity: u64,
    pub reconfig_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl PlatformModel {
    pub fn validate(&self) -> Result<()> {
        if self.mem_bandwidth <= 0.0 || self.reconfig_time < 0.0 {
            return Err(Error::InvalidPlatform(
                "bandwidth must be positive and reconfiguration time non-negative".into(),
            ));
        }
        for wl in MIN_WORDLENGTH..=MAX_WORDLENGTH {
            for (name, table) in [
                ("lut_per_macc", &self.lut_per_macc),
                ("macc_per_dsp", &self.macc_per_dsp),
                ("clk", &self.clk),
            ] {
                let v = table.get(&wl).ok_or_else(|| {
                    Error::InvalidPlatform(format!("{name} table missing wordlength {wl}"))
                })?;
                if *v <= 0.0 {
                    return Err(Error::InvalidPlatform(format!(
                        "{name}[{wl}] must be positive"
                    )));
                }
            }
            if self.macc_per_dsp[&wl] < 1.0 {
                return Err(Error::InvalidPlatform(format!(
                    "macc_per_dsp[{wl}] must be >= 1"
                )));
            }
        }
        Ok(())
    }

    fn table(&self, table: &BTreeMap<u8, f64>, name: &str, wl: u8) -> Result<f64> {
        table
            .get(&wl)
            .copied()
            .ok_or_else(|| Error::InvalidPlatform(format!("{name} table missing wordlength {wl}")))
    }

    /// Achieved clock at a wordlength, in Hz.
    pub fn clk_hz(&self, wl: u8) -> Result<f64> {
        self.table(&self.clk, "clk", wl)
    }

    /// Compute roof in ops/cycle:
    /// `2 * (floor(avail_lut / lut_per_macc) + avail_dsp * macc_per_dsp)`.
    pub fn compute_roof_ops_per_cycle(&self, wl: u8) -> Result<f64> {
        let lut_cost = self.table(&self.lut_per_macc, "lut_per_macc", wl)?;
        let packing = self.table(&self.macc_per_dsp, "macc_per_dsp", wl)?;
        let lut_maccs = (self.avail_lut as f64 / lut_cost).floor();
        Ok(2.0 * (lut_maccs + self.avail_dsp as f64 * packing))
    }

    /// Compute roof in ops/s at the wordlength's clock.
    pub fn compute_roof_ops_per_s(&self, wl: u8) -> Result<f64> {
        Ok(self.compute_roof_ops_per_cycle(wl)? * self.clk_hz(wl)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let model: Self = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Clock table anchored at 150 MHz up to 8 bits and 131 MHz at 16 bits,
/// linearly interpolated in between.
pub fn default_clk_table() -> BTreeMap<u8, f64> {
    let mut t = BTreeMap::new();
    for wl in MIN_WORDLENGTH..=MAX_WORDLENGTH {
        let mhz = if wl <= 8 {
            150.0
        } else {
            150.0 - (wl as f64 - 8.0) * (150.0 - 131.0) / 8.0
        };
        t.insert(wl, mhz * 1e6);
    }
    t
}

/// Two MACCs pack on one 25x18 DSP at wordlengths up to 5 bits (guard
/// bits keep the products separate); one MACC per DSP otherwise.
pub fn default_macc_per_dsp_table() -> BTreeMap<u8, f64> {
    (MIN_WORDLENGTH..=MAX_WORDLENGTH)
        .map(|wl| (wl, if wl <= 5 { 2.0 } else { 1.0 }))
        .collect()
}

/// Affine LUT-cost table through two endpoints `(wordlength, cost)`.
///
/// Shipped platform files use placeholder endpoints; calibrate them per
/// device from synthesis reports.
pub fn affine_lut_per_macc_table(lo: (u8, f64), hi: (u8, f64)) -> BTreeMap<u8, f64> {
    let slope = (hi.1 - lo.1) / (hi.0 as f64 - lo.0 as f64);
    (MIN_WORDLENGTH..=MAX_WORDLENGTH)
        .map(|wl| (wl, lo.1 + slope * (wl as f64 - lo.0 as f64)))
        .collect()
}

/// Datapath performance of one layer in ops/s:
/// `2RPC / (ceil(R/T_R) ceil(P/T_P) ceil(C/T_C) T_R) * clk`.
pub fn perf(dims: &MatrixDims, tiles: &TileConfig, clk_hz: f64) -> f64 {
    let workload = 2.0 * dims.r as f64 * dims.p as f64 * dims.c as f64;
    workload / ii_cycles(dims, tiles) as f64 * clk_hz
}

/// Operational intensity of one output-tile step in ops/bit:
/// `2 T_R P T_C / ((T_R P + P T_C + T_R T_C) WL)`.
///
/// `p_full` is the layer's full inner dimension: producing one output
/// tile streams entire `T_R x P` and `P x T_C` panels plus the output
/// tile write-back.
pub fn op_intensity(tiles: &TileConfig, p_full: usize, wordlength: u8) -> f64 {
    let t_r = tiles.t_r as f64;
    let t_c = tiles.t_c as f64;
    let p = p_full as f64;
    let ops = 2.0 * t_r * p * t_c;
    let traffic = (t_r * p + p * t_c + t_r * t_c) * wordlength as f64;
    ops / traffic
}

/// On-chip bits for a design point, double-buffered:
/// `2 (T_R T_P + T_P T_C + T_R T_C) WL`.
pub fn onchip_mem_bits(tiles: &TileConfig, wordlength: u8) -> u64 {
    2 * (tiles.t_r * tiles.t_p + tiles.t_p * tiles.t_c + tiles.t_r * tiles.t_c) as u64
        * wordlength as u64
}

/// Why a design point fell outside the platform-supported space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    ComputeRoof,
    OnchipCapacity,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::ComputeRoof => "compute-roof",
            RejectReason::OnchipCapacity => "onchip-capacity",
        }
    }
}

/// One evaluated tile configuration for a single layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub tiles: TileConfig,
    /// Attainable ops/s: datapath perf capped by the memory roof.
    pub perf_ops_per_s: f64,
    pub op_intensity: f64,
    pub onchip_bits: u64,
    /// MACC units instantiated, `t_p * t_c`.
    pub macc_count: u64,
    pub feasible: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reject_reason: Option<RejectReason>,
}

fn feasibility(
    tiles: &TileConfig,
    platform: &PlatformModel,
    wordlength: u8,
) -> Result<Option<RejectReason>> {
    // The MACC array computes 2*T_P*T_C ops per cycle; the roof is
    // clock-independent in ops/cycle.
    let needed = 2.0 * (tiles.t_p * tiles.t_c) as f64;
    if needed > platform.compute_roof_ops_per_cycle(wordlength)? {
        return Ok(Some(RejectReason::ComputeRoof));
    }
    if onchip_mem_bits(tiles, wordlength) > platform.onchip_capacity {
        return Ok(Some(RejectReason::OnchipCapacity));
    }
    Ok(None)
}

fn evaluate_point(
    dims: &MatrixDims,
    tiles: &TileConfig,
    platform: &PlatformModel,
    wordlength: u8,
) -> Result<DesignPoint> {
    let clk = platform.clk_hz(wordlength)?;
    let raw = perf(dims, tiles, clk);
    let intensity = op_intensity(tiles, dims.p, wordlength);
    let attainable = raw.min(intensity * platform.mem_bandwidth);
    let reject = feasibility(tiles, platform, wordlength)?;
    Ok(DesignPoint {
        tiles: *tiles,
        perf_ops_per_s: attainable,
        op_intensity: intensity,
        onchip_bits: onchip_mem_bits(tiles, wordlength),
        macc_count: (tiles.t_p * tiles.t_c) as u64,
        feasible: reject.is_none(),
        reject_reason: reject,
    })
}

/// Divisors of `max` plus powers of two up to it, ascending.
fn axis_candidates(max: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for d in 1..=max {
        if max.is_multiple_of(d) {
            out.push(d);
        }
    }
    let mut p = 1;
    while p <= max {
        out.push(p);
        p *= 2;
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Thin a candidate list to at most `keep` entries, always retaining the
/// first and last.
fn thin(list: &mut Vec<usize>, keep: usize) {
    while list.len() > keep.max(2) {
        let last = *list.last().unwrap();
        let mut kept: Vec<usize> = list.iter().copied().step_by(2).collect();
        if *kept.last().unwrap() != last {
            kept.push(last);
        }
        *list = kept;
    }
}

/// Default cap on the tile-candidate grid size.
pub const DEFAULT_GRID_CAP: usize = 100_000;

/// Candidate tile sizes per axis: divisors of the maximum dimension plus
/// powers of two up to it, thinned evenly if the cross product would
/// exceed `cap`.
pub fn tile_candidates(
    max_r: usize,
    max_p: usize,
    max_c: usize,
    cap: usize,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut r = axis_candidates(max_r);
    let mut p = axis_candidates(max_p);
    let mut c = axis_candidates(max_c);
    while r.len() * p.len() * c.len() > cap {
        // Halve the longest axis first.
        let lens = [r.len(), p.len(), c.len()];
        let longest = lens
            .iter()
            .enumerate()
            .max_by_key(|(_, l)| **l)
            .map(|(i, _)| i)
            .unwrap();
        let list = match longest {
            0 => &mut r,
            1 => &mut p,
            _ => &mut c,
        };
        let target = list.len().div_ceil(2);
        thin(list, target);
        if r.len() <= 2 && p.len() <= 2 && c.len() <= 2 {
            break;
        }
    }
    (r, p, c)
}

/// Evaluate every candidate tile triplet for one layer's dimensions.
///
/// Infeasible points are kept in the list with their rejection reason so
/// reports can show the full explored space.
pub fn explore_layer(
    dims: &MatrixDims,
    platform: &PlatformModel,
    wordlength: u8,
) -> Result<Vec<DesignPoint>> {
    if dims.r == 0 || dims.p == 0 || dims.c == 0 {
        return Err(Error::InvalidArgument(
            "layer dimensions must be >= 1".into(),
        ));
    }
    let (rs, ps, cs) = tile_candidates(dims.r, dims.p, dims.c, DEFAULT_GRID_CAP);
    let mut points = Vec::with_capacity(rs.len() * ps.len() * cs.len());
    for &t_r in &rs {
        for &t_p in &ps {
            for &t_c in &cs {
                let tiles = TileConfig {
                    t_r,
                    t_p,
                    t_c,
                    t_batch: 1,
                };
                points.push(evaluate_point(dims, &tiles, platform, wordlength)?);
            }
        }
    }
    Ok(points)
}

/// Per-layer inputs to the cross-layer aggregation.
#[derive(Debug, Clone, Copy)]
pub struct LayerPerf {
    pub is_conv: bool,
    pub perf_ops_per_s: f64,
    /// Cycles of one execution: per sample for CONV, per batch tile for FC.
    pub ii: u64,
}

/// Cross-layer average performance, weighting each layer by its share of
/// processing cycles per batch.
///
/// CONV layers execute once per sample, FC layers once per batch tile
/// with R = `t_batch`, so per batch a CONV layer contributes
/// `batch * II` cycles and an FC layer `(batch / t_batch) * II`.
pub fn overall_perf(layers: &[LayerPerf], batch: usize, t_batch: usize) -> Result<f64> {
    if layers.is_empty() {
        return Err(Error::EmptyInput("overall_perf: no layers"));
    }
    if batch == 0 || t_batch == 0 || !batch.is_multiple_of(t_batch) {
        return Err(Error::InvalidArgument(format!(
            "batch {batch} must be a positive multiple of t_batch {t_batch}"
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for l in layers {
        let k = if l.is_conv {
            batch as f64
        } else {
            batch as f64 / t_batch as f64
        };
        num += k * l.perf_ops_per_s * l.ii as f64;
        den += k * l.ii as f64;
    }
    Ok(num / den)
}

/// The selected architecture for one precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DseSelection {
    pub wordlength: u8,
    pub tiles: TileConfig,
    pub predicted_ops_per_s: f64,
    pub onchip_bits: u64,
    pub clk_hz: f64,
    pub batch: usize,
}

/// One evaluated architecture candidate (shared tiles across layers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchPoint {
    pub tiles: TileConfig,
    pub overall_ops_per_s: f64,
    /// Binding (smallest) operational intensity across layers.
    pub op_intensity: f64,
    pub onchip_bits: u64,
    pub feasible: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reject_reason: Option<RejectReason>,
}

/// Off-chip bits needed for a batch: quantised inputs plus the largest
/// intermediate activation volume, per sample.
pub fn offchip_batch_bits(net: &Network, wordlength: u8, batch: usize) -> u64 {
    let (c, h, w) = net.input_shape();
    let input_bits = (c * h * w) as u64 * wordlength as u64;
    let mut volume = (c, h, w);
    let mut max_inter = 0u64;
    for layer in net.layers() {
        match layer {
            LayerDesc::Conv(s) => volume = (s.n_out, s.out_h(), s.out_w()),
            LayerDesc::Fc(s) => volume = (s.n_out, 1, 1),
            LayerDesc::MaxPool(p) => {
                volume = (
                    volume.0,
                    (volume.1 - (p.k_h - 1)).div_ceil(p.s_h),
                    (volume.2 - (p.k_w - 1)).div_ceil(p.s_w),
                )
            }
            _ => {}
        }
        let bits = (volume.0 * volume.1 * volume.2) as u64 * wordlength as u64;
        max_inter = max_inter.max(bits);
    }
    batch as u64 * (input_bits + max_inter)
}

/// Batch-tile candidates: powers of two and multiples of 1024 up to
/// `batch` that divide it, ascending.
pub fn batch_tile_candidates(batch: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 1;
    while p <= batch {
        if batch.is_multiple_of(p) {
            out.push(p);
        }
        p *= 2;
    }
    let mut m = 1024;
    while m <= batch {
        if batch.is_multiple_of(m) {
            out.push(m);
        }
        m += 1024;
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Pick the shared tile configuration (including the batch tile) that
/// maximises the cross-layer performance of `net` at `wordlength`.
///
/// Ties break towards smaller on-chip footprint, then lexicographically
/// smaller `(t_r, t_p, t_c, t_batch)`. Returns the selection plus every
/// evaluated candidate for reporting.
pub fn select_architecture(
    net: &Network,
    platform: &PlatformModel,
    wordlength: u8,
    batch: usize,
) -> Result<(DseSelection, Vec<ArchPoint>)> {
    platform.validate()?;
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be >= 1".into()));
    }
    let matrix_layers = net.matrix_layer_indices();
    if matrix_layers.is_empty() {
        return Err(Error::EmptyInput("network has no CONV/FC layers"));
    }

    let needed = offchip_batch_bits(net, wordlength, batch);
    if needed > platform.offchip_capacity {
        return Err(Error::NoFeasibleDesign {
            constraint: format!(
                "off-chip capacity: batch {batch} needs {needed} bits, \
                 device offers {}",
                platform.offchip_capacity
            ),
        });
    }

    // Per-execution dims: CONV per sample; FC rows depend on t_batch and
    // are instantiated inside the loop.
    #[derive(Clone, Copy)]
    enum LayerKind {
        Conv(MatrixDims),
        Fc { p: usize, c: usize },
    }
    let mut kinds = Vec::new();
    let mut max_r = batch.max(1);
    let mut max_p = 1;
    let mut max_c = 1;
    for &idx in &matrix_layers {
        let layer = &net.layers()[idx];
        match layer {
            LayerDesc::Conv(_) => {
                let dims = matrix_dims(layer, 1)?;
                max_r = max_r.max(dims.r);
                max_p = max_p.max(dims.p);
                max_c = max_c.max(dims.c);
                kinds.push(LayerKind::Conv(dims));
            }
            LayerDesc::Fc(s) => {
                max_p = max_p.max(s.inner_dim());
                max_c = max_c.max(s.n_out);
                kinds.push(LayerKind::Fc {
                    p: s.inner_dim(),
                    c: s.n_out,
                });
            }
            _ => unreachable!("matrix_layer_indices returns CONV/FC only"),
        }
    }

    let clk = platform.clk_hz(wordlength)?;
    let (rs, ps, cs) = tile_candidates(max_r, max_p, max_c, DEFAULT_GRID_CAP);
    let t_batches = batch_tile_candidates(batch);

    let mut points = Vec::new();
    let mut best: Option<(f64, u64, TileConfig, f64)> = None;
    let mut reject_compute = 0usize;
    let mut reject_onchip = 0usize;
    for &t_r in &rs {
        for &t_p in &ps {
            for &t_c in &cs {
                for &t_batch in &t_batches {
                    let tiles = TileConfig {
                        t_r,
                        t_p,
                        t_c,
                        t_batch,
                    };
                    let onchip = onchip_mem_bits(&tiles, wordlength);
                    let reject = feasibility(&tiles, platform, wordlength)?;
                    if let Some(reason) = reject {
                        match reason {
                            RejectReason::ComputeRoof => reject_compute += 1,
                            RejectReason::OnchipCapacity => reject_onchip += 1,
                        }
                        points.push(ArchPoint {
                            tiles,
                            overall_ops_per_s: 0.0,
                            op_intensity: 0.0,
                            onchip_bits: onchip,
                            feasible: false,
                            reject_reason: Some(reason),
                        });
                        continue;
                    }
                    let mut per_layer = Vec::with_capacity(kinds.len());
                    let mut min_intensity = f64::INFINITY;
                    for kind in &kinds {
                        let (dims, is_conv) = match kind {
                            LayerKind::Conv(d) => (*d, true),
                            LayerKind::Fc { p, c } => (
                                MatrixDims {
                                    r: t_batch,
                                    p: *p,
                                    c: *c,
                                },
                                false,
                            ),
                        };
                        let raw = perf(&dims, &tiles, clk);
                        let intensity = op_intensity(&tiles, dims.p, wordlength);
                        min_intensity = min_intensity.min(intensity);
                        per_layer.push(LayerPerf {
                            is_conv,
                            perf_ops_per_s: raw.min(intensity * platform.mem_bandwidth),
                            ii: ii_cycles(&dims, &tiles),
                        });
                    }
                    let overall = overall_perf(&per_layer, batch, t_batch)?;
                    points.push(ArchPoint {
                        tiles,
                        overall_ops_per_s: overall,
                        op_intensity: min_intensity,
                        onchip_bits: onchip,
                        feasible: true,
                        reject_reason: None,
                    });
                    let better = match &best {
                        None => true,
                        Some((b_perf, b_onchip, b_tiles, _)) => {
                            overall > *b_perf
                                || (overall == *b_perf
                                    && (onchip < *b_onchip
                                        || (onchip == *b_onchip
                                            && tile_key(&tiles) < tile_key(b_tiles))))
                        }
                    };
                    if better {
                        best = Some((overall, onchip, tiles, clk));
                    }
                }
            }
        }
    }

    match best {
        Some((perf, onchip, tiles, clk)) => Ok((
            DseSelection {
                wordlength,
                tiles,
                predicted_ops_per_s: perf,
                onchip_bits: onchip,
                clk_hz: clk,
                batch,
            },
            points,
        )),
        None => {
            let constraint = if reject_compute >= reject_onchip {
                format!(
                    "compute roof: every candidate exceeds \
                     {} ops/cycle ({} points rejected)",
                    platform.compute_roof_ops_per_cycle(wordlength)?,
                    reject_compute
                )
            } else {
                format!(
                    "on-chip capacity: every candidate exceeds {} bits \
                     ({} points rejected)",
                    platform.onchip_capacity, reject_onchip
                )
            };
            Err(Error::NoFeasibleDesign { constraint })
        }
    }
}

fn tile_key(t: &TileConfig) -> (usize, usize, usize, usize) {
    (t.t_r, t.t_p, t.t_c, t.t_batch)
}

/// Render evaluated architecture candidates as CSV.
pub fn arch_points_to_csv(points: &[ArchPoint]) -> String {
    let mut csv = String::from(
        "t_r,t_p,t_c,t_batch,perf_ops_per_s,op_intensity,onchip_bits,feasible,reason\n",
    );
    for p in points {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            p.tiles.t_r,
            p.tiles.t_p,
            p.tiles.t_c,
            p.tiles.t_batch,
            p.overall_ops_per_s,
            p.op_intensity,
            p.onchip_bits,
            p.feasible,
            p.reject_reason.map(|r| r.as_str()).unwrap_or(""),
        ));
    }
    csv
}
