//! Network description, weight storage, and the shape arithmetic that
//! maps CONV/FC layers onto matrix multiplication.
//!
//! A CONV layer is described by the nine-field descriptor
//! `<H, W, N_IN, N_OUT, K_H, K_W, S_H, S_W, Z>`; an FC layer is stored
//! as the degenerate convolution `<1, 1, N_IN, N_OUT, 1, 1, 1, 1, 0>`.
//! Each layer's input activations unroll into an `R x P` matrix (one row
//! per sliding-window position, channel-major columns) and its weights
//! into a `P x C` matrix, so both layer kinds run on one matrix-multiply
//! unit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4, ArrayView3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fixedpoint::QuantScheme;

/// CONV shape descriptor: input feature maps `n_in x h x w`, kernels
/// `k_h x k_w`, strides `s_h/s_w`, symmetric zero padding `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub h: usize,
    pub w: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub s_h: usize,
    pub s_w: usize,
    pub z: usize,
}

impl ConvShape {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.n_in == 0 || self.n_out == 0 {
            return Err(Error::ShapeMismatch(format!(
                "zero-sized CONV dimensions: {self:?}"
            )));
        }
        if self.k_h == 0 || self.k_w == 0 || self.s_h == 0 || self.s_w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "zero kernel or stride: {self:?}"
            )));
        }
        if self.k_h > self.h + 2 * self.z || self.k_w > self.w + 2 * self.z {
            return Err(Error::ShapeMismatch(format!(
                "kernel exceeds padded input: {self:?}"
            )));
        }
        Ok(())
    }

    /// Output rows of sliding-window positions along the height.
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.z - (self.k_h - 1)).div_ceil(self.s_h)
    }

    /// Output columns of sliding-window positions along the width.
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.z - (self.k_w - 1)).div_ceil(self.s_w)
    }

    /// Sliding-window positions for one input sample.
    pub fn rows_per_sample(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Unrolled window length across all input channels.
    pub fn inner_dim(&self) -> usize {
        self.k_h * self.k_w * self.n_in
    }
}

/// Pooling window shape; padding is always zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolShape {
    pub k_h: usize,
    pub k_w: usize,
    pub s_h: usize,
    pub s_w: usize,
}

/// One layer of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerDesc {
    Conv(ConvShape),
    /// Fully connected, stored as the degenerate 1x1 convolution.
    Fc(ConvShape),
    Relu,
    MaxPool(PoolShape),
    Softmax,
}

impl LayerDesc {
    /// FC layer as `CONV<1,1,n_in,n_out,1,1,1,1,0>`.
    pub fn fc(n_in: usize, n_out: usize) -> Self {
        LayerDesc::Fc(ConvShape {
            h: 1,
            w: 1,
            n_in,
            n_out,
            k_h: 1,
            k_w: 1,
            s_h: 1,
            s_w: 1,
            z: 0,
        })
    }

    /// True for the layers that run on the matrix-multiply unit.
    pub fn is_matrix_layer(&self) -> bool {
        matches!(self, LayerDesc::Conv(_) | LayerDesc::Fc(_))
    }

    pub fn conv_shape(&self) -> Option<&ConvShape> {
        match self {
            LayerDesc::Conv(s) | LayerDesc::Fc(s) => Some(s),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerDesc::Conv(_) => "conv",
            LayerDesc::Fc(_) => "fc",
            LayerDesc::Relu => "relu",
            LayerDesc::MaxPool(_) => "maxpool",
            LayerDesc::Softmax => "softmax",
        }
    }
}

/// Matrix-multiplication dimensions of one layer: the input activations
/// form an `r x p` matrix, the weights a `p x c` matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixDims {
    pub r: usize,
    pub p: usize,
    pub c: usize,
}

/// MM dimensions for a CONV or FC layer at the given batch size.
///
/// CONV rows count sliding-window positions per sample times the batch;
/// FC rows equal the batch (each row is one sample's feature vector).
pub fn matrix_dims(layer: &LayerDesc, batch: usize) -> Result<MatrixDims> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be >= 1".into()));
    }
    let shape = layer.conv_shape().ok_or_else(|| Error::NotMatrixLayer {
        index: usize::MAX,
        kind: layer.kind_name().to_string(),
    })?;
    Ok(MatrixDims {
        r: shape.rows_per_sample() * batch,
        p: shape.inner_dim(),
        c: shape.n_out,
    })
}

/// Unroll one input volume `(n_in, h, w)` into the `r x p` activations
/// matrix for `shape`.
///
/// Rows follow raster order of window positions (output height, then
/// width); columns are channel-major, then kernel row, then kernel
/// column. Padded cells contribute exact zeros.
pub fn im2col(input: ArrayView3<'_, f64>, shape: &ConvShape) -> Result<Array2<f64>> {
    let (ci, hi, wi) = input.dim();
    if (ci, hi, wi) != (shape.n_in, shape.h, shape.w) {
        return Err(Error::ShapeMismatch(format!(
            "im2col input {:?} does not match layer ({}, {}, {})",
            (ci, hi, wi),
            shape.n_in,
            shape.h,
            shape.w
        )));
    }
    let rows = shape.rows_per_sample();
    let cols = shape.inner_dim();
    let mut out = Array2::<f64>::zeros((rows, cols));
    fill_im2col_rows(&mut out, 0, input, shape);
    Ok(out)
}

fn fill_im2col_rows(
    out: &mut Array2<f64>,
    row_offset: usize,
    input: ArrayView3<'_, f64>,
    shape: &ConvShape,
) {
    let kk = shape.k_h * shape.k_w;
    let mut row = row_offset;
    for oh in 0..shape.out_h() {
        for ow in 0..shape.out_w() {
            for ch in 0..shape.n_in {
                for kh in 0..shape.k_h {
                    for kw in 0..shape.k_w {
                        let ih = (oh * shape.s_h + kh) as isize - shape.z as isize;
                        let iw = (ow * shape.s_w + kw) as isize - shape.z as isize;
                        let col = ch * kk + kh * shape.k_w + kw;
                        if ih >= 0 && (ih as usize) < shape.h && iw >= 0 && (iw as usize) < shape.w
                        {
                            out[(row, col)] = input[(ch, ih as usize, iw as usize)];
                        }
                    }
                }
            }
            row += 1;
        }
    }
}

/// Batched im2col: the rows of all samples stacked in sample order.
pub fn im2col_batch(inputs: &Array4<f64>, shape: &ConvShape) -> Result<Array2<f64>> {
    let (b, ci, hi, wi) = inputs.dim();
    if (ci, hi, wi) != (shape.n_in, shape.h, shape.w) {
        return Err(Error::ShapeMismatch(format!(
            "im2col batch input {:?} does not match layer ({}, {}, {})",
            (ci, hi, wi),
            shape.n_in,
            shape.h,
            shape.w
        )));
    }
    let rows = shape.rows_per_sample();
    let mut out = Array2::<f64>::zeros((rows * b, shape.inner_dim()));
    for s in 0..b {
        fill_im2col_rows(
            &mut out,
            s * rows,
            inputs.index_axis(ndarray::Axis(0), s),
            shape,
        );
    }
    Ok(out)
}

/// Weights of one CONV/FC layer, pre-unrolled to `p x c` with the same
/// column ordering convention as im2col rows, plus an optional bias
/// added post-accumulation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub matrix: Array2<f64>,
    pub bias: Option<Vec<f64>>,
}

/// A trained network: ordered layers plus one weight set per CONV/FC
/// layer. Immutable after construction; weight values are carried at
/// binary32 precision end to end so that save/load round-trips
/// bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerDesc>,
    weights: Vec<LayerWeights>,
    class_count: usize,
}

impl Network {
    pub fn new(
        layers: Vec<LayerDesc>,
        weights: Vec<LayerWeights>,
        class_count: usize,
    ) -> Result<Self> {
        let net = Self {
            layers,
            weights,
            class_count,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::EmptyInput("network has no layers"));
        }
        if !self.layers[0].is_matrix_layer() {
            return Err(Error::ShapeMismatch(
                "first layer must be CONV or FC".into(),
            ));
        }
        let matrix_layers = self.matrix_layer_indices();
        if matrix_layers.len() != self.weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} CONV/FC layers but {} weight sets",
                matrix_layers.len(),
                self.weights.len()
            )));
        }

        // Chain the volume through the network.
        let mut volume = self.input_shape();
        let mut w_idx = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerDesc::Conv(s) => {
                    s.validate()?;
                    if volume != (s.n_in, s.h, s.w) {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: incoming volume {volume:?} does not match \
                             CONV input ({}, {}, {})",
                            s.n_in, s.h, s.w
                        )));
                    }
                    self.check_weights(i, w_idx, s)?;
                    w_idx += 1;
                    volume = (s.n_out, s.out_h(), s.out_w());
                }
                LayerDesc::Fc(s) => {
                    s.validate()?;
                    let flat = volume.0 * volume.1 * volume.2;
                    if flat != s.n_in {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: incoming volume {volume:?} flattens to {flat}, \
                             FC expects {}",
                            s.n_in
                        )));
                    }
                    self.check_weights(i, w_idx, s)?;
                    w_idx += 1;
                    volume = (s.n_out, 1, 1);
                }
                LayerDesc::Relu => {}
                LayerDesc::MaxPool(p) => {
                    if p.k_h == 0 || p.k_w == 0 || p.s_h == 0 || p.s_w == 0 {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: zero pooling kernel or stride"
                        )));
                    }
                    if p.k_h > volume.1 || p.k_w > volume.2 {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: pooling window exceeds volume {volume:?}"
                        )));
                    }
                    volume = (
                        volume.0,
                        (volume.1 - (p.k_h - 1)).div_ceil(p.s_h),
                        (volume.2 - (p.k_w - 1)).div_ceil(p.s_w),
                    );
                }
                LayerDesc::Softmax => {}
            }
        }
        let logits = volume.0 * volume.1 * volume.2;
        if logits != self.class_count {
            return Err(Error::ShapeMismatch(format!(
                "final volume {volume:?} yields {logits} logits, class_count is {}",
                self.class_count
            )));
        }
        Ok(())
    }

    fn check_weights(&self, layer_idx: usize, w_idx: usize, s: &ConvShape) -> Result<()> {
        let lw = &self.weights[w_idx];
        let want = (s.inner_dim(), s.n_out);
        if lw.matrix.dim() != want {
            return Err(Error::ShapeMismatch(format!(
                "layer {layer_idx}: weight matrix {:?}, expected {:?}",
                lw.matrix.dim(),
                want
            )));
        }
        if let Some(b) = &lw.bias {
            if b.len() != s.n_out {
                return Err(Error::ShapeMismatch(format!(
                    "layer {layer_idx}: bias length {}, expected {}",
                    b.len(),
                    s.n_out
                )));
            }
        }
        for v in lw.matrix.iter().chain(lw.bias.iter().flatten()) {
            if !v.is_finite() {
                return Err(Error::NonFinite(*v));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[LayerDesc] {
        &self.layers
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Input volume `(channels, h, w)` implied by the first layer.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        match &self.layers[0] {
            LayerDesc::Conv(s) => (s.n_in, s.h, s.w),
            LayerDesc::Fc(s) => (s.n_in, 1, 1),
            _ => unreachable!("validated: first layer is CONV or FC"),
        }
    }

    /// Full-list indices of the CONV/FC layers, in order.
    pub fn matrix_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_matrix_layer())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn matrix_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_matrix_layer()).count()
    }

    /// Weights of the `m_idx`-th CONV/FC layer.
    pub fn layer_weights(&self, m_idx: usize) -> &LayerWeights {
        &self.weights[m_idx]
    }

    pub fn weights(&self) -> &[LayerWeights] {
        &self.weights
    }

    /// Check that a scheme provides exactly one entry per CONV/FC layer.
    pub fn check_scheme(&self, scheme: &QuantScheme) -> Result<()> {
        let n = self.matrix_layer_count();
        if scheme.per_layer.len() != n {
            return Err(Error::SchemeMismatch(format!(
                "scheme covers {} layers, network has {} CONV/FC layers",
                scheme.per_layer.len(),
                n
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Manifest serialisation
// ---------------------------------------------------------------------------
//
// A network on disk is a JSON manifest plus raw little-endian binary32
// blobs, one file per weight/bias tensor, referenced by relative path
// and SHA-256 checksum. Weight blobs hold the `p x c` matrix row-major
// (the column index varies fastest; a single column's entries appear in
// p order).

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLayer {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    shape: Option<ConvShape>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pool: Option<PoolShape>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_in: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_out: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<BlobRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<BlobRef>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobRef {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    class_count: usize,
    layers: Vec<ManifestLayer>,
}

fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    bytes
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn write_blob(dir: &Path, name: &str, bytes: &[u8]) -> Result<BlobRef> {
    fs::write(dir.join(name), bytes)?;
    Ok(BlobRef {
        path: name.to_string(),
        sha256: sha256_hex(bytes),
    })
}

/// Write `net` into `dir` as `manifest.json` plus weight blobs; returns
/// the manifest path.
pub fn save_network(net: &Network, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut layers = Vec::new();
    let mut w_idx = 0;
    for (i, layer) in net.layers.iter().enumerate() {
        let entry = match layer {
            LayerDesc::Conv(s) | LayerDesc::Fc(s) => {
                let lw = &net.weights[w_idx];
                w_idx += 1;
                let wbytes = f32_bytes(lw.matrix.iter().copied());
                let weights = Some(write_blob(dir, &format!("layer{i}_weights.bin"), &wbytes)?);
                let bias = match &lw.bias {
                    Some(b) => {
                        let bbytes = f32_bytes(b.iter().copied());
                        Some(write_blob(dir, &format!("layer{i}_bias.bin"), &bbytes)?)
                    }
                    None => None,
                };
                if matches!(layer, LayerDesc::Fc(_)) {
                    ManifestLayer {
                        kind: "fc".into(),
                        shape: None,
                        pool: None,
                        n_in: Some(s.n_in),
                        n_out: Some(s.n_out),
                        weights,
                        bias,
                    }
                } else {
                    ManifestLayer {
                        kind: "conv".into(),
                        shape: Some(*s),
                        pool: None,
                        n_in: None,
                        n_out: None,
                        weights,
                        bias,
                    }
                }
            }
            LayerDesc::Relu => ManifestLayer {
                kind: "relu".into(),
                shape: None,
                pool: None,
                n_in: None,
                n_out: None,
                weights: None,
                bias: None,
            },
            LayerDesc::MaxPool(p) => ManifestLayer {
                kind: "maxpool".into(),
                shape: None,
                pool: Some(*p),
                n_in: None,
                n_out: None,
                weights: None,
                bias: None,
            },
            LayerDesc::Softmax => ManifestLayer {
                kind: "softmax".into(),
                shape: None,
                pool: None,
                n_in: None,
                n_out: None,
                weights: None,
                bias: None,
            },
        };
        layers.push(entry);
    }
    let manifest = Manifest {
        class_count: net.class_count,
        layers,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

fn read_blob(base: &Path, blob: &BlobRef, expect_values: usize) -> Result<Vec<f64>> {
    let path = base.join(&blob.path);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingBlob(path));
        }
        Err(e) => return Err(e.into()),
    };
    if bytes.len() != expect_values * 4 {
        return Err(Error::ShapeMismatch(format!(
            "blob {} holds {} bytes, expected {} ({} binary32 values)",
            path.display(),
            bytes.len(),
            expect_values * 4,
            expect_values
        )));
    }
    if sha256_hex(&bytes) != blob.sha256 {
        return Err(Error::ChecksumMismatch(path));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Load a network from its `manifest.json`; blob paths resolve relative
/// to the manifest's directory.
pub fn load_network(manifest_path: &Path) -> Result<Network> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut layers = Vec::new();
    let mut weights = Vec::new();
    for (i, ml) in manifest.layers.iter().enumerate() {
        let missing = |what: &str| Error::MalformedData {
            path: manifest_path.to_path_buf(),
            reason: format!("layer {i} ({}) missing {what}", ml.kind),
        };
        match ml.kind.as_str() {
            "conv" | "fc" => {
                let shape = if ml.kind == "conv" {
                    ml.shape.ok_or_else(|| missing("shape"))?
                } else {
                    let n_in = ml.n_in.ok_or_else(|| missing("n_in"))?;
                    let n_out = ml.n_out.ok_or_else(|| missing("n_out"))?;
                    match LayerDesc::fc(n_in, n_out) {
                        LayerDesc::Fc(s) => s,
                        _ => unreachable!(),
                    }
                };
                let wref = ml.weights.as_ref().ok_or_else(|| missing("weights"))?;
                let p = shape.inner_dim();
                let c = shape.n_out;
                let values = read_blob(base, wref, p * c)?;
                let matrix =
                    Array2::from_shape_vec((p, c), values).expect("length checked by read_blob");
                let bias = match &ml.bias {
                    Some(bref) => Some(read_blob(base, bref, c)?),
                    None => None,
                };
                layers.push(if ml.kind == "conv" {
                    LayerDesc::Conv(shape)
                } else {
                    LayerDesc::Fc(shape)
                });
                weights.push(LayerWeights { matrix, bias });
            }
            "relu" => layers.push(LayerDesc::Relu),
            "maxpool" => {
                let pool = ml.pool.ok_or_else(|| missing("pool"))?;
                layers.push(LayerDesc::MaxPool(pool));
            }
            "softmax" => layers.push(LayerDesc::Softmax),
            other => return Err(Error::UnknownLayerKind(other.to_string())),
        }
    }
    Network::new(layers, weights, manifest.class_count)
}

/// Deterministic map of layer kinds to counts, handy for summaries.
pub fn layer_census(net: &Network) -> BTreeMap<&'static str, usize> {
    let mut census = BTreeMap::new();
    for l in net.layers() {
        *census.entry(l.kind_name()).or_insert(0) += 1;
    }
    census
}
