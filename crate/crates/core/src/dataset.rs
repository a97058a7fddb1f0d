//! Evaluation-set and prediction file formats.
//!
//! An evaluation set on disk is a directory holding `inputs.bin` (raw
//! little-endian binary32 tensors, sample-major), a JSON sidecar
//! `inputs.json` with the count and per-sample shape, and `labels.csv`
//! with `sample_id,class_id` rows. Predictions are CSV rows of
//! `sample_id,class_id,prob_0..prob_{C-1}`.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labelled input batch held in memory, pixels at binary32 precision.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub inputs: Array4<f64>,
    pub labels: Vec<usize>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` samples (or all of them when fewer exist).
    pub fn truncated(&self, n: usize) -> EvalSet {
        let keep = n.min(self.len());
        EvalSet {
            inputs: self
                .inputs
                .slice(ndarray::s![..keep, .., .., ..])
                .to_owned(),
            labels: self.labels[..keep].to_vec(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct InputSidecar {
    count: usize,
    shape: [usize; 3],
}

/// Write an evaluation set into `dir`.
pub fn save_eval_set(set: &EvalSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (count, c, h, w) = set.inputs.dim();
    if count != set.labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{count} inputs vs {} labels",
            set.labels.len()
        )));
    }
    let mut bytes = Vec::with_capacity(set.inputs.len() * 4);
    for v in set.inputs.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(dir.join("inputs.bin"), bytes)?;
    let sidecar = InputSidecar {
        count,
        shape: [c, h, w],
    };
    fs::write(
        dir.join("inputs.json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    let mut csv = String::from("sample_id,class_id\n");
    for (i, label) in set.labels.iter().enumerate() {
        csv.push_str(&format!("{i},{label}\n"));
    }
    fs::write(dir.join("labels.csv"), csv)?;
    Ok(())
}

/// Load an evaluation set from `dir`.
pub fn load_eval_set(dir: &Path) -> Result<EvalSet> {
    let sidecar_path = dir.join("inputs.json");
    let sidecar: InputSidecar = serde_json::from_str(&fs::read_to_string(&sidecar_path)?)?;
    let [c, h, w] = sidecar.shape;
    let bin_path = dir.join("inputs.bin");
    let bytes = fs::read(&bin_path)?;
    let expect = sidecar.count * c * h * w * 4;
    if bytes.len() != expect {
        return Err(Error::MalformedData {
            path: bin_path,
            reason: format!("{} bytes, expected {expect}", bytes.len()),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let inputs =
        Array4::from_shape_vec((sidecar.count, c, h, w), values).expect("length checked above");

    let labels_path = dir.join("labels.csv");
    let labels = parse_labels_csv(&labels_path, sidecar.count)?;
    Ok(EvalSet { inputs, labels })
}

fn parse_labels_csv(path: &Path, expect: usize) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let mut labels = Vec::with_capacity(expect);
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 && line.starts_with("sample_id") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let bad = || Error::MalformedData {
            path: path.to_path_buf(),
            reason: format!("line {}: `{line}`", ln + 1),
        };
        let id: usize = fields
            .next()
            .ok_or_else(bad)?
            .trim()
            .parse()
            .map_err(|_| bad())?;
        let class: usize = fields
            .next()
            .ok_or_else(bad)?
            .trim()
            .parse()
            .map_err(|_| bad())?;
        if id != labels.len() {
            return Err(Error::MalformedData {
                path: path.to_path_buf(),
                reason: format!("sample ids must be dense and ordered, got {id}"),
            });
        }
        labels.push(class);
    }
    if labels.len() != expect {
        return Err(Error::MalformedData {
            path: path.to_path_buf(),
            reason: format!("{} labels for {expect} inputs", labels.len()),
        });
    }
    Ok(labels)
}

/// Write per-sample probability rows as
/// `sample_id,class_id,prob_0..prob_{C-1}`; `class_id` is the argmax.
pub fn save_predictions(probs: &Array2<f64>, path: &Path) -> Result<()> {
    let classes = probs.ncols();
    let mut csv = String::from("sample_id,class_id");
    for c in 0..classes {
        csv.push_str(&format!(",prob_{c}"));
    }
    csv.push('\n');
    for (i, row) in probs.rows().into_iter().enumerate() {
        let class = crate::engine::argmax_classes(&row.insert_axis(ndarray::Axis(0)).to_owned())[0];
        csv.push_str(&format!("{i},{class}"));
        for v in row {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    fs::write(path, csv)?;
    Ok(())
}

/// Read probability rows written by [`save_predictions`].
pub fn load_predictions(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 {
            continue; // header
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::MalformedData {
                path: path.to_path_buf(),
                reason: format!("line {}: `{line}`", ln + 1),
            });
        }
        let probs: std::result::Result<Vec<f64>, _> =
            fields[2..].iter().map(|f| f.trim().parse()).collect();
        rows.push(probs.map_err(|_| Error::MalformedData {
            path: path.to_path_buf(),
            reason: format!("line {}: bad probability", ln + 1),
        })?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_set_round_trip() {
        let set = EvalSet {
            inputs: Array4::from_shape_fn((3, 1, 2, 2), |(s, _, y, x)| {
                (s * 4 + y * 2 + x) as f64 * 0.5
            }),
            labels: vec![0, 2, 1],
        };
        let dir = tempfile::tempdir().unwrap();
        save_eval_set(&set, dir.path()).unwrap();
        let loaded = load_eval_set(dir.path()).unwrap();
        assert_eq!(set, loaded);
    }

    #[test]
    fn predictions_round_trip() {
        let probs =
            Array2::from_shape_vec((2, 3), vec![0.5, 0.25, 0.25, 0.125, 0.75, 0.125]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.csv");
        save_predictions(&probs, &path).unwrap();
        let rows = load_predictions(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], vec![0.5, 0.25, 0.25]);
        assert_eq!(rows[1], vec![0.125, 0.75, 0.125]);
    }

    #[test]
    fn truncated_eval_set_holds_a_prefix() {
        let set = EvalSet {
            inputs: Array4::from_shape_fn((5, 1, 1, 1), |(s, _, _, _)| s as f64),
            labels: vec![0, 1, 2, 3, 4],
        };
        let cut = set.truncated(3);
        assert_eq!(cut.len(), 3);
        assert_eq!(cut.labels, vec![0, 1, 2]);
        assert_eq!(cut.inputs[(2, 0, 0, 0)], 2.0);
        assert_eq!(set.truncated(99).len(), 5);
    }

    #[test]
    fn label_count_mismatch_is_reported() {
        let set = EvalSet {
            inputs: Array4::zeros((2, 1, 1, 1)),
            labels: vec![0, 1],
        };
        let dir = tempfile::tempdir().unwrap();
        save_eval_set(&set, dir.path()).unwrap();
        fs::write(dir.path().join("labels.csv"), "sample_id,class_id\n0,0\n").unwrap();
        assert!(matches!(
            load_eval_set(dir.path()),
            Err(Error::MalformedData { .. })
        ));
    }
}
