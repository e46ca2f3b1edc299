//! Task streams: datasets split by class into disjoint, consecutive tasks.
//!
//! Sources are synthetic Gaussian blobs, IDX files (the MNIST container) and
//! CSV files with a `label` column. Every source ends in the same place: a
//! stratified 80/20 train/test split per class, classes grouped into tasks in
//! label order, and optionally one global standardization computed over the
//! union of all training splits.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::Matrix;

const IDX_UBYTE: u8 = 0x08;
const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub x: Matrix,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: usize,
    pub classes: Vec<usize>,
    pub train: Split,
    pub test: Split,
}

/// Per-feature standardization `(x − mean) / std`; zero-variance features
/// keep `std = 1` and are only centered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(x: &Matrix) -> Self {
        let n = x.rows().max(1) as f64;
        let d = x.cols();
        let mut mean = vec![0.0; d];
        for r in x.row_iter() {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in x.row_iter() {
            for ((s, &v), &m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::shape(
                "normalize",
                format!("{} features, statistics for {}", x.cols(), self.mean.len()),
            ));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for ((v, &m), &s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub classes_per_task: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub normalization: Option<Normalization>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Groups labelled samples into `num_tasks` tasks of consecutive classes,
    /// splitting each class 80/20 into train/test in sample order. Labels must
    /// be `0..C` with `C` divisible by `num_tasks`.
    pub fn from_labeled(x: &Matrix, labels: &[usize], num_tasks: usize) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::shape(
                "task stream",
                format!("{} samples, {} labels", x.rows(), labels.len()),
            ));
        }
        if num_tasks == 0 {
            return Err(Error::Config("need at least one task".into()));
        }
        let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
        if num_classes == 0 || !num_classes.is_multiple_of(num_tasks) {
            return Err(Error::Config(format!(
                "{num_classes} classes cannot be split evenly into {num_tasks} tasks"
            )));
        }
        let cpt = num_classes / num_tasks;
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            by_class[y].push(i);
        }
        if let Some(empty) = by_class.iter().position(|v| v.is_empty()) {
            return Err(Error::Config(format!("class {empty} has no samples")));
        }

        let tasks = (0..num_tasks)
            .map(|t| {
                let classes: Vec<usize> = (t * cpt..(t + 1) * cpt).collect();
                let mut train_idx = Vec::new();
                let mut test_idx = Vec::new();
                for &c in &classes {
                    let idx = &by_class[c];
                    let n_train =
                        ((idx.len() as f64 * TRAIN_FRACTION).round() as usize).clamp(1, idx.len());
                    train_idx.extend_from_slice(&idx[..n_train]);
                    test_idx.extend_from_slice(&idx[n_train..]);
                }
                let pick = |ids: &[usize]| Split {
                    x: x.select_rows(ids),
                    labels: ids.iter().map(|&i| labels[i]).collect(),
                };
                Task {
                    id: t,
                    classes,
                    train: pick(&train_idx),
                    test: pick(&test_idx),
                }
            })
            .collect();
        Ok(Self {
            tasks,
            classes_per_task: cpt,
            num_classes,
            dim: x.cols(),
            normalization: None,
        })
    }

    /// Task index owning `class`.
    pub fn task_of(&self, class: usize) -> usize {
        class / self.classes_per_task.max(1)
    }

    /// All tasks fused into one, for joint-training baselines.
    pub fn merged(&self) -> Result<Self> {
        let mut train_x = Matrix::zeros(0, self.dim);
        let mut test_x = Matrix::zeros(0, self.dim);
        let mut train_y = Vec::new();
        let mut test_y = Vec::new();
        for t in &self.tasks {
            train_x = train_x.vstack(&t.train.x)?;
            test_x = test_x.vstack(&t.test.x)?;
            train_y.extend_from_slice(&t.train.labels);
            test_y.extend_from_slice(&t.test.labels);
        }
        Ok(Self {
            tasks: vec![Task {
                id: 0,
                classes: (0..self.num_classes).collect(),
                train: Split {
                    x: train_x,
                    labels: train_y,
                },
                test: Split {
                    x: test_x,
                    labels: test_y,
                },
            }],
            classes_per_task: self.num_classes,
            num_classes: self.num_classes,
            dim: self.dim,
            normalization: self.normalization.clone(),
        })
    }

    fn all_train_x(&self) -> Result<Matrix> {
        let mut all = Matrix::zeros(0, self.dim);
        for t in &self.tasks {
            all = all.vstack(&t.train.x)?;
        }
        Ok(all)
    }
}

/// Gaussian class clusters: each class centre is drawn from `N(0, I)`, each
/// sample is `centre + cluster_spread · N(0, I)`. Classes `t·k .. (t+1)·k` form
/// task `t`.
pub fn make_split_blobs(
    num_tasks: usize,
    classes_per_task: usize,
    samples_per_class: usize,
    dim: usize,
    cluster_spread: f64,
    rng: &mut RngState,
) -> Result<TaskStream> {
    if num_tasks == 0 || classes_per_task == 0 || samples_per_class == 0 || dim == 0 {
        return Err(Error::Config("blob counts must all be at least 1".into()));
    }
    if !(cluster_spread >= 0.0 && cluster_spread.is_finite()) {
        return Err(Error::Config(format!(
            "invalid cluster spread {cluster_spread}"
        )));
    }
    let classes = num_tasks * classes_per_task;
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.normal()).collect())
        .collect();
    let mut data = Vec::with_capacity(classes * samples_per_class * dim);
    let mut labels = Vec::with_capacity(classes * samples_per_class);
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..samples_per_class {
            data.extend(centre.iter().map(|&m| m + cluster_spread * rng.normal()));
            labels.push(c);
        }
    }
    let x = Matrix::from_vec(labels.len(), dim, data)?;
    TaskStream::from_labeled(&x, &labels, num_tasks)
}

/// Standardizes every split with statistics of the union of training splits.
pub fn normalize(stream: &TaskStream) -> Result<TaskStream> {
    let norm = Normalization::fit(&stream.all_train_x()?);
    let mut out = stream.clone();
    for t in &mut out.tasks {
        t.train.x = norm.apply(&t.train.x)?;
        t.test.x = norm.apply(&t.test.x)?;
    }
    out.normalization = Some(norm);
    Ok(out)
}

/// A decoded IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    decode_idx(&fs::read(path)?)
}

pub fn decode_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::format("IDX file", "shorter than its magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != IDX_UBYTE || bytes[3] == 0 {
        return Err(Error::format(
            "IDX file",
            format!(
                "bad magic {:02x}{:02x}{:02x}{:02x}",
                bytes[0], bytes[1], bytes[2], bytes[3]
            ),
        ));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::format("IDX file", "truncated dimension header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let len: usize = dims.iter().product();
    if bytes.len() != header + len {
        return Err(Error::format(
            "IDX file",
            format!("expected {len} data bytes, found {}", bytes.len() - header),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn encode_idx(arr: &IdxArray) -> Result<Vec<u8>> {
    if arr.dims.is_empty() || arr.dims.len() > 255 {
        return Err(Error::format("IDX array", "needs 1 to 255 dimensions"));
    }
    if arr.dims.iter().product::<usize>() != arr.data.len() {
        return Err(Error::format(
            "IDX array",
            "dimensions disagree with data length",
        ));
    }
    let mut out = vec![0, 0, IDX_UBYTE, arr.dims.len() as u8];
    for &d in &arr.dims {
        let d =
            u32::try_from(d).map_err(|_| Error::format("IDX array", "dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    Ok(out)
}

pub fn write_idx(path: &Path, arr: &IdxArray) -> Result<()> {
    fs::write(path, encode_idx(arr)?)?;
    Ok(())
}

/// Loads an image file (magic `0x00000803`) and a label file (`0x00000801`).
/// Pixels are scaled to `[0, 1]` and flattened; normalization is left to
/// [`normalize`].
pub fn load_idx_dataset(images: &Path, labels: &Path, num_tasks: usize) -> Result<TaskStream> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if img.dims.len() != 3 {
        return Err(Error::format(
            "IDX image file",
            format!("expected 3 dimensions, got {}", img.dims.len()),
        ));
    }
    if lab.dims.len() != 1 {
        return Err(Error::format(
            "IDX label file",
            format!("expected 1 dimension, got {}", lab.dims.len()),
        ));
    }
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(Error::format(
            "IDX dataset",
            format!("{n} images but {} labels", lab.dims[0]),
        ));
    }
    let dim = img.dims[1] * img.dims[2];
    let x = Matrix::from_vec(n, dim, img.data.iter().map(|&p| p as f64 / 255.0).collect())?;
    let y: Vec<usize> = lab.data.iter().map(|&l| l as usize).collect();
    TaskStream::from_labeled(&x, &remap_labels(&y), num_tasks)
}

/// Maps the distinct labels to `0..C` preserving order.
fn remap_labels(labels: &[usize]) -> Vec<usize> {
    let ranks: BTreeMap<usize, usize> = {
        let mut set: Vec<usize> = labels.to_vec();
        set.sort_unstable();
        set.dedup();
        set.into_iter().enumerate().map(|(r, l)| (l, r)).collect()
    };
    labels.iter().map(|l| ranks[l]).collect()
}

/// Labelled samples from a CSV file with a header row. The `label` column
/// holds class indices; an optional `task_id` column is ignored; every other
/// column is a numeric feature.
pub fn read_csv_samples(path: &Path) -> Result<(Matrix, Vec<usize>)> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| Error::format("CSV dataset", "no 'label' column"))?;
    let feature_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| *h != "label" && *h != "task_id")
        .map(|(i, _)| i)
        .collect();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let y = field(label_col)
            .parse::<usize>()
            .map_err(|e| Error::format("CSV dataset", format!("row {}: label: {e}", line + 2)))?;
        labels.push(y);
        for &c in &feature_cols {
            let v = field(c).parse::<f64>().map_err(|e| {
                Error::format(
                    "CSV dataset",
                    format!("row {}, column {}: {e}", line + 2, &headers[c]),
                )
            })?;
            data.push(v);
        }
    }
    Ok((
        Matrix::from_vec(labels.len(), feature_cols.len(), data)?,
        labels,
    ))
}

pub fn load_csv_dataset(path: &Path, num_tasks: usize) -> Result<TaskStream> {
    let (x, y) = read_csv_samples(path)?;
    TaskStream::from_labeled(&x, &remap_labels(&y), num_tasks)
}

/// Writes `x_1..x_d,label,task_id` rows.
pub fn write_csv_samples(
    path: &Path,
    x: &Matrix,
    labels: &[usize],
    task_ids: &[usize],
) -> Result<()> {
    write_csv_rows(path, "x", x, labels, task_ids)
}

/// Writes `{prefix}_1..{prefix}_d,label,task_id` rows.
pub fn write_csv_rows(
    path: &Path,
    prefix: &str,
    x: &Matrix,
    labels: &[usize],
    task_ids: &[usize],
) -> Result<()> {
    if x.rows() != labels.len() || labels.len() != task_ids.len() {
        return Err(Error::shape(
            "write_csv",
            "rows, labels and task ids differ in length",
        ));
    }
    let mut out = String::new();
    let header: Vec<String> = (1..=x.cols()).map(|i| format!("{prefix}_{i}")).collect();
    out.push_str(&header.join(","));
    out.push_str(",label,task_id\n");
    for ((row, y), t) in x.row_iter().zip(labels).zip(task_ids) {
        for v in row {
            out.push_str(&format!("{v:?},"));
        }
        out.push_str(&format!("{y},{t}\n"));
    }
    crate::checkpoint::write_atomic(path, out.as_bytes())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format("CSV dataset", format!("{other:?}")),
    }
}
