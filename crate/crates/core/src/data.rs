//! Datasets, generators, delimited-text loading, k-fold splits and z-scoring.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::seed;

/// Row-major design matrix and targets.
///
/// Classification sets keep their integer labels alongside one-hot targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    n_inputs: usize,
    n_outputs: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        n_inputs: usize,
        n_outputs: usize,
        x: Vec<f64>,
        y: Vec<f64>,
    ) -> Result<Self> {
        if n_inputs == 0 || n_outputs == 0 {
            return Err(Error::Precondition("dataset needs at least one input and one target column".into()));
        }
        if x.is_empty() || !x.len().is_multiple_of(n_inputs) {
            return Err(Error::Precondition(format!(
                "input buffer of length {} is not a nonempty multiple of {n_inputs}",
                x.len()
            )));
        }
        let n = x.len() / n_inputs;
        if y.len() != n * n_outputs {
            return Err(Error::Shape {
                what: "target buffer",
                expected: n * n_outputs,
                got: y.len(),
            });
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::Precondition("dataset contains non-finite values".into()));
        }
        Ok(Self {
            name: name.into(),
            n_inputs,
            n_outputs,
            x,
            y,
            labels: None,
        })
    }

    pub fn classification(
        name: impl Into<String>,
        n_inputs: usize,
        x: Vec<f64>,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Precondition(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        let mut y = vec![0.0; labels.len() * n_classes];
        for (i, &l) in labels.iter().enumerate() {
            y[i * n_classes + l] = 1.0;
        }
        let mut ds = Self::new(name, n_inputs, n_classes, x, y)?;
        ds.labels = Some(labels);
        Ok(ds)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.x.len() / self.n_inputs
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_inputs..(i + 1) * self.n_inputs]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.y[i * self.n_outputs..(i + 1) * self.n_outputs]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn is_classification(&self) -> bool {
        self.labels.is_some()
    }

    pub fn inputs(&self) -> impl Iterator<Item = &[f64]> {
        self.x.chunks_exact(self.n_inputs)
    }

    pub fn targets(&self) -> impl Iterator<Item = &[f64]> {
        self.y.chunks_exact(self.n_outputs)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(indices.len() * self.n_inputs);
        let mut y = Vec::with_capacity(indices.len() * self.n_outputs);
        for &i in indices {
            x.extend_from_slice(self.input(i));
            y.extend_from_slice(self.target(i));
        }
        Dataset {
            name: self.name.clone(),
            n_inputs: self.n_inputs,
            n_outputs: self.n_outputs,
            x,
            y,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Keeps only the listed target columns, in the given order.
    pub fn select_targets(&self, columns: &[usize]) -> Result<Dataset> {
        if columns.is_empty() {
            return Err(Error::Precondition("no target columns selected".into()));
        }
        if let Some(&c) = columns.iter().find(|&&c| c >= self.n_outputs) {
            return Err(Error::Precondition(format!(
                "target column {c} out of range ({} targets)",
                self.n_outputs
            )));
        }
        let y = self
            .targets()
            .flat_map(|row| columns.iter().map(move |&c| row[c]))
            .collect();
        Dataset::new(self.name.clone(), self.n_inputs, columns.len(), self.x.clone(), y)
    }
}

pub const TOY_TRAIN_SIZE: usize = 10;
pub const TOY_TEST_SIZE: usize = 1000;

/// Ten noisy samples of `y = x^3 + eps`, `x ~ U[-4, 4]`, `eps ~ N(0, 9)`.
pub fn toy_cubic(seed: u64) -> Dataset {
    let mut rng = seed::rng(seed);
    let xs = Uniform::new_inclusive(-4.0, 4.0).unwrap();
    let noise = Normal::new(0.0, 3.0).unwrap();
    let x: Vec<f64> = (0..TOY_TRAIN_SIZE).map(|_| rng.sample(xs)).collect();
    let y = x.iter().map(|v| v.powi(3) + noise.sample(&mut rng)).collect();
    Dataset::new("toy", 1, 1, x, y).expect("finite toy data")
}

/// 1000 evenly spaced noiseless points of `y = x^3` on `[-6, 6]`.
pub fn toy_cubic_testgrid() -> Dataset {
    let step = 12.0 / (TOY_TEST_SIZE - 1) as f64;
    let x: Vec<f64> = (0..TOY_TEST_SIZE)
        .map(|i| if i == TOY_TEST_SIZE - 1 { 6.0 } else { -6.0 + i as f64 * step })
        .collect();
    let y = x.iter().map(|v| v.powi(3)).collect();
    Dataset::new("toy", 1, 1, x, y).expect("finite grid")
}

/// Two unit-variance 2-D Gaussian blobs centred at `(-1.5, 0)` (label 0)
/// and `(1.5, 0)` (label 1), `n / 2` points each, interleaved.
pub fn two_blob_classification(seed: u64, n: usize) -> Result<Dataset> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::Precondition(format!("two-blob size must be even and positive, got {n}")));
    }
    let mut rng = seed::rng(seed);
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let cx = if label == 0 { -1.5 } else { 1.5 };
        x.push(cx + std.sample(&mut rng));
        x.push(std.sample(&mut rng));
        labels.push(label);
    }
    Dataset::classification("two_blob", 2, x, labels, 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delimiter {
    Auto,
    Comma,
    Whitespace,
}

/// Reads a numeric table; the last `target_cols` columns become targets.
///
/// A first line with any non-numeric cell is treated as a header.
pub fn load_delimited(path: &Path, target_cols: usize, delimiter: Delimiter) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let Some(&(_, first)) = lines.first() else {
        return Err(Error::EmptyFile(path.to_path_buf()));
    };
    let delimiter = match delimiter {
        Delimiter::Auto if first.contains(',') => Delimiter::Comma,
        Delimiter::Auto => Delimiter::Whitespace,
        d => d,
    };
    let split = |line: &'_ str| -> Vec<String> {
        match delimiter {
            Delimiter::Comma => line.split(',').map(|c| c.trim().to_string()).collect(),
            _ => line.split_whitespace().map(str::to_string).collect(),
        }
    };

    let header = split(first).iter().any(|c| c.parse::<f64>().is_err());
    let rows = if header { &lines[1..] } else { &lines[..] };
    if rows.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }

    let width = split(rows[0].1).len();
    if target_cols == 0 || target_cols >= width {
        return Err(Error::Precondition(format!(
            "{}: {target_cols} target columns requested but rows have {width} columns",
            path.display()
        )));
    }
    let n_inputs = width - target_cols;
    let mut x = Vec::with_capacity(rows.len() * n_inputs);
    let mut y = Vec::with_capacity(rows.len() * target_cols);
    for &(row, line) in rows {
        let cells = split(line);
        if cells.len() != width {
            return Err(Error::Ragged {
                path: path.to_path_buf(),
                row,
                expected: width,
                got: cells.len(),
            });
        }
        for (col, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::DataParse {
                path: path.to_path_buf(),
                row,
                col: col + 1,
                msg: format!("not a number: '{cell}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::DataParse {
                    path: path.to_path_buf(),
                    row,
                    col: col + 1,
                    msg: "non-finite value".into(),
                });
            }
            if col < n_inputs {
                x.push(v);
            } else {
                y.push(v);
            }
        }
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, n_inputs, target_cols, x, y)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub n_folds: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub split_seed: u64,
}

/// Seeded permutation of `0..n` cut into `n_folds` contiguous test blocks
/// whose sizes differ by at most one.
pub fn make_folds(n: usize, n_folds: usize, split_seed: u64) -> Result<Vec<FoldSplit>> {
    if n_folds < 2 {
        return Err(Error::Precondition(format!("need at least 2 folds, got {n_folds}")));
    }
    if n < n_folds {
        return Err(Error::Precondition(format!(
            "{n} samples cannot fill {n_folds} folds"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(split_seed));
    let (base, extra) = (n / n_folds, n % n_folds);
    let mut start = 0;
    Ok((0..n_folds)
        .map(|k| {
            let size = base + usize::from(k < extra);
            let test = perm[start..start + size].to_vec();
            let train = perm[..start].iter().chain(&perm[start + size..]).copied().collect();
            start += size;
            FoldSplit {
                fold_index: k,
                n_folds,
                train,
                test,
                split_seed,
            }
        })
        .collect())
}

pub const STD_FLOOR: f64 = 1e-8;

/// Per-column z-scoring fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

fn column_stats<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<&[f64]> = rows.collect();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..width)
        .map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n)
        .collect();
    let std = (0..width)
        .map(|c| {
            let var = rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n;
            var.sqrt().max(STD_FLOOR)
        })
        .collect();
    (mean, std)
}

impl Standardizer {
    /// Classification targets are left untouched (identity target transform).
    pub fn fit(train: &Dataset) -> Self {
        let (x_mean, x_std) = column_stats(train.inputs(), train.n_inputs());
        let (y_mean, y_std) = if train.is_classification() {
            (vec![0.0; train.n_outputs()], vec![1.0; train.n_outputs()])
        } else {
            column_stats(train.targets(), train.n_outputs())
        };
        Self {
            x_mean,
            x_std,
            y_mean,
            y_std,
        }
    }

    pub fn transform(&self, data: &Dataset) -> Dataset {
        let x = data
            .inputs()
            .flat_map(|r| r.iter().enumerate().map(|(c, v)| (v - self.x_mean[c]) / self.x_std[c]))
            .collect();
        let y = data
            .targets()
            .flat_map(|r| r.iter().enumerate().map(|(c, v)| (v - self.y_mean[c]) / self.y_std[c]))
            .collect();
        Dataset {
            name: data.name.clone(),
            n_inputs: data.n_inputs,
            n_outputs: data.n_outputs,
            x,
            y,
            labels: data.labels.clone(),
        }
    }

    pub fn inverse_target(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(c, v)| v * self.y_std[c] + self.y_mean[c])
            .collect()
    }

    pub fn inverse_target_var(&self, var: &[f64]) -> Vec<f64> {
        var.iter()
            .enumerate()
            .map(|(c, v)| v * self.y_std[c] * self.y_std[c])
            .collect()
    }

    pub fn inverse_input(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(c, v)| v * self.x_std[c] + self.x_mean[c])
            .collect()
    }
}

/// Fits a [`Standardizer`] on the fold's training rows and returns it with
/// the transformed train and test sets.
pub fn standardize(fold: &FoldSplit, data: &Dataset) -> (Standardizer, Dataset, Dataset) {
    let train = data.subset(&fold.train);
    let test = data.subset(&fold.test);
    let s = Standardizer::fit(&train);
    let (train, test) = (s.transform(&train), s.transform(&test));
    (s, train, test)
}
