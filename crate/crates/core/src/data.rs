//! Synthetic correlated multilabel data, CSV tables and minibatching.
//!
//! Labels come from a thresholded Gaussian copula: `z ~ N(0, R)` and
//! `y_k = [z_k > Φ⁻¹(1 - p_k)]`, which pins each marginal to `p_k` and
//! carries the sign and rough strength of `R` into label co-occurrence.
//! Inputs are the sum of the active classes' prototypes plus noise.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{KmclError, Result};
use crate::losses::LabelVector;

/// Most negative eigenvalue still accepted as round-off of a PSD matrix.
const PSD_TOLERANCE: f64 = 1e-10;
const MAX_REGENERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub input_dim: usize,
    /// `P(y_k = 1)` per class.
    pub marginals: Vec<f64>,
    /// `K×K` row-major latent correlation.
    pub correlation: Vec<f64>,
    /// Standard deviation of the isotropic input noise.
    pub noise: f64,
    /// Standard deviation of prototype entries.
    pub prototype_scale: f64,
    /// Extra per-class noise: when class `k` is active it adds
    /// `N(0, class_noise[k]²)` on a seeded half of the input dimensions.
    /// Empty for none.
    pub class_noise: Vec<f64>,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let classes = 8;
        SynthConfig {
            classes,
            input_dim: 32,
            marginals: vec![0.3; classes],
            correlation: block_correlation(classes, 2, 0.6),
            noise: 0.5,
            prototype_scale: 3.0,
            class_noise: Vec::new(),
            train: 2000,
            test: 500,
            seed: 0,
        }
    }
}

/// Identity with `rho` between classes of the same consecutive block of `block` classes.
pub fn block_correlation(classes: usize, block: usize, rho: f64) -> Vec<f64> {
    let mut r = vec![0.0; classes * classes];
    for i in 0..classes {
        for j in 0..classes {
            r[i * classes + j] = if i == j {
                1.0
            } else if block > 0 && i / block == j / block {
                rho
            } else {
                0.0
            };
        }
    }
    r
}

pub fn identity_correlation(classes: usize) -> Vec<f64> {
    block_correlation(classes, 0, 0.0)
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.classes;
        if k == 0 || self.input_dim == 0 {
            return Err(KmclError::invalid("synth.classes", "classes and input_dim must be positive"));
        }
        if self.marginals.len() != k {
            return Err(KmclError::invalid(
                "synth.marginals",
                format!("expected {k} entries, found {}", self.marginals.len()),
            ));
        }
        if let Some(p) = self.marginals.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
            return Err(KmclError::invalid("synth.marginals", format!("{p} is not in (0, 1)")));
        }
        if self.correlation.len() != k * k {
            return Err(KmclError::invalid(
                "synth.correlation",
                format!("expected {} entries, found {}", k * k, self.correlation.len()),
            ));
        }
        for i in 0..k {
            if self.correlation[i * k + i] != 1.0 {
                return Err(KmclError::invalid("synth.correlation", "diagonal must be 1"));
            }
            for j in 0..k {
                let v = self.correlation[i * k + j];
                if !(-1.0..=1.0).contains(&v) {
                    return Err(KmclError::invalid("synth.correlation", format!("{v} outside [-1, 1]")));
                }
                if (v - self.correlation[j * k + i]).abs() > 1e-12 {
                    return Err(KmclError::invalid("synth.correlation", "matrix is not symmetric"));
                }
            }
        }
        let min_eig = SymmetricEigen::new(self.correlation_matrix()).eigenvalues.min();
        if min_eig < -PSD_TOLERANCE {
            return Err(KmclError::invalid(
                "synth.correlation",
                format!("not positive semi-definite (smallest eigenvalue {min_eig:.3e})"),
            ));
        }
        for (name, v) in [("synth.noise", self.noise), ("synth.prototype_scale", self.prototype_scale)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(KmclError::invalid(name, "must be >= 0"));
            }
        }
        if !self.class_noise.is_empty() && self.class_noise.len() != k {
            return Err(KmclError::invalid(
                "synth.class_noise",
                format!("expected 0 or {k} entries, found {}", self.class_noise.len()),
            ));
        }
        if self.class_noise.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(KmclError::invalid("synth.class_noise", "entries must be >= 0"));
        }
        if self.train == 0 {
            return Err(KmclError::invalid("synth.train", "need at least one training sample"));
        }
        Ok(())
    }

    fn correlation_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.classes, self.classes, &self.correlation)
    }

    /// Expected number of positive labels per sample.
    pub fn expected_label_count(&self) -> f64 {
        self.marginals.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<LabelVector>,
    pub split: Vec<Split>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<LabelVector>, split: Vec<Split>) -> Result<Self> {
        if inputs.len() != labels.len() || inputs.len() != split.len() {
            return Err(KmclError::DimensionMismatch {
                what: "dataset rows",
                expected: inputs.len(),
                found: labels.len().min(split.len()),
            });
        }
        if let (Some(x0), Some(y0)) = (inputs.first(), labels.first()) {
            if let Some(bad) = inputs.iter().find(|x| x.len() != x0.len()) {
                return Err(KmclError::DimensionMismatch {
                    what: "input width",
                    expected: x0.len(),
                    found: bad.len(),
                });
            }
            if let Some(bad) = labels.iter().find(|y| y.len() != y0.len()) {
                return Err(KmclError::DimensionMismatch {
                    what: "label width",
                    expected: y0.len(),
                    found: bad.len(),
                });
            }
        }
        Ok(Dataset {
            inputs,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.labels.first().map_or(0, LabelVector::len)
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    /// Rows of one split, in their original order.
    pub fn subset(&self, split: Split) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.split[i] == split).collect();
        Dataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
            split: vec![split; idx.len()],
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = vec![split; self.len()];
        self
    }

    /// Concatenate two datasets keeping their tags.
    pub fn concat(mut self, other: Dataset) -> Result<Self> {
        if !self.is_empty() && !other.is_empty() {
            if other.classes() != self.classes() {
                return Err(KmclError::DimensionMismatch {
                    what: "classes",
                    expected: self.classes(),
                    found: other.classes(),
                });
            }
            if other.input_dim() != self.input_dim() {
                return Err(KmclError::DimensionMismatch {
                    what: "input width",
                    expected: self.input_dim(),
                    found: other.input_dim(),
                });
            }
        }
        self.inputs.extend(other.inputs);
        self.labels.extend(other.labels);
        self.split.extend(other.split);
        Ok(self)
    }

    pub fn gather(&self, indices: &[usize]) -> (Vec<Vec<f64>>, Vec<LabelVector>) {
        (
            indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i].clone()).collect(),
        )
    }

    /// Positive count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for y in &self.labels {
            for k in y.positives() {
                counts[k] += 1;
            }
        }
        counts
    }

    /// Relative frequency of samples having `0..=K` positive labels.
    pub fn label_count_histogram(&self) -> Vec<f64> {
        let mut hist = vec![0.0; self.classes() + 1];
        for y in &self.labels {
            hist[y.count()] += 1.0;
        }
        let n = self.len().max(1) as f64;
        hist.iter().map(|c| c / n).collect()
    }

    /// Mean positive rate over all `(sample, class)` entries.
    pub fn positive_rate(&self) -> f64 {
        let total: usize = self.labels.iter().map(LabelVector::count).sum();
        total as f64 / (self.len() * self.classes()).max(1) as f64
    }
}

/// Labels from the copula and inputs from class prototypes.
struct Generator {
    classes: usize,
    input_dim: usize,
    sqrt_corr: DMatrix<f64>,
    thresholds: Vec<f64>,
    prototypes: Vec<Vec<f64>>,
    noise_masks: Vec<Vec<bool>>,
}

impl Generator {
    fn new(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let eig = SymmetricEigen::new(cfg.correlation_matrix());
        let root = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
        let sqrt_corr = &eig.eigenvectors * root;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let thresholds = cfg.marginals.iter().map(|&p| normal.inverse_cdf(1.0 - p)).collect();
        let prototypes = (0..cfg.classes)
            .map(|_| {
                (0..cfg.input_dim)
                    .map(|_| cfg.prototype_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let noise_masks = (0..cfg.classes)
            .map(|_| (0..cfg.input_dim).map(|_| rng.random_bool(0.5)).collect())
            .collect();
        Generator {
            classes: cfg.classes,
            input_dim: cfg.input_dim,
            sqrt_corr,
            thresholds,
            prototypes,
            noise_masks,
        }
    }

    fn labels(&self, rng: &mut ChaCha8Rng) -> LabelVector {
        let e: Vec<f64> = (0..self.classes).map(|_| rng.sample(StandardNormal)).collect();
        let bits = (0..self.classes)
            .map(|i| {
                let z: f64 = (0..self.classes).map(|j| self.sqrt_corr[(i, j)] * e[j]).sum();
                (z > self.thresholds[i]) as u8
            })
            .collect();
        LabelVector::new(bits).expect("binary by construction")
    }

    fn input(&self, y: &LabelVector, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x = vec![0.0; self.input_dim];
        for k in y.positives() {
            for (v, p) in x.iter_mut().zip(&self.prototypes[k]) {
                *v += p;
            }
            if let Some(&s) = cfg.class_noise.get(k) {
                for (v, &m) in x.iter_mut().zip(&self.noise_masks[k]) {
                    if m && s > 0.0 {
                        *v += s * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
        }
        if cfg.noise > 0.0 {
            for v in &mut x {
                *v += cfg.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        x
    }
}

/// Generate `train + test` samples from `cfg`; rows are tagged train first.
/// Draws are repeated until every class has a training positive.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gen = Generator::new(cfg, &mut rng);
    let total = cfg.train + cfg.test;
    for _ in 0..MAX_REGENERATIONS {
        let labels: Vec<LabelVector> = (0..total).map(|_| gen.labels(&mut rng)).collect();
        let mut seen = vec![false; cfg.classes];
        for y in &labels[..cfg.train] {
            for k in y.positives() {
                seen[k] = true;
            }
        }
        if !seen.iter().all(|&s| s) {
            continue;
        }
        let inputs = labels.iter().map(|y| gen.input(y, cfg, &mut rng)).collect();
        let split = (0..total)
            .map(|i| if i < cfg.train { Split::Train } else { Split::Test })
            .collect();
        return Dataset::new(inputs, labels, split);
    }
    Err(KmclError::invalid(
        "synth",
        format!("no draw in {MAX_REGENERATIONS} attempts had a training positive for every class"),
    ))
}

fn csv_header(prefix: char, n: usize) -> String {
    (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(",")
}

/// Write inputs and labels of `ds` as two CSV files with header rows.
pub fn write_table(ds: &Dataset, features: &Path, labels: &Path) -> Result<()> {
    let mut fx = csv_header('x', ds.input_dim());
    fx.push('\n');
    for x in &ds.inputs {
        let row: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
        fx.push_str(&row.join(","));
        fx.push('\n');
    }
    let mut fy = csv_header('y', ds.classes());
    fy.push('\n');
    for y in &ds.labels {
        let row: Vec<String> = y.bits().iter().map(u8::to_string).collect();
        fy.push_str(&row.join(","));
        fy.push('\n');
    }
    fs::write(features, fx).map_err(|e| KmclError::io(features, e))?;
    fs::write(labels, fy).map_err(|e| KmclError::io(labels, e))?;
    Ok(())
}

fn parse_rows<T>(
    path: &Path,
    mut cell: impl FnMut(&str) -> std::result::Result<T, String>,
) -> Result<Vec<Vec<T>>> {
    let text = fs::read_to_string(path).map_err(|e| KmclError::io(path, e))?;
    let shown = path.display().to_string();
    let err = |line: usize, reason: String| KmclError::Parse {
        path: shown.clone(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| err(1, "no header row".into()))?;
    let width = header.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(err(i + 1, format!("expected {width} columns, found {}", cells.len())));
        }
        let row = cells
            .iter()
            .map(|c| cell(c.trim()))
            .collect::<std::result::Result<Vec<T>, String>>()
            .map_err(|r| err(i + 1, r))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(err(1, "no data rows".into()));
    }
    Ok(rows)
}

/// Read a feature CSV and a label CSV sharing row order. Rows are tagged
/// [`Split::Train`]; use [`Dataset::with_split`] to retag.
pub fn load_table(features: &Path, labels: &Path) -> Result<Dataset> {
    let inputs = parse_rows(features, |c| {
        c.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("`{c}` is not a finite number"))
    })?;
    let bits = parse_rows(labels, |c| match c {
        "0" => Ok(0u8),
        "1" => Ok(1u8),
        _ => Err(format!("label entry `{c}` is not 0 or 1")),
    })?;
    if inputs.len() != bits.len() {
        return Err(KmclError::Parse {
            path: labels.display().to_string(),
            line: bits.len().min(inputs.len()) + 2,
            reason: format!(
                "{} label rows for {} feature rows",
                bits.len(),
                inputs.len()
            ),
        });
    }
    let labels = bits
        .into_iter()
        .map(LabelVector::new)
        .collect::<Result<Vec<_>>>()?;
    let n = inputs.len();
    Dataset::new(inputs, labels, vec![Split::Train; n])
}

/// Shuffled minibatch index lists for one epoch of `len` samples.
///
/// The order depends only on `(seed, epoch)`. A final batch smaller than 2
/// is dropped.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(KmclError::invalid("batch_size", "must be at least 2"));
    }
    if batch_size > len {
        return Err(KmclError::invalid(
            "batch_size",
            format!("{batch_size} exceeds the {len} available samples"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}
