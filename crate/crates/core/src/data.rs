//! Long-tailed count profiles, synthetic Gaussian-mixture data, per-class
//! downsampling, Many/Medium/Few tagging and the `longtail-csv v1` format.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Rng;
use crate::weights::ClassCounts;

pub const DEFAULT_MANY_THRESHOLD: usize = 100;
pub const DEFAULT_FEW_THRESHOLD: usize = 20;

const CSV_MAGIC: &str = "longtail-csv v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileKind {
    Exponential,
    Step,
}

impl FromStr for ProfileKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" | "exp" => Ok(ProfileKind::Exponential),
            "step" => Ok(ProfileKind::Step),
            other => Err(Error::invalid(format!(
                "unknown imbalance profile {other:?} (expected exponential or step)"
            ))),
        }
    }
}

impl fmt::Display for ProfileKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProfileKind::Exponential => "exponential",
            ProfileKind::Step => "step",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceProfile {
    pub kind: ProfileKind,
    /// Ratio between the largest and smallest class count.
    pub rho: f64,
    pub n_max: usize,
    pub num_classes: usize,
}

/// Per-class counts for an imbalance profile, sorted nonincreasing.
///
/// Exponential: `n_i = round(n_max · ρ^{-i/(C-1)})` for `i = 0..C`.
/// Step: the first `⌈C/2⌉` classes get `n_max`, the rest `round(n_max / ρ)`.
pub fn make_longtail_counts(profile: &ImbalanceProfile) -> Result<ClassCounts> {
    let ImbalanceProfile { kind, rho, n_max, num_classes: c } = *profile;
    if !(rho >= 1.0 && rho.is_finite()) {
        return Err(Error::invalid(format!("imbalance ratio must be >= 1, got {rho}")));
    }
    if n_max == 0 || c == 0 {
        return Err(Error::invalid("n_max and the class count must be positive"));
    }
    if c < 2 && rho > 1.0 {
        return Err(Error::invalid("an imbalance ratio above 1 needs at least two classes"));
    }
    let n_max_f = n_max as f64;
    let counts = match kind {
        _ if c == 1 => vec![n_max],
        ProfileKind::Exponential => (0..c)
            .map(|i| {
                let n = (n_max_f * rho.powf(-(i as f64) / (c - 1) as f64)).round();
                (n as usize).max(1)
            })
            .collect(),
        ProfileKind::Step => {
            let head = c.div_ceil(2);
            let tail = ((n_max_f / rho).round() as usize).max(1);
            (0..c).map(|i| if i < head { n_max } else { tail }).collect()
        }
    };
    ClassCounts::new(counts)
}

/// Features (row-major, `n × dim`) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    num_classes: usize,
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(num_classes: usize, dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::invalid("dataset needs at least one class and one feature"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "{} feature values do not form {} rows of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite features"));
        }
        Ok(Self { num_classes, dim, features, labels })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Samples per class, zero for absent classes.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Per-class counts; fails if any class is absent.
    pub fn class_counts(&self) -> Result<ClassCounts> {
        ClassCounts::new(self.label_histogram())
    }

    fn select(&self, rows: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &i in rows {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset { num_classes: self.num_classes, dim: self.dim, features, labels }
    }
}

/// Class means: seeded Gaussian directions, Gram-Schmidt orthonormalized
/// when `C <= d` (otherwise just normalized), scaled to `separation`.
fn class_means(num_classes: usize, dim: usize, separation: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        loop {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            if c < dim {
                for u in &frame {
                    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    for (vi, ui) in v.iter_mut().zip(u) {
                        *vi -= dot * ui;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|x| *x /= norm);
                frame.push(v);
                break;
            }
        }
    }
    frame.into_iter().map(|v| v.into_iter().map(|x| x * separation).collect()).collect()
}

fn sample_split(
    means: &[Vec<f64>],
    per_class: impl Fn(usize) -> usize,
    rng: &mut Rng,
) -> (Vec<f64>, Vec<usize>) {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class(c) {
            features.extend(mean.iter().map(|m| m + rng.normal()));
            labels.push(c);
        }
    }
    (features, labels)
}

/// Isotropic unit-variance Gaussian mixture. The training split follows
/// `counts`; the test split is balanced with `per_class_test` samples per
/// class. Rows are grouped by class.
pub fn synth_gaussian_mixture(
    counts: &ClassCounts,
    dim: usize,
    separation: f64,
    seed: u64,
    per_class_test: usize,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if dim < 2 {
        return Err(Error::invalid(format!("feature dimension must be >= 2, got {dim}")));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::invalid(format!("separation must be finite and >= 0, got {separation}")));
    }
    if per_class_test == 0 {
        return Err(Error::invalid("per_class_test must be positive"));
    }
    let c = counts.num_classes();
    let mut rng = Rng::new(seed);
    let means = class_means(c, dim, separation, &mut rng);
    let (train_x, train_y) = sample_split(&means, |k| counts.as_slice()[k], &mut rng);
    let (test_x, test_y) = sample_split(&means, |_| per_class_test, &mut rng);
    Ok((LabeledDataset::new(c, dim, train_x, train_y)?, LabeledDataset::new(c, dim, test_x, test_y)?))
}

/// Uniform per-class subsample without replacement. Kept rows stay in their
/// original order.
pub fn downsample_to_profile(
    data: &LabeledDataset,
    counts: &ClassCounts,
    seed: u64,
) -> Result<LabeledDataset> {
    if counts.num_classes() != data.num_classes {
        return Err(Error::invalid(format!(
            "requested counts cover {} classes, dataset has {}",
            counts.num_classes(),
            data.num_classes
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes];
    for (i, &y) in data.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = Rng::new(seed);
    let mut keep = Vec::with_capacity(counts.total());
    for (class, (rows, &want)) in by_class.iter_mut().zip(counts.as_slice()).enumerate() {
        if want > rows.len() {
            return Err(Error::invalid(format!(
                "class {class}: requested {want} samples but only {} available",
                rows.len()
            )));
        }
        // Partial Fisher-Yates: the first `want` slots become the sample.
        for i in 0..want {
            let j = i + rng.below((rows.len() - i) as u64) as usize;
            rows.swap(i, j);
        }
        keep.extend_from_slice(&rows[..want]);
    }
    keep.sort_unstable();
    Ok(data.select(&keep))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subset {
    Many,
    Medium,
    Few,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Many, Subset::Medium, Subset::Few];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetTags {
    pub tags: Vec<Subset>,
    pub many_threshold: usize,
    pub few_threshold: usize,
}

impl SubsetTags {
    pub fn num_classes(&self) -> usize {
        self.tags.len()
    }
}

/// Many: `n > many`; Medium: `few <= n <= many`; Few: `n < few`.
pub fn subset_tags(counts: &ClassCounts, many_threshold: usize, few_threshold: usize) -> Result<SubsetTags> {
    if !(many_threshold > few_threshold && few_threshold > 0) {
        return Err(Error::invalid(format!(
            "thresholds must satisfy many > few > 0, got many={many_threshold} few={few_threshold}"
        )));
    }
    let tags = counts
        .as_slice()
        .iter()
        .map(|&n| {
            if n > many_threshold {
                Subset::Many
            } else if n >= few_threshold {
                Subset::Medium
            } else {
                Subset::Few
            }
        })
        .collect();
    Ok(SubsetTags { tags, many_threshold, few_threshold })
}

/// Writes the `longtail-csv v1` format.
pub fn write_dataset(data: &LabeledDataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "{CSV_MAGIC}, C={}, d={}", data.num_classes, data.dim)?;
        for i in 0..data.len() {
            write!(w, "{}", data.labels[i])?;
            for v in data.row(i) {
                // `Display` for f64 is the shortest string that round-trips.
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let rest = line.trim_end().strip_prefix(CSV_MAGIC)?;
    let mut parts = rest.split(',').map(str::trim).filter(|s| !s.is_empty());
    let c = parts.next()?.strip_prefix("C=")?.parse().ok()?;
    let d = parts.next()?.strip_prefix("d=")?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some((c, d))
}

pub fn read_dataset(path: &Path) -> Result<LabeledDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::format(path, "empty file")),
    };
    let (c, d) =
        parse_header(&header).ok_or_else(|| Error::format(path, format!("bad header {header:?}")))?;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::format(path, format!("line {}: {what}", lineno + 2));
        let mut fields = line.split(',');
        let label: usize =
            fields.next().and_then(|s| s.trim().parse().ok()).ok_or_else(|| bad("bad label"))?;
        let before = features.len();
        for f in fields {
            features.push(f.trim().parse::<f64>().map_err(|_| bad("bad feature"))?);
        }
        if features.len() - before != d {
            return Err(bad(&format!("expected {d} features")));
        }
        labels.push(label);
    }
    LabeledDataset::new(c, d, features, labels).map_err(|e| Error::format(path, e.to_string()))
}
