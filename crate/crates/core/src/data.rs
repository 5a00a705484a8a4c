//! Dataset synthesis, CSV ingestion, normalization, vertical partitioning,
//! and aux/train/test splitting.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Dataset> {
        if features.rows() != labels.len() {
            return Err(Error::data(format!(
                "{} feature rows vs {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::data(format!(
                "label {} out of range for {} classes",
                bad, num_classes
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            feature_names: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            feature_names: self.feature_names.clone(),
        }
    }
}

/// Disjoint column sets: slot 0 is the active/adversary block, slots 1..=N
/// the passive clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerticalPartition {
    pub column_sets: Vec<Vec<usize>>,
}

impl VerticalPartition {
    fn validate(&self, d: usize) -> Result<()> {
        let mut seen = vec![false; d];
        for (i, set) in self.column_sets.iter().enumerate() {
            if i > 0 && set.is_empty() {
                return Err(Error::data(format!("passive client {} has no columns", i)));
            }
            for &c in set {
                if c >= d || seen[c] {
                    return Err(Error::data(format!(
                        "column {} out of range or duplicated",
                        c
                    )));
                }
                seen[c] = true;
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::data("partition does not cover all columns"));
        }
        Ok(())
    }

    pub fn adversary_columns(&self) -> &[usize] {
        &self.column_sets[0]
    }

    pub fn passive_count(&self) -> usize {
        self.column_sets.len() - 1
    }

    pub fn passive_columns(&self, n: usize) -> &[usize] {
        &self.column_sets[n + 1]
    }

    /// All passive columns in client order; the feature space of the encoder.
    pub fn all_passive_columns(&self) -> Vec<usize> {
        self.column_sets[1..].iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    /// aux:train ratio (0.1 reproduces the 1:10 setup); 0 disables the aux set.
    pub aux_ratio: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

/// Class c is a unit-covariance Gaussian at a seeded random direction scaled
/// to `separation`. Rows are class-major; shuffling happens in `make_splits`.
pub fn generate_gaussian_mixture(
    classes: usize,
    dims: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || dims < 2 || per_class < 2 || separation <= 0.0 {
        return Err(Error::config(format!(
            "invalid mixture sizes: C={} d={} per_class={} sep={}",
            classes, dims, per_class, separation
        )));
    }
    let mut rng = crate::seed::component_rng(seed, "gaussian-mixture", 0);
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        let dir: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        means.push(
            dir.iter()
                .map(|v| v / norm * separation)
                .collect::<Vec<f64>>(),
        );
    }
    let mut rows = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let row: Vec<f64> = mean
                .iter()
                .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            rows.push(row);
            labels.push(c);
        }
    }
    Dataset::new(Tensor::from_rows(&rows)?, labels, classes)
}

/// Labels are remapped to contiguous 0..C-1 in ascending numeric order of the
/// original values; the mapping is returned alongside.
pub fn load_csv_dataset(path: &Path, label_column: &str) -> Result<(Dataset, Vec<(f64, usize)>)> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::data(format!("cannot open {}: {}", path.display(), e)))?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::data(format!("label column {:?} not found", label_column)))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut rows = Vec::new();
    let mut raw_labels = Vec::new();
    for (ri, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(headers.len() - 1);
        for (ci, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::data(format!(
                    "non-numeric cell at row {}, column {:?}",
                    ri + 1,
                    headers[ci]
                ))
            })?;
            if ci == label_idx {
                raw_labels.push(v);
            } else {
                row.push(v);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::data("empty dataset file"));
    }

    let mut distinct: Vec<f64> = raw_labels.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let mapping: Vec<(f64, usize)> = distinct.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|v| mapping.iter().find(|(orig, _)| orig == v).unwrap().1)
        .collect();

    let mut ds = Dataset::new(Tensor::from_rows(&rows)?, labels, distinct.len())?;
    ds.feature_names = Some(feature_names);
    Ok((ds, mapping))
}

/// Column-wise zero-mean unit-std (population std); constant columns map to
/// all-zeros. Returns the per-feature (mean, std) pairs.
pub fn standardize(ds: &Dataset) -> Result<(Dataset, Vec<(f64, f64)>)> {
    let (n, d) = (ds.len(), ds.dims());
    if n < 2 {
        return Err(Error::data("standardize needs at least 2 rows"));
    }
    let mut stats = Vec::with_capacity(d);
    let mut out = ds.features.values().to_vec();
    for c in 0..d {
        let mean = (0..n).map(|i| ds.features.row(i)[c]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|i| {
                let v = ds.features.row(i)[c] - mean;
                v * v
            })
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        if std < 1e-12 {
            for i in 0..n {
                out[i * d + c] = 0.0;
            }
            stats.push((mean, 0.0));
        } else {
            for i in 0..n {
                out[i * d + c] = (out[i * d + c] - mean) / std;
            }
            stats.push((mean, std));
        }
    }
    let mut scaled = Dataset::new(
        Tensor::matrix(n, d, out)?,
        ds.labels.clone(),
        ds.num_classes,
    )?;
    scaled.feature_names = ds.feature_names.clone();
    Ok((scaled, stats))
}

/// Affine map of each feature onto [-1, 1]; constant features map to 0.
pub fn rescale_to_unit_range(ds: &Dataset) -> Result<Dataset> {
    let (n, d) = (ds.len(), ds.dims());
    let mut out = ds.features.values().to_vec();
    for c in 0..d {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for i in 0..n {
            min = min.min(ds.features.row(i)[c]);
            max = max.max(ds.features.row(i)[c]);
        }
        if max - min < 1e-12 {
            for i in 0..n {
                out[i * d + c] = 0.0;
            }
        } else {
            for i in 0..n {
                out[i * d + c] = 2.0 * (out[i * d + c] - min) / (max - min) - 1.0;
            }
        }
    }
    let mut scaled = Dataset::new(
        Tensor::matrix(n, d, out)?,
        ds.labels.clone(),
        ds.num_classes,
    )?;
    scaled.feature_names = ds.feature_names.clone();
    Ok(scaled)
}

/// Contiguous column blocks in order [adversary, passive 1..N]. Sizes are
/// rounded fractions with the remainder given to the last client. The
/// adversary fraction may be 0 (split-learning mode).
pub fn vertical_partition(d: usize, fractions: &[f64]) -> Result<VerticalPartition> {
    if fractions.len() < 2 {
        return Err(Error::config("need at least one passive client"));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "fractions sum to {}, expected 1",
            sum
        )));
    }
    if fractions[1..].iter().any(|&f| f <= 0.0) || fractions[0] < 0.0 {
        return Err(Error::config("passive fractions must be positive"));
    }
    let mut sizes: Vec<usize> = fractions[..fractions.len() - 1]
        .iter()
        .map(|f| (f * d as f64).round() as usize)
        .collect();
    let taken: usize = sizes.iter().sum();
    if taken > d {
        return Err(Error::config("rounded fractions exceed column count"));
    }
    sizes.push(d - taken);
    let mut sets = Vec::with_capacity(sizes.len());
    let mut next = 0;
    for s in sizes {
        sets.push((next..next + s).collect());
        next += s;
    }
    let p = VerticalPartition { column_sets: sets };
    p.validate(d)?;
    Ok(p)
}

/// As `vertical_partition` but over a seeded random column permutation.
pub fn vertical_partition_permuted(
    d: usize,
    fractions: &[f64],
    seed: u64,
) -> Result<VerticalPartition> {
    let base = vertical_partition(d, fractions)?;
    let mut perm: Vec<usize> = (0..d).collect();
    let mut rng = crate::seed::component_rng(seed, "column-permutation", 0);
    perm.shuffle(&mut rng);
    let sets = base
        .column_sets
        .iter()
        .map(|set| set.iter().map(|&c| perm[c]).collect())
        .collect();
    let p = VerticalPartition { column_sets: sets };
    p.validate(d)?;
    Ok(p)
}

/// Seeded shuffle, then (aux, train, test), pairwise row-disjoint. The test
/// fraction is taken off the top; the aux:train ratio holds within one row.
pub fn make_splits(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    if spec.aux_ratio < 0.0 || spec.test_fraction < 0.0 || spec.test_fraction >= 1.0 {
        return Err(Error::config("invalid split fractions"));
    }
    let m = ds.len();
    let n_test = (m as f64 * spec.test_fraction).round() as usize;
    let rest = m - n_test;
    let n_aux = (rest as f64 * spec.aux_ratio / (1.0 + spec.aux_ratio)).round() as usize;
    if n_test + n_aux > m {
        return Err(Error::config("split fractions exceed dataset size"));
    }
    let mut idx: Vec<usize> = (0..m).collect();
    let mut rng = crate::seed::component_rng(spec.seed, "split-shuffle", 0);
    idx.shuffle(&mut rng);
    let test_idx = &idx[..n_test];
    let aux_idx = &idx[n_test..n_test + n_aux];
    let train_idx = &idx[n_test + n_aux..];
    Ok((
        ds.select_rows(aux_idx),
        ds.select_rows(train_idx),
        ds.select_rows(test_idx),
    ))
}
