//! Synthetic data generators and dataset CSV files.

use std::path::Path;
use std::sync::Arc;

use dgate_core::{Dataset, DenseMatrix, DenseVector, GroupPartition, Rng, Targets};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Group-sparse linear regression design: Gaussian features, the first
/// `n_informative` groups carry N(0, 1) weights, Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupSparseDgp {
    pub n_train: usize,
    pub n_test: usize,
    pub n_groups: usize,
    pub group_size: usize,
    pub n_informative: usize,
    pub noise_sd: f64,
    /// Features are drawn as `N(0, feature_sd^2)`.
    pub feature_sd: f64,
    pub seed: u64,
}

impl Default for GroupSparseDgp {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 2000,
            n_groups: 40,
            group_size: 5,
            n_informative: 7,
            noise_sd: 1.0,
            feature_sd: 1.0,
            seed: 0,
        }
    }
}

impl GroupSparseDgp {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 || self.n_groups == 0 || self.group_size == 0 {
            return Err(Error::config("dgp counts must be at least 1"));
        }
        if self.n_informative > self.n_groups {
            return Err(Error::config("n_informative exceeds n_groups"));
        }
        if !(self.noise_sd >= 0.0 && self.feature_sd > 0.0) {
            return Err(Error::config("noise_sd must be >= 0 and feature_sd > 0"));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.n_groups * self.group_size
    }
}

/// Output of [`generate_group_sparse`].
#[derive(Clone, Debug)]
pub struct GroupSparseData {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Arc<GroupPartition>,
    pub true_support: Vec<usize>,
    pub true_weights: DenseVector,
}

/// Draws train and test sets. Draw order: train features, test features,
/// weights, train noise, test noise.
pub fn generate_group_sparse(dgp: &GroupSparseDgp) -> Result<GroupSparseData> {
    dgp.validate()?;
    let mut rng = Rng::seed_from_u64(dgp.seed);
    let p = dgp.p();
    let partition = Arc::new(GroupPartition::contiguous(&vec![dgp.group_size; dgp.n_groups])?);
    let mut features = |n: usize| {
        let data = (0..n * p).map(|_| dgp.feature_sd * rng.gauss()).collect();
        DenseMatrix::new(n, p, data)
    };
    let x_train = features(dgp.n_train)?;
    let x_test = features(dgp.n_test)?;
    let informative = dgp.n_informative * dgp.group_size;
    let beta: DenseVector = (0..p)
        .map(|i| if i < informative { rng.gauss() } else { 0.0 })
        .collect();
    let mut targets = |x: &DenseMatrix| -> Vec<f64> {
        (0..x.rows())
            .map(|i| {
                let signal: f64 = x.row(i).iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
                signal + dgp.noise_sd * rng.gauss()
            })
            .collect()
    };
    let y_train = targets(&x_train);
    let y_test = targets(&x_test);
    Ok(GroupSparseData {
        train: Dataset::regression(x_train, y_train)?,
        test: Dataset::regression(x_test, y_test)?,
        partition,
        true_support: (0..dgp.n_informative).collect(),
        true_weights: beta,
    })
}

/// Gaussian class clusters: sample `i` has label `i % n_classes` and
/// features `mu_label + N(0, I)`, with centre entries `N(0, separation^2 / n_features)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassBlobs {
    pub n: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for ClassBlobs {
    fn default() -> Self {
        Self {
            n: 150,
            n_features: 20,
            n_classes: 3,
            separation: 3.0,
            seed: 0,
        }
    }
}

pub fn generate_blobs(cfg: &ClassBlobs) -> Result<Dataset> {
    if cfg.n == 0 || cfg.n_features == 0 || cfg.n_classes < 2 {
        return Err(Error::config("blobs need n >= 1, n_features >= 1 and at least two classes"));
    }
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let scale = cfg.separation / (cfg.n_features as f64).sqrt();
    let centres: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| (0..cfg.n_features).map(|_| scale * rng.gauss()).collect())
        .collect();
    let labels: Vec<usize> = (0..cfg.n).map(|i| i % cfg.n_classes).collect();
    let mut x = Vec::with_capacity(cfg.n * cfg.n_features);
    for &c in &labels {
        x.extend(centres[c].iter().map(|m| m + rng.gauss()));
    }
    Ok(Dataset::classification(DenseMatrix::new(cfg.n, cfg.n_features, x)?, labels)?)
}

/// Target column interpretation for [`read_dataset_csv`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Regression,
    Classification,
}

/// Writes a header row `x0, ..., x{p-1}, y` followed by one row per sample.
pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let p = data.n_features();
    let mut header: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header).map_err(csv_err)?;
    let mut row = Vec::with_capacity(p + 1);
    for i in 0..data.n() {
        row.clear();
        row.extend(data.x().row(i).iter().map(|v| v.to_string()));
        row.push(match data.targets() {
            Targets::Real(y) => y[i].to_string(),
            Targets::Labels(l) => l[i].to_string(),
        });
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset whose last column is the target.
pub fn read_dataset_csv(path: &Path, task: Task) -> Result<Dataset> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let width = r.headers().map_err(csv_err)?.len();
    if width < 2 {
        return Err(Error::config(format!("{}: need at least one feature and a target column", path.display())));
    }
    let (mut x, mut y, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |field: &str| Error::config(format!("{}: row {}: cannot parse {field:?}", path.display(), line + 2));
        for field in rec.iter().take(width - 1) {
            x.push(field.trim().parse::<f64>().map_err(|_| bad(field))?);
        }
        let target = &rec[width - 1];
        match task {
            Task::Regression => y.push(target.trim().parse::<f64>().map_err(|_| bad(target))?),
            Task::Classification => labels.push(target.trim().parse::<usize>().map_err(|_| bad(target))?),
        }
    }
    let n = x.len() / (width - 1);
    let x = DenseMatrix::new(n, width - 1, x)?;
    Ok(match task {
        Task::Regression => Dataset::regression(x, y)?,
        Task::Classification => Dataset::classification(x, labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let d = generate_group_sparse(&GroupSparseDgp::default()).unwrap();
        assert_eq!((d.train.n(), d.train.n_features()), (200, 200));
        assert_eq!((d.test.n(), d.test.n_features()), (2000, 200));
        assert_eq!(d.true_support, (0..7).collect::<Vec<_>>());
        assert!(d.true_weights[..35].iter().all(|&b| b != 0.0));
        assert!(d.true_weights[35..].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn null_signal_gives_zero_targets() {
        let dgp = GroupSparseDgp {
            noise_sd: 0.0,
            n_informative: 0,
            n_train: 10,
            n_test: 5,
            ..Default::default()
        };
        let d = generate_group_sparse(&dgp).unwrap();
        assert!(d.train.y().unwrap().iter().all(|&y| y == 0.0));
        assert!(d.true_support.is_empty());
    }

    #[test]
    fn seeded_generation_is_bit_identical() {
        let dgp = GroupSparseDgp { n_test: 20, seed: 5, ..Default::default() };
        let a = generate_group_sparse(&dgp).unwrap();
        let b = generate_group_sparse(&dgp).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.true_weights, b.true_weights);
    }

    #[test]
    fn invalid_dgp_rejected() {
        let dgp = GroupSparseDgp { n_informative: 41, ..Default::default() };
        assert!(generate_group_sparse(&dgp).is_err());
        let dgp = GroupSparseDgp { n_groups: 0, ..Default::default() };
        assert!(generate_group_sparse(&dgp).is_err());
    }

    #[test]
    fn blobs_are_balanced() {
        let d = generate_blobs(&ClassBlobs::default()).unwrap();
        let Targets::Labels(l) = d.targets() else { panic!() };
        for c in 0..3 {
            assert_eq!(l.iter().filter(|&&x| x == c).count(), 50);
        }
    }
}
