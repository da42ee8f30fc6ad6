//! Synthetic Gaussian-blob datasets, index splits, and bit-exact file I/O.

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use rand_distr::StandardNormal;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::Path;

pub const DATASET_MAGIC: &[u8] = b"UUAD";

/// Feature matrix plus integer labels. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    d: usize,
    class_count: usize,
    features: Vec<f64>,
    labels: Vec<u32>,
}

impl Dataset {
    pub fn new(n: usize, d: usize, class_count: usize, features: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("dataset must hold at least one sample".into()));
        }
        if features.len() != n * d {
            return Err(Error::Shape(format!(
                "{n}x{d} dataset wants {} features, got {}",
                n * d,
                features.len()
            )));
        }
        if labels.len() != n {
            return Err(Error::Shape(format!("{n} samples but {} labels", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite feature".into()));
        }
        Ok(Dataset {
            n,
            d,
            class_count,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// New dataset holding the given rows, in the given order.
    pub fn gather(&self, idx: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(idx.len() * self.d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.n {
                return Err(Error::Index(format!("row {i} out of range ({} rows)", self.n)));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(idx.len(), self.d, self.class_count, features, labels)
    }
}

/// Gaussian class clusters around unit-norm random means scaled by `spread`.
/// Labels cycle round-robin so classes stay balanced.
pub fn gen_blobs(n: usize, d: usize, classes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if d < 1 {
        return Err(Error::Config("d must be at least 1".into()));
    }
    if classes < 1 || n < classes {
        return Err(Error::Config(format!("need n >= classes >= 1, got n={n}, classes={classes}")));
    }
    if spread <= 0.0 {
        return Err(Error::Config("spread must be positive".into()));
    }
    let mut r = rng::rng(seed);
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut m: Vec<f64> = (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut m {
            *v *= spread / norm;
        }
        means.push(m);
    }
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..d {
            let noise: f64 = r.sample(StandardNormal);
            features.push(means[c][j] + noise);
        }
        labels.push(c as u32);
    }
    Dataset::new(n, d, classes, features, labels)
}

/// Fractions of the dataset assigned to each role; must sum to 1.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub holdout: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            holdout: 0.15,
            test: 0.15,
        }
    }
}

/// Index sets partitioning a dataset. `adversary` indexes into `train`;
/// `victims` indexes into `test`; everything else is pairwise disjoint.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub adversary: Vec<usize>,
    pub holdout: Vec<usize>,
    pub victims: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for set in [&self.train, &self.holdout, &self.test] {
            for &i in set {
                if i >= n {
                    return Err(Error::Index(format!("split index {i} out of range")));
                }
                if seen[i] {
                    return Err(Error::Config(format!("index {i} appears in two splits")));
                }
                seen[i] = true;
            }
        }
        if self.train.len() + self.holdout.len() + self.test.len() != n {
            return Err(Error::Config("splits do not cover the dataset".into()));
        }
        let in_train: std::collections::HashSet<usize> = self.train.iter().copied().collect();
        if !self.adversary.iter().all(|i| in_train.contains(i)) {
            return Err(Error::Config("adversary set must be a subset of train".into()));
        }
        let in_test: std::collections::HashSet<usize> = self.test.iter().copied().collect();
        if !self.victims.iter().all(|i| in_test.contains(i)) {
            return Err(Error::Config("victims must come from the test split".into()));
        }
        Ok(())
    }
}

/// Shuffle indices, cut train/holdout/test, then draw the adversary-visible
/// subset from train and the victim targets from test. Victims are only drawn
/// from test rows whose true class also occurs in the holdout split, so every
/// victim has a nonempty same-class reference pool.
pub fn split(
    ds: &Dataset,
    fractions: SplitFractions,
    adversary_fraction: f64,
    victim_count: usize,
    seed: u64,
) -> Result<Splits> {
    let sum = fractions.train + fractions.holdout + fractions.test;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
    }
    if !(0.0..=1.0).contains(&adversary_fraction) {
        return Err(Error::Config("adversary fraction outside [0,1]".into()));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::rng(seed);
    fisher_yates(&mut order, &mut r);

    let n_train = (fractions.train * n as f64).floor() as usize;
    let n_holdout = (fractions.holdout * n as f64).floor() as usize;
    let train: Vec<usize> = order[..n_train].to_vec();
    let holdout: Vec<usize> = order[n_train..n_train + n_holdout].to_vec();
    let test: Vec<usize> = order[n_train + n_holdout..].to_vec();
    if victim_count > test.len() {
        return Err(Error::Config(format!(
            "cannot draw {victim_count} victims from a test split of {}",
            test.len()
        )));
    }

    let n_adv = (adversary_fraction * n_train as f64).round() as usize;
    let mut train_order = train.clone();
    fisher_yates(&mut train_order, &mut r);
    let mut adversary: Vec<usize> = train_order[..n_adv].to_vec();
    adversary.sort_unstable();

    let holdout_classes: std::collections::HashSet<usize> =
        holdout.iter().map(|&i| ds.label(i)).collect();
    let mut eligible: Vec<usize> = test
        .iter()
        .copied()
        .filter(|&i| holdout_classes.contains(&ds.label(i)))
        .collect();
    if victim_count > eligible.len() {
        return Err(Error::Config(format!(
            "only {} test rows have a same-class holdout sample; cannot draw {victim_count} victims",
            eligible.len()
        )));
    }
    fisher_yates(&mut eligible, &mut r);
    let mut victims: Vec<usize> = eligible[..victim_count].to_vec();
    victims.sort_unstable();

    let splits = Splits {
        train,
        adversary,
        holdout,
        victims,
        test,
    };
    splits.validate(n)?;
    Ok(splits)
}

/// In-place Fisher-Yates; kept local so shuffles never depend on `rand`
/// internals that might change between releases.
fn fisher_yates<T>(xs: &mut [T], r: &mut impl Rng) {
    for i in (1..xs.len()).rev() {
        let j = r.gen_range(0..=i);
        xs.swap(i, j);
    }
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.bytes(DATASET_MAGIC)?;
    w.u32(1)?;
    w.u32(ds.n as u32)?;
    w.u32(ds.d as u32)?;
    w.u32(ds.class_count as u32)?;
    w.f32s(ds.features.iter().map(|&v| v as f32))?;
    for &l in &ds.labels {
        w.u32(l)?;
    }
    w.flush()
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    r.magic(DATASET_MAGIC)?;
    let version = r.u32("version")?;
    if version != 1 {
        return Err(Error::format_at(4, format!("unsupported version {version}")));
    }
    let n = r.u32("sample count")? as usize;
    let d = r.u32("feature dim")? as usize;
    let c = r.u32("class count")? as usize;
    let features: Vec<f64> = r.f32s(n * d, "features")?.into_iter().map(f64::from).collect();
    let labels = r.u32s(n, "labels")?;
    r.expect_eof()?;
    Dataset::new(n, d, c, features, labels)
}

/// CSV import for small fixtures. Header must be `f0,..,f{d-1},label`.
pub fn read_csv(path: &Path) -> Result<Dataset> {
    let file = BufReader::new(File::open(path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Empty("csv has no header".into()))??;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() < 2 || *cols.last().unwrap() != "label" {
        return Err(Error::Config("csv header must be f0..f{d-1},label".into()));
    }
    let d = cols.len() - 1;
    for (j, col) in cols[..d].iter().enumerate() {
        if *col != format!("f{j}") {
            return Err(Error::Config(format!("unexpected csv column {col}, wanted f{j}")));
        }
    }
    let mut features = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != d + 1 {
            return Err(Error::Config(format!(
                "csv row {} has {} fields, wanted {}",
                lineno + 2,
                parts.len(),
                d + 1
            )));
        }
        for p in &parts[..d] {
            features.push(p.parse::<f64>().map_err(|e| Error::Config(format!("csv row {}: {e}", lineno + 2)))?);
        }
        labels.push(
            parts[d]
                .parse::<u32>()
                .map_err(|e| Error::Config(format!("csv row {}: {e}", lineno + 2)))?,
        );
    }
    let n = labels.len();
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    Dataset::new(n, d, classes, features, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_blobs_all_labeled_zero() {
        let ds = gen_blobs(20, 3, 1, 2.0, 0).unwrap();
        assert!(ds.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn blobs_are_deterministic_per_seed() {
        let a = gen_blobs(100, 4, 3, 1.5, 7).unwrap();
        let b = gen_blobs(100, 4, 3, 1.5, 7).unwrap();
        let c = gen_blobs(100, 4, 3, 1.5, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn blobs_reject_bad_config() {
        assert!(gen_blobs(10, 0, 2, 1.0, 0).is_err());
        assert!(gen_blobs(1, 3, 2, 1.0, 0).is_err());
        assert!(gen_blobs(10, 3, 2, 0.0, 0).is_err());
    }

    #[test]
    fn widely_spread_blobs_are_linearly_separable() {
        // Train-and-check oracle: a closed-form least-squares probe against
        // one-hot targets must reach 99% accuracy when clusters are far apart.
        let ds = gen_blobs(1000, 8, 4, 10.0, 3).unwrap();
        let d = ds.dim();
        let c = ds.class_count();
        let p = d + 1;
        // Normal equations A w_k = b_k with a small ridge for conditioning.
        let mut a = vec![0.0f64; p * p];
        let mut b = vec![0.0f64; p * c];
        for i in 0..ds.len() {
            let mut x = ds.row(i).to_vec();
            x.push(1.0);
            for r in 0..p {
                for s in 0..p {
                    a[r * p + s] += x[r] * x[s];
                }
                for k in 0..c {
                    let t = if ds.label(i) == k { 1.0 } else { 0.0 };
                    b[r * c + k] += x[r] * t;
                }
            }
        }
        for r in 0..p {
            a[r * p + r] += 1e-8;
        }
        // Gaussian elimination with partial pivoting on [A | B].
        for col in 0..p {
            let piv = (col..p)
                .max_by(|&i, &j| a[i * p + col].abs().partial_cmp(&a[j * p + col].abs()).unwrap())
                .unwrap();
            for s in 0..p {
                a.swap(col * p + s, piv * p + s);
            }
            for k in 0..c {
                b.swap(col * c + k, piv * c + k);
            }
            let diag = a[col * p + col];
            for r in 0..p {
                if r == col {
                    continue;
                }
                let f = a[r * p + col] / diag;
                for s in 0..p {
                    a[r * p + s] -= f * a[col * p + s];
                }
                for k in 0..c {
                    b[r * c + k] -= f * b[col * c + k];
                }
            }
        }
        let mut w = vec![0.0f64; p * c];
        for r in 0..p {
            for k in 0..c {
                w[r * c + k] = b[r * c + k] / a[r * p + r];
            }
        }
        let mut correct = 0;
        for i in 0..ds.len() {
            let mut x = ds.row(i).to_vec();
            x.push(1.0);
            let mut best = (0, f64::NEG_INFINITY);
            for k in 0..c {
                let score: f64 = (0..p).map(|r| x[r] * w[r * c + k]).sum();
                if score > best.1 {
                    best = (k, score);
                }
            }
            if best.0 == ds.label(i) {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc >= 0.99, "linear probe accuracy {acc}");
    }

    #[test]
    fn split_respects_invariants_and_is_deterministic() {
        let ds = gen_blobs(200, 4, 4, 3.0, 5).unwrap();
        let f = SplitFractions::default();
        let a = split(&ds, f, 0.5, 10, 11).unwrap();
        let b = split(&ds, f, 0.5, 10, 11).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.victims, b.victims);
        a.validate(ds.len()).unwrap();
        assert_eq!(a.victims.len(), 10);
    }

    #[test]
    fn full_adversary_fraction_exposes_whole_train_split() {
        let ds = gen_blobs(100, 3, 2, 3.0, 5).unwrap();
        let s = split(&ds, SplitFractions::default(), 1.0, 0, 2).unwrap();
        let mut train = s.train.clone();
        train.sort_unstable();
        assert_eq!(s.adversary, train);
        assert!(s.victims.is_empty());
    }

    #[test]
    fn dataset_io_round_trips_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.uuad");
        let ds = gen_blobs(50, 6, 3, 2.0, 9).unwrap();
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.labels(), ds.labels());
        for i in 0..ds.len() {
            for (a, b) in back.row(i).iter().zip(ds.row(i)) {
                assert_eq!(*a, *b as f32 as f64);
            }
        }
    }

    #[test]
    fn corrupted_magic_is_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.uuad");
        std::fs::write(&path, b"NOPE").unwrap();
        match read_dataset(&path) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn handcrafted_file_parses_to_expected_values() {
        // n=3, d=2, C=2 file written byte by byte.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"UUAD");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for v in [1.0f32, -2.0, 0.5, 3.25, -0.125, 7.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for l in [0u32, 1, 1] {
            bytes.extend_from_slice(&l.to_le_bytes());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hand.uuad");
        std::fs::write(&path, &bytes).unwrap();
        let ds = read_dataset(&path).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.row(0), &[1.0, -2.0]);
        assert_eq!(ds.row(1), &[0.5, 3.25]);
        assert_eq!(ds.row(2), &[-0.125, 7.0]);
        assert_eq!(ds.labels(), &[0, 1, 1]);
    }

    #[test]
    fn csv_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.csv");
        std::fs::write(&path, "f0,f1,label\n0.5,-1.0,0\n2.0,3.0,1\n").unwrap();
        let ds = read_csv(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.row(1), &[2.0, 3.0]);
        assert_eq!(ds.label(1), 1);
    }
}
