//! Synthetic dataset generators, CSV ingestion, and deterministic batching.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Batch, Targets};
use crate::oracle::QuadraticProblem;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Targets,
    pub split: Split,
    /// Generator name + seed, or source file path.
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Placeholder dataset whose row indices address the problem's
    /// instances, so quadratic problems run through the generic loop.
    pub fn from_quadratic(p: &QuadraticProblem) -> Dataset {
        let n = p.len();
        Dataset {
            inputs: Tensor::zeros(vec![n, 1]),
            targets: Targets::Values(Tensor::zeros(vec![n, 1])),
            split: Split::Train,
            provenance: format!("quadratic n={n} dim={}", p.dim()),
        }
    }
}

/// Standardize each feature column to zero mean / unit variance in place.
fn standardize(inputs: &mut Tensor) {
    let (n, d) = (inputs.rows(), inputs.cols());
    for j in 0..d {
        let mut mean = 0.0;
        for i in 0..n {
            mean += inputs.data()[i * d + j];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for i in 0..n {
            let v = inputs.data()[i * d + j] - mean;
            var += v * v;
        }
        var /= n as f64;
        let std = var.sqrt();
        let scale = if std > 0.0 { 1.0 / std } else { 1.0 };
        for i in 0..n {
            let v = &mut inputs.data_mut()[i * d + j];
            *v = (*v - mean) * scale;
        }
    }
}

/// Raw two-moons points before standardization: class 0 on the upper unit
/// half-circle, class 1 on a lower half-circle shifted right and down.
pub fn two_moons_raw(n: usize, noise: f64, seed: u64) -> Result<(Vec<[f64; 2]>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "two-moons needs n >= 2, got {n}"
        )));
    }
    if noise < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "noise must be nonnegative, got {noise}"
        )));
    }
    let mut rng = Rng::new(seed);
    let n0 = n - n / 2;
    let n1 = n / 2;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n0 {
        let t = std::f64::consts::PI * i as f64 / (n0.max(2) - 1) as f64;
        points.push([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n1 {
        let t = std::f64::consts::PI * i as f64 / (n1.max(2) - 1) as f64;
        points.push([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise > 0.0 {
        for p in points.iter_mut() {
            p[0] += rng.normal(noise);
            p[1] += rng.normal(noise);
        }
    }
    Ok((points, labels))
}

/// Two interleaved half-circles, balanced classes, standardized features.
pub fn make_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let (points, labels) = two_moons_raw(n, noise, seed)?;
    let flat: Vec<f64> = points.iter().flat_map(|p| p.to_vec()).collect();
    let mut inputs = Tensor::new(vec![n, 2], flat)?;
    standardize(&mut inputs);
    Ok(Dataset {
        inputs,
        targets: Targets::Classes(labels),
        split: Split::Train,
        provenance: format!("two-moons n={n} noise={noise} seed={seed}"),
    })
}

/// Two Gaussian class blobs with centers two units apart along the
/// all-ones diagonal; `noise` is the per-coordinate standard deviation.
pub fn make_blobs(n: usize, dims: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || dims == 0 {
        return Err(Error::InvalidParameter(format!(
            "blobs need n >= 2 and dims >= 1, got n={n} dims={dims}"
        )));
    }
    if noise < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "noise must be nonnegative, got {noise}"
        )));
    }
    let mut rng = Rng::new(seed);
    let center: Vec<f64> = (0..dims).map(|_| 1.0 / (dims as f64).sqrt()).collect();
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let cls = i % 2;
        let sign = if cls == 0 { -1.0 } else { 1.0 };
        for c in &center {
            data.push(sign * c + rng.normal(noise));
        }
        labels.push(cls);
    }
    Ok(Dataset {
        inputs: Tensor::new(vec![n, dims], data)?,
        targets: Targets::Classes(labels),
        split: Split::Train,
        provenance: format!("blobs n={n} dims={dims} noise={noise} seed={seed}"),
    })
}

/// Linear regression data y = A x + noise with x standard normal; the true
/// map A (dims -> 1) is returned alongside for diagnostics.
pub fn make_linreg(n: usize, dims: usize, noise: f64, seed: u64) -> Result<(Dataset, Vec<f64>)> {
    if n < 2 || dims == 0 {
        return Err(Error::InvalidParameter(format!(
            "linreg needs n >= 2 and dims >= 1, got n={n} dims={dims}"
        )));
    }
    let mut rng = Rng::new(seed);
    let true_map: Vec<f64> = (0..dims).map(|_| rng.normal(1.0)).collect();
    let mut inputs = Vec::with_capacity(n * dims);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..dims).map(|_| rng.normal(1.0)).collect();
        let mut y: f64 = x.iter().zip(&true_map).map(|(a, b)| a * b).sum();
        if noise > 0.0 {
            y += rng.normal(noise);
        }
        inputs.extend(x);
        targets.push(y);
    }
    Ok((
        Dataset {
            inputs: Tensor::new(vec![n, dims], inputs)?,
            targets: Targets::Values(Tensor::new(vec![n, 1], targets)?),
            split: Split::Train,
            provenance: format!("linreg n={n} dims={dims} noise={noise} seed={seed}"),
        },
        true_map,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub target_column: String,
    pub task: TaskKind,
}

/// Parse a header-rowed CSV into a dataset. Feature columns are every
/// column except the target, in header order; row order is preserved.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::CsvParse {
        path: display.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let target_idx = columns
        .iter()
        .position(|c| *c == schema.target_column)
        .ok_or_else(|| Error::CsvParse {
            path: display.clone(),
            line: 1,
            msg: format!(
                "target column '{}' not found in header {:?}",
                schema.target_column, columns
            ),
        })?;
    let d = columns.len() - 1;
    if d == 0 {
        return Err(Error::CsvParse {
            path: display,
            line: 1,
            msg: "no feature columns".into(),
        });
    }

    let mut features = Vec::new();
    let mut classes = Vec::new();
    let mut values = Vec::new();
    let mut n = 0usize;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(Error::CsvParse {
                path: display,
                line: lineno,
                msg: format!("expected {} cells, got {}", columns.len(), cells.len()),
            });
        }
        for (j, cell) in cells.iter().enumerate() {
            if j == target_idx {
                match schema.task {
                    TaskKind::Classification => {
                        let v: usize = cell.parse().map_err(|_| Error::CsvParse {
                            path: display.clone(),
                            line: lineno,
                            msg: format!("class label '{cell}' is not a nonnegative integer"),
                        })?;
                        classes.push(v);
                    }
                    TaskKind::Regression => {
                        let v: f64 = cell.parse().map_err(|_| Error::CsvParse {
                            path: display.clone(),
                            line: lineno,
                            msg: format!("target '{cell}' is not numeric"),
                        })?;
                        values.push(v);
                    }
                }
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::CsvParse {
                    path: display.clone(),
                    line: lineno,
                    msg: format!("cell '{cell}' in column '{}' is not numeric", columns[j]),
                })?;
                features.push(v);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::CsvParse {
            path: display,
            line: 1,
            msg: "no data rows".into(),
        });
    }
    let targets = match schema.task {
        TaskKind::Classification => Targets::Classes(classes),
        TaskKind::Regression => Targets::Values(Tensor::new(vec![n, 1], values)?),
    };
    Ok(Dataset {
        inputs: Tensor::new(vec![n, d], features)?,
        targets,
        split: Split::Train,
        provenance: display,
    })
}

/// Write a dataset as CSV: features f0..f{d-1} then the target column.
/// f64 values use shortest round-trip formatting, so a load/save cycle is
/// bit-identical.
pub fn save_csv(dataset: &Dataset, path: &Path, target_column: &str) -> Result<()> {
    let d = dataset.feature_dim();
    let mut out = String::new();
    for j in 0..d {
        write!(out, "f{j},").expect("string write");
    }
    out.push_str(target_column);
    out.push('\n');
    for i in 0..dataset.len() {
        for v in dataset.inputs.row(i) {
            write!(out, "{v},").expect("string write");
        }
        match &dataset.targets {
            Targets::Classes(c) => write!(out, "{}", c[i]).expect("string write"),
            Targets::Values(t) => write!(out, "{}", t.row(i)[0]).expect("string write"),
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Split a dataset's rows into batches of size `n`; the final short batch is
/// kept. With `shuffle` the order is a seeded permutation drawn from `rng`
/// (one draw per call, so each epoch reshuffles).
pub fn batches(dataset: &Dataset, n: usize, rng: &mut Rng, shuffle: bool) -> Result<Vec<Batch>> {
    if n == 0 {
        return Err(Error::InvalidParameter("batch size must be >= 1".into()));
    }
    let m = dataset.len();
    let order: Vec<usize> = if shuffle {
        rng.permutation(m)
    } else {
        (0..m).collect()
    };
    let mut out = Vec::with_capacity(m.div_ceil(n));
    for chunk in order.chunks(n) {
        out.push(Batch::new(
            dataset.inputs.gather_rows(chunk),
            dataset.targets.select(chunk),
            chunk.to_vec(),
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    #[test]
    fn two_moons_noiseless_points_on_half_circles() {
        let (points, labels) = two_moons_raw(40, 0.0, 0).unwrap();
        for (p, l) in points.iter().zip(&labels) {
            let (x, y) = (p[0], p[1]);
            if *l == 0 {
                assert!((x * x + y * y - 1.0).abs() < 1e-12, "({x},{y})");
                assert!(y >= -1e-12);
            } else {
                let (cx, cy) = (x - 1.0, y - 0.5);
                assert!((cx * cx + cy * cy - 1.0).abs() < 1e-12, "({x},{y})");
                assert!(cy <= 1e-12);
            }
        }
    }

    #[test]
    fn two_moons_deterministic_and_balanced() {
        let a = make_two_moons(101, 0.2, 7).unwrap();
        let b = make_two_moons(101, 0.2, 7).unwrap();
        assert_eq!(a.inputs.data(), b.inputs.data());
        if let (Targets::Classes(ca), Targets::Classes(cb)) = (&a.targets, &b.targets) {
            assert_eq!(ca, cb);
            let ones = ca.iter().filter(|&&c| c == 1).count();
            assert_eq!(ones, 50);
        } else {
            panic!("two moons has class targets");
        }
    }

    #[test]
    fn two_moons_standardized() {
        let ds = make_two_moons(500, 0.25, 3).unwrap();
        let d = ds.feature_dim();
        for j in 0..d {
            let col: Vec<f64> = (0..ds.len()).map(|i| ds.inputs.row(i)[j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn two_moons_rejects_tiny_n() {
        assert!(make_two_moons(1, 0.1, 0).is_err());
    }

    #[test]
    fn blobs_widely_separated_are_linearly_separable() {
        // Separation 2 with sigma 0.2 = 10 sigma.
        let ds = make_blobs(400, 3, 0.2, 1).unwrap();
        let Targets::Classes(labels) = &ds.targets else {
            panic!()
        };
        // Project on the center axis; the sign should classify perfectly.
        let axis = 1.0 / 3f64.sqrt();
        for i in 0..ds.len() {
            let proj: f64 = ds.inputs.row(i).iter().map(|v| v * axis).sum();
            let pred = usize::from(proj > 0.0);
            assert_eq!(pred, labels[i], "row {i} proj {proj}");
        }
    }

    #[test]
    fn linreg_noiseless_targets_match_map() {
        let (ds, a) = make_linreg(50, 4, 0.0, 9).unwrap();
        let Targets::Values(t) = &ds.targets else { panic!() };
        for i in 0..ds.len() {
            let y: f64 = ds.inputs.row(i).iter().zip(&a).map(|(x, w)| x * w).sum();
            assert_eq!(y, t.row(i)[0]);
        }
    }

    #[test]
    fn csv_round_trip_bit_identical() {
        let dir = std::env::temp_dir().join("sharpopt-data-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("moons.csv");
        let ds = make_two_moons(30, 0.3, 11).unwrap();
        save_csv(&ds, &path, "target").unwrap();
        let schema = CsvSchema {
            target_column: "target".into(),
            task: TaskKind::Classification,
        };
        let loaded = load_csv(&path, &schema).unwrap();
        assert_eq!(loaded.len(), ds.len());
        for (a, b) in loaded.inputs.data().iter().zip(ds.inputs.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(loaded.targets, ds.targets);
    }

    #[test]
    fn csv_missing_target_column_names_it() {
        let dir = std::env::temp_dir().join("sharpopt-data-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        let schema = CsvSchema {
            target_column: "label".into(),
            task: TaskKind::Classification,
        };
        let err = load_csv(&path, &schema).unwrap_err();
        assert!(err.to_string().contains("label"), "{err}");
    }

    #[test]
    fn csv_ragged_row_reports_line_number() {
        let dir = std::env::temp_dir().join("sharpopt-data-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ragged.csv");
        std::fs::write(&path, "a,b,target\n1,2,0\n1,2\n").unwrap();
        let schema = CsvSchema {
            target_column: "target".into(),
            task: TaskKind::Classification,
        };
        let err = load_csv(&path, &schema).unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");
    }

    #[test]
    fn csv_non_numeric_cell_reports_line() {
        let dir = std::env::temp_dir().join("sharpopt-data-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("nonnum.csv");
        std::fs::write(&path, "a,target\n1,0\nx,1\n").unwrap();
        let schema = CsvSchema {
            target_column: "target".into(),
            task: TaskKind::Classification,
        };
        let err = load_csv(&path, &schema).unwrap_err();
        assert!(err.to_string().contains(":3:") && err.to_string().contains("'x'"), "{err}");
    }

    #[test]
    fn batch_sizes_with_short_tail() {
        let ds = make_two_moons(10, 0.1, 0).unwrap();
        let got: Vec<usize> = batches(&ds, 3, &mut Rng::new(0), false)
            .unwrap()
            .iter()
            .map(Batch::len)
            .collect();
        assert_eq!(got, vec![3, 3, 3, 1]);
    }

    #[test]
    fn unshuffled_batches_preserve_order() {
        let ds = make_two_moons(8, 0.1, 0).unwrap();
        let bs = batches(&ds, 4, &mut Rng::new(0), false).unwrap();
        assert_eq!(bs[0].instance_ids, vec![0, 1, 2, 3]);
        assert_eq!(bs[1].instance_ids, vec![4, 5, 6, 7]);
    }

    proptest! {
        #[test]
        fn every_epoch_is_a_partition(
            m in 2usize..60,
            n in 1usize..10,
            seed in 0u64..100,
            shuffle in proptest::bool::ANY,
        ) {
            let ds = make_two_moons(m, 0.2, 1).unwrap();
            let bs = batches(&ds, n, &mut Rng::new(seed), shuffle).unwrap();
            let mut seen: Vec<usize> = bs.iter().flat_map(|b| b.instance_ids.clone()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..m).collect::<Vec<_>>());
        }
    }
}
