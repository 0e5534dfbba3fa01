//! Datasets: synthetic domain-shift generators, feature-CSV ingestion, and
//! deterministic batching.
//!
//! Target datasets keep their labels for evaluation but hand training an
//! [`UnlabeledView`], a type with no label accessor at all, so the
//! unsupervised contract holds at compile time instead of by convention.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

/// Labeled or unlabeled feature vectors with their class count.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    features: Matrix,
    labels: Option<Vec<usize>>,
    num_classes: usize,
    name: String,
}

impl FeatureDataset {
    pub fn new(
        features: Matrix,
        labels: Option<Vec<usize>>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        let name = name.into();
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::EmptyDataset { name });
        }
        if let Some(labels) = &labels {
            if labels.len() != features.rows() {
                return Err(Error::dim(
                    "FeatureDataset",
                    features.shape(),
                    (labels.len(), 1),
                ));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::Config(format!(
                    "dataset '{name}': label {bad} exceeds {num_classes} classes"
                )));
            }
        }
        Ok(FeatureDataset {
            features,
            labels,
            num_classes,
            name,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// The features-only view handed to training code.
    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView {
            features: &self.features,
        }
    }

    /// Shuffled labeled batches for one epoch; see [`batch_indices`].
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: usize) -> Vec<Batch> {
        batch_indices(self.len(), batch_size, seed, epoch)
            .into_iter()
            .map(|idx| Batch {
                features: self.features.select_rows(&idx),
                labels: self
                    .labels
                    .as_ref()
                    .map(|l| idx.iter().map(|&i| l[i]).collect()),
            })
            .collect()
    }
}

/// Features-only view of a dataset. There is deliberately no way to reach
/// labels through this type:
///
/// ```compile_fail
/// use uda_core::data::UnlabeledView;
/// fn peek(v: UnlabeledView<'_>) -> Option<&[usize]> {
///     v.labels() // no such method: the training path cannot see labels
/// }
/// ```
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledView<'a> {
    features: &'a Matrix,
}

impl<'a> UnlabeledView<'a> {
    pub fn features(&self) -> &'a Matrix {
        self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shuffled feature batches for one epoch; see [`batch_indices`].
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: usize) -> Vec<Matrix> {
        batch_indices(self.len(), batch_size, seed, epoch)
            .into_iter()
            .map(|idx| self.features.select_rows(&idx))
            .collect()
    }
}

/// One labeled batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
}

/// Deterministic epoch batching: a Fisher-Yates shuffle keyed by
/// `(seed, epoch)` chunked into `batch_size` groups. A trailing one-row
/// batch is dropped so covariance-based losses never see a degenerate batch;
/// trailing batches of two or more rows are kept.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    let mut stream = rng::indexed_stream(seed, "batch-shuffle", epoch as u64);
    for i in (1..n).rev() {
        let j = stream.random_range(0..=i);
        order.swap(i, j);
    }
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if let Some(last) = out.last() {
        if last.len() < batch_size && last.len() < 2 {
            out.pop();
        }
    }
    out
}

/// A label-preserving affine distortion of the feature space: scale, then
/// rotate in the first two dimensions, then translate.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSpec {
    /// Rotation angle in radians, applied to dimensions 0 and 1.
    pub rotation: f64,
    /// Added to every point; length must match the feature dimension.
    pub translation: Vec<f64>,
    /// Multiplies every coordinate; must be positive.
    pub scale: f64,
}

impl ShiftSpec {
    pub fn identity(dim: usize) -> Self {
        ShiftSpec {
            rotation: 0.0,
            translation: vec![0.0; dim],
            scale: 1.0,
        }
    }

    pub fn translation(translation: Vec<f64>) -> Self {
        ShiftSpec {
            rotation: 0.0,
            translation,
            scale: 1.0,
        }
    }

    pub fn rotation(dim: usize, radians: f64) -> Self {
        ShiftSpec {
            rotation: radians,
            translation: vec![0.0; dim],
            scale: 1.0,
        }
    }

    /// Shifts here never touch labels; a transformed point keeps the label
    /// of the point it was generated as.
    pub fn label_preserving(&self) -> bool {
        true
    }

    fn is_identity(&self) -> bool {
        self.rotation == 0.0 && self.scale == 1.0 && self.translation.iter().all(|&t| t == 0.0)
    }

    /// Apply to every row. The identity spec returns the input bit-for-bit.
    pub fn apply(&self, points: &Matrix) -> Result<Matrix> {
        if self.translation.len() != points.cols() {
            return Err(Error::Config(format!(
                "shift translation has {} entries for {}-dimensional data",
                self.translation.len(),
                points.cols()
            )));
        }
        if self.scale <= 0.0 {
            return Err(Error::Config("shift scale must be > 0".into()));
        }
        if self.is_identity() {
            return Ok(points.clone());
        }
        let (sin, cos) = self.rotation.sin_cos();
        Ok(Matrix::from_fn(points.rows(), points.cols(), |i, j| {
            let scaled = |c: usize| points.get(i, c) * self.scale;
            let rotated = if self.rotation != 0.0 && j < 2 && points.cols() >= 2 {
                if j == 0 {
                    cos * scaled(0) - sin * scaled(1)
                } else {
                    sin * scaled(0) + cos * scaled(1)
                }
            } else {
                scaled(j)
            };
            rotated + self.translation[j]
        }))
    }
}

/// Radius of the circle the Gaussian class means sit on.
const GAUSSIAN_MEAN_RADIUS: f64 = 3.0;

fn gaussian_draw(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    seed: u64,
    tag: &str,
) -> (Matrix, Vec<usize>) {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut stream = rng::stream(seed, tag);
    let n = num_classes * per_class;
    let mut features = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for class in 0..num_classes {
        let angle = 2.0 * std::f64::consts::PI * class as f64 / num_classes as f64;
        let mut mean = vec![0.0; dim];
        mean[0] = GAUSSIAN_MEAN_RADIUS * angle.cos();
        mean[1] = GAUSSIAN_MEAN_RADIUS * angle.sin();
        for k in 0..per_class {
            let row = class * per_class + k;
            for j in 0..dim {
                features.set(row, j, mean[j] + normal.sample(&mut stream));
            }
            labels.push(class);
        }
    }
    (features, labels)
}

/// Unit-variance Gaussian class clusters with means on a circle of radius 3;
/// the target domain is an independent draw from the same process pushed
/// through `shift`. Target labels are retained for evaluation only.
pub fn gen_gaussian_shift(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    shift: &ShiftSpec,
    seed: u64,
) -> Result<(FeatureDataset, FeatureDataset)> {
    if per_class < 2 || dim < 2 || num_classes < 2 {
        return Err(Error::Config(format!(
            "gaussian generator needs >= 2 classes, >= 2 per class, dim >= 2 \
             (got {num_classes}, {per_class}, {dim})"
        )));
    }
    let (src_x, src_y) = gaussian_draw(num_classes, per_class, dim, seed, "gauss-source");
    // the target draw never consumes from the source stream, and the shift
    // parameters never influence the draw itself
    let (tgt_base, tgt_y) = gaussian_draw(num_classes, per_class, dim, seed, "gauss-target");
    let tgt_x = shift.apply(&tgt_base)?;
    Ok((
        FeatureDataset::new(src_x, Some(src_y), num_classes, "gauss-source")?,
        FeatureDataset::new(tgt_x, Some(tgt_y), num_classes, "gauss-target")?,
    ))
}

fn moons_draw(per_class: usize, noise_std: f64, seed: u64, tag: &str) -> (Matrix, Vec<usize>) {
    let mut stream = rng::stream(seed, tag);
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("non-negative std");
    let n = 2 * per_class;
    let mut features = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    // two interleaved half-circles, centered at the origin so that rotations
    // act about the data center
    for class in 0..2 {
        for k in 0..per_class {
            let t = stream.random_range(0.0..std::f64::consts::PI);
            let (raw_x, raw_y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let row = class * per_class + k;
            let nx: f64 = if noise_std > 0.0 {
                noise.sample(&mut stream)
            } else {
                0.0
            };
            let ny: f64 = if noise_std > 0.0 {
                noise.sample(&mut stream)
            } else {
                0.0
            };
            features.set(row, 0, raw_x - 0.5 + nx);
            features.set(row, 1, raw_y - 0.25 + ny);
            labels.push(class);
        }
    }
    (features, labels)
}

/// Two interleaved half-circles (two classes); the target domain is an
/// independent draw rotated by `rotation` radians about the origin.
pub fn gen_two_moons_shift(
    per_class: usize,
    noise_std: f64,
    rotation: f64,
    seed: u64,
) -> Result<(FeatureDataset, FeatureDataset)> {
    if per_class < 2 {
        return Err(Error::Config(format!(
            "moons generator needs >= 2 points per class, got {per_class}"
        )));
    }
    let (src_x, src_y) = moons_draw(per_class, noise_std, seed, "moons-source");
    let (tgt_base, tgt_y) = moons_draw(per_class, noise_std, seed, "moons-target");
    let tgt_x = ShiftSpec::rotation(2, rotation).apply(&tgt_base)?;
    Ok((
        FeatureDataset::new(src_x, Some(src_y), 2, "moons-source")?,
        FeatureDataset::new(tgt_x, Some(tgt_y), 2, "moons-target")?,
    ))
}

/// Read a feature CSV. The header must be `f0,...,f{d-1}` with an optional
/// trailing `label` column; every cell is a decimal numeral. With
/// `labeled = false` the label column, if present, is ignored entirely.
pub fn load_csv(path: &Path, labeled: bool) -> Result<FeatureDataset> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::CsvFormat {
            path: display.clone(),
            msg: e.to_string(),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::CsvFormat {
            path: display.clone(),
            msg: e.to_string(),
        })?
        .clone();
    let mut fields: Vec<&str> = headers.iter().collect();
    let has_label_col = fields.last() == Some(&"label");
    if has_label_col {
        fields.pop();
    }
    let dim = fields.len();
    if dim == 0 {
        return Err(Error::CsvFormat {
            path: display,
            msg: "no feature columns in header".into(),
        });
    }
    for (i, name) in fields.iter().enumerate() {
        if *name != format!("f{i}") {
            return Err(Error::CsvFormat {
                path: display,
                msg: format!("expected header column 'f{i}', found '{name}'"),
            });
        }
    }
    if labeled && !has_label_col {
        return Err(Error::CsvFormat {
            path: display,
            msg: "labeled load requested but no 'label' column present".into(),
        });
    }

    let mut data = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut rows = 0u64;
    for record in reader.records() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { pos, len, .. } => Error::CsvWidth {
                path: display.clone(),
                line: pos.as_ref().map(|p| p.line()).unwrap_or(0),
                expected: dim + usize::from(has_label_col),
                found: *len as usize,
            },
            _ => Error::CsvFormat {
                path: display.clone(),
                msg: e.to_string(),
            },
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        for (col, cell) in record.iter().take(dim).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::CsvCell {
                path: display.clone(),
                line,
                col,
                msg: format!("'{cell}' is not a number"),
            })?;
            data.push(v);
        }
        if labeled {
            let cell = record.get(dim).unwrap_or("");
            let v: i64 = cell.trim().parse().map_err(|_| Error::CsvCell {
                path: display.clone(),
                line,
                col: dim,
                msg: format!("'{cell}' is not an integer label"),
            })?;
            if v < 0 {
                return Err(Error::CsvCell {
                    path: display.clone(),
                    line,
                    col: dim,
                    msg: format!("label {v} marks an unlabeled row; load with labeled=false"),
                });
            }
            labels.push(v as usize);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::CsvFormat {
            path: display,
            msg: "file has a header but no data rows".into(),
        });
    }
    let features = Matrix::new(rows as usize, dim, data)?;
    let num_classes = labels.iter().max().map(|&m| m + 1).unwrap_or(0);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| display.clone());
    FeatureDataset::new(
        features,
        if labeled { Some(labels) } else { None },
        num_classes.max(1),
        name,
    )
}

/// Write a dataset as CSV; values use the shortest decimal form that parses
/// back to the identical `f64`, so a write/load cycle is bit-exact.
pub fn write_csv(dataset: &FeatureDataset, path: &Path, include_labels: bool) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let dim = dataset.dim();
    let with_labels = include_labels && dataset.labels().is_some();
    for j in 0..dim {
        if j > 0 {
            write!(out, ",")?;
        }
        write!(out, "f{j}")?;
    }
    if with_labels {
        write!(out, ",label")?;
    }
    writeln!(out)?;
    for i in 0..dataset.len() {
        for (j, v) in dataset.features().row(i).iter().enumerate() {
            if j > 0 {
                write!(out, ",")?;
            }
            write!(out, "{v}")?;
        }
        if with_labels {
            write!(out, ",{}", dataset.labels().unwrap()[i])?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_shift_returns_the_draw_unchanged() {
        let (_, tgt_id) = gen_gaussian_shift(3, 5, 2, &ShiftSpec::identity(2), 7).unwrap();
        let (base, base_y) = gaussian_draw(3, 5, 2, 7, "gauss-target");
        assert_eq!(tgt_id.features(), &base);
        assert_eq!(tgt_id.labels().unwrap(), &base_y[..]);
    }

    #[test]
    fn translation_moves_the_target_mean() {
        let shift = ShiftSpec::translation(vec![10.0, 0.0]);
        let (src, tgt) = gen_gaussian_shift(3, 200, 2, &shift, 3).unwrap();
        let ms = src.features().row_mean();
        let mt = tgt.features().row_mean();
        let n = src.len() as f64;
        // cluster spread dominates the stderr of the mean
        let stderr =
            (1.0 + GAUSSIAN_MEAN_RADIUS * GAUSSIAN_MEAN_RADIUS / 2.0_f64).sqrt() / n.sqrt();
        assert!((mt[0] - ms[0] - 10.0).abs() < 3.0 * stderr * 3.0);
        assert!((mt[1] - ms[1]).abs() < 3.0 * stderr * 3.0);
    }

    #[test]
    fn rotation_by_pi_swaps_antipodal_class_means() {
        // two classes sit at angles 0 and pi, so a rotation by pi swaps them
        let shift = ShiftSpec::rotation(2, std::f64::consts::PI);
        let (_, tgt) = gen_gaussian_shift(2, 400, 2, &shift, 5).unwrap();
        let labels = tgt.labels().unwrap();
        let mut mean0 = [0.0, 0.0];
        let mut n0 = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            if l == 0 {
                mean0[0] += tgt.features().get(i, 0);
                mean0[1] += tgt.features().get(i, 1);
                n0 += 1.0;
            }
        }
        // class 0 was generated at (+3, 0); rotated by pi it sits near (-3, 0)
        assert!((mean0[0] / n0 + GAUSSIAN_MEAN_RADIUS).abs() < 0.2);
        assert!((mean0[1] / n0).abs() < 0.2);
    }

    #[test]
    fn moons_rotation_acts_on_the_same_draw() {
        let (_, t0) = gen_two_moons_shift(50, 0.1, 0.0, 9).unwrap();
        let rot = 30.0f64.to_radians();
        let (_, t30) = gen_two_moons_shift(50, 0.1, rot, 9).unwrap();
        let expected = ShiftSpec::rotation(2, rot).apply(t0.features()).unwrap();
        assert_eq!(t30.features(), &expected);
        assert_eq!(t30.labels(), t0.labels());
    }

    #[test]
    fn moons_have_two_classes() {
        let (src, tgt) = gen_two_moons_shift(10, 0.0, 1.0, 1).unwrap();
        assert_eq!(src.num_classes(), 2);
        assert_eq!(tgt.num_classes(), 2);
        assert_eq!(src.len(), 20);
    }

    #[test]
    fn generators_are_deterministic_per_seed() {
        let a = gen_gaussian_shift(3, 4, 3, &ShiftSpec::identity(3), 42).unwrap();
        let b = gen_gaussian_shift(3, 4, 3, &ShiftSpec::identity(3), 42).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = gen_gaussian_shift(3, 4, 3, &ShiftSpec::identity(3), 43).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn batch_sizes_drop_one_row_tail() {
        let sizes: Vec<usize> = batch_indices(10, 3, 0, 1).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3]);
        let sizes: Vec<usize> = batch_indices(11, 3, 0, 1).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 2]);
        // full batches of one are not "short" and are kept
        let sizes: Vec<usize> = batch_indices(3, 1, 0, 1).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![1, 1, 1]);
    }

    #[test]
    fn batches_are_deterministic_and_a_permutation() {
        let a = batch_indices(17, 5, 3, 2);
        let b = batch_indices(17, 5, 3, 2);
        assert_eq!(a, b);
        assert_ne!(a, batch_indices(17, 5, 3, 3));
        let mut seen: Vec<usize> = a.into_iter().flatten().collect();
        seen.sort_unstable();
        seen.dedup();
        assert!(seen.len() <= 17);
        assert!(seen.iter().all(|&i| i < 17));
    }

    #[test]
    fn csv_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feats.csv");
        let mut stream = rng::stream(5, "csv-test");
        let features = Matrix::from_fn(7, 3, |_, _| stream.random_range(-10.0..10.0f64));
        let ds = FeatureDataset::new(features, Some(vec![0, 1, 2, 0, 1, 2, 0]), 3, "x").unwrap();
        write_csv(&ds, &path, true).unwrap();
        let loaded = load_csv(&path, true).unwrap();
        assert_eq!(loaded.features(), ds.features());
        assert_eq!(loaded.labels(), ds.labels());
        assert_eq!(loaded.num_classes(), 3);
    }

    #[test]
    fn csv_simple_labeled_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.csv");
        std::fs::write(&path, "f0,f1,label\n0.0,1.0,2\n").unwrap();
        let ds = load_csv(&path, true).unwrap();
        assert_eq!(ds.features().shape(), (1, 2));
        assert_eq!(ds.labels().unwrap(), &[2]);
        assert!(ds.num_classes() >= 3);
    }

    #[test]
    fn csv_label_column_ignored_when_unlabeled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.csv");
        std::fs::write(&path, "f0,f1,label\n0.0,1.0,2\n").unwrap();
        let ds = load_csv(&path, false).unwrap();
        assert!(ds.labels().is_none());
    }

    #[test]
    fn csv_ragged_row_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "f0,f1\n0.0,1.0\n2.0\n").unwrap();
        match load_csv(&path, false) {
            Err(Error::CsvWidth { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected CsvWidth, got {other:?}"),
        }
    }

    #[test]
    fn csv_bad_cell_names_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "f0,f1\n0.0,oops\n").unwrap();
        match load_csv(&path, false) {
            Err(Error::CsvCell { line, col, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(col, 1);
            }
            other => panic!("expected CsvCell, got {other:?}"),
        }
    }

    #[test]
    fn csv_negative_label_rejects_labeled_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("neg.csv");
        std::fs::write(&path, "f0,label\n0.5,-1\n").unwrap();
        assert!(load_csv(&path, true).is_err());
        assert!(load_csv(&path, false).is_ok());
    }

    #[test]
    fn csv_header_must_match_convention() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hdr.csv");
        std::fs::write(&path, "a,b\n0.0,1.0\n").unwrap();
        assert!(matches!(
            load_csv(&path, false),
            Err(Error::CsvFormat { .. })
        ));
    }

    #[test]
    fn dataset_rejects_label_out_of_range() {
        let m = Matrix::zeros(2, 2);
        assert!(FeatureDataset::new(m, Some(vec![0, 5]), 3, "bad").is_err());
    }
}
