//! Dataset loading (MNIST IDX, CIFAR-10 binary batches, tabular CSV), splits and batching.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled samples. `features` is `[N x ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Column descriptions for tabular data.
    pub columns: Vec<ColumnInfo>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() || features.rows() != labels.len() {
            return Err(Error::validation(format!(
                "{} feature rows against {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::validation(format!("label {l} at row {i} not below {classes}")));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
            columns: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample feature shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            columns: self.columns.clone(),
        }
    }

    /// Batch tensor and labels for the given sample indices.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Hex SHA-256 over shape, features and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.features.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.features.data() {
            h.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u32).to_le_bytes());
        }
        h.update((self.classes as u32).to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(at as u64, format!("truncated {what}")))
}

/// Parses an IDX image file into `[N x rows x cols]` pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            0,
            format!("magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x} for images"),
        ));
    }
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != need {
        return Err(Error::format(
            (16 + payload.len().min(need)) as u64,
            format!("image payload has {} bytes, header promises {need}", payload.len()),
        ));
    }
    Tensor::new(
        vec![n, rows, cols],
        payload.iter().map(|&b| b as f32 / 255.0).collect(),
    )
    .map_err(|e| Error::format(4, e.to_string()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x} for labels"),
        ));
    }
    let n = be_u32(bytes, 4, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::format(
            (8 + payload.len().min(n)) as u64,
            format!("label payload has {} bytes, header promises {n}", payload.len()),
        ));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Serializes `[N x rows x cols]` pixels in `[0, 1]` back to IDX bytes.
pub fn encode_idx_images(images: &Tensor) -> Vec<u8> {
    let s = images.shape();
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES_MAGIC, s[0] as u32, s[1] as u32, s[2] as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&p| (p * 255.0).round() as u8));
    out
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

/// Loads an IDX image/label file pair.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = parse_idx_images(&read_file(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read_file(labels_path.as_ref())?)?;
    if images.rows() != labels.len() {
        return Err(Error::format(
            4,
            format!("{} images but {} labels", images.rows(), labels.len()),
        ));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new(images, labels, classes)
}

/// Loads CIFAR-10 binary batches: records of one label byte and 3072 pixel bytes.
pub fn load_cifar_bin<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    const RECORD: usize = 1 + 3 * 32 * 32;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_file(path.as_ref())?;
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(Error::format(
                (bytes.len() / RECORD * RECORD) as u64,
                format!("{}: not a whole number of CIFAR records", path.as_ref().display()),
            ));
        }
        for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
            if rec[0] >= 10 {
                return Err(Error::format((i * RECORD) as u64, format!("label {} out of range", rec[0])));
            }
            labels.push(rec[0] as usize);
            pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::validation("no CIFAR batch files given"));
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10)
}

/// Column identified by header name or zero-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

impl ColumnRef {
    fn resolve(&self, header: &[String]) -> Result<usize> {
        match self {
            ColumnRef::Index(i) if *i < header.len() => Ok(*i),
            ColumnRef::Index(i) => Err(Error::config(format!(
                "column index {i} out of range ({} columns)",
                header.len()
            ))),
            ColumnRef::Name(n) => header
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| Error::config(format!("no column named {n:?}"))),
        }
    }
}

fn default_missing() -> Vec<String> {
    vec![String::new(), "?".into(), "NA".into()]
}

/// Column roles for a CSV file. Columns not listed are numeric features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub label: ColumnRef,
    #[serde(default)]
    pub categorical: Vec<ColumnRef>,
    #[serde(default)]
    pub ignore: Vec<ColumnRef>,
    /// Cell values (after trimming) treated as missing.
    #[serde(default = "default_missing")]
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

/// A feature column and the statistics fitted on the training partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnInfo {
    pub name: String,
    pub kind: ColumnKind,
    pub mean: f64,
    pub std: f64,
    /// Category codes in first-appearance order; the missing code is `categories.len()`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    /// Training-partition mean of the raw values, used to impute missing numeric cells.
    #[serde(default)]
    pub impute: f64,
}

#[derive(Debug, Clone)]
enum RawColumn {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
}

/// A parsed CSV file before normalization.
#[derive(Debug, Clone)]
pub struct TabularTable {
    names: Vec<String>,
    columns: Vec<RawColumn>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

/// Reads a headed, comma-delimited CSV into typed columns.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TabularTable> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<TabularTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            column: 0,
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let label = schema.label.resolve(&header)?;
    let categorical: BTreeSet<usize> = schema
        .categorical
        .iter()
        .map(|c| c.resolve(&header))
        .collect::<Result<_>>()?;
    let ignore: BTreeSet<usize> = schema
        .ignore
        .iter()
        .map(|c| c.resolve(&header))
        .collect::<Result<_>>()?;
    let features: Vec<usize> = (0..header.len())
        .filter(|i| *i != label && !ignore.contains(i))
        .collect();
    if features.is_empty() {
        return Err(Error::config("schema leaves no feature columns"));
    }

    let mut columns: Vec<RawColumn> = features
        .iter()
        .map(|i| {
            if categorical.contains(i) {
                RawColumn::Categorical(Vec::new())
            } else {
                RawColumn::Numeric(Vec::new())
            }
        })
        .collect();
    let mut raw_labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse {
                line,
                column: 0,
                message: e.to_string(),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let missing = |s: &str| schema.missing.iter().any(|m| m == s);
        let lab = record[label].trim();
        if missing(lab) {
            return Err(Error::Parse {
                line,
                column: label,
                message: "missing label".into(),
            });
        }
        raw_labels.push(lab.to_string());
        for (&ci, col) in features.iter().zip(&mut columns) {
            let cell = record[ci].trim();
            match col {
                RawColumn::Categorical(v) => {
                    v.push((!missing(cell)).then(|| cell.to_string()));
                }
                RawColumn::Numeric(v) => {
                    if missing(cell) {
                        v.push(None);
                    } else {
                        let x: f64 = cell.parse().map_err(|_| Error::Parse {
                            line,
                            column: ci,
                            message: format!("cannot parse {cell:?} in numeric column {:?}", header[ci]),
                        })?;
                        v.push(Some(x));
                    }
                }
            }
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::validation("CSV has no data rows"));
    }

    // Classes in sorted order, numerically when every label is a number.
    let mut class_names: Vec<String> = raw_labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if class_names.iter().all(|c| c.parse::<f64>().is_ok()) {
        class_names.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    let class_of: HashMap<&str, usize> = class_names.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let labels = raw_labels.iter().map(|l| class_of[l.as_str()]).collect();

    Ok(TabularTable {
        names: features.iter().map(|&i| header[i].clone()).collect(),
        columns,
        labels,
        class_names,
    })
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-8))
}

impl TabularTable {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.columns.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Fits imputation, category codes and z-score statistics on `rows`.
    pub fn fit(&self, rows: &[usize]) -> Vec<ColumnInfo> {
        self.columns
            .iter()
            .zip(&self.names)
            .map(|(col, name)| match col {
                RawColumn::Numeric(v) => {
                    let present: Vec<f64> = rows.iter().filter_map(|&r| v[r]).collect();
                    let impute = if present.is_empty() {
                        0.0
                    } else {
                        present.iter().sum::<f64>() / present.len() as f64
                    };
                    let (mean, std) = mean_std(rows.iter().map(|&r| v[r].unwrap_or(impute)));
                    ColumnInfo {
                        name: name.clone(),
                        kind: ColumnKind::Numeric,
                        mean,
                        std,
                        categories: Vec::new(),
                        impute,
                    }
                }
                RawColumn::Categorical(v) => {
                    let mut categories: Vec<String> = Vec::new();
                    for cell in rows.iter().filter_map(|&r| v[r].as_ref()) {
                        if !categories.contains(cell) {
                            categories.push(cell.clone());
                        }
                    }
                    let code = |c: &Option<String>| category_code(&categories, c.as_deref());
                    let (mean, std) = mean_std(rows.iter().map(|&r| code(&v[r])));
                    ColumnInfo {
                        name: name.clone(),
                        kind: ColumnKind::Categorical,
                        mean,
                        std,
                        categories,
                        impute: 0.0,
                    }
                }
            })
            .collect()
    }

    /// Encodes `rows` with previously fitted statistics.
    pub fn transform(&self, rows: &[usize], info: &[ColumnInfo]) -> Result<Dataset> {
        let d = self.columns.len();
        let mut data = vec![0f32; rows.len() * d];
        for (j, (col, ci)) in self.columns.iter().zip(info).enumerate() {
            for (i, &r) in rows.iter().enumerate() {
                let raw = match col {
                    RawColumn::Numeric(v) => v[r].unwrap_or(ci.impute),
                    RawColumn::Categorical(v) => category_code(&ci.categories, v[r].as_deref()),
                };
                data[i * d + j] = ((raw - ci.mean) / ci.std) as f32;
            }
        }
        let mut ds = Dataset::new(
            Tensor::new(vec![rows.len(), d], data)?,
            rows.iter().map(|&r| self.labels[r]).collect(),
            self.class_names.len().max(2),
        )?;
        ds.columns = info.to_vec();
        Ok(ds)
    }

    /// Splits rows, fits statistics on the first part, and encodes both parts.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let (a, b) = split_indices(self.len(), fraction, seed)?;
        let info = self.fit(&a);
        Ok((self.transform(&a, &info)?, self.transform(&b, &info)?))
    }
}

/// Unseen and missing categories share the code one past the known ones.
fn category_code(categories: &[String], cell: Option<&str>) -> f64 {
    cell.and_then(|c| categories.iter().position(|k| k == c))
        .unwrap_or(categories.len()) as f64
}

/// Seeded shuffle of `0..n`; the first `ceil(fraction * n)` go to the first part.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::validation(format!("split fraction {fraction} outside (0, 1)")));
    }
    let cut = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    if cut == 0 || cut >= n {
        return Err(Error::validation(format!(
            "split fraction {fraction} of {n} samples leaves an empty part"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let b = idx.split_off(cut);
    Ok((idx, b))
}

pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_indices(dataset.len(), fraction, seed)?;
    Ok((dataset.subset(&a), dataset.subset(&b)))
}

/// Shuffled index batches for one epoch; the final short batch is kept.
pub fn batches(n: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(label: ColumnRef) -> CsvSchema {
        CsvSchema {
            label,
            categorical: Vec::new(),
            ignore: Vec::new(),
            missing: default_missing(),
        }
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let mut pixels = vec![0u8, 255, 128, 7, 1, 2, 3, 4];
        let mut img = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 2, 2, 2] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.append(&mut pixels);
        let t = parse_idx_images(&img).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2]);
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(encode_idx_images(&t), img);

        let lab = encode_idx_labels(&[3, 9]);
        assert_eq!(parse_idx_labels(&lab).unwrap(), vec![3, 9]);
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let lab = encode_idx_labels(&[1, 2, 3]);
        assert!(matches!(parse_idx_images(&lab), Err(Error::Format { offset: 0, .. })));
        let err = parse_idx_labels(&lab[..9]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 9, .. }), "{err}");

        let dir = tempfile::tempdir().unwrap();
        let img = encode_idx_images(&Tensor::zeros(&[2, 2, 2]));
        fs::write(dir.path().join("i"), img).unwrap();
        fs::write(dir.path().join("l"), &lab).unwrap();
        assert!(matches!(load_idx(dir.path().join("i"), dir.path().join("l")), Err(Error::Format { .. })));
    }

    #[test]
    fn split_examples() {
        let (a, b) = split_indices(100, 0.9, 1).unwrap();
        assert_eq!((a.len(), b.len()), (90, 10));
        assert_eq!(split_indices(100, 0.9, 1).unwrap(), (a.clone(), b.clone()));
        let (a, b) = split_indices(569, 0.75, 0).unwrap();
        assert_eq!((a.len(), b.len()), (427, 142));
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort_unstable();
        assert_eq!(all, (0..569).collect::<Vec<_>>());
        assert!(split_indices(1, 0.5, 0).is_err());
        assert!(split_indices(10, 1.0, 0).is_err());
        assert_eq!(split_indices(60_000, 0.9, 3).unwrap().1.len(), 6_000);
    }

    #[test]
    fn batch_examples() {
        let sizes: Vec<usize> = batches(10, 4, 0).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(batches(10, 4, 5), batches(10, 4, 5));
        assert_eq!(batches(10, 64, 5).len(), 1);
    }

    #[test]
    fn csv_normalizes_on_training_rows() {
        let text = "a,b,c,y\n1,2,5,no\n2,4,5,yes\n3,6,5,no\n4,?,5,yes\n";
        let t = read_csv(text.as_bytes(), &schema(ColumnRef::Name("y".into()))).unwrap();
        assert_eq!(t.feature_count(), 3);
        assert_eq!(t.class_names(), &["no", "yes"]);
        let rows = [0, 1, 2, 3];
        let info = t.fit(&rows);
        let ds = t.transform(&rows, &info).unwrap();
        assert_eq!(ds.labels, vec![0, 1, 0, 1]);
        for j in 0..3 {
            let col: Vec<f32> = (0..4).map(|i| ds.features.row(i)[j]).collect();
            let mean = col.iter().sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-6);
        }
        // Constant column collapses to zero under the sigma floor.
        assert!((0..4).all(|i| ds.features.row(i)[2] == 0.0));
        // Missing numeric cell imputes the training mean, i.e. z-score 0.
        assert_eq!(ds.features.row(3)[1], 0.0);
        let a: Vec<f64> = (0..4).map(|i| ds.features.row(i)[0] as f64).collect();
        let var = a.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn csv_categories_and_unseen_values() {
        let text = "color,size,label\nred,1,0\nblue,2,1\nred,3,0\ngreen,4,1\n,5,0\n";
        let mut s = schema(ColumnRef::Index(2));
        s.categorical = vec![ColumnRef::Name("color".into())];
        let t = read_csv(text.as_bytes(), &s).unwrap();
        let info = t.fit(&[0, 1, 2]);
        assert_eq!(info[0].categories, vec!["red", "blue"]);
        let ds = t.transform(&[3, 4], &info).unwrap();
        // Unseen "green" and missing both map to the reserved code.
        assert_eq!(ds.features.row(0)[0], ds.features.row(1)[0]);
    }

    #[test]
    fn csv_parse_error_names_row_and_column() {
        let text = "a,b,y\n1,2,0\n3,oops,1\n";
        let err = read_csv(text.as_bytes(), &schema(ColumnRef::Index(2))).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, column: 1, .. }), "{err}");
        let err = read_csv(text.as_bytes(), &schema(ColumnRef::Name("z".into()))).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn cifar_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![4u8];
        rec.extend(std::iter::repeat(255).take(3072));
        fs::write(dir.path().join("b.bin"), &rec).unwrap();
        let ds = load_cifar_bin(&[dir.path().join("b.bin")]).unwrap();
        assert_eq!(ds.features.shape(), &[1, 3, 32, 32]);
        assert_eq!(ds.labels, vec![4]);
        rec.pop();
        fs::write(dir.path().join("c.bin"), &rec).unwrap();
        assert!(load_cifar_bin(&[dir.path().join("c.bin")]).is_err());
    }
}
