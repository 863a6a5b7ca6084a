//! Labelled datasets: synthetic generators, CSV and IDX ingestion.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LABEL_COLUMN: &str = "label";

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Feature matrix `[n, d]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Shape(format!("features must be 2-D, got {:?}", features.shape())));
        }
        if features.batch() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Domain(format!("label {bad} out of range for {classes} classes")));
        }
        if features.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite feature value".into()));
        }
        Ok(Self { features, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.channels()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.features.data()[i * d..(i + 1) * d]
    }

    /// Rows `idx` as a `[idx.len(), d]` batch with their labels.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let x = Tensor::new(vec![idx.len(), d], data).expect("consistent shape");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// First `n` rows and the remainder.
    pub fn split(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n > self.len() {
            return Err(Error::Precondition(format!("cannot split {} rows at {n}", self.len())));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        let (a, la) = self.gather(&head);
        let (b, lb) = self.gather(&tail);
        Ok((
            Dataset { features: a, labels: la, classes: self.classes },
            Dataset { features: b, labels: lb, classes: self.classes },
        ))
    }

    /// Consecutive `[size, d]` batches (the last one may be shorter).
    pub fn batches(&self, size: usize) -> Vec<Tensor> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(size.max(1)).map(|c| self.gather(c).0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    SkewedFeatures,
    Blobs,
    TwoMoons,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skewed-features" => Ok(Self::SkewedFeatures),
            "blobs" => Ok(Self::Blobs),
            "two-moons" => Ok(Self::TwoMoons),
            _ => Err(Error::Config(format!(
                "unknown dataset kind {s:?} (expected skewed-features, blobs or two-moons)"
            ))),
        }
    }
}

pub const SKEWED_FEATURES: usize = 16;
pub const SKEWED_CLASSES: usize = 4;

pub fn synth_dataset(kind: SynthKind, n: usize, seed: u64) -> Result<Dataset> {
    match kind {
        SynthKind::SkewedFeatures => skewed_features(n, seed),
        SynthKind::Blobs => blobs(n, 3, 10.0, seed),
        SynthKind::TwoMoons => two_moons(n, 0.1, seed),
    }
}

/// Class-conditional log-normal and exponential features, half of them
/// reflected so both skew directions occur. The class structure is fixed;
/// only the draws depend on `seed`.
pub fn skewed_features(n: usize, seed: u64) -> Result<Dataset> {
    let (d, k) = (SKEWED_FEATURES, SKEWED_CLASSES);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        for j in 0..d {
            let shift = 0.45 * ((1.3 * (c + 1) as f64 * (j + 1) as f64) + 0.7 * j as f64).cos();
            let v = if j % 2 == 0 {
                LogNormal::new(shift, 0.75).expect("valid").sample(&mut rng)
            } else {
                Exp::new((-shift).exp()).expect("valid").sample(&mut rng)
            };
            data.push(if j % 4 >= 2 { -v } else { v });
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![n, d], data)?, labels, k)
}

/// Isotropic unit-variance Gaussian blobs with centres on a regular polygon
/// whose neighbouring vertices are `separation` apart.
pub fn blobs(n: usize, classes: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config("blobs need at least two classes".into()));
    }
    let radius = separation / (2.0 * (std::f64::consts::PI / classes as f64).sin());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let a = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
        data.push(radius * a.cos() + normal.sample(&mut rng));
        data.push(radius * a.sin() + normal.sample(&mut rng));
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, classes)
}

/// Two interleaving half circles with Gaussian jitter.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let t = rng.gen_range(0.0..std::f64::consts::PI);
        let (x, y) = if c == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        data.push(x + normal.sample(&mut rng));
        data.push(y + normal.sample(&mut rng));
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, 2)
}

/// Random permutation of `0..n` for an epoch.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn parse_label(s: &str, row: usize) -> Result<usize> {
    let t = s.trim();
    if let Ok(v) = t.parse::<usize>() {
        return Ok(v);
    }
    match t.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 => Ok(v as usize),
        _ => Err(Error::Parse(format!("row {row}: label {t:?} is not a class index"))),
    }
}

/// Contents of a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvData {
    pub dataset: Dataset,
    pub names: Vec<String>,
    pub has_label: bool,
}

/// Reads a CSV with a header row; the `label` column holds class indices
/// and every other column is a numeric feature. Without a label column all
/// labels are 0.
pub fn read_csv_from<R: Read>(reader: R) -> Result<CsvData> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> =
        rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.iter().map(String::from).collect();
    let label_col = headers.iter().position(|h| h == LABEL_COLUMN);
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| Some(i) != label_col)
        .map(|(_, h)| h.clone())
        .collect();
    if names.is_empty() {
        return Err(Error::Parse("CSV has no feature columns".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(Error::Parse(format!(
                "row {}: {} fields, header has {}",
                r + 1,
                rec.len(),
                headers.len()
            )));
        }
        for (i, field) in rec.iter().enumerate() {
            if Some(i) == label_col {
                labels.push(parse_label(field, r + 1)?);
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    Error::Parse(format!("row {}, column {:?}: {field:?} is not a number", r + 1, headers[i]))
                })?;
                data.push(v);
            }
        }
        if label_col.is_none() {
            labels.push(0);
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse("CSV has no data rows".into()));
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let n = labels.len();
    let dataset = Dataset::new(Tensor::new(vec![n, names.len()], data)?, labels, classes)?;
    Ok(CsvData { dataset, names, has_label: label_col.is_some() })
}

pub fn read_csv(path: &Path) -> Result<CsvData> {
    read_csv_from(std::fs::File::open(path)?)
}

/// Writes features under `names`, followed by the label column when
/// `with_label` is set.
pub fn write_csv_to<W: Write>(
    out: W,
    data: &Dataset,
    names: &[String],
    with_label: bool,
) -> Result<()> {
    if names.len() != data.dim() {
        return Err(Error::Shape(format!("{} names for {} features", names.len(), data.dim())));
    }
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut header: Vec<&str> = names.iter().map(String::as_str).collect();
    if with_label {
        header.push(LABEL_COLUMN);
    }
    w.write_record(&header).map_err(io)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.row(i).iter().map(|v| v.to_string()).collect();
        if with_label {
            rec.push(data.labels[i].to_string());
        }
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(path: &Path, data: &Dataset, names: &[String], with_label: bool) -> Result<()> {
    write_csv_to(std::fs::File::create(path)?, data, names, with_label)
}

pub fn default_feature_names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x{j}")).collect()
}

fn idx_header(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(Error::Parse("IDX file shorter than its magic number".into()));
    }
    let got = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if got != magic {
        return Err(Error::Parse(format!("IDX magic {got:#010x}, expected {magic:#010x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let end = 4 + 4 * ndim;
    if bytes.len() < end {
        return Err(Error::Parse("truncated IDX header".into()));
    }
    let dims = (0..ndim)
        .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize)
        .collect::<Vec<_>>();
    let count: usize = dims.iter().product();
    if bytes.len() != end + count {
        return Err(Error::Parse(format!(
            "IDX payload has {} bytes, header implies {count}",
            bytes.len() - end
        )));
    }
    Ok((dims, end))
}

/// Unsigned-byte IDX images as `[n, rows·cols]` scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let (dims, off) = idx_header(bytes, IDX_IMAGES_MAGIC)?;
    let per: usize = dims[1..].iter().product();
    Tensor::new(vec![dims[0], per], bytes[off..].iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, off) = idx_header(bytes, IDX_LABELS_MAGIC)?;
    Ok(bytes[off..].iter().map(|&b| b as usize).collect())
}

pub fn read_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = parse_idx_images(&std::fs::read(images)?)?;
    let y = parse_idx_labels(&std::fs::read(labels)?)?;
    let classes = y.iter().max().map_or(1, |m| m + 1);
    Dataset::new(x, y, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let d = synth_dataset(SynthKind::TwoMoons, 10, 3).unwrap();
        let names = default_feature_names(2);
        let mut buf = Vec::new();
        write_csv_to(&mut buf, &d, &names, true).unwrap();
        let back = read_csv_from(buf.as_slice()).unwrap();
        assert_eq!(back.dataset, d);
        assert_eq!(back.names, names);
        assert!(back.has_label);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(read_csv_from("a,label\n1,x\n".as_bytes()), Err(Error::Parse(_))));
        assert!(matches!(read_csv_from("a,label\nfoo,1\n".as_bytes()), Err(Error::Parse(_))));
        assert!(matches!(read_csv_from("a,label\n".as_bytes()), Err(Error::Parse(_))));
    }

    #[test]
    fn idx_parsing() {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 2];
        img.extend([0, 255, 51, 102]);
        let x = parse_idx_images(&img).unwrap();
        assert_eq!(x.shape(), &[2, 2]);
        assert_eq!(x.data(), &[0.0, 1.0, 0.2, 0.4]);
        let lab = [0u8, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        assert_eq!(parse_idx_labels(&lab).unwrap(), vec![7, 3]);
        assert!(parse_idx_labels(&img).is_err());
        assert!(parse_idx_images(&img[..18]).is_err());
    }
}
