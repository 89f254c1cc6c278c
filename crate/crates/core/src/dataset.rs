//! In-memory labelled datasets and their on-disk formats.
//!
//! Binary layout (little-endian): magic `VCGMDATA`, `u32` version, `u32`
//! feature dimension `d`, `u64` record count `n`, `f64` raw label minimum,
//! `f64` raw label maximum, then `n` records of `(y: f64, x: d * f64)` with
//! `y` normalized to `[0, 1]`. CSV files carry a `label,x0,..` header with
//! labels in raw units.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::label_index::{snap, LabelIndex, LabelScale};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"VCGMDATA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    scale: LabelScale,
    labels: Vec<f64>,
    features: Vec<f64>,
}

impl Dataset {
    /// `labels` are normalized; `features` is `labels.len() x dim`, row-major.
    pub fn new(dim: usize, scale: LabelScale, labels: Vec<f64>, features: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidSpec("feature dimension must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "{} feature values for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        let mut labels = labels;
        for y in labels.iter_mut() {
            if !(0.0..=1.0).contains(y) {
                return Err(Error::OutOfRange {
                    label: *y,
                    min: 0.0,
                    max: 1.0,
                });
            }
            *y = snap(*y);
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite feature value".into()));
        }
        Ok(Self {
            dim,
            scale,
            labels,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> LabelScale {
        self.scale
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn raw_label(&self, i: usize) -> f64 {
        self.scale.to_raw(self.labels[i])
    }

    pub fn index(&self) -> Result<LabelIndex> {
        LabelIndex::from_normalized(&self.labels, self.scale)
    }

    /// Feature rows for the given sample indices as an `n x d` tensor.
    pub fn features_of(&self, rows: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.x(r));
        }
        Tensor::new(rows.len(), self.dim, data).expect("row-major layout")
    }

    pub fn features_tensor(&self) -> Tensor {
        Tensor::new(self.len(), self.dim, self.features.clone()).expect("row-major layout")
    }

    /// Samples at the given indices, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            dim: self.dim,
            scale: self.scale,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            features: self.features_of(rows).into_data(),
        }
    }

    /// Sample indices grouped by distinct label, in index order.
    pub fn groups(&self, index: &LabelIndex) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); index.len()];
        for (i, &y) in self.labels.iter().enumerate() {
            let g = index.locate(y).expect("label belongs to its own index");
            groups[g].push(i);
        }
        groups
    }

    /// `(raw label, count)` for every distinct label.
    pub fn label_histogram(&self) -> Result<Vec<(f64, usize)>> {
        let index = self.index()?;
        Ok(index
            .distinct_labels()
            .iter()
            .zip(index.counts())
            .map(|(&y, &c)| (self.scale.to_raw(y), c))
            .collect())
    }

    pub fn write_histogram_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["label", "count"])?;
        for (y, c) in self.label_histogram()? {
            w.write_record([y.to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + self.len() * (self.dim + 1) * 8);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.scale.raw_min.to_le_bytes());
        out.extend_from_slice(&self.scale.raw_max.to_le_bytes());
        for i in 0..self.len() {
            out.extend_from_slice(&self.labels[i].to_le_bytes());
            for v in self.x(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated dataset header".into()))?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let n = read_u64(&mut r)? as usize;
        let scale = LabelScale::new(read_f64(&mut r)?, read_f64(&mut r)?)?;
        if r.len() != n * (dim + 1) * 8 {
            return Err(Error::Format(format!(
                "expected {} payload bytes, found {}",
                n * (dim + 1) * 8,
                r.len()
            )));
        }
        let mut labels = Vec::with_capacity(n);
        let mut features = Vec::with_capacity(n * dim);
        for _ in 0..n {
            labels.push(read_f64(&mut r)?);
            for _ in 0..dim {
                features.push(read_f64(&mut r)?);
            }
        }
        Dataset::new(dim, scale, labels, features)
    }

    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.raw_label(i).to_string()];
            rec.extend(self.x(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV with a `label,<features..>` header. Without an explicit
    /// scale the observed label range is used.
    pub fn read_csv(path: impl AsRef<Path>, scale: Option<LabelScale>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        if headers.get(0) != Some("label") || headers.len() < 2 {
            return Err(Error::Format(
                "CSV header must be `label,<feature columns...>`".into(),
            ));
        }
        let dim = headers.len() - 1;
        let mut raw = Vec::new();
        let mut features = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad number `{s}`: {e}")))
            };
            raw.push(parse(&rec[0])?);
            for j in 1..=dim {
                features.push(parse(&rec[j])?);
            }
        }
        if raw.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let scale = match scale {
            Some(s) => s,
            None => {
                let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                LabelScale::new(lo, if hi > lo { hi } else { lo + 1.0 })?
            }
        };
        let labels = raw
            .iter()
            .map(|&y| scale.normalize(y))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(dim, scale, labels, features)
    }

    /// Loads a dataset, picking the format from the extension (`.csv` or binary).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            Self::read_csv(path, None)
        } else {
            Self::read_binary(path)
        }
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated header".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated record".into()))?;
    Ok(f64::from_le_bytes(b))
}
