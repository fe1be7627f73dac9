//! Synthetic superposition data and activation files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{randn, Matrix, Rng};
use crate::training::DataSource;

fn default_lo() -> f64 {
    0.5
}
fn default_hi() -> f64 {
    1.5
}

/// Coefficient distribution of active features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Magnitude {
    #[serde(default = "default_lo")]
    pub lo: f64,
    #[serde(default = "default_hi")]
    pub hi: f64,
}

impl Default for Magnitude {
    fn default() -> Self {
        Self {
            lo: default_lo(),
            hi: default_hi(),
        }
    }
}

/// `m_true > d` unit directions in `R^d`; each sample switches every
/// feature on independently with probability `mean_active / m_true`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperpositionSpec {
    pub d: usize,
    pub m_true: usize,
    pub mean_active: f64,
    #[serde(default)]
    pub magnitude: Magnitude,
    #[serde(default)]
    pub seed: u64,
}

impl SuperpositionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m_true <= self.d {
            return Err(Error::invalid(format!(
                "superposition needs m_true > d >= 1, got d = {}, m_true = {}",
                self.d, self.m_true
            )));
        }
        if !(self.mean_active > 0.0 && self.mean_active <= self.m_true as f64) {
            return Err(Error::invalid(format!(
                "mean_active must lie in (0, {}], got {}",
                self.m_true, self.mean_active
            )));
        }
        let Magnitude { lo, hi } = self.magnitude;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(Error::invalid(format!(
                "magnitudes need 0 <= lo <= hi, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// One synthetic sample with its ground-truth decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    /// `(feature index, coefficient)` pairs, ascending by index.
    pub active: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct SuperpositionGenerator {
    spec: SuperpositionSpec,
    /// d × m_true, unit columns.
    ground_truth: Matrix,
    rng: Rng,
}

impl SuperpositionGenerator {
    pub fn new(spec: SuperpositionSpec) -> Result<Self> {
        Self::with_stream(spec, 0)
    }

    /// Same ground truth as [`SuperpositionGenerator::new`], but samples come
    /// from an independent stream. Stream 0 is the one `new` uses; the CLI
    /// trains on stream 0 and evaluates on stream 1.
    pub fn with_stream(spec: SuperpositionSpec, stream: u64) -> Result<Self> {
        spec.validate()?;
        let mut base = Rng::new(spec.seed);
        let mut ground_truth = randn(&mut base, spec.d, spec.m_true, 1.0)?;
        ground_truth.normalize_columns();
        let mut rng = base.fork();
        for _ in 0..stream {
            rng = base.fork();
        }
        Ok(Self {
            spec,
            ground_truth,
            rng,
        })
    }

    pub fn spec(&self) -> &SuperpositionSpec {
        &self.spec
    }

    pub fn ground_truth(&self) -> &Matrix {
        &self.ground_truth
    }

    pub fn sample(&mut self) -> Sample {
        let p = self.spec.mean_active / self.spec.m_true as f64;
        let Magnitude { lo, hi } = self.spec.magnitude;
        let mut x = vec![0.0; self.spec.d];
        let mut active = Vec::new();
        for j in 0..self.spec.m_true {
            if self.rng.bernoulli(p) {
                let c = if lo == hi {
                    lo
                } else {
                    self.rng.uniform(lo, hi)
                };
                for (r, xv) in x.iter_mut().enumerate() {
                    *xv += c * self.ground_truth.get(r, j);
                }
                active.push((j, c));
            }
        }
        Sample { x, active }
    }

    /// `n` samples as rows, with their decompositions.
    pub fn batch(&mut self, n: usize) -> (Matrix, Vec<Vec<(usize, f64)>>) {
        let mut m = Matrix::zeros(n, self.spec.d);
        let mut actives = Vec::with_capacity(n);
        for r in 0..n {
            let s = self.sample();
            m.row_mut(r).copy_from_slice(&s.x);
            actives.push(s.active);
        }
        (m, actives)
    }
}

impl DataSource for SuperpositionGenerator {
    fn next_batch(&mut self, n: usize) -> Result<Option<Matrix>> {
        Ok(Some(self.batch(n).0))
    }
}

/// An in-memory matrix served in row order; exhausts after the last row.
#[derive(Debug, Clone)]
pub struct MatrixSource {
    data: Matrix,
    cursor: usize,
}

impl MatrixSource {
    pub fn new(data: Matrix) -> Self {
        Self { data, cursor: 0 }
    }
}

impl DataSource for MatrixSource {
    fn next_batch(&mut self, n: usize) -> Result<Option<Matrix>> {
        if self.cursor >= self.data.rows() {
            return Ok(None);
        }
        let end = (self.cursor + n).min(self.data.rows());
        let out = self.data.slice_rows(self.cursor, end);
        self.cursor = end;
        Ok(Some(out))
    }
}

pub const ACTIVATION_MAGIC: &[u8; 8] = b"SAEACT1\0";
pub const ACTIVATION_HEADER_LEN: u64 = 24;

/// Header of an activation file: 8-byte magic, then `dim` and `count` as
/// little-endian u64, then `count · dim` little-endian f32 values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationFile {
    pub path: PathBuf,
    pub dim: usize,
    pub count: usize,
}

impl ActivationFile {
    pub fn expected_len(&self) -> u64 {
        ACTIVATION_HEADER_LEN + (self.count as u64) * (self.dim as u64) * 4
    }
}

pub fn encode_activations(data: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(ACTIVATION_HEADER_LEN as usize + data.as_slice().len() * 4);
    out.extend_from_slice(ACTIVATION_MAGIC);
    out.extend_from_slice(&(data.cols() as u64).to_le_bytes());
    out.extend_from_slice(&(data.rows() as u64).to_le_bytes());
    for &v in data.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_activations(path: &Path, data: &Matrix) -> Result<ActivationFile> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_activations(data))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))?;
    Ok(ActivationFile {
        path: path.to_path_buf(),
        dim: data.cols(),
        count: data.rows(),
    })
}

/// Streaming reader over an activation file.
#[derive(Debug)]
pub struct ActivationReader {
    meta: ActivationFile,
    reader: BufReader<File>,
    remaining: usize,
}

impl ActivationReader {
    pub fn meta(&self) -> &ActivationFile {
        &self.meta
    }

    pub fn remaining(&self) -> usize {
        self.remaining
    }

    /// Reads every remaining row.
    pub fn read_all(mut self) -> Result<Matrix> {
        let n = self.remaining;
        Ok(self
            .next_batch(n)?
            .unwrap_or_else(|| Matrix::zeros(0, self.meta.dim)))
    }
}

impl DataSource for ActivationReader {
    fn next_batch(&mut self, n: usize) -> Result<Option<Matrix>> {
        if self.remaining == 0 {
            return Ok(None);
        }
        let rows = n.min(self.remaining);
        let mut buf = vec![0u8; rows * self.meta.dim * 4];
        self.reader
            .read_exact(&mut buf)
            .map_err(|e| Error::io(&self.meta.path, e))?;
        self.remaining -= rows;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Some(Matrix::from_vec(rows, self.meta.dim, data)?))
    }
}

impl Iterator for ActivationReader {
    type Item = Result<Vec<f64>>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.next_batch(1) {
            Ok(Some(m)) => Some(Ok(m.into_vec())),
            Ok(None) => None,
            Err(e) => Some(Err(e)),
        }
    }
}

/// Opens an activation file, validating its magic and length.
pub fn read_activations(path: &Path) -> Result<ActivationReader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let actual = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut reader = BufReader::new(file);
    if actual < ACTIVATION_HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: ACTIVATION_HEADER_LEN,
            actual,
        });
    }
    let mut header = [0u8; ACTIVATION_HEADER_LEN as usize];
    reader
        .read_exact(&mut header)
        .map_err(|e| Error::io(path, e))?;
    if &header[..8] != ACTIVATION_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason: "bad magic, expected SAEACT1".into(),
        });
    }
    let dim = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
    let count = u64::from_le_bytes(header[16..24].try_into().expect("8 bytes"));
    let expected = count
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(ACTIVATION_HEADER_LEN))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: 8,
            reason: format!("dim {dim} × count {count} overflows"),
        })?;
    if actual != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    Ok(ActivationReader {
        meta: ActivationFile {
            path: path.to_path_buf(),
            dim: dim as usize,
            count: count as usize,
        },
        reader,
        remaining: count as usize,
    })
}
