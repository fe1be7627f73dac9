//! Checkpoint file format.
//!
//! ```text
//! sae-checkpoint\n
//! format_version=1\n
//! architecture=<mlp|attn>\n
//! d=<usize>\n
//! m=<usize>\n
//! activation=<tag>\n
//! k=<usize>\n
//! seed=<u64>\n
//! bandwidth=<f64>\n
//! output_affine=<bool>\n
//! end_header\n
//! then, per parameter tensor until end of file:
//!   name_len: u64 LE | name bytes | rows: u64 LE | cols: u64 LE | rows·cols f32 LE
//! ```
//!
//! Parameters are stored in single precision, so a load restores the model
//! up to `f32` rounding, and write → read → write is byte-identical.

use std::path::Path;

use super::{Model, ModelConfig, Sae};
use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const MAGIC_LINE: &str = "sae-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const END_HEADER: &str = "end_header";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub seed: u64,
}

pub fn encode(model: &Model, seed: u64) -> Vec<u8> {
    let c = model.config();
    let mut out = String::new();
    out.push_str(MAGIC_LINE);
    out.push('\n');
    for (key, value) in [
        ("format_version", FORMAT_VERSION.to_string()),
        ("architecture", c.architecture.tag().to_string()),
        ("d", c.d.to_string()),
        ("m", c.m.to_string()),
        ("activation", c.activation.tag().to_string()),
        ("k", c.k.to_string()),
        ("seed", seed.to_string()),
        ("bandwidth", format!("{:?}", c.bandwidth)),
        ("output_affine", c.output_affine.to_string()),
    ] {
        out.push_str(&format!("{key}={value}\n"));
    }
    out.push_str(END_HEADER);
    out.push('\n');

    let mut bytes = out.into_bytes();
    for (name, tensor) in model.params() {
        bytes.extend_from_slice(&(name.len() as u64).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(tensor.rows() as u64).to_le_bytes());
        bytes.extend_from_slice(&(tensor.cols() as u64).to_le_bytes());
        for &v in tensor.as_slice() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

pub fn write(path: &Path, model: &Model, seed: u64) -> Result<()> {
    std::fs::write(path, encode(model, seed)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: (self.pos as u64).saturating_add(n as u64),
                actual: self.bytes.len() as u64,
            }),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn line(&mut self) -> Result<&'a str> {
        let start = self.pos;
        let rel = self.bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.format_err(start, "unterminated header line"))?;
        self.pos = start + rel + 1;
        std::str::from_utf8(&self.bytes[start..start + rel])
            .map_err(|_| self.format_err(start, "header is not valid UTF-8"))
    }

    fn format_err(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Model, CheckpointHeader)> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    if cur.line()? != MAGIC_LINE {
        return Err(cur.format_err(0, format!("missing `{MAGIC_LINE}` magic line")));
    }

    let mut fields = std::collections::BTreeMap::new();
    loop {
        let offset = cur.pos;
        let line = cur.line()?;
        if line == END_HEADER {
            break;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| cur.format_err(offset, format!("expected key=value, got `{line}`")))?;
        fields.insert(key.to_string(), (value.to_string(), offset));
    }
    let header_end = cur.pos;
    let mut field = |key: &str| -> Result<(String, usize)> {
        fields
            .remove(key)
            .ok_or_else(|| cur.format_err(header_end, format!("header lacks `{key}`")))
    };
    fn parse<T: std::str::FromStr>(
        cur: &Cursor,
        (v, off): (String, usize),
        key: &str,
    ) -> Result<T> {
        v.parse()
            .map_err(|_| cur.format_err(off, format!("bad value `{v}` for `{key}`")))
    }

    let version: u32 = parse(&cur, field("format_version")?, "format_version")?;
    if version != FORMAT_VERSION {
        return Err(cur.format_err(0, format!("unsupported format_version {version}")));
    }
    let architecture = field("architecture")?;
    let activation = field("activation")?;
    let config = ModelConfig {
        architecture: architecture
            .0
            .parse()
            .map_err(|_| cur.format_err(architecture.1, "unknown architecture"))?,
        activation: activation
            .0
            .parse()
            .map_err(|_| cur.format_err(activation.1, "unknown activation"))?,
        d: parse(&cur, field("d")?, "d")?,
        m: parse(&cur, field("m")?, "m")?,
        k: parse(&cur, field("k")?, "k")?,
        bandwidth: parse(&cur, field("bandwidth")?, "bandwidth")?,
        output_affine: parse(&cur, field("output_affine")?, "output_affine")?,
    };
    let seed: u64 = parse(&cur, field("seed")?, "seed")?;
    if let Some((key, (_, off))) = fields.into_iter().next() {
        return Err(cur.format_err(off, format!("unknown header key `{key}`")));
    }

    let mut model = Model::init(config.clone(), seed)?;
    let expected: Vec<&'static str> = model.params().iter().map(|(n, _)| *n).collect();
    let mut seen = Vec::new();
    while cur.pos < bytes.len() {
        let offset = cur.pos;
        let name_len = cur.u64()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| cur.format_err(offset, "tensor name is not UTF-8"))?
            .to_string();
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        let count = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| cur.format_err(offset, "tensor size overflows"))?;
        let payload = cur.take(count)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if !expected.contains(&name.as_str()) || seen.contains(&name) {
            return Err(cur.format_err(offset, format!("unexpected tensor `{name}`")));
        }
        model
            .set_param(&name, Matrix::from_vec(rows, cols, data)?)
            .map_err(|e| cur.format_err(offset, e.to_string()))?;
        seen.push(name);
    }
    if let Some(missing) = expected.iter().find(|n| !seen.iter().any(|s| s == *n)) {
        return Err(cur.format_err(bytes.len(), format!("tensor `{missing}` missing")));
    }
    Ok((model, CheckpointHeader { config, seed }))
}
