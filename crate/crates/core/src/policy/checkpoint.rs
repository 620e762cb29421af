//! `prefopt-policy v1 vocab=<V> order=<n>\n` followed by the logit table as
//! little-endian `f64`, rows in lexicographic context order.

use std::path::Path;

use super::{Policy, Vocabulary};
use crate::{io, Error, Result};

pub const CHECKPOINT_MAGIC: &str = "prefopt-policy v1";
pub const REWARD_MAGIC: &str = "prefopt-reward v1";

/// Header line (without newline) followed by raw little-endian floats.
pub(crate) fn encode_table(header: &str, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(header.len() + 1 + 8 * values.len());
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn decode_table(bytes: &[u8], path: &Path) -> Result<(String, Vec<f64>)> {
    let bad = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| bad("header is not UTF-8".into()))?
        .to_string();
    let body = &bytes[nl + 1..];
    if !body.len().is_multiple_of(8) {
        return Err(bad(format!(
            "payload of {} bytes is not a whole number of f64 values",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((header, values))
}

/// Parse `magic key=value key=value ...`.
pub(crate) fn header_fields<'h>(header: &'h str, magic: &str, path: &Path) -> Result<Vec<(&'h str, &'h str)>> {
    let rest = header.strip_prefix(magic).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: format!("expected header starting with `{magic}`"),
    })?;
    rest.split_whitespace()
        .map(|kv| {
            kv.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("malformed header field `{kv}`"),
            })
        })
        .collect()
}

pub(crate) fn field<T: std::str::FromStr>(fields: &[(&str, &str)], key: &str, path: &Path) -> Result<T> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("missing or invalid header field `{key}`"),
        })
}

impl Policy {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = format!("{CHECKPOINT_MAGIC} vocab={} order={}", self.vocab.size(), self.order);
        encode_table(&header, &self.logits)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (header, logits) = decode_table(bytes, path)?;
        let fields = header_fields(&header, CHECKPOINT_MAGIC, path)?;
        let vocab = Vocabulary::new(field(&fields, "vocab", path)?)?;
        let order: usize = field(&fields, "order", path)?;
        Policy::from_logits(vocab, order, logits).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_atomic(path, &self.to_checkpoint_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_checkpoint_bytes(&io::read(path)?, path)
    }
}
