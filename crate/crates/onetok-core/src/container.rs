//! Tensor container file: a textual header manifest followed by raw tensor
//! payloads. Model weights and adapters share this layout.
//!
//! ```text
//! ONETOK-TENSORS v1\n
//! meta <key> <value>\n          (zero or more; value is percent-escaped)
//! tensor <name> f32 <d0>x<d1>x... <byte-offset>\n
//! ...\n
//! payload <total-bytes>\n
//! <raw little-endian f32 data, offsets relative to this point>
//! ```
//!
//! Offsets are byte offsets into the payload region. Readers must reject
//! unknown versions, truncated payloads, and manifests whose offsets overlap
//! or run past the declared payload size.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

const MAGIC: &str = "ONETOK-TENSORS v1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported container version: expected {MAGIC:?}, found {found:?}")]
    UnsupportedVersion { found: String },
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("missing tensor {name:?}")]
    MissingTensor { name: String },
    #[error("missing meta key {key:?}")]
    MissingMeta { key: String },
}

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T, ContainerError> {
    Err(ContainerError::Format {
        offset,
        message: message.into(),
    })
}

/// In-memory form of a container file: named f32 tensors plus string metadata.
#[derive(Debug, Default, Clone)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str, ContainerError> {
        self.meta
            .get(key)
            .map(|s| s.as_str())
            .ok_or(ContainerError::MissingMeta { key: key.into() })
    }

    pub fn meta_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, ContainerError> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| ContainerError::Format {
            offset: 0,
            message: format!("meta {key}={raw:?} does not parse"),
        })
    }

    pub fn push(&mut self, name: &str, tensor: Tensor<f32>) {
        self.tensors.push((name.to_string(), tensor));
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor<f32>, ContainerError> {
        let idx = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| ContainerError::MissingTensor { name: name.into() })?;
        Ok(self.tensors.remove(idx).1)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), ContainerError> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {}\n", escape(v)));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let dims = t
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            header.push_str(&format!("tensor {} f32 {dims} {offset}\n", escape(name)));
            offset += t.len() * 4;
        }
        header.push_str(&format!("payload {offset}\n"));
        w.write_all(header.as_bytes())?;
        for (_, t) in &self.tensors {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, ContainerError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut pos = 0usize;
        let magic = read_line(bytes, &mut pos)?;
        if magic != MAGIC {
            return Err(ContainerError::UnsupportedVersion {
                found: magic.chars().take(64).collect(),
            });
        }
        let mut meta = BTreeMap::new();
        let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let payload_bytes;
        loop {
            let line_start = pos;
            let line = read_line(bytes, &mut pos)?;
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once(' ')
                    .ok_or(ContainerError::Format {
                        offset: line_start,
                        message: "meta line needs a key and a value".into(),
                    })?;
                meta.insert(k.to_string(), unescape(v));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let fields: Vec<&str> = rest.split(' ').collect();
                if fields.len() != 4 {
                    return format_err(line_start, "tensor line needs: name dtype dims offset");
                }
                if fields[1] != "f32" {
                    return format_err(line_start, format!("unsupported dtype {:?}", fields[1]));
                }
                let shape = fields[2]
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| ContainerError::Format {
                        offset: line_start,
                        message: format!("bad dims {:?}", fields[2]),
                    })?;
                let offset = fields[3].parse::<usize>().map_err(|_| ContainerError::Format {
                    offset: line_start,
                    message: format!("bad offset {:?}", fields[3]),
                })?;
                entries.push((unescape(fields[0]), shape, offset));
            } else if let Some(rest) = line.strip_prefix("payload ") {
                payload_bytes = rest.parse::<usize>().map_err(|_| ContainerError::Format {
                    offset: line_start,
                    message: format!("bad payload size {rest:?}"),
                })?;
                break;
            } else {
                return format_err(line_start, format!("unexpected header line {line:?}"));
            }
        }
        let payload = &bytes[pos..];
        if payload.len() != payload_bytes {
            return format_err(
                pos + payload.len(),
                format!(
                    "payload truncated: declared {payload_bytes} bytes, found {}",
                    payload.len()
                ),
            );
        }
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, offset) in entries {
            let count: usize = shape.iter().product();
            let end = offset + count * 4;
            if end > payload.len() {
                return format_err(
                    pos + offset,
                    format!("tensor {name:?} runs past payload end"),
                );
            }
            let mut data = Vec::with_capacity(count);
            for chunk in payload[offset..end].chunks_exact(4) {
                data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
            let tensor = Tensor::from_vec(&shape, data).map_err(|e| ContainerError::Format {
                offset: pos + offset,
                message: e.to_string(),
            })?;
            tensors.push((name, tensor));
        }
        Ok(Container { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str, ContainerError> {
    let start = *pos;
    let nl = bytes[start..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(ContainerError::Format {
            offset: start,
            message: "header truncated before newline".into(),
        })?;
    let line = std::str::from_utf8(&bytes[start..start + nl]).map_err(|_| ContainerError::Format {
        offset: start,
        message: "header is not valid utf-8".into(),
    })?;
    *pos = start + nl + 1;
    Ok(line)
}

/// Percent-escape spaces, newlines and percent signs so values stay on one line.
fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            ' ' => out.push_str("%20"),
            '\n' => out.push_str("%0A"),
            '%' => out.push_str("%25"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '%' {
            let hex: String = chars.by_ref().take(2).collect();
            match hex.as_str() {
                "20" => out.push(' '),
                "0A" => out.push('\n'),
                "25" => out.push('%'),
                other => {
                    out.push('%');
                    out.push_str(other);
                }
            }
        } else {
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.set_meta("kind", "test");
        c.set_meta("note", "has spaces and %");
        c.push(
            "a",
            Tensor::from_vec(&[2, 2], vec![1.0f32, -2.5, 3.25, 0.0]).unwrap(),
        );
        c.push("b", Tensor::from_vec(&[3], vec![9.0f32, 8.0, 7.0]).unwrap());
        c
    }

    #[test]
    fn round_trip_bit_identical() {
        let c = sample();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let mut back = Container::from_bytes(&buf).unwrap();
        assert_eq!(back.meta("kind").unwrap(), "test");
        assert_eq!(back.meta("note").unwrap(), "has spaces and %");
        let a = back.take("a").unwrap();
        assert_eq!(a.shape(), &[2, 2]);
        assert_eq!(a.data(), &[1.0, -2.5, 3.25, 0.0]);

        // serialize twice: identical bytes
        let mut buf2 = Vec::new();
        sample().write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        match Container::from_bytes(&buf) {
            Err(ContainerError::Format { message, .. }) => {
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut tampered = b"ONETOK-TENSORS v9\n".to_vec();
        tampered.extend_from_slice(&buf[MAGIC.len() + 1..]);
        assert!(matches!(
            Container::from_bytes(&tampered),
            Err(ContainerError::UnsupportedVersion { .. })
        ));
    }

    #[test]
    fn missing_tensor_reported_by_name() {
        let mut c = sample();
        assert!(matches!(
            c.take("nope"),
            Err(ContainerError::MissingTensor { .. })
        ));
    }
}
