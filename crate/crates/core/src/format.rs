//! Flat tensor-file codec (the safetensors layout used by public adapter
//! releases).
//!
//! ```text
//! [u64 LE header length N][N bytes of UTF-8 JSON][raw little-endian buffers]
//! ```
//!
//! The JSON header maps each tensor name to `{"dtype", "shape",
//! "data_offsets"}` with offsets relative to the end of the header, plus an
//! optional `"__metadata__"` string map. Buffers are contiguous with no
//! alignment padding. Writes are canonical: tensors sorted by name, minimal
//! JSON, always `F32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::ser::{SerializeMap, Serializer};
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub const METADATA_KEY: &str = "__metadata__";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    fn parse(name: &str, tensor: &str) -> Result<Self> {
        match name {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            other => Err(Error::UnsupportedDtype {
                name: tensor.to_string(),
                dtype: other.to_string(),
            }),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }
}

/// One decoded tensor record. Values are widened to `f32`; `dtype` keeps the
/// on-disk encoding. Scalars (shape `[]`) are allowed here since adapter
/// files store `alpha` that way.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Entry {
    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Self {
        Self {
            dtype: Dtype::F32,
            shape,
            values,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, Entry>,
    pub metadata: BTreeMap<String, String>,
}

fn parse_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        reason: reason.into(),
    }
}

/// Byte offset inside the header of a serde_json (line, column) position.
fn json_offset(header: &[u8], line: usize, column: usize) -> usize {
    let mut current = 1;
    let mut line_start = 0;
    for (i, &b) in header.iter().enumerate() {
        if current == line {
            break;
        }
        if b == b'\n' {
            current += 1;
            line_start = i + 1;
        }
    }
    (line_start + column.saturating_sub(1)).min(header.len())
}

pub fn decode(bytes: &[u8]) -> Result<TensorFile> {
    if bytes.len() < 8 {
        return Err(parse_err(
            bytes.len(),
            "file ends before the 8-byte header length",
        ));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let available = (bytes.len() - 8) as u64;
    if n > available {
        return Err(parse_err(
            bytes.len(),
            format!("header length {n} exceeds the {available} bytes that follow"),
        ));
    }
    let n = n as usize;
    let header = &bytes[8..8 + n];
    let text = std::str::from_utf8(header)
        .map_err(|e| parse_err(8 + e.valid_up_to(), "header is not valid UTF-8"))?;
    let value: Value = serde_json::from_str(text).map_err(|e| {
        parse_err(
            8 + json_offset(header, e.line(), e.column()),
            format!("invalid header JSON: {e}"),
        )
    })?;
    let Value::Object(map) = value else {
        return Err(parse_err(8, "header is not a JSON object"));
    };

    let data = &bytes[8 + n..];
    let data_start = 8 + n;
    let mut file = TensorFile::default();
    let mut spans = Vec::with_capacity(map.len());

    for (name, spec) in map {
        if name == METADATA_KEY {
            let Value::Object(meta) = spec else {
                return Err(parse_err(8, "__metadata__ is not an object"));
            };
            for (k, v) in meta {
                let Value::String(s) = v else {
                    return Err(parse_err(8, format!("metadata value for {k} is not a string")));
                };
                file.metadata.insert(k, s);
            }
            continue;
        }
        let field = |key: &str| {
            spec.get(key)
                .ok_or_else(|| parse_err(8, format!("tensor {name} lacks \"{key}\"")))
        };
        let dtype_name = field("dtype")?
            .as_str()
            .ok_or_else(|| parse_err(8, format!("tensor {name} has a non-string dtype")))?;
        let dtype = Dtype::parse(dtype_name, &name)?;
        let shape = field("shape")?
            .as_array()
            .and_then(|a| a.iter().map(|d| d.as_u64().map(|d| d as usize)).collect::<Option<Vec<_>>>())
            .ok_or_else(|| parse_err(8, format!("tensor {name} has a malformed shape")))?;
        let offsets = field("data_offsets")?
            .as_array()
            .and_then(|a| a.iter().map(Value::as_u64).collect::<Option<Vec<_>>>())
            .filter(|o| o.len() == 2)
            .ok_or_else(|| parse_err(8, format!("tensor {name} has malformed data_offsets")))?;
        let (begin, end) = (offsets[0] as usize, offsets[1] as usize);
        if begin > end {
            return Err(parse_err(data_start + begin, format!("tensor {name} has begin > end")));
        }
        let count: usize = shape.iter().product();
        if end - begin != count * dtype.size() {
            return Err(parse_err(
                data_start + begin,
                format!(
                    "tensor {name} spans {} bytes but shape {shape:?} needs {}",
                    end - begin,
                    count * dtype.size()
                ),
            ));
        }
        if end > data.len() {
            return Err(parse_err(
                bytes.len(),
                format!("tensor {name} ends at data byte {end} but only {} follow the header", data.len()),
            ));
        }
        let raw = &data[begin..end];
        let values = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F16 => raw
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes(c.try_into().unwrap()).to_f32())
                .collect(),
        };
        spans.push((begin, end, name.clone()));
        file.tensors.insert(name, Entry { dtype, shape, values });
    }

    spans.sort();
    let mut cursor = 0;
    for (begin, end, name) in &spans {
        if *begin != cursor {
            return Err(parse_err(
                data_start + (*begin).min(cursor),
                format!("tensor {name} is not contiguous with the previous buffer"),
            ));
        }
        cursor = *end;
    }
    if cursor != data.len() {
        return Err(parse_err(data_start + cursor, "trailing bytes after the last tensor"));
    }
    Ok(file)
}

struct HeaderEntry<'a> {
    shape: &'a [usize],
    begin: usize,
    end: usize,
}

impl Serialize for HeaderEntry<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(3))?;
        map.serialize_entry("dtype", "F32")?;
        map.serialize_entry("shape", self.shape)?;
        map.serialize_entry("data_offsets", &[self.begin, self.end])?;
        map.end()
    }
}

struct Header<'a> {
    metadata: &'a BTreeMap<String, String>,
    entries: Vec<(&'a str, HeaderEntry<'a>)>,
}

impl Serialize for Header<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let extra = usize::from(!self.metadata.is_empty());
        let mut map = s.serialize_map(Some(self.entries.len() + extra))?;
        if !self.metadata.is_empty() {
            map.serialize_entry(METADATA_KEY, self.metadata)?;
        }
        for (name, entry) in &self.entries {
            map.serialize_entry(name, entry)?;
        }
        map.end()
    }
}

/// Canonical encoding: sorted names, minimal JSON, `F32` buffers.
pub fn encode(file: &TensorFile) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(file.tensors.len());
    let mut cursor = 0;
    for (name, entry) in &file.tensors {
        if name == METADATA_KEY {
            return Err(Error::InvalidArgument(format!("{METADATA_KEY} is reserved")));
        }
        let count: usize = entry.shape.iter().product();
        if count != entry.values.len() {
            return Err(Error::InvalidTensor(format!(
                "{name}: shape {:?} needs {count} values, got {}",
                entry.shape,
                entry.values.len()
            )));
        }
        let end = cursor + count * 4;
        entries.push((
            name.as_str(),
            HeaderEntry {
                shape: &entry.shape,
                begin: cursor,
                end,
            },
        ));
        cursor = end;
    }
    let header = serde_json::to_vec(&Header {
        metadata: &file.metadata,
        entries,
    })
    .map_err(|e| Error::InvalidArgument(format!("header serialization failed: {e}")))?;

    let mut out = Vec::with_capacity(8 + header.len() + cursor);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for entry in file.tensors.values() {
        for v in &entry.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<TensorFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_file(file: &TensorFile, path: &Path) -> Result<()> {
    let bytes = encode(file)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
