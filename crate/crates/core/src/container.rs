//! Checkpoint container: the safetensors layout, read and written bit-exactly.
//!
//! ```text
//! [u64 LE header length N][N bytes of UTF-8 JSON header][packed data segments]
//! ```
//!
//! The header maps every tensor name to `{"dtype", "shape", "data_offsets"}`
//! (offsets relative to the first data byte) plus an optional
//! `"__metadata__"` object of string pairs. Saving is canonical: metadata
//! first, tensors in byte-lexicographic name order, no whitespace, no
//! padding, data segments packed in the same order. Loading a file written
//! here and saving it again reproduces the original bytes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::Deserialize;

use crate::dtype::Dtype;
use crate::error::{Error, Result};
use crate::rng::Fnv1a64;

const METADATA_KEY: &str = "__metadata__";

/// Metadata key holding the hex fingerprint recorded by [`load_checkpoint`].
/// It is derived data and never written back to disk.
pub const FINGERPRINT_KEY: &str = "samerge.fingerprint";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d))
}

impl Tensor {
    pub fn new(dtype: Dtype, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let expected = element_count(&shape)
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::format(format!("shape {shape:?} overflows")))?;
        if expected != data.len() {
            return Err(Error::format(format!(
                "{dtype} tensor of shape {shape:?} needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Self { dtype, shape, data })
    }

    /// Encode f32 values, rounding to nearest-even for the narrow types.
    ///
    /// # Panics
    /// If `values.len()` does not match the element count of `shape`.
    pub fn from_f32(dtype: Dtype, shape: Vec<usize>, values: &[f32]) -> Self {
        assert_eq!(element_count(&shape), Some(values.len()), "shape/value count mismatch");
        let data = dtype.encode_f32(values);
        Self { dtype, shape, data }
    }

    pub fn from_f64(dtype: Dtype, shape: Vec<usize>, values: &[f64]) -> Self {
        assert_eq!(element_count(&shape), Some(values.len()), "shape/value count mismatch");
        let data = dtype.encode_f64(values);
        Self { dtype, shape, data }
    }

    pub fn scalar_f32(value: f32) -> Self {
        Self::from_f32(Dtype::F32, Vec::new(), &[value])
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len() / self.dtype.size()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.dtype.decode_f32(&self.data)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.dtype.decode_f64(&self.data)
    }

    /// Re-encode in another dtype (identity when the dtype already matches).
    pub fn cast(&self, dtype: Dtype) -> Tensor {
        if dtype == self.dtype {
            return self.clone();
        }
        if self.dtype == Dtype::F64 {
            return Tensor::from_f64(dtype, self.shape.clone(), &self.to_f64());
        }
        Tensor::from_f32(dtype, self.shape.clone(), &self.to_f32())
    }

    /// Largest distance, counted in representable values of the shared
    /// dtype, between corresponding elements. `None` when the two tensors
    /// differ in dtype or shape.
    pub fn max_ulp_distance(&self, other: &Tensor) -> Option<u64> {
        if self.dtype != other.dtype || self.shape != other.shape {
            return None;
        }
        let d = (0..self.numel())
            .map(|i| {
                let a = self.dtype.ordered_bits(&self.data, i);
                let b = self.dtype.ordered_bits(&other.data, i);
                (a - b).unsigned_abs()
            })
            .max()
            .unwrap_or(0);
        Some(u64::try_from(d).unwrap_or(u64::MAX))
    }
}

/// Named tensors plus string metadata. Iteration is in canonical
/// (byte-lexicographic) name order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total element count across tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// FNV-1a over the canonical tensor table (names, dtypes, shapes,
    /// offsets; metadata excluded) followed by every data byte in canonical
    /// order. Independent of metadata, so annotating a checkpoint does not
    /// change its identity.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a64::new();
        h.update(encode_header(&self.tensors, None).as_bytes());
        for t in self.tensors.values() {
            h.update(&t.data);
        }
        h.finish()
    }

    pub fn fingerprint_hex(&self) -> String {
        format!("{:016x}", self.fingerprint())
    }

    fn check_invariants(&self) -> Result<()> {
        for name in self.tensors.keys() {
            if name.is_empty() {
                return Err(Error::format("empty tensor name"));
            }
            if name == METADATA_KEY {
                return Err(Error::format(format!("{METADATA_KEY:?} is reserved")));
            }
        }
        Ok(())
    }

    /// Canonical serialization.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_invariants()?;
        let metadata: BTreeMap<&str, &str> = self
            .metadata
            .iter()
            .filter(|(k, _)| k.as_str() != FINGERPRINT_KEY)
            .map(|(k, v)| (k.as_str(), v.as_str()))
            .collect();
        let header = encode_header(&self.tensors, Some(&metadata));
        let data_len: usize = self.tensors.values().map(|t| t.data.len()).sum();
        let mut out = Vec::with_capacity(8 + header.len() + data_len);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in self.tensors.values() {
            out.extend_from_slice(&t.data);
        }
        Ok(out)
    }

    /// Parse a container image. Does not record the fingerprint; see
    /// [`load_checkpoint`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        parse(bytes)
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

fn encode_header(
    tensors: &BTreeMap<String, Tensor>,
    metadata: Option<&BTreeMap<&str, &str>>,
) -> String {
    let mut h = String::from("{");
    let mut first = true;
    if let Some(meta) = metadata.filter(|m| !m.is_empty()) {
        h.push_str(&json_str(METADATA_KEY));
        h.push_str(":{");
        for (i, (k, v)) in meta.iter().enumerate() {
            if i > 0 {
                h.push(',');
            }
            h.push_str(&json_str(k));
            h.push(':');
            h.push_str(&json_str(v));
        }
        h.push('}');
        first = false;
    }
    let mut offset = 0usize;
    for (name, t) in tensors {
        if !first {
            h.push(',');
        }
        first = false;
        let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
        let end = offset + t.data.len();
        h.push_str(&format!(
            "{}:{{\"dtype\":\"{}\",\"shape\":[{}],\"data_offsets\":[{},{}]}}",
            json_str(name),
            t.dtype,
            shape.join(","),
            offset,
            end
        ));
        offset = end;
    }
    h.push('}');
    h
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Header object as an ordered list of entries so duplicate keys are caught.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawHeader;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut entries = Vec::new();
                let mut seen = HashSet::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    if !seen.insert(k.clone()) {
                        return Err(de::Error::custom(format!("duplicate key {k:?}")));
                    }
                    entries.push((k, v));
                }
                Ok(RawHeader(entries))
            }
        }
        d.deserialize_map(V)
    }
}

fn parse(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::format(format!(
            "file is {} bytes, too short for the 8-byte header length",
            bytes.len()
        )));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let available = (bytes.len() - 8) as u64;
    if n > available {
        return Err(Error::format(format!(
            "header length {n} exceeds the {available} bytes after the length field"
        )));
    }
    let n = n as usize;
    let header = &bytes[8..8 + n];
    let raw: RawHeader =
        serde_json::from_slice(header).map_err(|e| Error::format(format!("header: {e}")))?;
    let data = &bytes[8 + n..];

    let mut ckpt = Checkpoint::new();
    let mut spans: Vec<(usize, usize, String)> = Vec::new();
    for (key, value) in raw.0 {
        if key == METADATA_KEY {
            let meta: BTreeMap<String, String> = serde_json::from_value(value)
                .map_err(|e| Error::format(format!("__metadata__ must map strings to strings: {e}")))?;
            ckpt.metadata = meta;
            continue;
        }
        if key.is_empty() {
            return Err(Error::format("empty tensor name"));
        }
        let entry: TensorEntry = serde_json::from_value(value)
            .map_err(|e| Error::format(format!("tensor {key:?}: {e}")))?;
        let dtype: Dtype = entry.dtype.parse()?;
        let [begin, end] = entry.data_offsets;
        if begin > end {
            return Err(Error::format(format!("tensor {key:?}: offsets [{begin}, {end}] reversed")));
        }
        let expected = element_count(&entry.shape)
            .and_then(|c| c.checked_mul(dtype.size()))
            .ok_or_else(|| Error::format(format!("tensor {key:?}: shape overflows")))?;
        if end - begin != expected {
            return Err(Error::format(format!(
                "tensor {key:?}: {dtype} {:?} needs {expected} bytes, offsets span {}",
                entry.shape,
                end - begin
            )));
        }
        spans.push((begin, end, key.clone()));
        ckpt.tensors.insert(key, Tensor { dtype, shape: entry.shape, data: Vec::new() });
    }

    spans.sort();
    let mut cursor = 0usize;
    for (begin, end, name) in &spans {
        if *begin < cursor {
            return Err(Error::format(format!("tensor {name:?} overlaps the previous data segment")));
        }
        if *begin > cursor {
            return Err(Error::format(format!(
                "gap of {} bytes before tensor {name:?}",
                begin - cursor
            )));
        }
        cursor = *end;
    }
    if cursor > data.len() {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("data section is {} bytes, header describes {cursor}", data.len()),
        )));
    }
    if cursor < data.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after the last data segment",
            data.len() - cursor
        )));
    }
    for (begin, end, name) in spans {
        let t = ckpt.tensors.get_mut(&name).expect("inserted above");
        t.data = data[begin..end].to_vec();
    }
    Ok(ckpt)
}

/// Read a checkpoint and record its fingerprint under [`FINGERPRINT_KEY`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path)
        .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut ckpt = parse(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })?;
    let fp = ckpt.fingerprint_hex();
    ckpt.metadata.insert(FINGERPRINT_KEY.to_string(), fp);
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let wrap = |e: io::Error| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())));
    let file = fs::File::create(path).map_err(wrap)?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(wrap)?;
    w.flush().map_err(wrap)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MismatchReason {
    /// Present in the compared checkpoint, absent from the first.
    MissingInA,
    /// Present in the first checkpoint, absent from the compared one.
    MissingInB,
    ShapeMismatch,
    DtypeMismatch,
}

impl fmt::Display for MismatchReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MismatchReason::MissingInA => "missing-in-A",
            MismatchReason::MissingInB => "missing-in-B",
            MismatchReason::ShapeMismatch => "shape-mismatch",
            MismatchReason::DtypeMismatch => "dtype-mismatch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Mismatch {
    pub name: String,
    pub reason: MismatchReason,
    /// Index of the checkpoint compared against the first one.
    pub other: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct CompatibilityReport {
    pub compatible: bool,
    pub mismatches: Vec<Mismatch>,
}

impl CompatibilityReport {
    pub fn into_result(self) -> Result<()> {
        if self.compatible {
            Ok(())
        } else {
            Err(Error::Incompatible(self))
        }
    }
}

impl fmt::Display for CompatibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.compatible {
            return f.write_str("compatible");
        }
        write!(f, "{} mismatch(es)", self.mismatches.len())?;
        for m in self.mismatches.iter().take(8) {
            write!(f, "; {} ({}, input {})", m.name, m.reason, m.other)?;
        }
        if self.mismatches.len() > 8 {
            write!(f, "; ...")?;
        }
        Ok(())
    }
}

/// Compare every checkpoint against the first one.
pub fn validate_compatibility(ckpts: &[&Checkpoint]) -> CompatibilityReport {
    let mut mismatches = Vec::new();
    if let Some((first, rest)) = ckpts.split_first() {
        for (i, other) in rest.iter().enumerate() {
            let other_idx = i + 1;
            for (name, a) in &first.tensors {
                match other.tensors.get(name) {
                    None => mismatches.push(Mismatch {
                        name: name.clone(),
                        reason: MismatchReason::MissingInB,
                        other: other_idx,
                    }),
                    Some(b) => {
                        if a.shape != b.shape {
                            mismatches.push(Mismatch {
                                name: name.clone(),
                                reason: MismatchReason::ShapeMismatch,
                                other: other_idx,
                            });
                        }
                        if a.dtype != b.dtype {
                            mismatches.push(Mismatch {
                                name: name.clone(),
                                reason: MismatchReason::DtypeMismatch,
                                other: other_idx,
                            });
                        }
                    }
                }
            }
            for name in other.tensors.keys() {
                if !first.tensors.contains_key(name) {
                    mismatches.push(Mismatch {
                        name: name.clone(),
                        reason: MismatchReason::MissingInA,
                        other: other_idx,
                    });
                }
            }
        }
    }
    CompatibilityReport { compatible: mismatches.is_empty(), mismatches }
}
