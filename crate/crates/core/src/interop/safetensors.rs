//! safetensors reader/writer.
//!
//! Layout: u64 little-endian header length `N`, `N` bytes of JSON, then the
//! raw little-endian payload. The writer emits the JSON without whitespace,
//! with keys in lexicographic order and payload segments in name order, so
//! equal inputs give identical bytes. The reader accepts any whitespace.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::device::Device;
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::tensor::{numel_of, Tensor};

pub const MAX_HEADER_BYTES: u64 = 100 << 20;

pub type TensorMap = BTreeMap<String, Tensor>;
pub type Metadata = BTreeMap<String, String>;

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let host = if t.device().is_host() { t.clone() } else { t.to_device(Device::Host)? };
    let c = host.contiguous()?;
    let n = c.numel() * c.dtype().size_bytes();
    let mut out = vec![0u8; n];
    if n > 0 {
        // SAFETY: a contiguous host tensor owns n bytes from its data pointer;
        // every element type here is stored little-endian on supported targets.
        unsafe { std::ptr::copy_nonoverlapping(c.data_ptr() as *const u8, out.as_mut_ptr(), n) };
    }
    Ok(out)
}

/// Encode `tensors` into safetensors bytes.
pub fn serialize<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>, metadata: &Metadata) -> Result<Vec<u8>> {
    let mut named: BTreeMap<&str, &Tensor> = BTreeMap::new();
    for (name, t) in tensors {
        if name == "__metadata__" {
            return Err(Error::Format("\"__metadata__\" is reserved".into()));
        }
        if named.insert(name, t).is_some() {
            return Err(Error::DuplicateName(name.to_string()));
        }
    }
    let mut header = Map::new();
    if !metadata.is_empty() {
        header.insert("__metadata__".into(), json!(metadata));
    }
    let mut payload = Vec::new();
    for (name, t) in named {
        let bytes = tensor_bytes(t)?;
        let begin = payload.len();
        payload.extend_from_slice(&bytes);
        header.insert(
            name.to_string(),
            json!({ "data_offsets": [begin, payload.len()], "dtype": t.dtype().name(), "shape": t.sizes() }),
        );
    }
    // serde_json's default map keeps keys sorted
    let text = serde_json::to_vec(&Value::Object(header))?;
    let mut out = Vec::with_capacity(8 + text.len() + payload.len());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

fn parse_entry(name: &str, v: &Value) -> Result<Entry> {
    let bad = |msg: &str| Error::Format(format!("tensor {name:?}: {msg}"));
    let obj = v.as_object().ok_or_else(|| bad("entry is not an object"))?;
    let dtype = obj
        .get("dtype")
        .and_then(|d| d.as_str())
        .and_then(DType::from_name)
        .ok_or_else(|| bad("missing or unsupported dtype"))?;
    let shape = obj
        .get("shape")
        .and_then(|s| s.as_array())
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize).ok_or_else(|| bad("shape entries must be non-negative integers")))
        .collect::<Result<Vec<_>>>()?;
    let offs = obj.get("data_offsets").and_then(|o| o.as_array()).ok_or_else(|| bad("missing data_offsets"))?;
    if offs.len() != 2 {
        return Err(bad("data_offsets must have two entries"));
    }
    let off = |i: usize| offs[i].as_u64().map(|o| o as usize).ok_or_else(|| bad("offsets must be non-negative integers"));
    let (begin, end) = (off(0)?, off(1)?);
    if end < begin {
        return Err(bad("end offset precedes begin"));
    }
    let want = numel_of(&shape)
        .checked_mul(dtype.size_bytes())
        .ok_or_else(|| bad("shape overflows"))?;
    if end - begin != want {
        return Err(bad(&format!("{} payload bytes for shape {shape:?} of {dtype}, expected {want}", end - begin)));
    }
    Ok(Entry { name: name.to_string(), dtype, shape, begin, end })
}

fn tensor_from_bytes(dtype: DType, shape: &[usize], bytes: &[u8]) -> Result<Tensor> {
    let t = crate::tensor::make_tensor(shape, dtype, Device::Host)?;
    if !bytes.is_empty() {
        if dtype == DType::Bool && bytes.iter().any(|&b| b > 1) {
            return Err(Error::Format("BOOL payload byte other than 0 or 1".into()));
        }
        // SAFETY: fresh contiguous host tensor of exactly bytes.len() bytes.
        unsafe { std::ptr::copy_nonoverlapping(bytes.as_ptr(), t.data_ptr(), bytes.len()) };
    }
    Ok(t)
}

/// Decode safetensors bytes into host tensors and metadata.
pub fn deserialize(bytes: &[u8]) -> Result<(TensorMap, Metadata)> {
    if bytes.len() < 8 {
        return Err(Error::Format("file shorter than the 8-byte header length".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    if n > MAX_HEADER_BYTES {
        return Err(Error::Format(format!("header of {n} bytes exceeds the {MAX_HEADER_BYTES}-byte limit")));
    }
    let n = n as usize;
    if bytes.len() - 8 < n {
        return Err(Error::Format(format!("truncated header: {n} bytes declared, {} present", bytes.len() - 8)));
    }
    let header: Value = serde_json::from_slice(&bytes[8..8 + n]).map_err(|e| Error::Format(format!("malformed header JSON: {e}")))?;
    let obj = header.as_object().ok_or_else(|| Error::Format("header is not a JSON object".into()))?;
    let payload = &bytes[8 + n..];

    let mut metadata = Metadata::new();
    let mut entries = Vec::new();
    for (k, v) in obj {
        if k == "__metadata__" {
            let m = v.as_object().ok_or_else(|| Error::Format("__metadata__ must be an object".into()))?;
            for (mk, mv) in m {
                let s = mv.as_str().ok_or_else(|| Error::Format(format!("metadata value for {mk:?} is not a string")))?;
                metadata.insert(mk.clone(), s.to_string());
            }
        } else {
            entries.push(parse_entry(k, v)?);
        }
    }
    entries.sort_by_key(|e| (e.begin, e.end));
    let mut cursor = 0;
    for e in &entries {
        if e.begin < cursor {
            return Err(Error::Format(format!("tensor {:?} overlaps the previous tensor", e.name)));
        }
        if e.begin > cursor {
            return Err(Error::Format(format!("gap in payload before tensor {:?}", e.name)));
        }
        cursor = e.end;
    }
    if cursor > payload.len() {
        return Err(Error::Format(format!("truncated payload: header needs {cursor} bytes, file has {}", payload.len())));
    }
    if cursor < payload.len() {
        return Err(Error::Format(format!("{} trailing payload bytes not covered by the header", payload.len() - cursor)));
    }
    let mut tensors = TensorMap::new();
    for e in entries {
        tensors.insert(e.name.clone(), tensor_from_bytes(e.dtype, &e.shape, &payload[e.begin..e.end])?);
    }
    Ok((tensors, metadata))
}

/// Write `tensors` to `path`. Names must be unique.
pub fn save_safetensors<'a>(path: impl AsRef<Path>, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>, metadata: &Metadata) -> Result<()> {
    std::fs::write(path, serialize(tensors, metadata)?)?;
    Ok(())
}

pub fn load_safetensors(path: impl AsRef<Path>) -> Result<(TensorMap, Metadata)> {
    deserialize(&std::fs::read(path)?)
}

/// Convenience for `BTreeMap` inputs.
pub fn serialize_map(tensors: &TensorMap, metadata: &Metadata) -> Result<Vec<u8>> {
    serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), metadata)
}
