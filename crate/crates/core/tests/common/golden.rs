//! Golden safetensors fixtures written by tests/fixtures/safetensors/make_golden.py.

use std::path::PathBuf;

use serde_json::Value;
use vbt::DType;
use vbt::interop::safetensors::{deserialize, serialize_map, Metadata, TensorMap};

/// Files written in the canonical layout; loading and saving must give them back.
pub const CANONICAL: [&str; 3] = ["mixed", "scalar_and_empty", "no_tensors"];
/// Written by the reference implementation with a padded header.
pub const REFERENCE: &str = "reference_padded";

pub fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/safetensors")
}

pub fn bytes(stem: &str) -> Vec<u8> {
    std::fs::read(dir().join(format!("{stem}.safetensors"))).unwrap()
}

fn expected() -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir().join("expected.json")).unwrap()).unwrap()
}

/// Checks names, dtypes, shapes, bit patterns and metadata against expected.json.
pub fn check_contents(stem: &str, tensors: &TensorMap, meta: &Metadata) -> Result<(), String> {
    let exp = &expected()[stem];
    let want = exp["tensors"].as_object().ok_or(format!("{stem}: no expectation"))?;
    let names: Vec<&String> = tensors.keys().collect();
    let mut want_names: Vec<&String> = want.keys().collect();
    want_names.sort();
    if names != want_names {
        return Err(format!("{stem}: names {names:?} != {want_names:?}"));
    }
    for (name, w) in want {
        let t = &tensors[name];
        if t.dtype().name() != w["dtype"] {
            return Err(format!("{stem}/{name}: dtype {}", t.dtype()));
        }
        let shape: Vec<usize> = w["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap() as usize).collect();
        if t.sizes() != shape.as_slice() {
            return Err(format!("{stem}/{name}: shape {:?} != {shape:?}", t.sizes()));
        }
        let got = t.to_f64_vec().map_err(|e| e.to_string())?;
        // floats are stored as f64 bit patterns, integers as themselves
        let float = matches!(t.dtype(), DType::F32 | DType::F64);
        let vals: Vec<f64> = w["values"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| if float { f64::from_bits(v.as_u64().unwrap()) } else { v.as_i64().unwrap() as f64 })
            .collect();
        if got.iter().map(|v| v.to_bits()).ne(vals.iter().map(|v| v.to_bits())) {
            return Err(format!("{stem}/{name}: values {got:?} != {vals:?}"));
        }
    }
    let want_meta: Metadata = serde_json::from_value(exp["metadata"].clone()).unwrap();
    if *meta != want_meta {
        return Err(format!("{stem}: metadata {meta:?} != {want_meta:?}"));
    }
    Ok(())
}

/// Every fixture loads with the expected contents, canonical ones re-save
/// byte for byte, and save∘load∘save is byte-stable for all of them.
pub fn run_all() -> Result<usize, String> {
    let e = |x: vbt::Error| x.to_string();
    let mut n = 0;
    for stem in CANONICAL.iter().copied().chain([REFERENCE]) {
        let raw = bytes(stem);
        let (t, m) = deserialize(&raw).map_err(e)?;
        check_contents(stem, &t, &m)?;
        let once = serialize_map(&t, &m).map_err(e)?;
        if CANONICAL.contains(&stem) && once != raw {
            return Err(format!("{stem}: load then save changed the bytes"));
        }
        let (t2, m2) = deserialize(&once).map_err(e)?;
        check_contents(stem, &t2, &m2)?;
        if serialize_map(&t2, &m2).map_err(e)? != once {
            return Err(format!("{stem}: save∘load∘save not byte-identical"));
        }
        n += 1;
    }
    Ok(n)
}
