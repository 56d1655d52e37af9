//! safetensors save/load and zero-copy exchange descriptors.
//!
//!     cargo run --example interop -- [out.safetensors]

use vbt::interop::exchange::{export_descriptor, import_descriptor};
use vbt::interop::safetensors::{load_safetensors, save_safetensors, Metadata};
use vbt::{ops, Device, Tensor};

fn main() -> vbt::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("vbt_example.safetensors").display().to_string());
    let w = Tensor::from_vec(vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], Device::Host)?;
    let ids = Tensor::from_vec(vec![7i64, 8, 9], &[3], Device::Host)?;
    let meta: Metadata = [("format".to_string(), "vbt".to_string())].into();
    save_safetensors(&path, [("weight", &w), ("ids", &ids)], &meta)?;
    let (back, m) = load_safetensors(&path)?;
    println!("{path}: {:?} metadata {m:?}", back.keys().collect::<Vec<_>>());
    println!("weight {:?} = {:?}", back["weight"].sizes(), back["weight"].to_vec::<f32>()?);

    let t = w.transpose_view(0, 1)?;
    let d = export_descriptor(&t)?;
    println!("descriptor shape {:?} strides {:?}", d.shape, d.strides);
    let shared = import_descriptor(d)?;
    ops::fill_(&shared, 0.0)?;
    println!("writing through the import zeroes the original: {:?}", w.to_vec::<f32>()?);
    Ok(())
}
