//! Drive the caching allocator through tensors and print stats and a snapshot.
//!
//!     cargo run --example allocator_snapshot

use vbt::vdev::{self, Runtime};
use vbt::{DType, Device, Tensor};

fn main() -> vbt::Result<()> {
    let rt = Runtime::with_devices(1);
    vdev::with_runtime(&rt, || -> vbt::Result<()> {
        let keep: Vec<Tensor> = (0..4).map(|i| Tensor::zeros(&[1000 * (i + 1)], DType::F32, Device::Virt(0))).collect::<vbt::Result<_>>()?;
        let big = Tensor::zeros(&[1 << 20], DType::F64, Device::Virt(0))?;
        drop(big);
        rt.synchronize_all()?;
        let a = rt.allocator();
        println!("{}", serde_json::to_string(&a.memory_stats(0)?).unwrap());
        println!("{}", a.memory_snapshot(0)?.to_json());
        let released = a.empty_cache(0)?;
        println!("empty_cache released {released} bytes, {} tensors still live", keep.len());
        println!("{}", serde_json::to_string(&a.memory_stats(0)?.reserved_bytes).unwrap());
        Ok(())
    })
}
