//! Ring allreduce across virtual devices, with per-link traffic.
//!
//!     cargo run --example allreduce -- [world] [elems]

use vbt::fabric::Fabric;
use vbt::vdev::{self, Runtime, RuntimeConfig};
use vbt::{Device, Tensor};

fn main() -> vbt::Result<()> {
    let mut args = std::env::args().skip(1);
    let world: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    let elems: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);
    let rt = Runtime::new(RuntimeConfig { num_devices: world, ..RuntimeConfig::default() });
    let fabric = Fabric::new(rt.clone());
    fabric.enable_all_peers()?;
    vdev::with_runtime(&rt, || -> vbt::Result<()> {
        let bufs: Vec<Tensor> = (0..world)
            .map(|r| Tensor::from_vec((0..elems).map(|i| (r * 100 + i) as i64).collect::<Vec<_>>(), &[elems], Device::Virt(r)))
            .collect::<vbt::Result<_>>()?;
        fabric.ring_allreduce(&bufs)?;
        for (r, b) in bufs.iter().enumerate() {
            println!("rank {r}: {:?}", b.to_vec::<i64>()?);
        }
        Ok(())
    })?;
    println!("{}", fabric.snapshot().to_json());
    Ok(())
}
