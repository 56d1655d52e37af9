//! Load a C plugin and call the ops it registers.
//!
//!     cc -shared -fPIC -std=c99 -I crates/core/include \
//!         crates/core/tests/fixtures/plugins/axpby.c -o /tmp/libaxpby.so
//!     cargo run --example plugin -- /tmp/libaxpby.so

use vbt::dispatch::BoxedValue;
use vbt::plugin::load_plugin;
use vbt::{ops, Device, Tensor};

fn main() -> vbt::Result<()> {
    let Some(path) = std::env::args().nth(1) else {
        eprintln!("usage: plugin <path to shared library>");
        std::process::exit(2);
    };
    let m = load_plugin(&path)?;
    println!("loaded {} (ABI {}.{}) with ops {:?}", m.path.display(), m.abi_major, m.minor_used, m.ops);
    if m.ops.iter().any(|o| o == "fixture::axpby") {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3], Device::Host)?;
        let y = Tensor::from_vec(vec![10.0, 20.0, 30.0], &[3], Device::Host)?;
        let r = ops::call("fixture::axpby", vec![BoxedValue::Tensor(x), BoxedValue::Tensor(y), BoxedValue::Float(2.0), BoxedValue::Float(0.5)])?;
        println!("2x + 0.5y = {:?}", r.to_vec::<f64>()?);
    }
    Ok(())
}
