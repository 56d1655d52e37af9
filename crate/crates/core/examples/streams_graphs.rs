//! Two streams ordered by an event, hazard checking, and a captured graph replayed.
//!
//!     cargo run --example streams_graphs

use vbt::vdev::{self, Runtime, RuntimeConfig};
use vbt::{ops, DType, Device, Tensor};

fn main() -> vbt::Result<()> {
    let rt = Runtime::new(RuntimeConfig { num_devices: 1, seed: 42, ..RuntimeConfig::default() });
    rt.hazard_check_mode(true);
    vdev::with_runtime(&rt, || -> vbt::Result<()> {
        let side = rt.create_stream(0)?;
        let x = Tensor::full(&[1024], 2.0, DType::F64, Device::Virt(0))?;
        let filled = rt.event_create(0)?;
        rt.event_record(filled, 0, 0)?;
        rt.event_wait(filled, 0, side)?;
        x.storage().record_stream(side);
        let y = {
            let _g = rt.stream_guard(0, side);
            ops::mul_scalar(&x, 3.0)?
        };
        let done = rt.event_create(0)?;
        rt.event_record(done, 0, side)?;
        rt.event_wait(done, 0, 0)?;
        y.storage().record_stream(0);
        let z = ops::add(&x, &y)?;
        rt.synchronize_all()?;
        println!("z[0] = {}, hazards = {}", z.to_vec::<f64>()?[0], rt.hazard_reports().len());

        let pool = rt.allocator().graph_pool_create(0)?;
        rt.begin_capture(0, side, pool)?;
        let out = {
            let _g = rt.stream_guard(0, side);
            ops::exp(&ops::mul(&x, &x)?)
        };
        let graph = rt.end_capture(0, side)?;
        let out = out?;
        for i in 0..3 {
            rt.replay(&graph, side)?;
            rt.synchronize_all()?;
            println!("replay {i}: out[0] = {} at {:p}", out.to_vec::<f64>()?[0], out.data_ptr());
        }
        println!("{} commands captured", graph.num_commands);
        drop(out);
        rt.destroy_graph(&graph)?;
        rt.allocator().graph_pool_release(pool)?;
        Ok(())
    })
}
