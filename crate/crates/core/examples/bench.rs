//! Time an op and run the backward-gate contention bench.
//!
//!     cargo run --release --example bench

use vbt::bench::{run, BenchConfig, Region};

fn main() -> vbt::Result<()> {
    for op in ["add", "mul", "exp"] {
        let cfg = BenchConfig { region: Region::Op(op.into()), numel: 1 << 16, ..BenchConfig::default() };
        println!("{}", run(&cfg)?.to_json());
    }
    let gate = BenchConfig { region: Region::BackwardGate, threads: 4, rounds: 20, ..BenchConfig::default() };
    println!("{}", run(&gate)?.to_json());
    Ok(())
}
