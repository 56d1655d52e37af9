//! Train the 2-layer reversal transformer and print progress every 50 steps.
//!
//!     cargo run --release --example train_reversal -- [steps] [seed]

use vbt::train::{train_reversal, TrainConfig};

fn main() -> vbt::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = TrainConfig { steps, seed, early_stop_acc: Some(0.99), ..TrainConfig::default() };
    let report = train_reversal(&cfg, |line| {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v.get("eval_acc").is_some() || v["step"].as_u64().is_some_and(|s| s % 50 == 0) {
            println!("{line}");
        }
    })?;
    match report.first_step_reaching(0.99) {
        Some(s) => println!("held-out token accuracy reached 0.99 at step {s}"),
        None => println!("final held-out accuracy {:.4}", report.final_eval_acc().unwrap_or(0.0)),
    }
    Ok(())
}
