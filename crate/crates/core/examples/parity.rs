//! Check a parity manifest against the exported symbol table.
//!
//!     cargo run --example parity -- [manifest.json]

use vbt::parity::{check_parity, shipped_manifest_path};

fn main() -> vbt::Result<()> {
    let path = std::env::args().nth(1).map(Into::into).unwrap_or_else(shipped_manifest_path);
    let r = check_parity(&path)?;
    println!("{}: {} checked, {} present, missing {:?}", path.display(), r.checked, r.present.len(), r.missing);
    std::process::exit(r.exit_code());
}
