use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use parking_lot::Mutex;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/plugins")
}

pub fn include_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

fn out_dir() -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("plugins");
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn cc() -> String {
    std::env::var("CC").unwrap_or_else(|_| "cc".into())
}

/// Compile `tests/fixtures/plugins/<name>.c` into a shared library, once per process.
pub fn build_plugin(name: &str) -> PathBuf {
    static BUILT: OnceLock<Mutex<Vec<(String, PathBuf)>>> = OnceLock::new();
    let built = BUILT.get_or_init(|| Mutex::new(Vec::new()));
    let mut built = built.lock();
    if let Some((_, p)) = built.iter().find(|(n, _)| n == name) {
        return p.clone();
    }
    let out = out_dir().join(format!("lib{name}-{}.so", std::process::id()));
    let status = Command::new(cc())
        .args(["-shared", "-fPIC", "-O2", "-std=c99", "-Wall", "-Werror", "-I"])
        .arg(include_dir())
        .arg(fixture_dir().join(format!("{name}.c")))
        .arg("-o")
        .arg(&out)
        .status()
        .expect("C compiler not found");
    assert!(status.success(), "compiling {name}.c failed");
    built.push((name.to_string(), out.clone()));
    out
}

/// Compile and run a C program from the fixture directory, returning stdout.
pub fn run_c_program(name: &str) -> String {
    let exe = out_dir().join(format!("{name}-{}", std::process::id()));
    let status = Command::new(cc())
        .args(["-O0", "-std=c99", "-Wall", "-Werror", "-I"])
        .arg(include_dir())
        .arg(fixture_dir().join(format!("{name}.c")))
        .arg("-o")
        .arg(&exe)
        .status()
        .expect("C compiler not found");
    assert!(status.success(), "compiling {name}.c failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success());
    String::from_utf8(out.stdout).unwrap()
}
