#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A configuration small enough to run every stage in seconds.
pub const TINY: &str = r#"
profile = "desk"

[grid]
nx = 8
ny = 8
nz = 8
dx = 15.0
dy = 15.0
dz = 4.0

[variogram]
sill = 1.0
r_max = 60.0
r_mid = 30.0
r_min = 8.0
azimuth = 30.0
mean = 4.79

[[wells]]
name = "I1"
kind = "injector"
i = 1
j = 1
k_top = 0
k_bottom = 7
r_w = 0.1

[[wells]]
name = "P1"
kind = "producer"
i = 6
j = 6
k_top = 0
k_bottom = 7
r_w = 0.1

[[constraints]]
phase = "water_injection"
limit = 150.0

[[constraints]]
phase = "water_production"
limit = 100.0

[controls]
n_steps = 2

[ensemble]
n_pca = 12
n_truth = 2
n_prior = 10
max_latent = 4

[proxy]
n_neu = 8
pad_to_multiple_of_8 = false
n_train_per_model = 2
n_test_per_model = 1
retrain_train_per_model = 1

[proxy.train]
max_epochs = 30
test_every = 10

[proxy.retrain]
max_epochs = 10

[optimization.pso]
n_swarm = 6
n_iter = 4

[history_matching.lm]
max_iterations = 2

[clrm]
n_cycles = 2
"#;

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_clrm"))
}

pub fn write_tiny(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

pub fn clrm(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(bin());
    c.args(args);
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().unwrap()
}

pub fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Relative path to contents for every file under `dir`.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
