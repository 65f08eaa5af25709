#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hdrflow::data::{translated_radiance, Manifest};
use hdrflow::flow::{write_flo, FlowField};
use hdrflow::io::write_pfm;
use hdrflow::nets::{FlowNetConfig, FusionNetConfig, HdrModel};
use sha2::{Digest, Sha256};

pub const FIXTURE_SIZE: usize = 64;
pub const FIXTURE_FRAMES: usize = 5;
pub const FIXTURE_VELOCITY: (f64, f64) = (2.0, -1.0);
pub const GOLDEN_SEED: u64 = 7;

pub fn run(args: &[&str]) -> Output {
    run_env(args, &[])
}

pub fn run_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hdrflow"));
    c.args(args).env_remove("HDRFLOW_THREADS");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// Value of the first `key=value` token named `key` on any stdout line.
pub fn value(o: &Output, key: &str) -> Option<String> {
    stdout(o)
        .lines()
        .flat_map(|l| l.split_whitespace())
        .find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('=')).map(String::from))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/seq64")
}

pub fn golden_file() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden.sha256")
}

/// Full-width networks initialized from `seed`, saved under `dir`.
pub fn seeded_weights(dir: &Path, seed: u64, candidates: usize) -> PathBuf {
    let m = HdrModel::<f32>::init(
        &FlowNetConfig::full(),
        &FusionNetConfig::for_candidates(candidates).unwrap(),
        seed,
    )
    .unwrap();
    let p = dir.join(format!("seed{seed}_k{candidates}.hdrw"));
    m.save(&p).unwrap();
    p
}

/// Writes a translated-scene sequence into `dir` via `hdrflow synth`, plus
/// ground-truth flows for the middle record.
pub fn write_sequence(dir: &Path, size: usize, frames: usize, schedule: &str) -> PathBuf {
    let hdr_dir = dir.join("hdr");
    std::fs::create_dir_all(&hdr_dir).unwrap();
    for (k, f) in translated_radiance::<f32>(size, FIXTURE_VELOCITY, frames).unwrap().iter().enumerate() {
        write_pfm(f, hdr_dir.join(format!("f{k:03}.pfm"))).unwrap();
    }
    let manifest = dir.join("manifest.txt");
    let o = run(&[
        "synth",
        "--hdr-dir",
        hdr_dir.to_str().unwrap(),
        "--schedule",
        schedule,
        "--out",
        manifest.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let mut m = Manifest::load(&manifest).unwrap();
    let c = frames / 2;
    let flow_dir = dir.join("flow");
    std::fs::create_dir_all(&flow_dir).unwrap();
    for k in [-1i32, 1] {
        let (u, v) = (k as f32 * FIXTURE_VELOCITY.0 as f32, k as f32 * FIXTURE_VELOCITY.1 as f32);
        let f = FlowField::new(FlowField::constant(size, size, u, v).flow, c, (c as i32 + k) as usize).unwrap();
        let name = PathBuf::from("flow").join(format!("f{c:03}_{k:+}.flo"));
        write_flo(&f, dir.join(&name)).unwrap();
        m.records[c].flows.insert(k, name);
    }
    m.save(&manifest).unwrap();
    manifest
}
