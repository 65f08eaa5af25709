//! Golden-output canary for `fuse` on the bundled 64x64 fixture.
//!
//! Regenerate the fixture and hashes with
//! `HDRFLOW_BLESS=1 cargo test -p hdrflow-cli --test golden -- --ignored`.

mod common;

use std::fs;

use common::*;

fn fuse_fixture(out: &std::path::Path, weights: &std::path::Path, threads: &str) -> Vec<(String, String)> {
    let manifest = fixture_dir().join("manifest.txt");
    let o = run(&[
        "fuse",
        "--input",
        manifest.to_str().unwrap(),
        "--weights",
        weights.to_str().unwrap(),
        "--exposures",
        "2",
        "--out-dir",
        out.to_str().unwrap(),
        "--threads",
        threads,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut files: Vec<_> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (sha256_hex(&fs::read(p).unwrap()), name)
        })
        .collect()
}

fn render(hashes: &[(String, String)]) -> String {
    hashes.iter().map(|(h, n)| format!("{h}  {n}\n")).collect()
}

#[test]
fn fuse_matches_golden_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let weights = seeded_weights(tmp.path(), GOLDEN_SEED, 5);
    let hashes = fuse_fixture(&tmp.path().join("out"), &weights, "1");
    assert_eq!(hashes.len(), FIXTURE_FRAMES - 2);
    let golden = fs::read_to_string(golden_file()).expect("golden hashes present");
    assert_eq!(render(&hashes), golden);
}

#[test]
#[ignore = "rewrites the bundled fixture; run with HDRFLOW_BLESS=1"]
fn bless() {
    if std::env::var("HDRFLOW_BLESS").as_deref() != Ok("1") {
        return;
    }
    let dir = fixture_dir();
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    write_sequence(&dir, FIXTURE_SIZE, FIXTURE_FRAMES, "1,8");
    let tmp = tempfile::tempdir().unwrap();
    let weights = seeded_weights(tmp.path(), GOLDEN_SEED, 5);
    let hashes = fuse_fixture(&tmp.path().join("out"), &weights, "1");
    fs::write(golden_file(), render(&hashes)).unwrap();
}
