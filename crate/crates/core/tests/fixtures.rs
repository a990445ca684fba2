use sha2::{Digest, Sha256};
use skyroute::instance::{instance_to_json, load_fixture};
use std::path::PathBuf;

fn fixtures_dir() -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "..", "fixtures"].iter().collect()
}

#[test]
fn fixture_checksums() {
    let dir = fixtures_dir();
    let sums = std::fs::read_to_string(dir.join("SHA256SUMS")).unwrap();
    let mut seen = 0;
    for line in sums.lines() {
        let (want, name) = line.split_once("  ").unwrap();
        let got = hex::encode(Sha256::digest(std::fs::read(dir.join(name)).unwrap()));
        assert_eq!(got, want, "{name}");
        seen += 1;
    }
    assert_eq!(seen, 6);
}

#[test]
fn fixtures_round_trip_through_json() {
    for name in ["c10", "c20", "c50"] {
        let inst = load_fixture(name).unwrap();
        let again = skyroute::instance::instance_from_json(&instance_to_json(&inst)).unwrap();
        assert_eq!(again, inst);
    }
}
