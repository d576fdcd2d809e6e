use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use xmodal_core::datasetio::{load_manifest, Dataset};
use xmodal_core::{Error, ViolationKind};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/manifests")
}

fn expected() -> BTreeMap<String, String> {
    serde_json::from_slice(&fs::read(fixtures().join("expected.json")).unwrap()).unwrap()
}

#[test]
fn valid_fixture_loads() {
    let m = load_manifest(fixtures().join("valid.json")).unwrap();
    assert_eq!(m.items.len(), 3);
    assert_eq!(m.grid_dims(), (2, 2, 3));
    let d = Dataset::load(fixtures().join("valid.json")).unwrap();
    assert_eq!(d.manifest, m);
}

#[test]
fn corpus_has_ten_malformed_manifests() {
    assert_eq!(expected().len(), 10);
}

#[test]
fn every_malformed_manifest_is_rejected_with_its_category() {
    for (file, kind) in expected() {
        match load_manifest(fixtures().join(&file)) {
            Err(Error::Validation(v)) => {
                assert!(!v.is_empty(), "{file}");
                let kinds: Vec<String> = v.iter().map(|x| format!("{:?}", x.kind)).collect();
                assert!(kinds.iter().all(|k| *k == kind), "{file}: expected {kind}, got {kinds:?}");
            }
            other => panic!("{file}: expected a validation error, got {other:?}"),
        }
    }
}

#[test]
fn missing_grid_names_the_path() {
    let Err(Error::Validation(v)) = load_manifest(fixtures().join("missing_grid_file.json")) else {
        panic!("accepted");
    };
    assert_eq!(v[0].kind, ViolationKind::DanglingPath);
    assert!(v[0].detail.contains("grids/missing.xmt"), "{}", v[0].detail);
}

#[test]
fn all_violations_are_listed_at_once() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(fixtures().join("valid.json")).unwrap();
    let mut m: serde_json::Value = serde_json::from_str(&text).unwrap();
    m["items"][0]["class_labels"] = serde_json::json!(["horse"]);
    m["items"][1]["grid_ref"] = serde_json::json!("nowhere.xmt");
    let path = dir.path().join("manifest.json");
    fs::write(&path, m.to_string()).unwrap();
    let Err(Error::Validation(v)) = load_manifest(&path) else { panic!("accepted") };
    let kinds: Vec<ViolationKind> = v.iter().map(|x| x.kind).collect();
    assert!(kinds.contains(&ViolationKind::UnknownClass), "{kinds:?}");
    assert!(kinds.contains(&ViolationKind::DanglingPath), "{kinds:?}");
}
