use std::fs;
use std::path::Path;

use hicl_core::fixture::{default_planted, write_planted};

#[test]
fn checked_in_fixture_matches_generator() {
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/planted");
    let fresh = tempfile::tempdir().unwrap();
    write_planted(fresh.path(), &default_planted()).unwrap();
    let mut names: Vec<_> = fs::read_dir(fresh.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for name in names {
        let want = fs::read(fresh.path().join(&name)).unwrap();
        let got = fs::read(shipped.join(&name)).unwrap_or_default();
        assert!(got == want, "fixtures/planted/{} is stale; regenerate it with write_planted", name.to_string_lossy());
    }
}
