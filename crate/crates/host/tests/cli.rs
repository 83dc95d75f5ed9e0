use std::path::Path;

use teeod::cli::{run_teeod, run_wallet};

fn teeod(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("teeod").chain(args.iter().copied());
    let code = run_teeod(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn wallet(store: &Path, args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let dir = store.to_str().unwrap();
    let argv = ["wallet", "--seed", "11", "--storage-dir", dir].into_iter().chain(args.iter().copied());
    let code = run_wallet(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

#[test]
fn demos_print_their_results() {
    assert_eq!(teeod(&["demo", "increment", "--value", "9"]).1, "10\n");
    assert_eq!(
        teeod(&["demo", "shmem16"]).1,
        "000102030405060708090a0b0c0d0e0f\n"
    );
    assert_eq!(teeod(&["demo", "nope"]).0, 2);
}

#[test]
fn resources_reports_the_ceiling_and_rejects_zero() {
    let (code, out, _) = teeod(&["resources", "--enclaves", "4"]);
    assert_eq!(code, 0);
    assert!(out.contains("62.96"), "{out}");
    assert!(out.contains("max_enclaves: 6 (limited by BRAM)"), "{out}");
    let (code, _, err) = teeod(&["resources", "--enclaves", "0"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("INVALID_N"), "{err}");
}

#[test]
fn boot_refuses_more_enclaves_than_fit() {
    let (code, out, _) = teeod(&["--enclaves", "3", "boot"]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().filter(|l| l.starts_with("slot=")).count(), 3);
    let (code, _, err) = teeod(&["--enclaves", "7", "boot"]);
    assert_eq!(code, 1);
    assert!(err.contains('6'), "{err}");
}

#[test]
fn wallet_lifecycle_persists_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let (code, out, _) = wallet(&store, &["1", "1234"]);
    assert_eq!(code, 0);
    assert!(out.contains("None master key exists"), "{out}");
    let (code, out, _) = wallet(&store, &["2", "1234"]);
    assert_eq!(code, 0);
    let phrase = out.lines().last().unwrap();
    assert_eq!(phrase.split(' ').count(), 12);
    assert!(wallet(&store, &["1", "1234"]).1.contains("Master key exists"));
    // A second generate refuses to overwrite.
    assert_eq!(wallet(&store, &["2", "1234"]).0, 1);
    assert_eq!(wallet(&store, &["6", "0000", "-a", "0"]).0, 1);
    let (code, out, _) = wallet(&store, &["6", "1234", "-a", "0"]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(wallet(&store, &["4", "1234"]).0, 0);
    assert!(wallet(&store, &["1", "1234"]).1.contains("None master key exists"));
}

#[test]
fn same_seed_gives_the_same_mnemonic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = wallet(a.path(), &["2", "1234"]).1;
    let second = wallet(b.path(), &["2", "1234"]).1;
    assert_eq!(first, second);
}

#[test]
fn usage_errors_never_touch_the_fabric() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let events = dir.path().join("events.log");
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = [
        "wallet",
        "--storage-dir",
        store.to_str().unwrap(),
        "--event-log",
        events.to_str().unwrap(),
        "9",
        "1234",
    ];
    assert_eq!(run_wallet(argv, &mut out, &mut err), 2);
    assert!(String::from_utf8(err).unwrap().contains("usage"));
    assert!(!events.exists() || std::fs::read_to_string(&events).unwrap().is_empty());
    assert!(!store.exists());
    assert_eq!(wallet(&store, &["5", "1234"]).0, 2);
    assert_eq!(wallet(&store, &["1", "12a4"]).0, 2);
}
