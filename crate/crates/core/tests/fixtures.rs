use std::path::Path;

use bartcause::fixtures::{check_fixture, load_manifest, Command, Fixture};

fn manifest() -> Vec<Fixture> {
    load_manifest(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/manifest.toml")).unwrap()
}

fn run(name: &str) {
    let f = manifest().into_iter().find(|f| f.name == name).unwrap();
    let out = check_fixture(&f).unwrap();
    for d in &out.deltas {
        println!("{name}: {} expected {} actual {} {}", d.label, d.expected, d.actual, if d.ok { "ok" } else { "FAIL" });
    }
    assert!(out.passed, "{name}: {:?}", out.failures());
}

#[test]
fn manifest_lists_every_fixture() {
    let m = manifest();
    let commands: Vec<Command> = m.iter().map(|f| f.command).collect();
    assert_eq!(commands, [Command::FmiFromRiv, Command::LeapTelescoping, Command::AdrfCoverage]);
    assert!(m.iter().all(|f| f.expected.exists()));
}

#[test]
fn fmi_riv_consistency() {
    run("fmi-riv-consistency");
}

#[test]
fn leap_telescoping() {
    run("leap-telescoping");
}

#[test]
fn plateau_adrf() {
    run("plateau-adrf");
}

#[test]
fn missing_artifact_is_an_error() {
    let mut f = manifest().remove(0);
    f.expected = f.expected.with_file_name("absent.toml");
    assert!(check_fixture(&f).is_err());
}
