//! The checked-in scenario files must match the generators they were
//! produced from. Regenerate with `SEASTAR_BLESS=1 cargo test -p seastar-cli --test fixtures`.

use std::path::PathBuf;

use seastar_core::sim::{synthetic_workload, ClusterSim, ClusterSpec, WorkloadScript};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn check(name: &str, expected: String) {
    let path = fixture(name);
    if std::env::var_os("SEASTAR_BLESS").is_some() {
        std::fs::write(&path, &expected).unwrap();
    }
    let on_disk = std::fs::read_to_string(&path).unwrap();
    assert_eq!(on_disk, expected, "{name} is stale");
}

#[test]
fn cluster_fixture_is_in_sync() {
    let spec = ClusterSpec {
        seed: 7,
        ..ClusterSpec::new(16, 2, 2)
    };
    check("cluster.json", serde_json::to_string_pretty(&spec).unwrap() + "\n");
}

#[test]
fn workload_fixture_is_in_sync() {
    let script = synthetic_workload(7, 8);
    check("workload.json", serde_json::to_string_pretty(&script).unwrap() + "\n");
}

#[test]
fn io_dip_fixture_builds() {
    let spec: ClusterSpec = serde_json::from_str(&std::fs::read_to_string(fixture("io_dip_cluster.json")).unwrap()).unwrap();
    let script: WorkloadScript =
        serde_json::from_str(&std::fs::read_to_string(fixture("io_dip_workload.json")).unwrap()).unwrap();
    assert_eq!(script.jobs.len(), 1);
    ClusterSim::build(spec, script).unwrap();
}
