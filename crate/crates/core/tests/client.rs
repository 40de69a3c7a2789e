mod common;

use std::fs;

use common::{cluster, cluster_at, random_records, CLIENT};
use proptest::prelude::*;
use sector::client::ClientError;
use sector::node::{NodeError, RecordIndex};
use sector::transport::{LinkProfile, NodeAddr};

#[test]
fn upload_then_locate_finds_one_location() {
    let dir = tempfile::tempdir().unwrap();
    let c = cluster(4, dir.path());
    let client = c.client(CLIENT);
    let locs = client.upload_bytes("docs/a.txt", b"some text", None).unwrap();
    assert_eq!(locs.len(), 1);
    assert_eq!(client.locate("docs/a.txt").unwrap(), locs);
    // The file went to the ring owner of its name.
    assert_eq!(locs[0], c.ring().current().owner_of("docs/a.txt").unwrap().addr);
}

#[test]
fn locate_unknown_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let c = cluster(3, dir.path());
    assert!(c.client(CLIENT).locate("missing").unwrap_err().is_not_found());
}

#[test]
fn unauthorized_upload_is_denied() {
    let dir = tempfile::tempdir().unwrap();
    let c = cluster(3, dir.path());
    let err = c.client("stranger:9000").upload_bytes("x", b"data", None).unwrap_err();
    assert!(matches!(err, ClientError::Node(NodeError::AccessDenied(_))), "{err}");
    assert_eq!(c.replica_count("x"), 0);
}

#[test]
fn nearest_replica_is_listed_first() {
    let dir = tempfile::tempdir().unwrap();
    let profile = LinkProfile::new().with("client", "alpha", 16.0).with("client", "beta", 55.0).with("alpha", "beta", 40.0);
    let addrs = vec!["alpha:7000".to_string(), "beta:7000".to_string()];
    let c = cluster_at(&addrs, dir.path(), profile, 2);
    let client = c.client(CLIENT);
    client.upload_bytes("near", b"0123456789", None).unwrap();
    c.run_replication_cycle();
    assert_eq!(client.locate("near").unwrap(), vec![NodeAddr::new("alpha:7000"), NodeAddr::new("beta:7000")]);
}

#[test]
fn replication_cycle_brings_locations_to_target() {
    let dir = tempfile::tempdir().unwrap();
    let c = cluster(5, dir.path());
    let client = c.client(CLIENT);
    client.upload_bytes("grow", &[7u8; 1000], None).unwrap();
    c.run_replication_cycle();
    assert_eq!(client.locate("grow").unwrap().len(), 3);
}

#[test]
fn round_trip_with_index() {
    let dir = tempfile::tempdir().unwrap();
    let c = cluster(3, dir.path());
    let client = c.client(CLIENT);
    let (data, idx) = random_records(&[100; 50], 9);
    client.upload_bytes("rt/indexed", &data, Some(&idx)).unwrap();
    let dest = dir.path().join("out.dat");
    assert_eq!(client.download("rt/indexed", &dest).unwrap(), data.len() as u64);
    assert_eq!(fs::read(&dest).unwrap(), data);
    let back = RecordIndex::decode(&fs::read(dir.path().join("out.dat.idx")).unwrap()).unwrap();
    assert_eq!(back, idx);
}

#[test]
fn upload_from_local_path() {
    let dir = tempfile::tempdir().unwrap();
    let c = cluster(2, dir.path());
    let src = dir.path().join("input.bin");
    fs::write(&src, b"from disk").unwrap();
    let client = c.client(CLIENT);
    client.upload(&src, "disk", None).unwrap();
    let dest = dir.path().join("copy.bin");
    client.download("disk", &dest).unwrap();
    assert_eq!(fs::read(dest).unwrap(), b"from disk");
}

#[test]
fn download_survives_one_dead_replica() {
    let dir = tempfile::tempdir().unwrap();
    let c = cluster(4, dir.path());
    let (data, idx) = random_records(&[64; 200], 10);
    c.client(CLIENT).upload_bytes("tough", &data, Some(&idx)).unwrap();
    c.run_replication_cycle();
    let holders = c.client(CLIENT).locate("tough").unwrap();
    assert_eq!(holders.len(), 3);
    for victim in &holders {
        c.kill(victim);
        let client = c.client(CLIENT);
        let dest = dir.path().join("tough.out");
        client.download("tough", &dest).unwrap();
        assert_eq!(fs::read(&dest).unwrap(), data);
        c.revive(victim).unwrap();
    }
}

#[test]
fn cached_locations_fail_over_to_next_holder() {
    let dir = tempfile::tempdir().unwrap();
    let c = cluster(4, dir.path());
    let client = c.client(CLIENT);
    let (data, idx) = random_records(&[10; 10], 11);
    client.upload_bytes("cached", &data, Some(&idx)).unwrap();
    c.run_replication_cycle();
    let first = client.locate("cached").unwrap()[0].clone();
    // The client still believes `first` is a holder.
    c.kill(&first);
    let batch = client.read_records("cached", 2, 3).unwrap();
    assert_eq!(batch.record(0), &data[20..30]);
}

#[test]
fn download_missing_is_not_found_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let c = cluster(2, dir.path());
    let dest = dir.path().join("never");
    let err = c.client(CLIENT).download("nope", &dest).unwrap_err();
    assert!(err.is_not_found(), "{err}");
    assert!(!dest.exists());
}

#[test]
fn every_located_holder_can_serve_reads() {
    let dir = tempfile::tempdir().unwrap();
    let c = cluster(6, dir.path());
    let client = c.client(CLIENT);
    for i in 0..10 {
        let (data, idx) = random_records(&[8; 16], 100 + i);
        client.upload_bytes(&format!("q/{i}"), &data, Some(&idx)).unwrap();
    }
    c.run_replication_cycle();
    for i in 0..10 {
        let name = format!("q/{i}");
        for h in client.locate(&name).unwrap() {
            let node = c.node(&h).unwrap();
            assert_eq!(node.store().read_records(&name, 0, 16).unwrap().len(), 16);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn upload_download_identity(data in proptest::collection::vec(any::<u8>(), 0..300_000), indexed in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let c = cluster(3, dir.path());
        let client = c.client(CLIENT);
        let idx = indexed.then(|| RecordIndex::contiguous(data.chunks(997).map(|c| c.len() as u64)));
        client.upload_bytes("prop", &data, idx.as_ref()).unwrap();
        c.run_replication_cycle();
        let dest = dir.path().join("prop.out");
        prop_assert_eq!(client.download("prop", &dest).unwrap(), data.len() as u64);
        prop_assert_eq!(fs::read(&dest).unwrap(), data);
    }
}
