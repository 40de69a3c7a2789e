use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use sector::bench::{teragen, RECORD_LEN};
use sector::cli::{CliError, JobFile, Metrics};
use sector::cluster::{ClusterConfig, ConfigError};

fn sector(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sector")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

struct Daemon(Child);

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_node(config: &Path, name: &str) -> Daemon {
    let child = Command::new(env!("CARGO_BIN_EXE_sector"))
        .args(["node", "--config", config.to_str().unwrap(), "--name", name])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(20);
    while std::net::TcpStream::connect(name).is_err() {
        assert!(Instant::now() < deadline, "{name} did not come up");
        std::thread::sleep(Duration::from_millis(50));
    }
    Daemon(child)
}

#[test]
fn duplicate_address_is_a_config_error() {
    let text = "[[node]]\naddr = \"a:1\"\n[[node]]\naddr = \"a:1\"\n";
    let err = ClusterConfig::parse(text, Path::new(".")).unwrap_err();
    assert!(matches!(err, ConfigError::DuplicateAddr(_)));
    assert_eq!(CliError::from(err).exit_code(), 3);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("dup.toml");
    fs::write(&cfg, text).unwrap();
    let o = sector(&["node", "--config", cfg.to_str().unwrap(), "--name", "a:1"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let o = sector(&["scenario", "angle-synthetic", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn config_checks() {
    let base = Path::new(".");
    assert!(matches!(ClusterConfig::parse("", base), Err(ConfigError::NoNodes)));
    let two = "replica_target = 3\n[[node]]\naddr = \"a:1\"\n[[node]]\naddr = \"b:1\"\n";
    assert!(matches!(ClusterConfig::parse(two, base), Err(ConfigError::TargetTooHigh { target: 3, nodes: 2 })));
    let good = "replica_target = 2\nclock = \"accelerated\"\nday_seconds = 0.5\n\
                [[node]]\naddr = \"a:1\"\nacl = [\"client\"]\n[[node]]\naddr = \"b:1\"\ndata_dir = \"/tmp/b\"\n";
    let c = ClusterConfig::parse(good, base).unwrap();
    assert_eq!(c.nodes.len(), 2);
    assert_eq!(c.nodes[0].acl, vec!["client".to_string()]);
    assert!(matches!(ClusterConfig::parse("bogus = 1\n[[node]]\naddr = \"a:1\"\n", base), Err(ConfigError::Syntax(_))));
}

#[test]
fn unknown_scenario_is_a_usage_error() {
    let o = sector(&["scenario", "no-such-thing"]);
    assert_eq!(o.status.code(), Some(2));
    assert!("no-such-thing".parse::<sector::cli::Scenario>().unwrap_err().exit_code() == 2);
}

#[test]
fn exit_codes_are_distinct() {
    let codes = [
        CliError::Other(String::new()).exit_code(),
        CliError::Usage(String::new()).exit_code(),
        CliError::BadConfig(String::new()).exit_code(),
        CliError::Transport(String::new()).exit_code(),
        CliError::Job(String::new()).exit_code(),
        CliError::Validation(String::new()).exit_code(),
    ];
    let mut sorted = codes.to_vec();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), codes.len());
    assert!(codes.iter().all(|&c| c != 0));
}

#[test]
fn unreachable_entry_is_a_transport_error() {
    let dir = tempfile::tempdir().unwrap();
    let port = free_port();
    let o = sector(&["download", "--entry", &format!("127.0.0.1:{port}"), "x", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn metrics_text_round_trip() {
    let mut m = Metrics::new();
    m.set("records", 10);
    m.set("validation", "pass");
    m.secs("sort_secs", Duration::from_millis(1500));
    m.set("records", 12);
    let text = m.to_text();
    assert_eq!(text, "records=12\nvalidation=pass\nsort_secs=1.500\n");
    assert_eq!(Metrics::parse(&text).unwrap(), m);
    assert!(m.passed());
    assert_eq!(m.without_timings().entries().len(), 2);
    assert!(Metrics::parse("no equals sign").is_err());
}

#[test]
fn scenario_metrics_repeat_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("m{i}.txt"));
        let o = sector(&["scenario", "angle-synthetic", "--seed", "7", "--metrics", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let m = Metrics::parse(&fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(m.get("flagged"), Some("21"));
        assert_eq!(m.get("distributed_match"), Some("true"));
        runs.push(m.without_timings());
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn job_file_parsing() {
    let j = JobFile::parse("operator = \"identity\"\ninputs = [\"a\", \"b\"]\n").unwrap();
    assert_eq!((j.output.as_str(), j.bucket.as_str(), j.spes_per_node), ("local", "tag", 1));
    assert!(j.destinations.is_empty() && j.job_id.is_none());
    let j = JobFile::parse(
        "operator = \"count\"\ninputs = [\"a\"]\noutput = \"shuffle\"\nbucket = \"first-byte\"\n\
         destinations = [\"n:1\", \"m:1\"]\nparams = \"x\"\njob_id = \"j1\"\nsegment_min = 10\nsegment_max = 100\n",
    )
    .unwrap();
    assert_eq!(j.destinations.len(), 2);
    assert_eq!((j.segment_min, j.segment_max), (Some(10), Some(100)));
    assert_eq!(JobFile::parse("inputs = []\n").unwrap_err().exit_code(), 3);
    assert_eq!(JobFile::parse("operator = \"x\"\ninputs = []\ncolour = 1\n").unwrap_err().exit_code(), 3);
}

#[test]
fn teragen_and_terasplit_commands() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("gen.dat");
    let o = sector(&["teragen", "--records", "500", "--seed", "3", "--out", raw.to_str().unwrap()]);
    assert!(o.status.success());
    let (data, _) = teragen(500, 3);
    assert_eq!(fs::read(&raw).unwrap(), data);
    assert!(dir.path().join("gen.dat.idx").is_file());

    let mut recs: Vec<&[u8]> = data.chunks(RECORD_LEN).collect();
    recs.sort();
    let sorted = dir.path().join("sorted.dat");
    fs::write(&sorted, recs.concat()).unwrap();
    let o = sector(&["terasplit", "--in", sorted.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    assert!(line.starts_with("{\"threshold\": "), "{line}");
    assert!(line.contains("\"gain\": "));
}

#[test]
fn angle_command_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let v = sector::angle::Synthetic::default().generate();
    let input = dir.path().join("f.csv");
    fs::write(&input, sector::angle::write_features(&v, ',')).unwrap();
    let out = dir.path().join("report.tsv");
    let o = sector(&["angle", "--in", input.to_str().unwrap(), "--nodes", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(out).unwrap();
    assert_eq!(report.lines().count(), 30);
    let flagged: Vec<&str> = report.lines().filter(|l| l.split('\t').nth(2) == Some("1")).collect();
    assert_eq!(flagged.len(), 1);
    assert!(flagged[0].starts_with("21\t"));
}

#[test]
fn terasort_command_validates() {
    let dir = tempfile::tempdir().unwrap();
    let job = dir.path().join("sort.toml");
    fs::write(&job, "nodes = 3\nrecords = 3000\nseed = 2\n").unwrap();
    let metrics = dir.path().join("m.txt");
    let o = sector(&["terasort", "--job", job.to_str().unwrap(), "--metrics", metrics.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = Metrics::parse(&fs::read_to_string(metrics).unwrap()).unwrap();
    assert!(m.passed());
    assert!(m.get("terasort_secs").is_some());
}

#[test]
fn two_node_cloud_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let a = format!("127.0.0.1:{}", free_port());
    let b = format!("127.0.0.1:{}", free_port());
    let cfg = dir.path().join("cloud.toml");
    fs::write(
        &cfg,
        format!("replica_target = 2\n[[node]]\naddr = \"{a}\"\nacl = [\"client\"]\n[[node]]\naddr = \"{b}\"\nacl = [\"client\"]\n"),
    )
    .unwrap();
    let _na = spawn_node(&cfg, &a);
    let _nb = spawn_node(&cfg, &b);

    let local = dir.path().join("in.txt");
    fs::write(&local, b"line one\nline two\n").unwrap();
    let o = sector(&["upload", "--entry", &a, local.to_str().unwrap(), "docs/in.txt"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = sector(&["locate", "--entry", &b, "docs/in.txt"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("docs/in.txt\t18 bytes\t1 records\t"), "{}", stdout(&o));

    let back = dir.path().join("out.txt");
    let o = sector(&["download", "--entry", &b, "docs/in.txt", back.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read(&back).unwrap(), b"line one\nline two\n");

    let job = dir.path().join("job.toml");
    fs::write(&job, "operator = \"identity\"\ninputs = [\"docs/in.txt\"]\n").unwrap();
    let o = sector(&["submit", "--entry", &a, "--job", job.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("1/1 segments done (100%)"), "{}", stdout(&o));

    fs::write(&job, "operator = \"nope\"\ninputs = [\"docs/in.txt\"]\n").unwrap();
    let o = sector(&["submit", "--entry", &a, "--job", job.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5), "{}", String::from_utf8_lossy(&o.stderr));
}
