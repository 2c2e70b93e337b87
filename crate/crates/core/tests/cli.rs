use std::io::{BufRead, BufReader};
use std::process::{Command, Stdio};

use farview_core::bench::{run_experiment, Path, QueryName, WorkloadSpec};
use farview_core::client::QPair;

const PATHS: [Path; 4] = [Path::Fv, Path::FvV, Path::Lcpu, Path::Rcpu];

#[test]
fn every_query_runs_on_every_path() {
    for query in QueryName::ALL {
        let spec = WorkloadSpec {
            query,
            rows: 3000,
            tuple_bytes: if query == QueryName::ProjectionCrossover { 512 } else { 64 },
            selectivity: 0.3,
            groups: 100,
            clients: 3,
            runs: 2,
            seed: 11,
            ..Default::default()
        };
        let res = run_experiment(&spec, &PATHS, None).unwrap_or_else(|e| panic!("{query}: {e}"));
        for p in PATHS {
            let s = res.summary(p);
            assert!(s.runs >= 2, "{query} {p:?}");
            if p.remote() {
                assert!(s.bytes_on_wire > 0, "{query} {p:?}");
            } else {
                assert_eq!(s.bytes_on_wire, 0);
            }
        }
        assert_eq!(res.summary(Path::Fv).rows_out, res.summary(Path::Lcpu).rows_out);
        assert_eq!(res.smart_addressing, query == QueryName::ProjectionCrossover);
    }
}

#[test]
fn bench_writes_csv() {
    let dir = std::env::temp_dir().join(format!("fv-bench-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let out = dir.join("results.csv");
    let st = Command::new(env!("CARGO_BIN_EXE_farview-bench"))
        .args(["--query", "select", "--rows", "2000", "--tuple-bytes", "64", "--selectivity", "0.5"])
        .args(["--clients", "1", "--runs", "3", "--paths", "fv,lcpu", "--seed", "4", "--out"])
        .arg(&out)
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert!(st.success());
    let mut r = csv::Reader::from_path(&out).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        &header[..9],
        ["path", "query", "rows", "tuple_bytes", "selectivity", "run", "wall_us", "bytes_on_wire", "rows_out"]
    );
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| &r[8] == "1000"));
    assert_eq!(rows.iter().filter(|r| &r[0] == "FV").count(), 3);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn bench_rejects_bad_arguments() {
    let st = Command::new(env!("CARGO_BIN_EXE_farview-bench"))
        .args(["--paths", "gpu", "--out", "/dev/null"])
        .stderr(Stdio::null())
        .status()
        .unwrap();
    assert!(!st.success());
    let st = Command::new(env!("CARGO_BIN_EXE_farview-bench"))
        .args(["--selectivity", "0", "--out", "/dev/null"])
        .stderr(Stdio::null())
        .status()
        .unwrap();
    assert!(!st.success());
}

#[test]
fn node_flags_override_the_config_file() {
    let path = std::env::temp_dir().join(format!("fv-node-{}.conf", std::process::id()));
    std::fs::write(&path, "# test\nregions=3\nmtu=2048\ncredit_window=8\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_farview-node"))
        .arg("--config")
        .arg(&path)
        .args(["--mtu", "512", "--print-config"])
        .output()
        .unwrap();
    std::fs::remove_file(&path).unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("regions=3\n"));
    assert!(text.contains("mtu=512\n"));
    assert!(text.contains("credit_window=8\n"));

    let bad = Command::new(env!("CARGO_BIN_EXE_farview-node"))
        .args(["--regions", "0", "--print-config"])
        .stderr(Stdio::null())
        .status()
        .unwrap();
    assert!(!bad.success());
}

#[test]
fn node_process_serves_clients() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_farview-node"))
        .args(["--listen", "127.0.0.1:0", "--regions", "2"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().rsplit(' ').next().unwrap().to_string();
    let mut qp = QPair::open_connection(addr.as_str()).unwrap();
    assert!(qp.id().0 >= 1);
    qp.close().unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
}
