use std::collections::HashMap;
use std::net::TcpStream;
use std::time::{Duration, Instant};

use farview_core::client::{ClientError, FTable, QPair};
use farview_core::memory::{MemoryConfig, PAGE_SIZE};
use farview_core::operators::{
    AggFn, AggValue, AggregateSpec, Combiner, Comparator, CryptoParams, CtrCipher, Measure, SelectionPredicate, Term,
};
use farview_core::pipeline::params::{self, encode_request, Query, Request};
use farview_core::reference;
use farview_core::schema::Schema;
use farview_core::server::{Node, ServerConfig};
use farview_core::wire::{Link, LinkConfig, QueuePairId, Status, Verb, VerbKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config() -> ServerConfig {
    ServerConfig {
        listen: "127.0.0.1:0".into(),
        memory: MemoryConfig {
            channels: 2,
            channel_capacity: 64 << 20,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn node() -> Node {
    Node::start(config()).unwrap()
}

fn random_rows(rows: usize, cols: usize, max: u64, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * cols).flat_map(|_| rng.gen_range(0..max).to_le_bytes()).collect()
}

fn table(qp: &mut QPair, rows: usize, data: &[u8]) -> FTable {
    let mut ft = FTable::new("t", Schema::uniform(8, 8), rows);
    qp.alloc_table_mem(&mut ft).unwrap();
    qp.table_write(&ft, data).unwrap();
    ft
}

fn sorted(mut v: Vec<Vec<u8>>) -> Vec<Vec<u8>> {
    v.sort();
    v
}

/// Waits for the node to finish tearing down closed connections.
fn settle(n: &Node) {
    let t = Instant::now();
    while n.open_connections() > 0 && t.elapsed() < Duration::from_secs(5) {
        std::thread::sleep(Duration::from_millis(5));
    }
}

#[test]
fn connection_lifecycle() {
    let n = node();
    let mut qps: Vec<QPair> = (0..6).map(|_| QPair::open_connection(n.addr()).unwrap()).collect();
    assert_eq!(qps[0].region(), 0);
    let err = QPair::open_connection(n.addr()).err().unwrap();
    assert_eq!(err.status(), Some(Status::ResourceExhausted));
    qps[2].close().unwrap();
    assert!(matches!(qps[2].table_read(&FTable::new("x", Schema::uniform(1, 8), 1)), Err(_)));
    settle_regions(&n, 5);
    let again = QPair::open_connection(n.addr()).unwrap();
    assert_eq!(again.region(), 2);
    drop(qps);
    drop(again);
    settle(&n);
    assert_eq!(n.operator_stack().bound_regions(), 0);
}

fn settle_regions(n: &Node, want: usize) {
    let t = Instant::now();
    while n.operator_stack().bound_regions() != want && t.elapsed() < Duration::from_secs(5) {
        std::thread::sleep(Duration::from_millis(5));
    }
}

#[test]
fn tables_and_plain_access() {
    let n = node();
    let mut qp = QPair::open_connection(n.addr()).unwrap();
    let mut ft = FTable::new("t", Schema::uniform(8, 8), (1 << 20) / 64);
    qp.alloc_table_mem(&mut ft).unwrap();
    assert_eq!(ft.base_vaddr.unwrap() % PAGE_SIZE, 0);
    assert_eq!(qp.table_read(&ft).unwrap(), vec![0u8; 1 << 20]);

    let data = random_rows(1024, 8, u64::MAX, 1);
    qp.table_write(&ft, &data).unwrap();
    assert_eq!(qp.read_at(&ft, 0, data.len() as u64).unwrap(), data);

    // Interleaved overlapping writes against a reference array.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut model = qp.table_read(&ft).unwrap();
    for _ in 0..50 {
        let off = rng.gen_range(0..model.len() - 5000);
        let len = rng.gen_range(1..5000);
        let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        qp.write_at(&ft, off as u64, &bytes).unwrap();
        model[off..off + len].copy_from_slice(&bytes);
    }
    assert_eq!(qp.table_read(&ft).unwrap(), model);

    let e = qp.read_at(&ft, ft.size - 8, 16).unwrap_err();
    assert_eq!(e.status(), Some(Status::BoundsError));
    qp.free_table_mem(&ft).unwrap();
    assert_eq!(qp.free_table_mem(&ft).unwrap_err().status(), Some(Status::NotFound));
    assert_eq!(n.memory().mapped_pages(), 0);
}

#[test]
fn write_larger_than_one_transfer() {
    let n = node();
    let mut qp = QPair::open_connection(n.addr()).unwrap();
    let rows = (9 << 20) / 64 + 3;
    let data = random_rows(rows, 8, u64::MAX, 3);
    let ft = table(&mut qp, rows, &data);
    assert_eq!(qp.table_read(&ft).unwrap(), data);
}

#[test]
fn tables_are_private_to_their_connection() {
    let n = node();
    let mut a = QPair::open_connection(n.addr()).unwrap();
    let mut b = QPair::open_connection(n.addr()).unwrap();
    let ft = table(&mut a, 16, &random_rows(16, 8, 9, 4));
    assert_eq!(b.table_read(&ft).unwrap_err().status(), Some(Status::PermissionDenied));
    assert_eq!(
        b.distinct(&ft, 1, 1).unwrap_err().status(),
        Some(Status::PermissionDenied)
    );
}

#[test]
fn distinct_small_example() {
    let n = node();
    let mut qp = QPair::open_connection(n.addr()).unwrap();
    let mut ft = FTable::new("k", Schema::uniform(1, 8), 4);
    qp.alloc_table_mem(&mut ft).unwrap();
    let data: Vec<u8> = [5u64, 3, 5, 7].iter().flat_map(|v| v.to_le_bytes()).collect();
    qp.table_write(&ft, &data).unwrap();
    let r = qp.distinct(&ft, 1, 1).unwrap();
    let keys: Vec<u64> = r.rows.iter().map(|b| u64::from_le_bytes(b[..8].try_into().unwrap())).collect();
    assert_eq!(keys, vec![5, 3, 7]);
    assert!(r.overflow_merged);
}

#[test]
fn float_select_sugar() {
    // SELECT a FROM S WHERE c > 3.14
    let req = Request {
        pipeline: params::SELECT,
        rcpu: false,
        query: Query::Select {
            proj: 0b1,
            predicate: SelectionPredicate::single(Term::float(2, Comparator::Gt, 3.14)),
        },
    };
    let (w, payload) = encode_request(&req).unwrap();
    assert_eq!(w[1], 0b001);
    assert_eq!(w[2], 0b100);
    assert_eq!(w[4], 3.14f64.to_bits());
    assert!(payload.is_empty());

    let n = node();
    let mut qp = QPair::open_connection(n.addr()).unwrap();
    let mut ft = FTable::new("s", Schema::uniform(3, 8), 1000);
    qp.alloc_table_mem(&mut ft).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows: Vec<[f64; 3]> = (0..1000).map(|_| [rng.gen(), 0.0, rng.gen_range(0.0..6.0)]).collect();
    let bytes: Vec<u8> = rows.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    qp.table_write(&ft, &bytes).unwrap();
    let r = qp.select(&ft, 0b1, 0b100, Comparator::Gt, 3.14).unwrap();
    let got: Vec<f64> = r.rows.iter().map(|b| f64::from_le_bytes(b[..8].try_into().unwrap())).collect();
    let want: Vec<f64> = rows.iter().filter(|r| r[2] > 3.14).map(|r| r[0]).collect();
    assert_eq!(got, want);
}

#[test]
fn full_selectivity_returns_the_table() {
    let n = node();
    let mut qp = QPair::open_connection(n.addr()).unwrap();
    let data = random_rows(3000, 8, 1000, 6);
    let ft = table(&mut qp, 3000, &data);
    let all = SelectionPredicate::single(Term::uint(0, Comparator::Ge, 0));
    for r in [
        qp.select_where(&ft, 0xff, all.clone()).unwrap(),
        qp.select_vectorized(&ft, 0xff, all.clone()).unwrap(),
        qp.select_smart(&ft, 0xff, all.clone()).unwrap(),
    ] {
        assert_eq!(r.rows.concat(), data);
    }
    assert_eq!(qp.table_read(&ft).unwrap(), data);
}

#[test]
fn paths_agree_and_stats_match_node_counters() {
    let n = node();
    let mut qp = QPair::open_connection(n.addr()).unwrap();
    let rows = 20_000;
    let data = random_rows(rows, 8, 300, 7);
    let ft = table(&mut qp, rows, &data);
    let s = ft.schema.clone();
    let pred = SelectionPredicate::new(
        vec![Term::uint(1, Comparator::Lt, 150), Term::int(4, Comparator::Ne, 7)],
        Combiner::And,
    );
    let spec = AggregateSpec {
        key_columns: 0b100,
        measures: AggFn::ALL.iter().map(|&func| Measure { column: 5, func }).collect(),
    };
    let queries = vec![
        (params::SELECT, Query::Select { proj: 0b1011, predicate: pred.clone() }),
        (params::SELECT_VEC, Query::Select { proj: 0b1011, predicate: pred.clone() }),
        (params::SMART_SELECT, Query::Select { proj: 0b1011, predicate: pred }),
        (params::DISTINCT, Query::Distinct { proj: 0b11, keys: 0b01 }),
        (params::GROUP_BY, Query::GroupBy(spec)),
    ];
    let before = n.emitted_bytes(qp.id());
    let mut wire = 0;
    for (pipeline, q) in queries {
        let want = reference::evaluate(&q, &s, &data).unwrap();
        let fv = qp.run(&ft, &Request { pipeline, rcpu: false, query: q.clone() }).unwrap();
        let rc = qp.rcpu(&ft, q.clone()).unwrap();
        wire += fv.stats.bytes_on_wire + rc.stats.bytes_on_wire;
        if matches!(q, Query::GroupBy(_)) {
            assert_eq!(sorted(fv.rows), sorted(want.clone()));
            assert_eq!(sorted(rc.rows), sorted(want));
        } else {
            assert_eq!(fv.rows, want, "pipeline {pipeline}");
            assert_eq!(rc.rows, want);
        }
        assert!(fv.stats.packets as u64 >= fv.stats.bytes_on_wire / 1024);
    }
    assert_eq!(n.emitted_bytes(qp.id()) - before, wire);
}

#[test]
fn forced_group_overflow_merges_to_oracle() {
    let mut cfg = config();
    cfg.cuckoo_tables = 2;
    cfg.cuckoo_slots = 8;
    cfg.cuckoo_max_evictions = 2;
    let n = Node::start(cfg).unwrap();
    let mut qp = QPair::open_connection(n.addr()).unwrap();
    let rows = 5000;
    let data = random_rows(rows, 8, 400, 8);
    let ft = table(&mut qp, rows, &data);
    let spec = AggregateSpec {
        key_columns: 0b1,
        measures: AggFn::ALL.iter().map(|&func| Measure { column: 3, func }).collect(),
    };
    let r = qp.group_by(&ft, spec.clone()).unwrap();
    assert!(r.overflow_entries > 0);
    assert!(r.overflow_merged);

    // Hash-map oracle over the raw table.
    let mut oracle: HashMap<u64, (u64, i64, i64, i64)> = HashMap::new();
    for row in data.chunks_exact(64) {
        let k = u64::from_le_bytes(row[..8].try_into().unwrap());
        let v = i64::from_le_bytes(row[24..32].try_into().unwrap());
        let e = oracle.entry(k).or_insert((0, i64::MAX, i64::MIN, 0));
        e.0 += 1;
        e.1 = e.1.min(v);
        e.2 = e.2.max(v);
        e.3 += v;
    }
    let groups = r.groups(&spec, &ft.schema);
    assert_eq!(groups.len(), oracle.len());
    for g in groups {
        let k = u64::from_le_bytes(g.key[..8].try_into().unwrap());
        let (c, mn, mx, sum) = oracle[&k];
        let vals = g.finalize(&spec);
        assert_eq!(vals[0], AggValue::Int(c as i64));
        assert_eq!(vals[1], AggValue::Int(mn));
        assert_eq!(vals[2], AggValue::Int(mx));
        assert_eq!(vals[3], AggValue::Int(sum));
        // AVG as a rational: sum and count travel exactly.
        assert_eq!((g.accs[4].sum, g.accs[4].count), (sum, c));
    }
}

#[test]
fn regex_and_crypto_paths() {
    let n = node();
    let mut qp = QPair::open_connection(n.addr()).unwrap();
    let schema = Schema::new(vec![8, 30]).unwrap();
    let rows = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let words = ["alpha", "beta", "gamma", "delta"];
    let data: Vec<u8> = (0..rows)
        .flat_map(|i| {
            let mut r = (i as u64).to_le_bytes().to_vec();
            let s = format!("{}-{}", words[rng.gen_range(0..4)], rng.gen_range(0..100));
            r.extend(farview_core::operators::encode_string_slot(s.as_bytes(), 30));
            r
        })
        .collect();
    let mut ft = FTable::new("s", schema.clone(), rows);
    qp.alloc_table_mem(&mut ft).unwrap();
    qp.table_write(&ft, &data).unwrap();
    let q = Query::Regex { proj: 1, column: 1, pattern: b"^(alpha|delta)-[0-4]".to_vec() };
    let want = reference::evaluate(&q, &schema, &data).unwrap();
    assert!(!want.is_empty());
    assert_eq!(qp.regex(&ft, 1, 1, "^(alpha|delta)-[0-4]").unwrap().rows, want);
    assert_eq!(qp.rcpu(&ft, q).unwrap().rows, want);

    // Encrypted table.
    let plain = random_rows(1000, 8, 100, 10);
    let stored = CryptoParams { key: [3; 16], nonce: [4; 12], initial_counter: 0 };
    let response = CryptoParams { key: [5; 16], nonce: [6; 12], initial_counter: 77 };
    let mut enc = plain.clone();
    CtrCipher::new(stored).apply_at(0, &mut enc);
    let et = table(&mut qp, 1000, &enc);
    let pred = SelectionPredicate::single(Term::uint(7, Comparator::Lt, 25));
    let want = reference::evaluate(&Query::Select { proj: 0b11, predicate: pred.clone() }, &et.schema, &plain).unwrap();
    let got = qp.crypto_select(&et, 0b11, pred.clone(), stored, response).unwrap();
    assert_eq!(got.rows, want);
    let rc = qp
        .rcpu(&et, Query::CryptoSelect { proj: 0b11, predicate: pred, stored, response })
        .unwrap();
    assert_eq!(rc.rows, want);
}

#[test]
fn request_errors_are_reported_and_isolated() {
    let n = node();
    let mut bad = QPair::open_connection(n.addr()).unwrap();
    let mut good = QPair::open_connection(n.addr()).unwrap();
    let data = random_rows(4000, 8, 50, 11);
    let fb = table(&mut bad, 4000, &data);
    let fg = table(&mut good, 4000, &data);
    let want = reference::evaluate(&Query::Distinct { proj: 3, keys: 1 }, &fg.schema, &data).unwrap();
    let h = std::thread::spawn(move || {
        for _ in 0..20 {
            assert_eq!(good.distinct(&fg, 3, 1).unwrap().rows, want);
        }
    });
    for _ in 0..20 {
        // A string predicate on an 8-byte integer column is fine, a missing column is not.
        let e = bad.regex(&fb, 1, 9, "x").unwrap_err();
        assert!(matches!(e, ClientError::Params(_)));
        let words = vec![params::REGEX as u64, 1, 1, 9];
        let e = bad.far_view(&fb, &words, b"x").unwrap_err();
        assert!(matches!(e, ClientError::Params(_)));
        // Sent raw, the node rejects it itself.
        let e = raw_farview(&mut bad, &fb, words.clone(), b"x".to_vec());
        assert_eq!(e, Status::RequestError);
    }
    h.join().unwrap();
    // The failing connection still works.
    assert_eq!(bad.distinct(&fb, 1, 1).unwrap().rows.len(), 50);
}

/// Sends a FARVIEW frame with no client-side validation.
fn raw_farview(qp: &mut QPair, ft: &FTable, words: Vec<u64>, payload: Vec<u8>) -> Status {
    qp.load_pipeline(params::REGEX).unwrap();
    qp.raw_call(
        Verb::new(VerbKind::Farview, qp.id())
            .with_range(ft.base_vaddr.unwrap(), ft.size)
            .with_params(words)
            .with_payload(payload),
    )
    .unwrap_err()
    .status()
    .unwrap()
}

#[test]
fn pipeline_swaps_between_requests() {
    let n = node();
    let mut qp = QPair::open_connection(n.addr()).unwrap();
    let data = random_rows(2000, 8, 40, 12);
    let ft = table(&mut qp, 2000, &data);
    let sel = Query::Select { proj: 1, predicate: SelectionPredicate::single(Term::uint(1, Comparator::Lt, 10)) };
    let dis = Query::Distinct { proj: 1, keys: 1 };
    let ws = reference::evaluate(&sel, &ft.schema, &data).unwrap();
    let wd = reference::evaluate(&dis, &ft.schema, &data).unwrap();
    for i in 0..10 {
        if i % 3 == 0 {
            qp.load_pipeline(params::REGEX).unwrap();
        }
        assert_eq!(qp.select_where(&ft, 1, SelectionPredicate::single(Term::uint(1, Comparator::Lt, 10))).unwrap().rows, ws);
        assert_eq!(qp.distinct(&ft, 1, 1).unwrap().rows, wd);
    }
}

#[test]
fn six_clients_distinct() {
    let n = node();
    let addr = n.addr();
    let hs: Vec<_> = (0..6)
        .map(|c| {
            std::thread::spawn(move || {
                let mut qp = QPair::open_connection(addr).unwrap();
                let data = random_rows(30_000, 8, 5000, 100 + c);
                let ft = table(&mut qp, 30_000, &data);
                let q = Query::Distinct { proj: 0b11, keys: 0b1 };
                let want = reference::evaluate(&q, &ft.schema, &data).unwrap();
                for _ in 0..3 {
                    assert_eq!(qp.distinct(&ft, 0b11, 0b1).unwrap().rows, want);
                }
                qp.free_table_mem(&ft).unwrap();
            })
        })
        .collect();
    for h in hs {
        h.join().unwrap();
    }
    settle(&n);
    assert_eq!(n.operator_stack().bound_regions(), 0);
    assert_eq!(n.memory().mapped_pages(), 0);
}

#[test]
fn shutdown_aborts_in_flight_request() {
    let mut cfg = config();
    cfg.credit_window = 2;
    let n = Node::start(cfg).unwrap();
    let mut qp = QPair::open_connection(n.addr()).unwrap();
    let data = random_rows(20_000, 8, u64::MAX, 13);
    let ft = table(&mut qp, 20_000, &data);
    qp.load_pipeline(params::SELECT).unwrap();
    drop(qp);
    settle(&n);

    // A raw link that never reads, so the node stalls on credits mid-stream.
    let mut link = Link::new(TcpStream::connect(n.addr()).unwrap(), LinkConfig::default()).unwrap();
    link.send_verb(&Verb::new(VerbKind::OpenConn, QueuePairId(0))).unwrap();
    let open = link.recv_verb().unwrap();
    link.set_qpair(open.qpair);
    link.send_verb(&Verb::new(VerbKind::LoadPipeline, open.qpair).with_msg_id(1).with_range(0, params::SELECT as u64))
        .unwrap();
    assert_eq!(link.recv_verb().unwrap().status(), Some(Status::Ok));
    // The table belongs to the first connection; share it through the node.
    n.memory().share_table(QueuePairId(1), ft.base_vaddr.unwrap(), open.qpair).unwrap();
    let req = Request {
        pipeline: params::SELECT,
        rcpu: false,
        query: Query::Select { proj: 0xff, predicate: SelectionPredicate::single(Term::uint(0, Comparator::Ge, 0)) },
    };
    let (w, p) = encode_request(&req).unwrap();
    link.send_verb(
        &Verb::new(VerbKind::Farview, open.qpair)
            .with_msg_id(2)
            .with_range(ft.base_vaddr.unwrap(), ft.size)
            .with_params(w)
            .with_payload(p),
    )
    .unwrap();
    std::thread::sleep(Duration::from_millis(100));
    let stopper = std::thread::spawn(move || n.shutdown());
    let mut aborted = false;
    loop {
        match link.recv() {
            Ok(m) if !m.stream => {
                let v = farview_core::wire::decode_verb(&m.bytes).unwrap();
                if v.status() == Some(Status::Aborted) {
                    assert_eq!(v.msg_id, 2);
                    aborted = true;
                }
            }
            Ok(_) => panic!("stream completed despite shutdown"),
            Err(_) => break,
        }
    }
    stopper.join().unwrap();
    assert!(aborted);
}

#[test]
fn start_and_stop_without_clients() {
    let n = node();
    let addr = n.addr();
    n.shutdown();
    assert!(TcpStream::connect(addr).is_err());
}
