//! Workload generation, the local-CPU baseline and the experiment runner
//! that compares pipeline execution (FV, FV-V) with CPU execution on the
//! client (LCPU) and on the node (RCPU).
//!
//! Every timed run is checked against the generator's expected answer before
//! it is recorded.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Barrier};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::client::{ClientError, FTable, QPair};
use crate::memory::{MemoryConfig, PAGE_SIZE};
use crate::operators::{
    aes_ctr_transform, encode_string_slot, plan_smart_addressing, read_int, string_slot, Acc, AccessPlan, AggFn,
    AggregateSpec, Comparator, CostModel, CryptoParams, GroupRow, Measure, SelectionPredicate, Term,
};
use crate::pipeline::params::{self, Query, Request};
use crate::reference;
use crate::schema::Schema;
use crate::server::{Node, ServerConfig};

/// Values below this pass the generated select predicate.
const PASS_BELOW: u64 = 1 << 32;
const MATCH_TOKEN: &str = "farview";
const REGEX_PATTERN: &str = "fa+rv[iy]ew";
/// Characters of generated strings outside the match token.
const FILLER: &[u8] = b"bcdghjklmnopqstuxz0123456789 ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QueryName {
    Select,
    Distinct,
    GroupBy,
    Regex,
    EncryptRead,
    MultiClientDistinct,
    ProjectionCrossover,
}

impl QueryName {
    pub const ALL: [QueryName; 7] = [
        QueryName::Select,
        QueryName::Distinct,
        QueryName::GroupBy,
        QueryName::Regex,
        QueryName::EncryptRead,
        QueryName::MultiClientDistinct,
        QueryName::ProjectionCrossover,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryName::Select => "select",
            QueryName::Distinct => "distinct",
            QueryName::GroupBy => "group_by",
            QueryName::Regex => "regex",
            QueryName::EncryptRead => "encrypt_read",
            QueryName::MultiClientDistinct => "multi_client_distinct",
            QueryName::ProjectionCrossover => "projection_crossover",
        }
    }
}

impl fmt::Display for QueryName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QueryName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim().replace('-', "_");
        QueryName::ALL
            .into_iter()
            .find(|q| q.as_str() == s)
            .ok_or_else(|| format!("unknown query {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Path {
    Fv,
    FvV,
    Lcpu,
    Rcpu,
}

impl Path {
    pub fn label(self) -> &'static str {
        match self {
            Path::Fv => "FV",
            Path::FvV => "FV-V",
            Path::Lcpu => "LCPU",
            Path::Rcpu => "RCPU",
        }
    }

    pub fn remote(self) -> bool {
        self != Path::Lcpu
    }
}

impl FromStr for Path {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fv" => Ok(Path::Fv),
            "fvv" | "fv-v" => Ok(Path::FvV),
            "lcpu" => Ok(Path::Lcpu),
            "rcpu" => Ok(Path::Rcpu),
            o => Err(format!("unknown path {o:?}")),
        }
    }
}

pub fn parse_paths(s: &str) -> Result<Vec<Path>, String> {
    let mut v: Vec<Path> = s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<_, _>>()?;
    v.dedup();
    if v.is_empty() {
        return Err("no paths given".into());
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub query: QueryName,
    pub rows: usize,
    pub tuple_bytes: usize,
    /// Fraction of rows passing the predicate (select, encrypt_read,
    /// projection_crossover) or matching the pattern (regex).
    pub selectivity: f64,
    /// Distinct keys for distinct and group_by.
    pub groups: usize,
    pub string_len: usize,
    pub clients: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            query: QueryName::Select,
            rows: 1 << 16,
            tuple_bytes: 64,
            selectivity: 1.0,
            groups: 256,
            string_len: 32,
            clients: 1,
            runs: 10,
            seed: 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid workload: {0}")]
    Spec(String),
    #[error("{path} run {run} client {client} returned wrong rows: {report}")]
    Mismatch {
        path: &'static str,
        run: usize,
        client: usize,
        report: String,
    },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("node: {0}")]
    Node(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Spec(m));
        if self.rows == 0 || self.runs == 0 || self.clients == 0 {
            return bad("rows, runs and clients must be positive".into());
        }
        if self.tuple_bytes % 8 != 0 || self.tuple_bytes < 24 || self.tuple_bytes > 8 * 64 {
            return bad(format!("tuple_bytes {} must be a multiple of 8 in [24, 512]", self.tuple_bytes));
        }
        if !(self.selectivity > 0.0 && self.selectivity <= 1.0) {
            return bad(format!("selectivity {} must be in (0, 1]", self.selectivity));
        }
        if matches!(
            self.query,
            QueryName::Distinct | QueryName::GroupBy | QueryName::MultiClientDistinct
        ) && (self.groups == 0 || self.groups > self.rows)
        {
            return bad(format!("groups {} must be in [1, rows]", self.groups));
        }
        if self.query == QueryName::Regex && self.string_len.clamp(MATCH_TOKEN.len(), self.tuple_bytes - 10) < MATCH_TOKEN.len()
        {
            return bad("tuple too narrow for generated strings".into());
        }
        Ok(())
    }

    /// Rows that pass by construction: ⌈rows · selectivity⌉.
    pub fn passing_rows(&self) -> usize {
        ((self.rows as f64 * self.selectivity).ceil() as usize).min(self.rows)
    }

    fn client_seed(&self, client: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(client as u64)
    }
}

/// A generated table, its query, and the expected answer.
#[derive(Debug, Clone)]
pub struct Workload {
    pub spec: WorkloadSpec,
    pub schema: Schema,
    /// Bytes as stored on the node (encrypted for encrypt_read).
    pub stored: Vec<u8>,
    pub plain: Vec<u8>,
    pub query: Query,
    /// Expected rows in canonical (sorted) order.
    pub expected: Vec<Vec<u8>>,
}

impl Workload {
    pub fn rows(&self) -> usize {
        self.stored.len() / self.schema.tuple_bytes()
    }

    /// The node request for a remote path.
    pub fn request(&self, path: Path) -> Option<Request> {
        let sel = matches!(self.query, Query::Select { .. });
        let pipeline = match (path, &self.query) {
            (Path::Lcpu, _) => return None,
            (Path::FvV, _) if sel => params::SELECT_VEC,
            (_, Query::Select { .. }) if self.spec.query == QueryName::ProjectionCrossover => params::SMART_SELECT,
            (_, Query::Select { .. }) => params::SELECT,
            (_, Query::Distinct { .. }) => params::DISTINCT,
            (_, Query::GroupBy(_)) => params::GROUP_BY,
            (_, Query::Regex { .. }) => params::REGEX,
            (_, Query::CryptoSelect { .. }) => params::CRYPTO_SELECT,
        };
        Some(Request {
            pipeline,
            rcpu: path == Path::Rcpu,
            query: self.query.clone(),
        })
    }

    /// Compares `rows` with the expected answer and describes the first difference.
    pub fn check(&self, rows: &[Vec<u8>]) -> Result<(), String> {
        let got = canonical(rows.to_vec());
        if got == self.expected {
            return Ok(());
        }
        let first = got.iter().zip(&self.expected).position(|(a, b)| a != b);
        Err(format!(
            "{} rows, expected {}; first difference at sorted index {}",
            got.len(),
            self.expected.len(),
            first.map_or("(prefix)".to_string(), |i| i.to_string())
        ))
    }
}

pub fn canonical(mut rows: Vec<Vec<u8>>) -> Vec<Vec<u8>> {
    rows.sort_unstable();
    rows
}

fn crypto_params(rng: &mut ChaCha8Rng) -> CryptoParams {
    CryptoParams {
        key: rng.gen(),
        nonce: rng.gen(),
        initial_counter: rng.gen(),
    }
}

fn distinct_keys(rng: &mut ChaCha8Rng, n: usize) -> Vec<u64> {
    let mut seen = HashSet::with_capacity(n);
    let mut keys = Vec::with_capacity(n);
    while keys.len() < n {
        let k: u64 = rng.gen();
        if seen.insert(k) {
            keys.push(k);
        }
    }
    keys
}

/// Key column values: every key at least once, in random order.
fn key_column(rng: &mut ChaCha8Rng, rows: usize, groups: usize) -> Vec<u64> {
    let keys = distinct_keys(rng, groups);
    let mut col: Vec<u64> = keys.clone();
    col.extend((groups..rows).map(|_| keys[rng.gen_range(0..groups)]));
    col.shuffle(rng);
    col
}

fn pass_flags(rng: &mut ChaCha8Rng, rows: usize, passing: usize) -> Vec<bool> {
    let mut f: Vec<bool> = (0..rows).map(|i| i < passing).collect();
    f.shuffle(rng);
    f
}

fn generated_string(rng: &mut ChaCha8Rng, len: usize, matching: bool) -> Vec<u8> {
    let mut s: Vec<u8> = (0..len).map(|_| *FILLER.choose(rng).unwrap()).collect();
    if matching {
        let at = rng.gen_range(0..=len - MATCH_TOKEN.len());
        s[at..at + MATCH_TOKEN.len()].copy_from_slice(MATCH_TOKEN.as_bytes());
    }
    s
}

/// Generates the table for client 0.
pub fn gen_table(spec: &WorkloadSpec) -> Result<Workload, BenchError> {
    gen_client_table(spec, 0)
}

/// Generates client `client`'s table. Deterministic in `(spec, client)`.
pub fn gen_client_table(spec: &WorkloadSpec, client: usize) -> Result<Workload, BenchError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.client_seed(client));
    let n = spec.rows;
    let cols = spec.tuple_bytes / 8;
    let wide = Schema::uniform(cols, 8);
    let mut stored = Vec::with_capacity(n * spec.tuple_bytes);
    let (schema, query, expect_count) = match spec.query {
        QueryName::Select | QueryName::EncryptRead | QueryName::ProjectionCrossover => {
            let passing = spec.passing_rows();
            let flags = pass_flags(&mut rng, n, passing);
            for (i, pass) in flags.into_iter().enumerate() {
                stored.extend((i as u64).to_le_bytes());
                let v = if pass {
                    rng.gen_range(0..PASS_BELOW)
                } else {
                    rng.gen_range(PASS_BELOW..u64::MAX)
                };
                stored.extend(v.to_le_bytes());
                for _ in 2..cols {
                    stored.extend(rng.gen::<u64>().to_le_bytes());
                }
            }
            let predicate = SelectionPredicate::single(Term::uint(1, Comparator::Lt, PASS_BELOW));
            let q = match spec.query {
                QueryName::Select => Query::Select {
                    proj: wide.all_columns(),
                    predicate,
                },
                QueryName::ProjectionCrossover => Query::Select { proj: 0b111, predicate },
                _ => Query::CryptoSelect {
                    proj: wide.all_columns(),
                    predicate,
                    stored: crypto_params(&mut rng),
                    response: crypto_params(&mut rng),
                },
            };
            (wide, q, Some(passing))
        }
        QueryName::Distinct | QueryName::MultiClientDistinct | QueryName::GroupBy => {
            let keys = key_column(&mut rng, n, spec.groups);
            for k in keys {
                stored.extend(k.to_le_bytes());
                stored.extend(rng.gen_range(-1_000_000i64..1_000_000).to_le_bytes());
                for _ in 2..cols {
                    stored.extend(rng.gen::<u64>().to_le_bytes());
                }
            }
            let q = if spec.query == QueryName::GroupBy {
                Query::GroupBy(AggregateSpec {
                    key_columns: 1,
                    measures: AggFn::ALL.iter().map(|&func| Measure { column: 1, func }).collect(),
                })
            } else {
                Query::Distinct { proj: 1, keys: 1 }
            };
            (wide, q, Some(spec.groups))
        }
        QueryName::Regex => {
            let width = spec.tuple_bytes - 8;
            let schema = Schema::new(vec![8, width as u32]).map_err(|e| BenchError::Spec(e.0))?;
            let len = spec.string_len.clamp(MATCH_TOKEN.len(), width - 2);
            let passing = spec.passing_rows();
            let flags = pass_flags(&mut rng, n, passing);
            for (i, m) in flags.into_iter().enumerate() {
                stored.extend((i as u64).to_le_bytes());
                stored.extend(encode_string_slot(&generated_string(&mut rng, len, m), width));
            }
            let q = Query::Regex {
                proj: 1,
                column: 1,
                pattern: REGEX_PATTERN.as_bytes().to_vec(),
            };
            (schema, q, Some(passing))
        }
    };
    let plain = stored.clone();
    if let Query::CryptoSelect { stored: cp, .. } = &query {
        stored = aes_ctr_transform(&stored, cp);
    }
    let expected = canonical(reference::evaluate(&query, &schema, &stored).map_err(|e| BenchError::Spec(e.0))?);
    if let Some(c) = expect_count {
        // The constructive count and the brute-force answer must agree.
        if expected.len() != c {
            return Err(BenchError::Spec(format!(
                "generator produced {} result rows, constructed {c}",
                expected.len()
            )));
        }
    }
    Ok(Workload {
        spec: spec.clone(),
        schema,
        stored,
        plain,
        query,
        expected,
    })
}

/// Single-pass CPU evaluation over a local copy of the stored table.
pub fn lcpu_execute(table: &[u8], schema: &Schema, query: &Query) -> Result<Vec<Vec<u8>>, String> {
    query.validate(schema).map_err(|e| e.0)?;
    let tb = schema.tuple_bytes();
    let project = |row: &[u8], mask: u64| -> Vec<u8> {
        crate::schema::mask_columns(mask)
            .flat_map(|c| schema.column(row, c).iter().copied())
            .collect()
    };
    let filter = |data: &[u8], proj: u64, p: &SelectionPredicate| -> Vec<Vec<u8>> {
        data.chunks_exact(tb)
            .filter(|r| p.terms.iter().map(|t| t.eval(schema.column(r, t.column))).fold(None, |acc: Option<bool>, x| {
                Some(match (acc, p.combiner) {
                    (None, _) => x,
                    (Some(a), crate::operators::Combiner::And) => a && x,
                    (Some(a), crate::operators::Combiner::Or) => a || x,
                })
            }).unwrap_or(true))
            .map(|r| project(r, proj))
            .collect()
    };
    Ok(match query {
        Query::Select { proj, predicate } => filter(table, *proj, predicate),
        Query::CryptoSelect {
            proj, predicate, stored, ..
        } => filter(&aes_ctr_transform(table, stored), *proj, predicate),
        Query::Distinct { proj, keys } => {
            let mut seen = HashSet::new();
            table
                .chunks_exact(tb)
                .filter(|r| seen.insert(project(r, *keys)))
                .map(|r| project(r, *proj))
                .collect()
        }
        Query::Regex { proj, column, pattern } => {
            let p = std::str::from_utf8(pattern).map_err(|e| e.to_string())?;
            let re = regex::bytes::Regex::new(&format!("(?-u){p}")).map_err(|e| e.to_string())?;
            table
                .chunks_exact(tb)
                .filter(|r| re.is_match(string_slot(schema.column(r, *column))))
                .map(|r| project(r, *proj))
                .collect()
        }
        Query::GroupBy(spec) => {
            let m = spec.measures.len();
            let mut groups: BTreeMap<Vec<u8>, (u64, Vec<i128>, Vec<i64>, Vec<i64>)> = BTreeMap::new();
            for r in table.chunks_exact(tb) {
                let g = groups
                    .entry(project(r, spec.key_columns))
                    .or_insert_with(|| (0, vec![0; m], vec![i64::MAX; m], vec![i64::MIN; m]));
                g.0 += 1;
                for (i, ms) in spec.measures.iter().enumerate() {
                    let v = read_int(schema.column(r, ms.column));
                    g.1[i] += v as i128;
                    g.2[i] = g.2[i].min(v);
                    g.3[i] = g.3[i].max(v);
                }
            }
            groups
                .into_iter()
                .map(|(key, (count, sums, mins, maxs))| {
                    let accs = (0..m)
                        .map(|i| {
                            let sum = sums[i].clamp(i64::MIN as i128, i64::MAX as i128) as i64;
                            Acc {
                                count,
                                sum,
                                min: mins[i],
                                max: maxs[i],
                                saturated: sum as i128 != sums[i]
                                    && matches!(spec.measures[i].func, AggFn::Sum | AggFn::Avg),
                            }
                        })
                        .collect();
                    let mut b = Vec::new();
                    GroupRow { key, accs }.encode(spec, &mut b);
                    b
                })
                .collect()
        }
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunRecord {
    pub path: Path,
    pub query: QueryName,
    pub rows: usize,
    pub tuple_bytes: usize,
    pub selectivity: String,
    pub run: usize,
    pub client: usize,
    pub wall_us: u64,
    pub bytes_on_wire: u64,
    pub rows_out: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PathSummary {
    pub runs: usize,
    pub median_wall_us: u64,
    pub mean_wall_us: f64,
    pub bytes_on_wire: u64,
    pub rows_out: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentResult {
    pub records: Vec<RunRecord>,
    /// Bytes of the whole stored table, per client.
    pub table_bytes: u64,
    /// Planner decision for the FV access pattern.
    pub smart_addressing: bool,
    /// Memory grants per region during the multi-client FV phase, when the
    /// node runs in process.
    pub grant_log: Option<Vec<u16>>,
    /// Turns the gate skipped during that phase.
    pub gate_skips: u64,
    /// Region of each client in the multi-client phases.
    pub client_regions: Vec<usize>,
}

impl ExperimentResult {
    pub fn of_path(&self, path: Path) -> impl Iterator<Item = &RunRecord> {
        self.records.iter().filter(move |r| r.path == path)
    }

    pub fn summary(&self, path: Path) -> PathSummary {
        let recs: Vec<&RunRecord> = self.of_path(path).collect();
        if recs.is_empty() {
            return PathSummary::default();
        }
        let mut walls: Vec<u64> = recs.iter().map(|r| r.wall_us).collect();
        walls.sort_unstable();
        PathSummary {
            runs: recs.len(),
            median_wall_us: walls[walls.len() / 2],
            mean_wall_us: walls.iter().sum::<u64>() as f64 / walls.len() as f64,
            bytes_on_wire: recs[0].bytes_on_wire,
            rows_out: recs[0].rows_out,
        }
    }

    /// Bytes completed by each client on `path`.
    pub fn client_bytes(&self, path: Path) -> Vec<u64> {
        let n = self.of_path(path).map(|r| r.client + 1).max().unwrap_or(0);
        let mut v = vec![0; n];
        for r in self.of_path(path) {
            v[r.client] += r.bytes_on_wire;
        }
        v
    }
}

pub fn write_csv<W: Write>(records: &[RunRecord], w: W) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "path",
        "query",
        "rows",
        "tuple_bytes",
        "selectivity",
        "run",
        "wall_us",
        "bytes_on_wire",
        "rows_out",
        "client",
    ])?;
    for r in records {
        out.write_record([
            r.path.label().to_string(),
            r.query.to_string(),
            r.rows.to_string(),
            r.tuple_bytes.to_string(),
            r.selectivity.clone(),
            r.run.to_string(),
            r.wall_us.to_string(),
            r.bytes_on_wire.to_string(),
            r.rows_out.to_string(),
            r.client.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// A node config with room for `clients` tables of `table_bytes` each.
pub fn node_config_for(table_bytes: u64, clients: usize) -> ServerConfig {
    let channels = 2;
    let pages = table_bytes.max(1).div_ceil(PAGE_SIZE) * clients as u64 + 4;
    ServerConfig {
        listen: "127.0.0.1:0".into(),
        regions: clients.max(6),
        memory: MemoryConfig {
            channels,
            channel_capacity: pages * PAGE_SIZE / channels as u64,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn record(w: &Workload, path: Path, run: usize, client: usize, wall_us: u64, bytes: u64, rows_out: usize) -> RunRecord {
    RunRecord {
        path,
        query: w.spec.query,
        rows: w.rows(),
        tuple_bytes: w.spec.tuple_bytes,
        selectivity: format!("{}", w.spec.selectivity),
        run,
        client,
        wall_us,
        bytes_on_wire: bytes,
        rows_out,
    }
}

fn one_run(w: &Workload, path: Path, qp: Option<&mut QPair>, ft: Option<&FTable>) -> Result<(u64, u64, Vec<Vec<u8>>), BenchError> {
    let t = Instant::now();
    let (bytes, rows) = match (path, qp, ft) {
        (Path::Lcpu, _, _) => (0, lcpu_execute(&w.stored, &w.schema, &w.query).map_err(BenchError::Spec)?),
        (_, Some(qp), Some(ft)) => {
            let r = qp.run(ft, &w.request(path).expect("remote path"))?;
            (r.stats.bytes_on_wire, r.rows)
        }
        _ => unreachable!("remote paths need a connection"),
    };
    Ok((t.elapsed().as_micros() as u64, bytes, rows))
}

fn connect(node: SocketAddr, w: &Workload) -> Result<(QPair, FTable), BenchError> {
    let mut qp = QPair::open_connection(node)?;
    let mut ft = FTable::new(w.spec.query.as_str(), w.schema.clone(), w.rows());
    qp.alloc_table_mem(&mut ft)?;
    qp.table_write(&ft, &w.stored)?;
    Ok((qp, ft))
}

/// Runs the workload on every path. Without `node`, an in-process node is started.
pub fn run_experiment(spec: &WorkloadSpec, paths: &[Path], node: Option<SocketAddr>) -> Result<ExperimentResult, BenchError> {
    spec.validate()?;
    let multi = spec.query == QueryName::MultiClientDistinct;
    let clients = if multi { spec.clients } else { 1 };
    let workloads: Vec<Workload> = (0..clients).map(|c| gen_client_table(spec, c)).collect::<Result<_, _>>()?;
    let w0 = &workloads[0];
    let table_bytes = w0.stored.len() as u64;
    let mut local = None;
    let addr = match node {
        Some(a) => a,
        None if paths.iter().any(|p| p.remote()) => {
            let n = Node::start(node_config_for(table_bytes, clients)).map_err(|e| BenchError::Node(e.to_string()))?;
            let a = n.addr();
            local = Some(n);
            a
        }
        None => "127.0.0.1:0".parse().unwrap(),
    };
    let mask = match &w0.query {
        Query::Select { proj, predicate } | Query::CryptoSelect { proj, predicate, .. } => proj | predicate.columns(),
        _ => w0.schema.all_columns(),
    };
    let smart_addressing = matches!(
        plan_smart_addressing(&w0.schema, mask, CostModel::default()),
        Ok(AccessPlan::Words(_))
    );
    let mut res = ExperimentResult {
        table_bytes,
        smart_addressing,
        ..Default::default()
    };
    for &path in paths {
        if multi {
            if let (Path::Fv, Some(n)) = (path, &local) {
                n.gate().reset();
            }
            let (recs, regions) = multi_client(&workloads, path, addr)?;
            res.records.extend(recs);
            if path == Path::Fv {
                res.client_regions = regions;
                res.grant_log = local.as_ref().map(|n| n.gate().grant_log());
                res.gate_skips = local.as_ref().map_or(0, |n| n.gate().skips());
            }
            continue;
        }
        let mut conn = if path.remote() { Some(connect(addr, w0)?) } else { None };
        for run in 0..spec.runs {
            let (qp, ft) = match conn.as_mut() {
                Some((q, f)) => (Some(q), Some(&*f)),
                None => (None, None),
            };
            let (wall, bytes, rows) = one_run(w0, path, qp, ft)?;
            w0.check(&rows).map_err(|report| BenchError::Mismatch {
                path: path.label(),
                run,
                client: 0,
                report,
            })?;
            res.records.push(record(w0, path, run, 0, wall, bytes, rows.len()));
        }
        if let Some((mut qp, ft)) = conn {
            qp.free_table_mem(&ft)?;
            qp.close()?;
        }
    }
    Ok(res)
}

/// Every client queries continuously; the phase ends when the first client
/// completes `runs` queries, and only completed queries are recorded.
fn multi_client(ws: &[Workload], path: Path, addr: SocketAddr) -> Result<(Vec<RunRecord>, Vec<usize>), BenchError> {
    let stop = Arc::new(AtomicBool::new(false));
    let ready = Arc::new(Barrier::new(ws.len()));
    let results = std::thread::scope(|s| {
        let hs: Vec<_> = ws
            .iter()
            .enumerate()
            .map(|(c, w)| {
                let stop = stop.clone();
                let ready = ready.clone();
                s.spawn(move || -> Result<(Vec<RunRecord>, usize), BenchError> {
                    let mut conn = if path.remote() { Some(connect(addr, w)?) } else { None };
                    let region = conn.as_ref().map_or(0, |(q, _)| q.region());
                    ready.wait();
                    let mut recs = Vec::new();
                    let mut run = 0;
                    while !stop.load(Ordering::SeqCst) {
                        let (qp, ft) = match conn.as_mut() {
                            Some((q, f)) => (Some(q), Some(&*f)),
                            None => (None, None),
                        };
                        let (wall, bytes, rows) = one_run(w, path, qp, ft)?;
                        w.check(&rows).map_err(|report| BenchError::Mismatch {
                            path: path.label(),
                            run,
                            client: c,
                            report,
                        })?;
                        if stop.load(Ordering::SeqCst) {
                            break;
                        }
                        recs.push(record(w, path, run, c, wall, bytes, rows.len()));
                        run += 1;
                        if run == w.spec.runs {
                            stop.store(true, Ordering::SeqCst);
                        }
                    }
                    if let Some((mut qp, ft)) = conn {
                        qp.free_table_mem(&ft)?;
                        qp.close()?;
                    }
                    Ok((recs, region))
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().expect("client thread")).collect::<Vec<_>>()
    });
    let mut recs = Vec::new();
    let mut regions = Vec::new();
    for r in results {
        let (rs, region) = r?;
        recs.extend(rs);
        regions.push(region);
    }
    Ok((recs, regions))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(query: QueryName, rows: usize, s: f64) -> WorkloadSpec {
        WorkloadSpec {
            query,
            rows,
            selectivity: s,
            ..Default::default()
        }
    }

    #[test]
    fn select_passes_exactly_by_construction() {
        let w = gen_table(&spec(QueryName::Select, 1000, 0.5)).unwrap();
        assert_eq!(w.expected.len(), 500);
        let w = gen_table(&spec(QueryName::Select, 1001, 0.25)).unwrap();
        assert_eq!(w.expected.len(), 251);
    }

    #[test]
    fn group_and_regex_counts() {
        let g = gen_table(&WorkloadSpec {
            groups: 256,
            ..spec(QueryName::GroupBy, 5000, 1.0)
        })
        .unwrap();
        assert_eq!(g.expected.len(), 256);
        let r = gen_table(&spec(QueryName::Regex, 1000, 0.5)).unwrap();
        assert_eq!(r.expected.len(), 500);
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(QueryName::EncryptRead, 300, 0.3);
        let (a, b) = (gen_table(&s).unwrap(), gen_table(&s).unwrap());
        assert_eq!(a.stored, b.stored);
        assert_ne!(a.stored, a.plain);
        assert_ne!(gen_client_table(&s, 1).unwrap().stored, a.stored);
    }

    #[test]
    fn lcpu_agrees_with_expected() {
        for q in QueryName::ALL {
            let w = gen_table(&WorkloadSpec {
                groups: 50,
                ..spec(q, 2000, 0.4)
            })
            .unwrap();
            let rows = lcpu_execute(&w.stored, &w.schema, &w.query).unwrap();
            assert_eq!(w.check(&rows), Ok(()), "{q}");
        }
    }

    #[test]
    fn names_parse() {
        for q in QueryName::ALL {
            assert_eq!(q.as_str().parse::<QueryName>(), Ok(q));
        }
        assert_eq!(parse_paths("fv,fvv,lcpu,rcpu").unwrap(), vec![Path::Fv, Path::FvV, Path::Lcpu, Path::Rcpu]);
        assert!(parse_paths("gpu").is_err());
    }

    #[test]
    fn bad_specs() {
        assert!(gen_table(&spec(QueryName::Select, 10, 0.0)).is_err());
        assert!(gen_table(&WorkloadSpec {
            tuple_bytes: 20,
            ..Default::default()
        })
        .is_err());
        assert!(gen_table(&WorkloadSpec {
            groups: 11,
            ..spec(QueryName::Distinct, 10, 1.0)
        })
        .is_err());
    }

    #[test]
    fn csv_columns() {
        let w = gen_table(&spec(QueryName::Select, 10, 1.0)).unwrap();
        let mut out = Vec::new();
        write_csv(&[record(&w, Path::Fv, 0, 0, 5, 640, 10)], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "path,query,rows,tuple_bytes,selectivity,run,wall_us,bytes_on_wire,rows_out,client\nFV,select,10,64,1,0,5,640,10,0\n"
        );
    }
}
