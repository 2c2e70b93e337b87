//! Client side of the node protocol: connections, table management, plain
//! reads and writes, and pipeline queries with response unpacking and
//! overflow merging.

use std::collections::HashSet;
use std::net::{TcpStream, ToSocketAddrs};
use std::ops::Range;

use crate::operators::{merge_groups, split_response, AggregateSpec, CryptoParams, CtrCipher, GroupRow,
    SelectionPredicate, Term, Comparator};
use crate::pipeline::params::{self, decode_request, encode_request, ParamError, Query, Request};
use crate::schema::{mask_columns, Schema};
use crate::wire::{Link, LinkConfig, LinkError, QueuePairId, Status, Verb, VerbKind, CONTROL_MSG_ID};

/// Largest payload moved by one RDMA verb; bigger transfers are split.
pub const TRANSFER_CHUNK: u64 = 4 << 20;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("node answered {status:?}: {message}")]
    Server { status: Status, message: String },
    #[error("connection is closed")]
    NotOpen,
    #[error("table {0} is not allocated")]
    NotAllocated(String),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("protocol: {0}")]
    Protocol(String),
}

impl ClientError {
    pub fn status(&self) -> Option<Status> {
        match self {
            ClientError::Server { status, .. } => Some(*status),
            _ => None,
        }
    }
}

impl From<std::io::Error> for ClientError {
    fn from(e: std::io::Error) -> Self {
        ClientError::Link(LinkError::Io(e))
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// A table in the client's local catalog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FTable {
    pub name: String,
    pub schema: Schema,
    pub size: u64,
    /// Set by [`QPair::alloc_table_mem`].
    pub base_vaddr: Option<u64>,
}

impl FTable {
    pub fn new(name: impl Into<String>, schema: Schema, rows: usize) -> FTable {
        let size = (rows * schema.tuple_bytes()) as u64;
        FTable {
            name: name.into(),
            schema,
            size,
            base_vaddr: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.size as usize / self.schema.tuple_bytes()
    }

    fn base(&self) -> Result<u64> {
        self.base_vaddr.ok_or_else(|| ClientError::NotAllocated(self.name.clone()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueryStats {
    /// Valid bytes of every response packet.
    pub bytes_on_wire: u64,
    pub packets: u32,
    /// Main rows plus overflow entries the node sent.
    pub server_rows_emitted: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryResult {
    /// Response rows: projected tuples, or encoded group rows.
    pub rows: Vec<Vec<u8>>,
    pub overflow_merged: bool,
    /// Overflow entries that were merged into `rows`.
    pub overflow_entries: usize,
    pub stats: QueryStats,
}

impl QueryResult {
    /// Decodes group rows of a group-by result.
    pub fn groups(&self, spec: &AggregateSpec, schema: &Schema) -> Vec<GroupRow> {
        let kb = spec.key_bytes(schema);
        self.rows
            .iter()
            .map(|r| GroupRow::decode(spec, kb, r).expect("rows were validated when merged"))
            .collect()
    }
}

/// How overflow entries are folded into the main rows.
#[derive(Debug, Clone, PartialEq)]
pub enum MergeMode {
    /// Rows pass through; there is never overflow.
    Keep,
    /// Set union on the key byte ranges of each row.
    Distinct { key: Vec<Range<usize>> },
    GroupBy { spec: AggregateSpec, key_bytes: usize },
}

impl MergeMode {
    pub fn for_query(q: &Query, schema: &Schema) -> MergeMode {
        match q {
            Query::Distinct { proj, keys } => {
                let mut key = Vec::new();
                let mut off = 0;
                for c in mask_columns(*proj) {
                    let w = schema.width(c);
                    if keys & (1 << c) != 0 {
                        key.push(off..off + w);
                    }
                    off += w;
                }
                MergeMode::Distinct { key }
            }
            Query::GroupBy(spec) => MergeMode::GroupBy {
                spec: spec.clone(),
                key_bytes: spec.key_bytes(schema),
            },
            _ => MergeMode::Keep,
        }
    }
}

/// Restores exact distinct or group-by semantics from main rows and the
/// overflow entries the node could not place in its tables.
pub fn dedup_overflow(main: Vec<Vec<u8>>, overflow: Vec<Vec<u8>>, mode: &MergeMode) -> Result<Vec<Vec<u8>>> {
    match mode {
        MergeMode::Keep => {
            if !overflow.is_empty() {
                return Err(ClientError::Protocol("overflow entries on a pass-through query".into()));
            }
            Ok(main)
        }
        MergeMode::Distinct { key } => {
            let key_of = |r: &[u8]| -> Vec<u8> { key.iter().flat_map(|k| r[k.clone()].iter().copied()).collect() };
            let mut seen = HashSet::with_capacity(main.len() + overflow.len());
            let mut out = Vec::with_capacity(main.len());
            for r in main.into_iter().chain(overflow) {
                if seen.insert(key_of(&r)) {
                    out.push(r);
                }
            }
            Ok(out)
        }
        MergeMode::GroupBy { spec, key_bytes } => {
            let mut rows = Vec::with_capacity(main.len() + overflow.len());
            for r in main.iter().chain(&overflow) {
                rows.push(
                    GroupRow::decode(spec, *key_bytes, r)
                        .map_err(|e| ClientError::Protocol(format!("group row: {e}")))?,
                );
            }
            Ok(merge_groups(rows)
                .into_iter()
                .map(|g| {
                    let mut b = Vec::new();
                    g.encode(spec, &mut b);
                    b
                })
                .collect())
        }
    }
}

/// An open connection to a node, bound to one dynamic region.
pub struct QPair {
    link: Link,
    qpair: QueuePairId,
    region: usize,
    node: String,
    open: bool,
    next_msg: u32,
    loaded: Option<u16>,
}

impl QPair {
    pub fn open_connection(node: impl ToSocketAddrs + std::fmt::Debug) -> Result<QPair> {
        QPair::open_with(node, LinkConfig::default())
    }

    pub fn open_with(node: impl ToSocketAddrs + std::fmt::Debug, cfg: LinkConfig) -> Result<QPair> {
        let name = format!("{node:?}");
        let stream = TcpStream::connect(node)?;
        let mut qp = QPair {
            link: Link::new(stream, cfg)?,
            qpair: QueuePairId(0),
            region: 0,
            node: name,
            open: true,
            next_msg: 0,
            loaded: None,
        };
        let resp = qp.call(Verb::new(VerbKind::OpenConn, QueuePairId(0)));
        let resp = match resp {
            Ok(r) => r,
            Err(e) => {
                qp.open = false;
                qp.link.shutdown();
                return Err(e);
            }
        };
        qp.qpair = resp.qpair;
        qp.region = resp.length as usize;
        qp.link.set_qpair(resp.qpair);
        Ok(qp)
    }

    pub fn id(&self) -> QueuePairId {
        self.qpair
    }

    pub fn region(&self) -> usize {
        self.region
    }

    pub fn node(&self) -> &str {
        &self.node
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    pub fn link_stats(&self) -> crate::wire::LinkStats {
        self.link.stats()
    }

    pub fn close(&mut self) -> Result<()> {
        if !self.open {
            return Ok(());
        }
        let r = self.call(Verb::new(VerbKind::CloseConn, self.qpair));
        self.open = false;
        self.link.shutdown();
        r.map(|_| ())
    }

    fn next_id(&mut self) -> u32 {
        let id = self.next_msg;
        // CONTROL_MSG_ID is never used for requests.
        self.next_msg = (self.next_msg + 1) % CONTROL_MSG_ID;
        id
    }

    fn check(v: Verb) -> Result<Verb> {
        if v.kind != VerbKind::Response {
            return Err(ClientError::Protocol(format!("expected a response, got {:?}", v.kind)));
        }
        match v.status() {
            Some(Status::Ok) => Ok(v),
            Some(status) => Err(ClientError::Server {
                status,
                message: String::from_utf8_lossy(&v.payload).into_owned(),
            }),
            None => Err(ClientError::Protocol(format!("unknown status {}", v.vaddr))),
        }
    }

    /// Sends one frame and waits for its response frame.
    fn call(&mut self, mut v: Verb) -> Result<Verb> {
        if !self.open {
            return Err(ClientError::NotOpen);
        }
        let id = self.next_id();
        v.msg_id = id;
        v.qpair = self.qpair;
        self.link.send_verb(&v)?;
        loop {
            let m = self.link.recv()?;
            if m.stream {
                continue;
            }
            let r = crate::wire::decode_verb(&m.bytes).map_err(LinkError::from)?;
            if r.msg_id == id || r.msg_id == CONTROL_MSG_ID {
                return Self::check(r);
            }
        }
    }

    /// Sends one frame and waits for its response stream.
    fn call_stream(&mut self, mut v: Verb) -> Result<crate::wire::Message> {
        if !self.open {
            return Err(ClientError::NotOpen);
        }
        let id = self.next_id();
        v.msg_id = id;
        v.qpair = self.qpair;
        self.link.send_verb(&v)?;
        loop {
            let m = self.link.recv()?;
            if m.stream {
                if m.msg_id == id {
                    return Ok(m);
                }
                continue;
            }
            let r = crate::wire::decode_verb(&m.bytes).map_err(LinkError::from)?;
            if r.msg_id == id || r.msg_id == CONTROL_MSG_ID {
                self.link.discard(id);
                Self::check(r)?;
                return Err(ClientError::Protocol("request answered with a frame instead of a stream".into()));
            }
        }
    }

    /// Sends a request frame as is and waits for its response stream.
    pub fn raw_call(&mut self, v: Verb) -> Result<crate::wire::Message> {
        self.call_stream(v)
    }

    pub fn alloc_table_mem(&mut self, ft: &mut FTable) -> Result<()> {
        let v = Verb::new(VerbKind::AllocTable, self.qpair)
            .with_range(0, ft.size)
            .with_payload(ft.schema.to_bytes());
        let r = self.call(v)?;
        ft.base_vaddr = Some(r.length);
        Ok(())
    }

    /// Frees the table on the node. The catalog entry keeps its address, so a
    /// second free reaches the node and fails there.
    pub fn free_table_mem(&mut self, ft: &FTable) -> Result<()> {
        let base = ft.base()?;
        self.call(Verb::new(VerbKind::FreeTable, self.qpair).with_range(base, 0))?;
        Ok(())
    }

    pub fn write_at(&mut self, ft: &FTable, offset: u64, data: &[u8]) -> Result<()> {
        let base = ft.base()?;
        for (i, chunk) in data.chunks(TRANSFER_CHUNK as usize).enumerate() {
            let v = Verb::new(VerbKind::RdmaWrite, self.qpair)
                .with_range(base + offset + i as u64 * TRANSFER_CHUNK, chunk.len() as u64)
                .with_payload(chunk.to_vec());
            self.call(v)?;
        }
        Ok(())
    }

    pub fn read_at(&mut self, ft: &FTable, offset: u64, len: u64) -> Result<Vec<u8>> {
        let base = ft.base()?;
        let mut out = Vec::with_capacity(len as usize);
        let mut done = 0;
        while done < len || (len == 0 && done == 0) {
            let n = (len - done).min(TRANSFER_CHUNK);
            let v = Verb::new(VerbKind::RdmaRead, self.qpair).with_range(base + offset + done, n);
            let m = self.call_stream(v)?;
            if m.bytes.len() as u64 != n {
                return Err(ClientError::Protocol(format!("read returned {} of {n} bytes", m.bytes.len())));
            }
            out.extend_from_slice(&m.bytes);
            done += n;
            if len == 0 {
                break;
            }
        }
        Ok(out)
    }

    pub fn table_write(&mut self, ft: &FTable, data: &[u8]) -> Result<()> {
        self.write_at(ft, 0, data)
    }

    pub fn table_read(&mut self, ft: &FTable) -> Result<Vec<u8>> {
        self.read_at(ft, 0, ft.size)
    }

    pub fn load_pipeline(&mut self, id: u16) -> Result<()> {
        self.call(Verb::new(VerbKind::LoadPipeline, self.qpair).with_range(0, id as u64))?;
        self.loaded = Some(id);
        Ok(())
    }

    /// Generic pipeline call with raw parameter words and payload.
    pub fn far_view(&mut self, ft: &FTable, params: &[u64], payload: &[u8]) -> Result<QueryResult> {
        let req = decode_request(params, payload)?;
        self.run(ft, &req)
    }

    /// Runs a request over the whole table.
    pub fn run(&mut self, ft: &FTable, req: &Request) -> Result<QueryResult> {
        let base = ft.base()?;
        req.query.validate(&ft.schema)?;
        let (words, payload) = encode_request(req)?;
        if !req.rcpu && self.loaded != Some(req.pipeline) {
            self.load_pipeline(req.pipeline)?;
        }
        let v = Verb::new(VerbKind::Farview, self.qpair)
            .with_range(base, ft.size)
            .with_params(words)
            .with_payload(payload);
        let m = self.call_stream(v)?;
        let stats = QueryStats {
            bytes_on_wire: m.bytes.len() as u64,
            packets: m.packets,
            server_rows_emitted: 0,
        };
        unpack_response(&req.query, &ft.schema, &m.bytes, stats)
    }

    fn query(&mut self, ft: &FTable, pipeline: u16, query: Query) -> Result<QueryResult> {
        self.run(
            ft,
            &Request {
                pipeline,
                rcpu: false,
                query,
            },
        )
    }

    /// Single-column float comparison: rows whose `sel_flags` column compares
    /// `cmp` against `constant`, projected on `proj_flags`.
    pub fn select(&mut self, ft: &FTable, proj_flags: u64, sel_flags: u64, cmp: Comparator, constant: f64) -> Result<QueryResult> {
        if sel_flags.count_ones() != 1 {
            return Err(ParamError("select takes exactly one selection column".into()).into());
        }
        let t = Term::float(sel_flags.trailing_zeros() as usize, cmp, constant);
        self.select_where(ft, proj_flags, SelectionPredicate::single(t))
    }

    pub fn select_where(&mut self, ft: &FTable, proj: u64, predicate: SelectionPredicate) -> Result<QueryResult> {
        self.query(ft, params::SELECT, Query::Select { proj, predicate })
    }

    pub fn select_vectorized(&mut self, ft: &FTable, proj: u64, predicate: SelectionPredicate) -> Result<QueryResult> {
        self.query(ft, params::SELECT_VEC, Query::Select { proj, predicate })
    }

    pub fn select_smart(&mut self, ft: &FTable, proj: u64, predicate: SelectionPredicate) -> Result<QueryResult> {
        self.query(ft, params::SMART_SELECT, Query::Select { proj, predicate })
    }

    pub fn distinct(&mut self, ft: &FTable, proj: u64, keys: u64) -> Result<QueryResult> {
        self.query(ft, params::DISTINCT, Query::Distinct { proj, keys })
    }

    pub fn group_by(&mut self, ft: &FTable, spec: AggregateSpec) -> Result<QueryResult> {
        self.query(ft, params::GROUP_BY, Query::GroupBy(spec))
    }

    pub fn regex(&mut self, ft: &FTable, proj: u64, column: usize, pattern: &str) -> Result<QueryResult> {
        self.query(
            ft,
            params::REGEX,
            Query::Regex {
                proj,
                column,
                pattern: pattern.as_bytes().to_vec(),
            },
        )
    }

    /// Select over a table stored encrypted under `stored`. The node encrypts
    /// the response under `response`; returned rows are already decrypted.
    pub fn crypto_select(
        &mut self,
        ft: &FTable,
        proj: u64,
        predicate: SelectionPredicate,
        stored: CryptoParams,
        response: CryptoParams,
    ) -> Result<QueryResult> {
        self.query(
            ft,
            params::CRYPTO_SELECT,
            Query::CryptoSelect {
                proj,
                predicate,
                stored,
                response,
            },
        )
    }

    /// Runs `query` on the node CPU instead of the pipeline.
    pub fn rcpu(&mut self, ft: &FTable, query: Query) -> Result<QueryResult> {
        let pipeline = match query.kind() {
            params::QueryKind::Select => params::SELECT,
            params::QueryKind::Distinct => params::DISTINCT,
            params::QueryKind::GroupBy => params::GROUP_BY,
            params::QueryKind::Regex => params::REGEX,
            params::QueryKind::CryptoSelect => params::CRYPTO_SELECT,
        };
        self.run(
            ft,
            &Request {
                pipeline,
                rcpu: true,
                query,
            },
        )
    }
}

impl Drop for QPair {
    fn drop(&mut self) {
        if self.open {
            let _ = self.close();
        }
    }
}

/// Splits a response stream, decrypts it if needed, and merges overflow.
pub fn unpack_response(query: &Query, schema: &Schema, bytes: &[u8], mut stats: QueryStats) -> Result<QueryResult> {
    let sp = split_response(bytes).map_err(|e| ClientError::Protocol(e.to_string()))?;
    let width = query.row_bytes(schema);
    let mut main = sp.main.to_vec();
    if let Query::CryptoSelect { response, .. } = query {
        CtrCipher::new(*response).apply_at(0, &mut main);
    }
    if width == 0 || main.len() % width != 0 {
        return Err(ClientError::Protocol(format!(
            "{} main bytes are not whole {width}-byte rows",
            main.len()
        )));
    }
    if !sp.overflow.is_empty() && sp.overflow.entry_bytes() != width {
        return Err(ClientError::Protocol("overflow entry width differs from row width".into()));
    }
    let rows: Vec<Vec<u8>> = main.chunks_exact(width).map(<[u8]>::to_vec).collect();
    let overflow: Vec<Vec<u8>> = sp.overflow.entries().map(<[u8]>::to_vec).collect();
    stats.server_rows_emitted = (rows.len() + overflow.len()) as u64;
    let overflow_entries = overflow.len();
    let rows = dedup_overflow(rows, overflow, &MergeMode::for_query(query, schema))?;
    Ok(QueryResult {
        rows,
        overflow_merged: true,
        overflow_entries,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{AggFn, Measure};

    fn u(v: &[u64]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    #[test]
    fn distinct_merge() {
        let mode = MergeMode::Distinct { key: vec![0..8] };
        let main = vec![u(&[5, 1]), u(&[3, 1])];
        assert_eq!(dedup_overflow(main.clone(), vec![], &mode).unwrap(), main);
        let merged = dedup_overflow(main, vec![u(&[5, 9]), u(&[7, 2]), u(&[7, 3])], &mode).unwrap();
        assert_eq!(merged, vec![u(&[5, 1]), u(&[3, 1]), u(&[7, 2])]);
    }

    #[test]
    fn key_ranges_follow_projection() {
        let s = Schema::new(vec![4, 8, 2, 8]).unwrap();
        let m = MergeMode::for_query(&Query::Distinct { proj: 0b1101, keys: 0b1001 }, &s);
        assert_eq!(m, MergeMode::Distinct { key: vec![0..4, 6..14] });
    }

    #[test]
    fn group_partials_add() {
        let spec = AggregateSpec {
            key_columns: 1,
            measures: vec![Measure { column: 1, func: AggFn::Sum }],
        };
        let s = Schema::uniform(2, 8);
        let enc = |k: u64, v: u64| {
            let mut b = Vec::new();
            GroupRow::from_row(&spec, &s, &u(&[k, v])).encode(&spec, &mut b);
            b
        };
        let mode = MergeMode::for_query(&Query::GroupBy(spec.clone()), &s);
        let merged = dedup_overflow(vec![enc(1, 10)], vec![enc(1, 5)], &mode).unwrap();
        assert_eq!(merged, vec![enc(1, 15)]);
    }

    #[test]
    fn pass_through_rejects_overflow() {
        assert!(dedup_overflow(vec![], vec![vec![0]], &MergeMode::Keep).is_err());
    }
}
