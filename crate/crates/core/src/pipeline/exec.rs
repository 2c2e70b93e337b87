//! Streaming execution of a loaded pipeline over a table range.
//!
//! The range is read in chunks of `queue_depth` tuples. Each chunk is one
//! burst through the memory arbitration gate, then flows through the stages
//! and is packed into the response as it is produced. Distinct and group-by
//! state lives for the whole request; group-by emits only after the last chunk.

use crate::memory::{FairShareGate, MemoryError, MemoryStack, TableHandle};
use crate::operators::{
    compute_lanes, parse_and_project, plan_smart_addressing, select_stream, string_slot, vectorized_select,
    AccessPlan, Annotations, CostModel, CtrCipher, CuckooConfig, Distinct, DistinctConfig, Emit, GroupBy,
    OperatorError, OverflowBuffer, Packer, Regex,
};
use crate::wire::QueuePairId;

use super::params::{ParamError, Query};
use super::registry::{Lanes, PipelineSpec, Stage};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecConfig {
    pub queue_depth: usize,
    pub cuckoo: CuckooConfig,
    pub lru_depth: usize,
    pub cost: CostModel,
    pub max_overflow: usize,
    pub regex_engines: usize,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            queue_depth: 1024,
            cuckoo: CuckooConfig::default(),
            lru_depth: 8,
            cost: CostModel::default(),
            max_overflow: 1 << 20,
            regex_engines: 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("request aborted")]
    Aborted,
    #[error("response channel: {0}")]
    Sink(String),
}

/// Destination of response bytes.
pub trait ResponseSink {
    fn write(&mut self, bytes: &[u8]) -> Result<(), ExecError>;
}

impl ResponseSink for Vec<u8> {
    fn write(&mut self, bytes: &[u8]) -> Result<(), ExecError> {
        self.extend_from_slice(bytes);
        Ok(())
    }
}

impl ResponseSink for crate::wire::ResponseStream<'_> {
    fn write(&mut self, bytes: &[u8]) -> Result<(), ExecError> {
        crate::wire::ResponseStream::write(self, bytes).map_err(|e| match e {
            crate::wire::LinkError::Aborted => ExecError::Aborted,
            e => ExecError::Sink(e.to_string()),
        })
    }
}

pub struct ExecContext<'a> {
    pub memory: &'a MemoryStack,
    pub qpair: QueuePairId,
    pub gate: Option<(&'a FairShareGate, usize)>,
    pub abort: &'a dyn Fn() -> bool,
    pub cfg: &'a ExecConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecStats {
    pub rows_in: u64,
    pub main_rows: u64,
    pub main_bytes: u64,
    pub overflow_entries: u64,
    /// Main payload plus trailer.
    pub response_bytes: u64,
    pub smart_addressing: bool,
}

/// Checks that `[vaddr, vaddr+len)` is a whole-tuple range of `table`.
pub fn check_range(table: &TableHandle, vaddr: u64, len: u64) -> Result<(), ParamError> {
    let tb = table.schema.tuple_bytes() as u64;
    if !table.contains(vaddr, len) {
        return Err(ParamError(format!(
            "range [{vaddr:#x}, +{len}) outside table at {:#x}",
            table.base_vaddr
        )));
    }
    if (vaddr - table.base_vaddr) % tb != 0 || len % tb != 0 {
        return Err(ParamError(format!("range is not aligned to {tb}-byte tuples")));
    }
    Ok(())
}

enum State<'s> {
    Select,
    Distinct(Distinct, OverflowBuffer),
    GroupBy(GroupBy<'s>),
    Regex(Vec<Regex>),
}

pub fn execute(
    ctx: &ExecContext<'_>,
    spec: &PipelineSpec,
    query: &Query,
    table: &TableHandle,
    vaddr: u64,
    len: u64,
    sink: &mut dyn ResponseSink,
) -> Result<ExecStats, ExecError> {
    let schema = &table.schema;
    if query.kind() != spec.kind {
        return Err(ParamError(format!("{} cannot run {:?} queries", spec.name, query.kind())).into());
    }
    query.validate(schema)?;
    check_range(table, vaddr, len)?;
    let tb = schema.tuple_bytes();
    let rows = (len / tb as u64) as usize;
    let cfg = ctx.cfg;

    let (proj, predicate, crypto) = match query {
        Query::Select { proj, predicate } => (*proj, Some(predicate), None),
        Query::CryptoSelect {
            proj,
            predicate,
            stored,
            response,
        } => (*proj, Some(predicate), Some((CtrCipher::new(*stored), CtrCipher::new(*response)))),
        Query::Distinct { proj, .. } | Query::Regex { proj, .. } => (*proj, None, None),
        Query::GroupBy(_) => (0, None, None),
    };
    let plan = if spec.has(Stage::SmartAddress) {
        let needed = proj | predicate.map_or(0, |p| p.columns());
        plan_smart_addressing(schema, needed, cfg.cost)?
    } else {
        AccessPlan::FullScan
    };
    let lanes = match spec.lanes {
        Lanes::One => 1,
        Lanes::PerChannel => compute_lanes(ctx.memory.config().channels, tb),
    };
    let mut state = match query {
        Query::Distinct { .. } => State::Distinct(
            Distinct::new(&DistinctConfig {
                cuckoo: cfg.cuckoo.clone(),
                cache_depth: cfg.lru_depth,
                latency: cfg.lru_depth,
                max_overflow: cfg.max_overflow,
            }),
            OverflowBuffer::new(schema.projected_bytes(proj), cfg.max_overflow),
        ),
        Query::GroupBy(g) => State::GroupBy(GroupBy::new(
            g.clone(),
            schema,
            cfg.cuckoo.clone(),
            cfg.lru_depth,
            cfg.max_overflow,
        )?),
        Query::Regex { pattern, .. } => {
            let re = Regex::from_bytes(pattern)?;
            State::Regex(vec![re; cfg.regex_engines.max(1)])
        }
        _ => State::Select,
    };
    let ann = Annotations {
        proj_flags: proj,
        sel_flags: predicate.map_or(0, |p| p.columns()),
        group_flags: match query {
            Query::Distinct { keys, .. } => *keys,
            Query::GroupBy(g) => g.key_columns,
            _ => 0,
        },
    };

    let mut stats = ExecStats {
        smart_addressing: matches!(plan, AccessPlan::Words(_)),
        ..Default::default()
    };
    let mut packer = Packer::new();
    let mut out = Vec::with_capacity(cfg.queue_depth * tb + 64);
    let mut buf = vec![0u8; cfg.queue_depth.min(rows.max(1)) * tb];
    let mut row = Vec::new();
    let mut key = Vec::new();
    let mut done = 0usize;
    let _active = ctx.gate.map(|(g, r)| g.enter(r));
    while done < rows {
        if (ctx.abort)() {
            return Err(ExecError::Aborted);
        }
        let n = cfg.queue_depth.min(rows - done);
        let chunk = &mut buf[..n * tb];
        let at = vaddr + (done * tb) as u64;
        {
            let _burst = ctx.gate.map(|(g, r)| g.acquire(r));
            match &plan {
                AccessPlan::FullScan => ctx.memory.read_into(ctx.qpair, at, chunk)?,
                AccessPlan::Words(runs) => {
                    for (t, tuple) in chunk.chunks_exact_mut(tb).enumerate() {
                        for r in runs {
                            let a = at + (t * tb + r.offset) as u64;
                            ctx.memory.read_into(ctx.qpair, a, &mut tuple[r.offset..r.offset + r.len])?;
                        }
                    }
                }
            }
        }
        if let Some((dec, _)) = &crypto {
            dec.apply_at(at - table.base_vaddr, chunk);
        }
        let tuples = parse_and_project(chunk, schema, ann)?;
        stats.rows_in += n as u64;
        match &mut state {
            State::Select => {
                let p = predicate.expect("select query");
                let selected = if lanes > 1 {
                    vectorized_select(tuples, schema, p, lanes)
                } else {
                    select_stream(tuples, schema, p)
                };
                for t in selected {
                    row.clear();
                    schema.project_into(t.bytes, proj, &mut row);
                    if let Some((_, enc)) = &crypto {
                        enc.apply_at(packer.valid_bytes(), &mut row);
                    }
                    packer.push(&row, &mut out);
                    stats.main_rows += 1;
                }
            }
            State::Distinct(d, overflow) => {
                let keys = ann.group_flags;
                for t in tuples {
                    key.clear();
                    row.clear();
                    schema.project_into(t.bytes, keys, &mut key);
                    schema.project_into(t.bytes, proj, &mut row);
                    match d.push(&key, &row) {
                        Some(Emit::Main(r)) => {
                            packer.push(&r, &mut out);
                            stats.main_rows += 1;
                        }
                        Some(Emit::Overflow(r)) => overflow.push(&r)?,
                        None => {}
                    }
                }
            }
            State::GroupBy(g) => {
                for t in tuples {
                    g.push(t.bytes)?;
                }
            }
            State::Regex(engines) => {
                let Query::Regex { column, .. } = query else { unreachable!() };
                for (i, t) in tuples.enumerate() {
                    if engines[i % engines.len()].is_match(string_slot(t.column(schema, *column))) {
                        row.clear();
                        schema.project_into(t.bytes, proj, &mut row);
                        packer.push(&row, &mut out);
                        stats.main_rows += 1;
                    }
                }
            }
        }
        if !out.is_empty() {
            sink.write(&out)?;
            out.clear();
        }
        done += n;
    }

    let overflow = match state {
        State::Distinct(mut d, mut overflow) => {
            for e in d.finish() {
                match e {
                    Emit::Main(r) => {
                        packer.push(&r, &mut out);
                        stats.main_rows += 1;
                    }
                    Emit::Overflow(r) => overflow.push(&r)?,
                }
            }
            overflow
        }
        State::GroupBy(g) => {
            let spec = g.spec().clone();
            let (groups, overflow) = g.finish();
            for gr in groups {
                row.clear();
                gr.encode(&spec, &mut row);
                packer.push(&row, &mut out);
                stats.main_rows += 1;
                if out.len() >= cfg.queue_depth * 64 {
                    sink.write(&out)?;
                    out.clear();
                }
            }
            overflow
        }
        _ => OverflowBuffer::new(query.row_bytes(schema), 0),
    };
    stats.main_bytes = packer.finish(&mut out);
    stats.overflow_entries = overflow.len() as u64;
    let trailer = overflow.encode_trailer(stats.main_bytes);
    stats.response_bytes = stats.main_bytes + trailer.len() as u64;
    out.extend(trailer);
    sink.write(&out)?;
    Ok(stats)
}

/// The same query evaluated by a plain CPU loop over the stored bytes, with
/// a response in the pipeline format.
pub fn rcpu_execute(
    memory: &MemoryStack,
    qpair: QueuePairId,
    query: &Query,
    table: &TableHandle,
    vaddr: u64,
    len: u64,
    sink: &mut dyn ResponseSink,
) -> Result<ExecStats, ExecError> {
    query.validate(&table.schema)?;
    check_range(table, vaddr, len)?;
    let mut bytes = memory.read(qpair, vaddr, len)?;
    if let Query::CryptoSelect { stored, .. } = query {
        // Stored ciphertext is keyed by offset from the table start.
        let dec = CtrCipher::new(*stored);
        dec.apply_at(vaddr - table.base_vaddr, &mut bytes);
    }
    let plain_query = match query {
        Query::CryptoSelect { proj, predicate, .. } => Query::Select {
            proj: *proj,
            predicate: predicate.clone(),
        },
        q => q.clone(),
    };
    let rows = crate::reference::evaluate(&plain_query, &table.schema, &bytes)?;
    let mut main: Vec<u8> = rows.concat();
    if let Query::CryptoSelect { response, .. } = query {
        CtrCipher::new(*response).apply_at(0, &mut main);
    }
    let trailer = OverflowBuffer::new(query.row_bytes(&table.schema), 0).encode_trailer(main.len() as u64);
    let stats = ExecStats {
        rows_in: len / table.schema.tuple_bytes() as u64,
        main_rows: rows.len() as u64,
        main_bytes: main.len() as u64,
        overflow_entries: 0,
        response_bytes: (main.len() + trailer.len()) as u64,
        smart_addressing: false,
    };
    main.extend(trailer);
    sink.write(&main)?;
    Ok(stats)
}
