//! The node: configuration, listener, one worker per connection, and verb
//! dispatch to the memory stack, the operator stack, or the CPU path.

use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::memory::{FairShareGate, MemoryConfig, MemoryError, MemoryStack};
use crate::operators::CuckooConfig;
use crate::pipeline::{
    decode_request, execute, rcpu_execute, ExecConfig, ExecContext, ExecError, OperatorStack, PipelineRegistry,
};
use crate::schema::Schema;
use crate::wire::{
    decode_verb, Link, LinkConfig, LinkError, QueuePairId, ResponseStream, Status, Verb, VerbKind, CONTROL_MSG_ID, MIN_MTU,
};

const ACCEPT_POLL: Duration = Duration::from_millis(5);
const SHUTDOWN_GRACE: Duration = Duration::from_secs(2);
const READ_CHUNK: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerConfig {
    pub listen: String,
    pub regions: usize,
    pub memory: MemoryConfig,
    pub mtu: usize,
    pub credit_window: u32,
    pub cuckoo_tables: usize,
    pub cuckoo_slots: usize,
    pub cuckoo_max_evictions: usize,
    pub lru_depth: usize,
    pub queue_depth: usize,
    pub max_overflow: usize,
    pub reconfig_delay_ms: u64,
    pub rcpu_enabled: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        let c = CuckooConfig::default();
        ServerConfig {
            listen: "127.0.0.1:7470".into(),
            regions: 6,
            memory: MemoryConfig::default(),
            mtu: crate::wire::DEFAULT_MTU,
            credit_window: crate::wire::DEFAULT_CREDIT_WINDOW,
            cuckoo_tables: c.tables,
            cuckoo_slots: c.slots_per_table,
            cuckoo_max_evictions: c.max_evictions,
            lru_depth: 8,
            queue_depth: 1024,
            max_overflow: 1 << 20,
            reconfig_delay_ms: 0,
            rcpu_enabled: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("bad value for {key}: {value}")]
    Value { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ServerConfig {
    pub const KEYS: [&'static str; 15] = [
        "listen",
        "regions",
        "channels",
        "channel_capacity_bytes",
        "stripe_bytes",
        "mtu",
        "credit_window",
        "cuckoo_tables",
        "cuckoo_slots",
        "cuckoo_max_evictions",
        "lru_depth",
        "queue_depth",
        "max_overflow",
        "reconfig_delay_ms",
        "rcpu_enabled",
    ];

    /// Sets one key. Dashes in `key` are read as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let bad = || ConfigError::Value {
            key: key.clone(),
            value: value.to_string(),
        };
        fn num<T: std::str::FromStr>(v: &str, bad: impl Fn() -> ConfigError) -> Result<T, ConfigError> {
            v.parse().map_err(|_| bad())
        }
        match key.as_str() {
            "listen" => self.listen = value.to_string(),
            "regions" => self.regions = num(value, bad)?,
            "channels" => self.memory.channels = num(value, bad)?,
            "channel_capacity_bytes" => self.memory.channel_capacity = num(value, bad)?,
            "stripe_bytes" => self.memory.stripe = num(value, bad)?,
            "mtu" => self.mtu = num(value, bad)?,
            "credit_window" => self.credit_window = num(value, bad)?,
            "cuckoo_tables" => self.cuckoo_tables = num(value, bad)?,
            "cuckoo_slots" => self.cuckoo_slots = num(value, bad)?,
            "cuckoo_max_evictions" => self.cuckoo_max_evictions = num(value, bad)?,
            "lru_depth" => self.lru_depth = num(value, bad)?,
            "queue_depth" => self.queue_depth = num(value, bad)?,
            "max_overflow" => self.max_overflow = num(value, bad)?,
            "reconfig_delay_ms" => self.reconfig_delay_ms = num(value, bad)?,
            "rcpu_enabled" => {
                self.rcpu_enabled = match value {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    _ => return Err(bad()),
                }
            }
            _ => return Err(ConfigError::UnknownKey(key)),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of the current values. Blank lines
    /// and lines starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<ServerConfig, ConfigError> {
        let mut c = ServerConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<ServerConfig, ConfigError> {
        ServerConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// The config as `key=value` lines, readable by [`ServerConfig::parse`].
    pub fn to_text(&self) -> String {
        let m = &self.memory;
        format!(
            "listen={}\nregions={}\nchannels={}\nchannel_capacity_bytes={}\nstripe_bytes={}\nmtu={}\n\
             credit_window={}\ncuckoo_tables={}\ncuckoo_slots={}\ncuckoo_max_evictions={}\nlru_depth={}\n\
             queue_depth={}\nmax_overflow={}\nreconfig_delay_ms={}\nrcpu_enabled={}\n",
            self.listen,
            self.regions,
            m.channels,
            m.channel_capacity,
            m.stripe,
            self.mtu,
            self.credit_window,
            self.cuckoo_tables,
            self.cuckoo_slots,
            self.cuckoo_max_evictions,
            self.lru_depth,
            self.queue_depth,
            self.max_overflow,
            self.reconfig_delay_ms,
            self.rcpu_enabled
        )
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let counts = [
            ("regions", self.regions),
            ("credit_window", self.credit_window as usize),
            ("cuckoo_tables", self.cuckoo_tables),
            ("cuckoo_slots", self.cuckoo_slots),
            ("lru_depth", self.lru_depth),
            ("queue_depth", self.queue_depth),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{k} must be at least 1")));
            }
        }
        if self.mtu < MIN_MTU || self.mtu > u16::MAX as usize {
            return Err(ConfigError::Invalid(format!("mtu must be in [{MIN_MTU}, {}]", u16::MAX)));
        }
        if self.regions > u16::MAX as usize {
            return Err(ConfigError::Invalid("too many regions".into()));
        }
        self.memory
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.cuckoo().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn cuckoo(&self) -> CuckooConfig {
        CuckooConfig::new(self.cuckoo_tables, self.cuckoo_slots, self.cuckoo_max_evictions)
    }

    pub fn exec_config(&self) -> ExecConfig {
        ExecConfig {
            queue_depth: self.queue_depth,
            cuckoo: self.cuckoo(),
            lru_depth: self.lru_depth,
            max_overflow: self.max_overflow,
            ..ExecConfig::default()
        }
    }

    pub fn link_config(&self) -> LinkConfig {
        LinkConfig {
            mtu: self.mtu,
            credit_window: self.credit_window,
            reorder_seed: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("memory: {0}")]
    Memory(#[from] MemoryError),
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: io::Error },
}

pub fn memory_status(e: &MemoryError) -> Status {
    match e {
        MemoryError::Argument(_) => Status::InvalidArgument,
        MemoryError::OutOfMemory { .. } => Status::OutOfMemory,
        MemoryError::TranslationFault(_) => Status::TranslationFault,
        MemoryError::Permission { .. } => Status::PermissionDenied,
        MemoryError::Bounds { .. } => Status::BoundsError,
        MemoryError::NotAllocated(_) => Status::NotFound,
    }
}

/// Counts the stream's bytes before its last packet leaves, so a client that
/// has seen the whole response also sees the counter updated.
fn finish_counted(s: &Shared, qp: QueuePairId, st: ResponseStream<'_>) -> Result<u64, LinkError> {
    *s.emitted.lock().unwrap().entry(qp).or_default() += st.bytes();
    st.finish()
}

fn sink_error(e: LinkError) -> ExecError {
    match e {
        LinkError::Aborted => ExecError::Aborted,
        e => ExecError::Sink(e.to_string()),
    }
}

fn exec_status(e: &ExecError) -> Status {
    match e {
        ExecError::Params(_) | ExecError::Operator(_) => Status::RequestError,
        ExecError::Memory(m) => memory_status(m),
        ExecError::Aborted => Status::Aborted,
        ExecError::Sink(_) => Status::ProtocolError,
    }
}

struct Conn {
    abort: Arc<AtomicBool>,
    stream: TcpStream,
}

struct Shared {
    cfg: ServerConfig,
    exec: ExecConfig,
    memory: MemoryStack,
    ops: OperatorStack,
    gate: FairShareGate,
    stop: AtomicBool,
    next_qpair: AtomicU32,
    conns: Mutex<HashMap<QueuePairId, Conn>>,
    workers: Mutex<Vec<JoinHandle<()>>>,
    emitted: Mutex<HashMap<QueuePairId, u64>>,
}

/// A running node. Dropping it shuts it down.
pub struct Node {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

/// Cloneable handle that can stop a node from another thread.
#[derive(Clone)]
pub struct NodeHandle {
    shared: Arc<Shared>,
}

impl NodeHandle {
    pub fn shutdown(&self) {
        self.shared.stop.store(true, Ordering::SeqCst);
    }
}

impl Node {
    pub fn start(cfg: ServerConfig) -> Result<Node, ServerError> {
        cfg.validate()?;
        let listener = TcpListener::bind(&cfg.listen).map_err(|source| ServerError::Bind {
            addr: cfg.listen.clone(),
            source,
        })?;
        let addr = listener.local_addr().map_err(|source| ServerError::Bind {
            addr: cfg.listen.clone(),
            source,
        })?;
        listener.set_nonblocking(true).map_err(|source| ServerError::Bind {
            addr: cfg.listen.clone(),
            source,
        })?;
        let shared = Arc::new(Shared {
            exec: cfg.exec_config(),
            memory: MemoryStack::new(cfg.memory.clone())?,
            ops: OperatorStack::new(
                cfg.regions,
                PipelineRegistry::builtin(),
                Duration::from_millis(cfg.reconfig_delay_ms),
            ),
            gate: FairShareGate::new(cfg.regions),
            stop: AtomicBool::new(false),
            next_qpair: AtomicU32::new(1),
            conns: Mutex::new(HashMap::new()),
            workers: Mutex::new(Vec::new()),
            emitted: Mutex::new(HashMap::new()),
            cfg,
        });
        let s = shared.clone();
        let acceptor = thread::Builder::new()
            .name("farview-accept".into())
            .spawn(move || accept_loop(listener, s))
            .expect("spawn acceptor");
        log::info!("node listening on {addr}");
        Ok(Node {
            addr,
            shared,
            acceptor: Some(acceptor),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn config(&self) -> &ServerConfig {
        &self.shared.cfg
    }

    pub fn memory(&self) -> &MemoryStack {
        &self.shared.memory
    }

    pub fn operator_stack(&self) -> &OperatorStack {
        &self.shared.ops
    }

    pub fn gate(&self) -> &FairShareGate {
        &self.shared.gate
    }

    pub fn handle(&self) -> NodeHandle {
        NodeHandle {
            shared: self.shared.clone(),
        }
    }

    /// Response stream bytes sent to `qpair` so far.
    pub fn emitted_bytes(&self, qpair: QueuePairId) -> u64 {
        self.shared.emitted.lock().unwrap().get(&qpair).copied().unwrap_or(0)
    }

    pub fn open_connections(&self) -> usize {
        self.shared.conns.lock().unwrap().len()
    }

    /// Blocks until another thread calls [`NodeHandle::shutdown`], then stops.
    pub fn wait(mut self) {
        while !self.shared.stop.load(Ordering::SeqCst) {
            thread::sleep(ACCEPT_POLL * 10);
        }
        self.stop();
    }

    /// Stops accepting, aborts in-flight requests and closes every connection.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        let s = &self.shared;
        s.stop.store(true, Ordering::SeqCst);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        for c in s.conns.lock().unwrap().values() {
            c.abort.store(true, Ordering::SeqCst);
        }
        let deadline = Instant::now() + SHUTDOWN_GRACE;
        while !s.conns.lock().unwrap().is_empty() && Instant::now() < deadline {
            thread::sleep(ACCEPT_POLL);
        }
        for c in s.conns.lock().unwrap().values() {
            let _ = c.stream.shutdown(std::net::Shutdown::Both);
        }
        let workers = std::mem::take(&mut *s.workers.lock().unwrap());
        for w in workers {
            let _ = w.join();
        }
        log::info!("node on {} stopped", self.addr);
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.stop();
        }
    }
}

/// Runs a node until the process is asked to stop.
pub fn run_server(cfg: ServerConfig) -> Result<(), ServerError> {
    let node = Node::start(cfg)?;
    let h = node.handle();
    if let Err(e) = ctrlc::set_handler(move || h.shutdown()) {
        log::warn!("no signal handler: {e}");
    }
    println!("listening on {}", node.addr());
    node.wait();
    Ok(())
}

fn accept_loop(listener: TcpListener, s: Arc<Shared>) {
    while !s.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::debug!("connection from {peer}");
                if let Err(e) = stream.set_nonblocking(false) {
                    log::warn!("{peer}: {e}");
                    continue;
                }
                let ws = s.clone();
                let h = thread::Builder::new()
                    .name(format!("farview-conn-{peer}"))
                    .spawn(move || {
                        if let Err(e) = serve(&ws, stream) {
                            log::debug!("connection {peer} ended: {e}");
                        }
                    })
                    .expect("spawn worker");
                let mut w = s.workers.lock().unwrap();
                w.retain(|h| !h.is_finished());
                w.push(h);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(e) => {
                log::warn!("accept: {e}");
                thread::sleep(ACCEPT_POLL);
            }
        }
    }
}

fn serve(s: &Shared, stream: TcpStream) -> Result<(), LinkError> {
    let mut link = Link::new(stream.try_clone()?, s.cfg.link_config())?;
    let abort = Arc::new(AtomicBool::new(false));
    link.set_abort_flag(abort.clone())?;
    let open = link.recv_verb()?;
    if open.kind != VerbKind::OpenConn {
        link.send_verb(&Verb::error_response(
            QueuePairId(0),
            open.msg_id,
            Status::ProtocolError,
            "first frame must be OPEN_CONN",
        ))?;
        link.shutdown();
        return Ok(());
    }
    let qp = QueuePairId(s.next_qpair.fetch_add(1, Ordering::SeqCst));
    link.set_qpair(qp);
    let region = match s.ops.bind_region(qp, abort.clone()) {
        Ok(r) => r,
        Err(e) => {
            log::info!("refusing {qp}: {e}");
            link.send_verb(&Verb::error_response(qp, open.msg_id, e.status(), &e.to_string()))?;
            link.shutdown();
            return Ok(());
        }
    };
    s.conns.lock().unwrap().insert(
        qp,
        Conn {
            abort: abort.clone(),
            stream,
        },
    );
    if s.stop.load(Ordering::SeqCst) {
        abort.store(true, Ordering::SeqCst);
    }
    let mut w = Worker {
        s,
        link,
        qp,
        region,
        abort,
    };
    let r = w.run(open.msg_id);
    s.ops.release_region(qp);
    s.conns.lock().unwrap().remove(&qp);
    w.link.shutdown();
    r
}

struct Worker<'s> {
    s: &'s Shared,
    link: Link,
    qp: QueuePairId,
    region: usize,
    abort: Arc<AtomicBool>,
}

enum Next {
    Continue,
    Close,
}

impl Worker<'_> {
    fn run(&mut self, open_msg: u32) -> Result<(), LinkError> {
        self.link
            .send_verb(&Verb::response(self.qp, open_msg, Status::Ok, self.region as u64))?;
        loop {
            let m = match self.link.recv() {
                Ok(m) => m,
                Err(LinkError::Aborted) => return self.send_abort(CONTROL_MSG_ID),
                Err(LinkError::Closed) => return Ok(()),
                Err(e) => return Err(e),
            };
            if m.stream {
                self.reply_err(m.msg_id, Status::ProtocolError, "clients do not send streams")?;
                continue;
            }
            let v = match decode_verb(&m.bytes) {
                Ok(v) => v,
                Err(e) => {
                    self.reply_err(m.msg_id, Status::ProtocolError, &e.to_string())?;
                    continue;
                }
            };
            match self.dispatch(v) {
                Ok(Next::Continue) => {}
                Ok(Next::Close) => return Ok(()),
                Err(LinkError::Aborted) => return Ok(()),
                Err(e) => return Err(e),
            }
        }
    }

    fn send_abort(&mut self, msg_id: u32) -> Result<(), LinkError> {
        let v = Verb::error_response(self.qp, msg_id, Status::Aborted, "node is shutting down");
        self.link.send_control(&v)
    }

    fn reply_ok(&mut self, msg_id: u32, value: u64) -> Result<(), LinkError> {
        self.link.send_verb(&Verb::response(self.qp, msg_id, Status::Ok, value))
    }

    fn reply_err(&mut self, msg_id: u32, status: Status, msg: &str) -> Result<(), LinkError> {
        // Errors use the control channel so they are never stuck behind a
        // partially sent response stream or a spent credit window.
        self.link.send_control(&Verb::error_response(self.qp, msg_id, status, msg))
    }


    fn dispatch(&mut self, v: Verb) -> Result<Next, LinkError> {
        let id = v.msg_id;
        let mem = &self.s.memory;
        match v.kind {
            VerbKind::CloseConn => {
                self.reply_ok(id, 0)?;
                return Ok(Next::Close);
            }
            VerbKind::OpenConn => self.reply_err(id, Status::ProtocolError, "connection already open")?,
            VerbKind::AllocTable => {
                let r = Schema::from_bytes(&v.payload)
                    .map_err(|e| (Status::InvalidArgument, e.to_string()))
                    .and_then(|schema| {
                        mem.alloc_table(self.qp, v.length, schema)
                            .map_err(|e| (memory_status(&e), e.to_string()))
                    });
                match r {
                    Ok(h) => self.reply_ok(id, h.base_vaddr)?,
                    Err((st, m)) => self.reply_err(id, st, &m)?,
                }
            }
            VerbKind::FreeTable => match mem.free_table(self.qp, v.vaddr) {
                Ok(()) => self.reply_ok(id, 0)?,
                Err(e) => self.reply_err(id, memory_status(&e), &e.to_string())?,
            },
            VerbKind::RdmaWrite => {
                if v.payload.len() as u64 != v.length {
                    self.reply_err(id, Status::InvalidArgument, "payload length differs from length field")?;
                } else {
                    match mem.write(self.qp, v.vaddr, &v.payload) {
                        Ok(()) => self.reply_ok(id, v.length)?,
                        Err(e) => self.reply_err(id, memory_status(&e), &e.to_string())?,
                    }
                }
            }
            VerbKind::RdmaRead => self.rdma_read(id, v.vaddr, v.length)?,
            VerbKind::LoadPipeline => {
                let pid = u16::try_from(v.length).unwrap_or(u16::MAX);
                match self.s.ops.load_pipeline(self.region, self.qp, pid) {
                    Ok(()) => self.reply_ok(id, pid as u64)?,
                    Err(e) => self.reply_err(id, e.status(), &e.to_string())?,
                }
            }
            VerbKind::Farview => self.farview(v)?,
            VerbKind::Response | VerbKind::CreditGrant => {
                self.reply_err(id, Status::ProtocolError, "unexpected frame kind")?
            }
        }
        Ok(Next::Continue)
    }

    fn rdma_read(&mut self, id: u32, vaddr: u64, len: u64) -> Result<(), LinkError> {
        let mem = &self.s.memory;
        // Check the whole range up front so failures never leave a partial stream.
        let checked = mem.table_for(self.qp, vaddr).and_then(|t| {
            if t.contains(vaddr, len) {
                Ok(())
            } else {
                Err(MemoryError::Bounds {
                    vaddr,
                    len,
                    base: t.base_vaddr,
                    size: t.size,
                })
            }
        });
        if let Err(e) = checked {
            return self.reply_err(id, memory_status(&e), &e.to_string());
        }
        let mut buf = vec![0u8; READ_CHUNK.min(len as usize)];
        let mut stream = self.link.stream(id);
        let mut off = 0;
        let mut failed = None;
        while off < len {
            let n = (len - off).min(READ_CHUNK as u64) as usize;
            if let Err(e) = mem.read_into(self.qp, vaddr + off, &mut buf[..n]) {
                failed = Some(e);
                break;
            }
            stream.write(&buf[..n])?;
            off += n as u64;
        }
        match failed {
            None => finish_counted(self.s, self.qp, stream).map(|_| ()),
            Some(e) => {
                drop(stream);
                self.reply_err(id, memory_status(&e), &e.to_string())
            }
        }
    }

    fn farview(&mut self, v: Verb) -> Result<(), LinkError> {
        let id = v.msg_id;
        let req = match decode_request(&v.params, &v.payload) {
            Ok(r) => r,
            Err(e) => return self.reply_err(id, Status::RequestError, &e.to_string()),
        };
        let table = match self.s.memory.table_for(self.qp, v.vaddr) {
            Ok(t) => t,
            Err(e) => return self.reply_err(id, memory_status(&e), &e.to_string()),
        };
        let s = self.s;
        let qp = self.qp;
        let result = if req.rcpu {
            if !s.cfg.rcpu_enabled {
                return self.reply_err(id, Status::PermissionDenied, "CPU path is disabled");
            }
            let mut stream = self.link.stream(id);
            rcpu_execute(&s.memory, self.qp, &req.query, &table, v.vaddr, v.length, &mut stream)
                .map(|_| stream)
                .and_then(|st| finish_counted(s, qp, st).map_err(sink_error))
        } else {
            let (guard, spec) = match s.ops.begin_request(self.region, self.qp, req.pipeline) {
                Ok(g) => g,
                Err(e) => return self.reply_err(id, e.status(), &e.to_string()),
            };
            let abort = self.abort.clone();
            let aborted = move || abort.load(Ordering::Relaxed);
            let ctx = ExecContext {
                memory: &s.memory,
                qpair: self.qp,
                gate: Some((&s.gate, guard.region())),
                abort: &aborted,
                cfg: &s.exec,
            };
            let mut stream = self.link.stream(id);
            let r = execute(&ctx, spec, &req.query, &table, v.vaddr, v.length, &mut stream)
                .map(|_| stream)
                .and_then(|st| finish_counted(s, qp, st).map_err(sink_error));
            drop(guard);
            r
        };
        match result {
            Ok(_) => Ok(()),
            Err(ExecError::Aborted) => {
                self.send_abort(id)?;
                Err(LinkError::Aborted)
            }
            Err(ExecError::Sink(m)) => Err(LinkError::Io(io::Error::other(m))),
            Err(e) => self.reply_err(id, exec_status(&e), &e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_overrides() {
        let mut c = ServerConfig::parse("# node\nregions=3\nchannels = 4\nrcpu_enabled=false\n").unwrap();
        assert_eq!((c.regions, c.memory.channels, c.rcpu_enabled), (3, 4, false));
        c.set("credit-window", "8").unwrap();
        assert_eq!(c.credit_window, 8);
        assert_eq!(ServerConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn every_key_is_settable() {
        let text = ServerConfig::default().to_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split_once('=').unwrap().0).collect();
        assert_eq!(keys, ServerConfig::KEYS);
    }

    #[test]
    fn config_errors() {
        assert!(matches!(ServerConfig::parse("regions"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(ServerConfig::parse("colour=red"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(ServerConfig::parse("mtu=big"), Err(ConfigError::Value { .. })));
        assert!(matches!(ServerConfig::parse("mtu=16"), Err(ConfigError::Invalid(_))));
        assert!(matches!(ServerConfig::parse("regions=0"), Err(ConfigError::Invalid(_))));
    }
}
