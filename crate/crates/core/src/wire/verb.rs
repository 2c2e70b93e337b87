//! Verb frames.
//!
//! Every request and control message travels as one frame. All integers are
//! little-endian:
//!
//! ```text
//! magic 0xFA57 (2) | version (1) | kind (1) | qpair (4) | msg_id (4)
//! vaddr (8) | length (8) | param_count (2) | reserved (2)
//! params (8 * param_count) | payload_len (4) | payload
//! ```
//!
//! `RESPONSE` frames reuse the address fields: `vaddr` carries a status code
//! (0 = success, see [`Status`]) and `length` carries the result value of the
//! request (assigned region, table base address, ...). The payload holds read
//! data or, for a failed request, the UTF-8 error message.

use super::{QueuePairId, WireError};

pub const MAGIC: u16 = 0xFA57;
pub const VERSION: u8 = 0x01;
/// Fixed header bytes before the params block.
pub const HEADER_BYTES: usize = 32;
pub const MAX_PARAMS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum VerbKind {
    OpenConn = 0x01,
    CloseConn = 0x02,
    AllocTable = 0x03,
    FreeTable = 0x04,
    RdmaRead = 0x05,
    RdmaWrite = 0x06,
    Farview = 0x07,
    Response = 0x08,
    CreditGrant = 0x09,
    /// Swap the pipeline loaded in the connection's region. `length` holds the pipeline id.
    LoadPipeline = 0x0A,
}

impl VerbKind {
    pub const ALL: [VerbKind; 10] = [
        VerbKind::OpenConn,
        VerbKind::CloseConn,
        VerbKind::AllocTable,
        VerbKind::FreeTable,
        VerbKind::RdmaRead,
        VerbKind::RdmaWrite,
        VerbKind::Farview,
        VerbKind::Response,
        VerbKind::CreditGrant,
        VerbKind::LoadPipeline,
    ];

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| *k as u8 == tag)
    }

    /// Kinds allowed to carry a payload.
    ///
    /// `ALLOC_TABLE` carries the column widths, `FARVIEW` carries variable
    /// length operator arguments (regex patterns).
    pub fn allows_payload(self) -> bool {
        matches!(
            self,
            VerbKind::RdmaWrite
                | VerbKind::Response
                | VerbKind::CreditGrant
                | VerbKind::Farview
                | VerbKind::AllocTable
        )
    }
}

/// Status codes carried by `RESPONSE` frames in the `vaddr` field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Status {
    Ok = 0,
    ProtocolError = 1,
    ResourceExhausted = 2,
    OutOfMemory = 3,
    InvalidArgument = 4,
    PermissionDenied = 5,
    TranslationFault = 6,
    BoundsError = 7,
    RequestError = 8,
    Aborted = 9,
    Busy = 10,
    NotFound = 11,
}

impl Status {
    pub fn from_code(code: u64) -> Option<Self> {
        use Status::*;
        [
            Ok,
            ProtocolError,
            ResourceExhausted,
            OutOfMemory,
            InvalidArgument,
            PermissionDenied,
            TranslationFault,
            BoundsError,
            RequestError,
            Aborted,
            Busy,
            NotFound,
        ]
        .into_iter()
        .find(|s| *s as u64 == code)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verb {
    pub kind: VerbKind,
    pub qpair: QueuePairId,
    pub msg_id: u32,
    pub vaddr: u64,
    pub length: u64,
    pub params: Vec<u64>,
    pub payload: Vec<u8>,
}

impl Verb {
    pub fn new(kind: VerbKind, qpair: QueuePairId) -> Self {
        Verb {
            kind,
            qpair,
            msg_id: 0,
            vaddr: 0,
            length: 0,
            params: Vec::new(),
            payload: Vec::new(),
        }
    }

    pub fn with_range(mut self, vaddr: u64, length: u64) -> Self {
        self.vaddr = vaddr;
        self.length = length;
        self
    }

    pub fn with_params(mut self, params: Vec<u64>) -> Self {
        self.params = params;
        self
    }

    pub fn with_payload(mut self, payload: Vec<u8>) -> Self {
        self.payload = payload;
        self
    }

    pub fn with_msg_id(mut self, msg_id: u32) -> Self {
        self.msg_id = msg_id;
        self
    }

    pub fn response(qpair: QueuePairId, msg_id: u32, status: Status, value: u64) -> Self {
        Verb::new(VerbKind::Response, qpair)
            .with_msg_id(msg_id)
            .with_range(status as u64, value)
    }

    pub fn error_response(qpair: QueuePairId, msg_id: u32, status: Status, message: &str) -> Self {
        Verb::response(qpair, msg_id, status, 0).with_payload(message.as_bytes().to_vec())
    }

    pub fn credit_grant(qpair: QueuePairId, n: u32) -> Self {
        Verb::new(VerbKind::CreditGrant, qpair).with_payload(n.to_le_bytes().to_vec())
    }

    /// Status of a `RESPONSE` frame.
    pub fn status(&self) -> Option<Status> {
        Status::from_code(self.vaddr)
    }

    pub fn validate(&self) -> Result<(), WireError> {
        if !self.params.is_empty() && self.kind != VerbKind::Farview {
            return Err(WireError::Protocol(format!(
                "{:?} frame must not carry params",
                self.kind
            )));
        }
        if !self.payload.is_empty() && !self.kind.allows_payload() {
            return Err(WireError::Protocol(format!(
                "{:?} frame must not carry a payload",
                self.kind
            )));
        }
        if self.kind != VerbKind::Response && self.vaddr.checked_add(self.length).is_none() {
            return Err(WireError::Protocol("vaddr + length overflows".into()));
        }
        if self.kind == VerbKind::CreditGrant && self.payload.len() != 4 {
            return Err(WireError::Protocol("CREDIT_GRANT payload must be 4 bytes".into()));
        }
        Ok(())
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES + 8 * self.params.len() + 4 + self.payload.len()
    }
}

pub fn encode_verb(v: &Verb) -> Result<Vec<u8>, WireError> {
    if v.params.len() > MAX_PARAMS {
        return Err(WireError::Encoding(format!(
            "{} params exceed the limit of {MAX_PARAMS}",
            v.params.len()
        )));
    }
    if v.payload.len() > u32::MAX as usize {
        return Err(WireError::Encoding("payload exceeds 4 GiB".into()));
    }
    v.validate().map_err(|e| WireError::Encoding(e.to_string()))?;

    let mut out = Vec::with_capacity(v.encoded_len());
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.push(VERSION);
    out.push(v.kind as u8);
    out.extend_from_slice(&v.qpair.0.to_le_bytes());
    out.extend_from_slice(&v.msg_id.to_le_bytes());
    out.extend_from_slice(&v.vaddr.to_le_bytes());
    out.extend_from_slice(&v.length.to_le_bytes());
    out.extend_from_slice(&(v.params.len() as u16).to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for p in &v.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out.extend_from_slice(&(v.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&v.payload);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|end| *end <= self.buf.len())
            .ok_or_else(|| {
                WireError::Framing(format!(
                    "need {n} bytes at offset {}, frame has {}",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_verb(bytes: &[u8]) -> Result<Verb, WireError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.u16()?;
    if magic != MAGIC {
        return Err(WireError::Protocol(format!("bad magic {magic:#06x}")));
    }
    let version = c.take(1)?[0];
    if version != VERSION {
        return Err(WireError::Protocol(format!("unsupported version {version:#04x}")));
    }
    let tag = c.take(1)?[0];
    let kind =
        VerbKind::from_tag(tag).ok_or_else(|| WireError::Protocol(format!("unknown kind tag {tag:#04x}")))?;
    let qpair = QueuePairId(c.u32()?);
    let msg_id = c.u32()?;
    let vaddr = c.u64()?;
    let length = c.u64()?;
    let param_count = c.u16()? as usize;
    let _reserved = c.u16()?;
    if param_count > MAX_PARAMS {
        return Err(WireError::Protocol(format!("param_count {param_count} exceeds {MAX_PARAMS}")));
    }
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        params.push(c.u64()?);
    }
    let payload_len = c.u32()? as usize;
    let payload = c.take(payload_len)?.to_vec();
    if c.pos != bytes.len() {
        return Err(WireError::Framing(format!(
            "{} trailing bytes after frame",
            bytes.len() - c.pos
        )));
    }
    let v = Verb {
        kind,
        qpair,
        msg_id,
        vaddr,
        length,
        params,
        payload,
    };
    v.validate()?;
    Ok(v)
}
