//! Packets and out-of-order reassembly.
//!
//! Packet layout (little-endian): `qpair (4) | msg_id (4) | seq (4) | flags (1)
//! | valid_bytes (2) | payload`. Flag bit 0 marks the last packet of a message;
//! bit 1 marks a raw response stream whose reassembled bytes are operator
//! output rather than an encoded verb frame.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Read};

use super::{QueuePairId, WireError};

pub const PACKET_HEADER_BYTES: usize = 15;
pub const DEFAULT_MTU: usize = 1024;
pub const MIN_MTU: usize = 64;

pub const FLAG_LAST: u8 = 0b01;
pub const FLAG_STREAM: u8 = 0b10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub qpair: QueuePairId,
    pub msg_id: u32,
    pub seq: u32,
    pub last: bool,
    pub stream: bool,
    pub payload: Vec<u8>,
}

impl Packet {
    pub fn valid_bytes(&self) -> u16 {
        self.payload.len() as u16
    }

    pub fn flags(&self) -> u8 {
        (if self.last { FLAG_LAST } else { 0 }) | (if self.stream { FLAG_STREAM } else { 0 })
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.qpair.0.to_le_bytes());
        out.extend_from_slice(&self.msg_id.to_le_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.push(self.flags());
        out.extend_from_slice(&self.valid_bytes().to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PACKET_HEADER_BYTES + self.payload.len());
        self.encode_into(&mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Packet, WireError> {
        if bytes.len() < PACKET_HEADER_BYTES {
            return Err(WireError::Framing("packet shorter than header".into()));
        }
        let (header, rest) = bytes.split_at(PACKET_HEADER_BYTES);
        let mut p = Self::from_header(header.try_into().unwrap())?;
        if rest.len() != p.payload.capacity() {
            return Err(WireError::Framing(format!(
                "valid_bytes {} but {} payload bytes",
                p.payload.capacity(),
                rest.len()
            )));
        }
        p.payload.extend_from_slice(rest);
        Ok(p)
    }

    /// Header fields, with an empty payload pre-sized to `valid_bytes`.
    fn from_header(h: &[u8; PACKET_HEADER_BYTES]) -> Result<Packet, WireError> {
        let flags = h[12];
        if flags & !(FLAG_LAST | FLAG_STREAM) != 0 {
            return Err(WireError::Protocol(format!("unknown packet flags {flags:#04x}")));
        }
        let valid = u16::from_le_bytes([h[13], h[14]]) as usize;
        Ok(Packet {
            qpair: QueuePairId(u32::from_le_bytes(h[0..4].try_into().unwrap())),
            msg_id: u32::from_le_bytes(h[4..8].try_into().unwrap()),
            seq: u32::from_le_bytes(h[8..12].try_into().unwrap()),
            last: flags & FLAG_LAST != 0,
            stream: flags & FLAG_STREAM != 0,
            payload: Vec::with_capacity(valid),
        })
    }

    /// Reads one packet from a byte stream. `Ok(None)` on a clean EOF at a packet boundary.
    pub fn read_from<R: Read>(r: &mut R) -> io::Result<Option<Packet>> {
        let mut header = [0u8; PACKET_HEADER_BYTES];
        let mut filled = 0;
        while filled < PACKET_HEADER_BYTES {
            match r.read(&mut header[filled..]) {
                Ok(0) if filled == 0 => return Ok(None),
                Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) if filled > 0 && is_timeout(&e) => {}
                Err(e) => return Err(e),
            }
        }
        let mut p = Self::from_header(&header).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let valid = p.payload.capacity();
        p.payload.resize(valid, 0);
        let mut got = 0;
        while got < valid {
            match r.read(&mut p.payload[got..]) {
                Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted || is_timeout(&e) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(Some(p))
    }
}

pub(crate) fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

/// Splits a message payload into MTU-sized packets.
///
/// An empty payload still yields one (empty) packet so the receiver sees `last`.
pub fn packetize(qpair: QueuePairId, msg_id: u32, payload: &[u8], mtu: usize) -> Vec<Packet> {
    assert!(mtu >= MIN_MTU, "mtu {mtu} below minimum {MIN_MTU}");
    let mtu = mtu.min(u16::MAX as usize);
    if payload.is_empty() {
        return vec![Packet {
            qpair,
            msg_id,
            seq: 0,
            last: true,
            stream: false,
            payload: Vec::new(),
        }];
    }
    let n = payload.len().div_ceil(mtu);
    payload
        .chunks(mtu)
        .enumerate()
        .map(|(i, chunk)| Packet {
            qpair,
            msg_id,
            seq: i as u32,
            last: i + 1 == n,
            stream: false,
            payload: chunk.to_vec(),
        })
        .collect()
}

#[derive(Debug, Default)]
struct Partial {
    chunks: BTreeMap<u32, Vec<u8>>,
    last_seq: Option<u32>,
    bytes: usize,
}

impl Partial {
    fn insert(&mut self, p: Packet) -> Result<(), WireError> {
        if p.last {
            match self.last_seq {
                Some(s) if s != p.seq => {
                    return Err(WireError::Protocol(format!(
                        "msg {} has two last packets ({s} and {})",
                        p.msg_id, p.seq
                    )))
                }
                _ => self.last_seq = Some(p.seq),
            }
        }
        if let Some(last) = self.last_seq {
            if let Some((&max, _)) = self.chunks.last_key_value() {
                if max > last {
                    return Err(WireError::Protocol(format!("seq {max} beyond last seq {last}")));
                }
            }
            if p.seq > last {
                return Err(WireError::Protocol(format!("seq {} beyond last seq {last}", p.seq)));
            }
        }
        match self.chunks.get(&p.seq) {
            Some(existing) if *existing != p.payload => Err(WireError::Protocol(format!(
                "duplicate seq {} with different payload",
                p.seq
            ))),
            Some(_) => Ok(()),
            None => {
                self.bytes += p.payload.len();
                self.chunks.insert(p.seq, p.payload);
                Ok(())
            }
        }
    }

    fn is_complete(&self) -> bool {
        self.last_seq
            .is_some_and(|last| self.chunks.len() as u64 == last as u64 + 1)
    }

    fn into_bytes(self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.bytes);
        for (_, c) in self.chunks {
            out.extend_from_slice(&c);
        }
        out
    }
}

/// Reassembles one message from packets arriving in any order.
pub fn reassemble<I: IntoIterator<Item = Packet>>(packets: I) -> Result<Vec<u8>, WireError> {
    let mut partial = Partial::default();
    let mut key = None;
    for p in packets {
        let k = (p.qpair, p.msg_id);
        if *key.get_or_insert(k) != k {
            return Err(WireError::Protocol("packets from different messages".into()));
        }
        partial.insert(p)?;
    }
    let Some(last) = partial.last_seq else {
        return Err(WireError::Incomplete("no packet carries the last flag".into()));
    };
    if !partial.is_complete() {
        let missing = (0..=last).find(|s| !partial.chunks.contains_key(s)).unwrap();
        return Err(WireError::Incomplete(format!("missing seq {missing} of {}", last + 1)));
    }
    Ok(partial.into_bytes())
}

/// A completed message handed out by [`Reassembler`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub qpair: QueuePairId,
    pub msg_id: u32,
    pub stream: bool,
    /// Packets the message arrived in.
    pub packets: u32,
    pub bytes: Vec<u8>,
}

/// Incremental reassembly of interleaved messages keyed by `(qpair, msg_id)`.
#[derive(Debug, Default)]
pub struct Reassembler {
    pending: HashMap<(QueuePairId, u32), (bool, Partial)>,
}

impl Reassembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: Packet) -> Result<Option<Message>, WireError> {
        let key = (p.qpair, p.msg_id);
        let stream = p.stream;
        let entry = self.pending.entry(key).or_insert_with(|| (stream, Partial::default()));
        if entry.0 != stream {
            return Err(WireError::Protocol(format!("msg {} mixes stream and frame packets", p.msg_id)));
        }
        entry.1.insert(p)?;
        if entry.1.is_complete() {
            let (stream, partial) = self.pending.remove(&key).unwrap();
            return Ok(Some(Message {
                qpair: key.0,
                msg_id: key.1,
                stream,
                packets: partial.chunks.len() as u32,
                bytes: partial.into_bytes(),
            }));
        }
        Ok(None)
    }

    /// Drops any partially received message with this id.
    pub fn discard(&mut self, qpair: QueuePairId, msg_id: u32) {
        self.pending.remove(&(qpair, msg_id));
    }

    pub fn pending_messages(&self) -> usize {
        self.pending.len()
    }
}
