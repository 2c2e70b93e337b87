//! Packet transport over a reliable byte stream.
//!
//! A [`Link`] owns one end of a connection: it packetizes outgoing frames and
//! response streams, gates every data packet on send credits, reassembles
//! incoming packets per message, and returns credits to the peer in batches,
//! or all at once before blocking on the socket.
//! Control traffic (credit grants, abort notices) travels on the reserved
//! [`CONTROL_MSG_ID`] and is not credit gated, so a stalled peer can always be
//! told to stop.

use std::collections::VecDeque;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::packet::{is_timeout, Message, Packet, Reassembler, DEFAULT_MTU, MIN_MTU};
use super::verb::{decode_verb, encode_verb, Verb, VerbKind};
use super::{CreditState, QueuePairId, WireError, DEFAULT_CREDIT_WINDOW};

pub const CONTROL_MSG_ID: u32 = u32::MAX;
const POLL_INTERVAL: Duration = Duration::from_millis(20);
const STREAM_REORDER_WINDOW: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum LinkError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("peer closed the connection")]
    Closed,
    #[error("operation aborted")]
    Aborted,
}

#[derive(Debug, Clone, Copy)]
pub struct LinkConfig {
    pub mtu: usize,
    pub credit_window: u32,
    /// Shuffle the packets of each outgoing message with this seed.
    pub reorder_seed: Option<u64>,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            mtu: DEFAULT_MTU,
            credit_window: DEFAULT_CREDIT_WINDOW,
            reorder_seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub packets_sent: u64,
    pub packets_received: u64,
    pub payload_bytes_sent: u64,
    pub payload_bytes_received: u64,
    /// Highest number of sent-but-unacknowledged data packets observed.
    pub max_in_flight: u32,
    pub grants_sent: u64,
}

pub struct Link {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    qpair: QueuePairId,
    mtu: usize,
    credits: CreditState,
    unacked_received: u32,
    grant_threshold: u32,
    reassembler: Reassembler,
    inbox: VecDeque<Message>,
    reorder: Option<ChaCha8Rng>,
    abort: Option<Arc<AtomicBool>>,
    stats: LinkStats,
}

impl Link {
    pub fn new(stream: TcpStream, cfg: LinkConfig) -> io::Result<Link> {
        assert!(cfg.mtu >= MIN_MTU && cfg.mtu <= u16::MAX as usize);
        assert!(cfg.credit_window >= 1);
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Link {
            reader,
            writer: BufWriter::new(stream),
            qpair: QueuePairId(0),
            mtu: cfg.mtu,
            credits: CreditState::full(cfg.credit_window),
            unacked_received: 0,
            grant_threshold: (cfg.credit_window / 2).max(1),
            reassembler: Reassembler::new(),
            inbox: VecDeque::new(),
            reorder: cfg.reorder_seed.map(ChaCha8Rng::seed_from_u64),
            abort: None,
            stats: LinkStats::default(),
        })
    }

    /// Blocking receives poll this flag and fail with [`LinkError::Aborted`] once it is set.
    pub fn set_abort_flag(&mut self, flag: Arc<AtomicBool>) -> io::Result<()> {
        self.reader.get_ref().set_read_timeout(Some(POLL_INTERVAL))?;
        self.abort = Some(flag);
        Ok(())
    }

    pub fn set_qpair(&mut self, qpair: QueuePairId) {
        self.qpair = qpair;
    }

    pub fn qpair(&self) -> QueuePairId {
        self.qpair
    }

    pub fn mtu(&self) -> usize {
        self.mtu
    }

    pub fn credits(&self) -> CreditState {
        self.credits
    }

    pub fn stats(&self) -> LinkStats {
        self.stats
    }

    pub fn shutdown(&self) {
        let _ = self.writer.get_ref().shutdown(std::net::Shutdown::Both);
    }

    /// Sends a frame as one credit-gated message.
    pub fn send_verb(&mut self, v: &Verb) -> Result<(), LinkError> {
        let bytes = encode_verb(v)?;
        let mut packets = super::packetize(self.qpair, v.msg_id, &bytes, self.mtu);
        if let Some(rng) = self.reorder.as_mut() {
            packets.shuffle(rng);
        }
        for p in packets {
            self.send_data_packet(p)?;
        }
        self.writer.flush()?;
        Ok(())
    }

    /// Sends a frame on the control channel, bypassing credits.
    pub fn send_control(&mut self, v: &Verb) -> Result<(), LinkError> {
        let bytes = encode_verb(v)?;
        for p in super::packetize(self.qpair, CONTROL_MSG_ID, &bytes, self.mtu) {
            self.write_packet(&p)?;
        }
        self.writer.flush()?;
        Ok(())
    }

    /// Starts a raw response stream for the request `msg_id`.
    pub fn stream(&mut self, msg_id: u32) -> ResponseStream<'_> {
        ResponseStream {
            link: self,
            msg_id,
            seq: 0,
            buf: Vec::new(),
            held: Vec::new(),
            bytes: 0,
        }
    }

    fn write_packet(&mut self, p: &Packet) -> Result<(), LinkError> {
        let mut buf = Vec::with_capacity(super::packet::PACKET_HEADER_BYTES + p.payload.len());
        p.encode_into(&mut buf);
        self.writer.write_all(&buf)?;
        self.stats.packets_sent += 1;
        self.stats.payload_bytes_sent += p.payload.len() as u64;
        Ok(())
    }

    fn send_data_packet(&mut self, p: Packet) -> Result<(), LinkError> {
        loop {
            match self.credits.consume() {
                Ok(c) => {
                    self.credits = c;
                    break;
                }
                Err(_) => {
                    self.writer.flush()?;
                    self.pump()?;
                }
            }
        }
        self.stats.max_in_flight = self.stats.max_in_flight.max(self.credits.in_flight());
        self.write_packet(&p)
    }

    /// Receives the next complete data message.
    pub fn recv(&mut self) -> Result<Message, LinkError> {
        loop {
            if let Some(m) = self.inbox.pop_front() {
                return Ok(m);
            }
            self.writer.flush()?;
            self.pump()?;
        }
    }

    /// Receives the next message and decodes it as a frame.
    pub fn recv_verb(&mut self) -> Result<Verb, LinkError> {
        let m = self.recv()?;
        if m.stream {
            return Err(WireError::Protocol(format!("unexpected response stream for msg {}", m.msg_id)).into());
        }
        Ok(decode_verb(&m.bytes)?)
    }

    /// Reads and processes exactly one packet.
    fn pump(&mut self) -> Result<(), LinkError> {
        // About to block on the socket: hand back everything received so far,
        // since the peer's window may be smaller than our batching threshold.
        if self.reader.buffer().is_empty() && self.unacked_received > 0 {
            self.return_credits()?;
        }
        let p = loop {
            match Packet::read_from(&mut self.reader) {
                Ok(Some(p)) => break p,
                Ok(None) => return Err(LinkError::Closed),
                Err(e) if is_timeout(&e) => {
                    if self.abort.as_ref().is_some_and(|f| f.load(Ordering::Relaxed)) {
                        return Err(LinkError::Aborted);
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof || e.kind() == io::ErrorKind::ConnectionReset => {
                    return Err(LinkError::Closed)
                }
                Err(e) => return Err(e.into()),
            }
        };
        self.stats.packets_received += 1;
        self.stats.payload_bytes_received += p.payload.len() as u64;
        let control = p.msg_id == CONTROL_MSG_ID;
        if !control {
            self.unacked_received += 1;
            if self.unacked_received >= self.grant_threshold {
                self.return_credits()?;
            }
        }
        if let Some(m) = self.reassembler.push(p)? {
            if control {
                let v = decode_verb(&m.bytes)?;
                if v.kind == VerbKind::CreditGrant {
                    let n = u32::from_le_bytes(v.payload[..4].try_into().unwrap());
                    self.credits = self.credits.grant(n)?;
                } else {
                    // Control frames other than grants are delivered as ordinary messages.
                    self.inbox.push_back(Message {
                        msg_id: v.msg_id,
                        ..m
                    });
                }
            } else {
                self.inbox.push_back(m);
            }
        }
        Ok(())
    }

    fn return_credits(&mut self) -> Result<(), LinkError> {
        let n = std::mem::take(&mut self.unacked_received);
        match self.send_control(&Verb::credit_grant(self.qpair, n)) {
            Ok(()) => self.stats.grants_sent += 1,
            // A peer that already hung up needs no credits; packets it sent
            // before closing are still read.
            Err(LinkError::Io(e))
                if matches!(
                    e.kind(),
                    io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset | io::ErrorKind::ConnectionAborted
                ) => {}
            Err(e) => return Err(e),
        }
        Ok(())
    }

    /// Forgets a partially received response stream.
    pub fn discard(&mut self, msg_id: u32) {
        self.reassembler.discard(self.qpair, msg_id);
        self.inbox.retain(|m| m.msg_id != msg_id || !m.stream);
    }
}

/// Emits a response of unknown length as MTU-sized stream packets.
///
/// Bytes are flushed as soon as a full packet accumulates; `last` is only
/// known when [`ResponseStream::finish`] is called.
pub struct ResponseStream<'a> {
    link: &'a mut Link,
    msg_id: u32,
    seq: u32,
    buf: Vec<u8>,
    held: Vec<Packet>,
    bytes: u64,
}

impl ResponseStream<'_> {
    pub fn write(&mut self, mut bytes: &[u8]) -> Result<(), LinkError> {
        let mtu = self.link.mtu;
        while !bytes.is_empty() {
            // A full buffer is held back until more data shows it is not the last packet.
            if self.buf.len() == mtu {
                self.emit(false)?;
            }
            let take = (mtu - self.buf.len()).min(bytes.len());
            self.buf.extend_from_slice(&bytes[..take]);
            bytes = &bytes[take..];
        }
        Ok(())
    }

    /// Bytes written so far.
    pub fn bytes(&self) -> u64 {
        self.bytes + self.buf.len() as u64
    }

    fn emit(&mut self, last: bool) -> Result<(), LinkError> {
        let payload = std::mem::replace(&mut self.buf, Vec::with_capacity(self.link.mtu));
        self.bytes += payload.len() as u64;
        let p = Packet {
            qpair: self.link.qpair,
            msg_id: self.msg_id,
            seq: self.seq,
            last,
            stream: true,
            payload,
        };
        self.seq += 1;
        if self.link.reorder.is_some() {
            self.held.push(p);
            if self.held.len() >= STREAM_REORDER_WINDOW || last {
                self.flush_held()?;
            }
            return Ok(());
        }
        self.link.send_data_packet(p)
    }

    fn flush_held(&mut self) -> Result<(), LinkError> {
        let mut held = std::mem::take(&mut self.held);
        if let Some(rng) = self.link.reorder.as_mut() {
            held.shuffle(rng);
        }
        for p in held {
            self.link.send_data_packet(p)?;
        }
        Ok(())
    }

    /// Sends the final packet. Returns the total stream bytes.
    pub fn finish(mut self) -> Result<u64, LinkError> {
        self.emit(true)?;
        self.flush_held()?;
        self.link.writer.flush()?;
        Ok(self.bytes)
    }
}
