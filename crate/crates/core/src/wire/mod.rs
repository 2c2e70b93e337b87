//! RDMA-style verbs on a software wire: frames, packets, credits and the
//! connection transport.

mod credit;
mod packet;
mod transport;
mod verb;

pub use credit::{CreditState, WouldBlock, DEFAULT_CREDIT_WINDOW};
pub use packet::{
    packetize, reassemble, Message, Packet, Reassembler, DEFAULT_MTU, FLAG_LAST, FLAG_STREAM, MIN_MTU,
    PACKET_HEADER_BYTES,
};
pub use transport::{Link, LinkConfig, LinkError, LinkStats, ResponseStream, CONTROL_MSG_ID};
pub use verb::{decode_verb, encode_verb, Status, Verb, VerbKind, HEADER_BYTES, MAGIC, MAX_PARAMS, VERSION};

use std::fmt;

/// Connection identifier assigned by the node at `OPEN_CONN`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct QueuePairId(pub u32);

impl fmt::Display for QueuePairId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "qp{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("framing error: {0}")]
    Framing(String),
    #[error("incomplete message: {0}")]
    Incomplete(String),
}
