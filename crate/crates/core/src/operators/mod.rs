//! Streaming operators that make up the pipelines of a dynamic region.

mod annotate;
pub mod crypto;
mod cuckoo;
mod distinct;
mod group_by;
mod lru;
mod pack;
mod predicate;
pub mod regex;
mod select;
mod smart_addr;

pub use annotate::{parse_and_project, AnnotatedTuple, Annotations};
pub use crypto::{aes_ctr_transform, CryptoParams, CtrCipher};
pub use cuckoo::{CuckooConfig, CuckooTableSet};
pub use distinct::{check_distinct_keys, distinct_stream, Distinct, DistinctConfig, Emit};
pub use group_by::{group_by_stream, merge_groups, Acc, AggFn, AggValue, AggregateSpec, GroupBy, GroupRow, Measure};
pub use lru::LruShiftRegister;
pub use pack::{
    emit_send_commands, pack_stream, split_response, OverflowBuffer, Packed, Packer, SplitResponse, TRAILER_MARKER,
    WORD_BYTES,
};
pub use predicate::{eval_predicate, Combiner, Comparator, SelectionPredicate, Term, ValueType};
pub use regex::{regex_match_stream, Regex};
pub use select::{compute_lanes, select_stream, vectorized_select};
pub use smart_addr::{plan_smart_addressing, AccessPlan, CostModel, WordRun};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OperatorError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid pattern: {0}")]
    Pattern(String),
    #[error("overflow buffer full ({0} entries)")]
    OverflowFull(usize),
}

/// Reads a column of 1, 2, 4 or 8 bytes as a little-endian integer.
pub fn read_uint(col: &[u8]) -> u64 {
    let mut b = [0u8; 8];
    let n = col.len().min(8);
    b[..n].copy_from_slice(&col[..n]);
    u64::from_le_bytes(b)
}

/// Like [`read_uint`] but sign-extends from the column width.
pub fn read_int(col: &[u8]) -> i64 {
    let n = col.len().min(8);
    let v = read_uint(col);
    if n == 0 || n == 8 {
        return v as i64;
    }
    let shift = 64 - 8 * n as u32;
    ((v << shift) as i64) >> shift
}

/// String columns hold a little-endian `u16` length followed by the bytes.
pub fn string_slot(col: &[u8]) -> &[u8] {
    if col.len() < 2 {
        return &[];
    }
    let n = u16::from_le_bytes([col[0], col[1]]) as usize;
    &col[2..2 + n.min(col.len() - 2)]
}

/// Encodes `s` into a string column of `width` bytes, truncating if needed.
pub fn encode_string_slot(s: &[u8], width: usize) -> Vec<u8> {
    assert!(width >= 2);
    let n = s.len().min(width - 2).min(u16::MAX as usize);
    let mut out = vec![0u8; width];
    out[..2].copy_from_slice(&(n as u16).to_le_bytes());
    out[2..2 + n].copy_from_slice(&s[..n]);
    out
}
