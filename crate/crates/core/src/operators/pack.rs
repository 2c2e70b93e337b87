use super::OperatorError;
use crate::wire::{packetize, Packet, QueuePairId};

pub const WORD_BYTES: usize = 64;

/// Packs variable-size rows densely into 64-byte words through a carry buffer.
#[derive(Debug, Default)]
pub struct Packer {
    carry: Vec<u8>,
    valid: u64,
}

impl Packer {
    pub fn new() -> Self {
        Packer {
            carry: Vec::with_capacity(WORD_BYTES),
            valid: 0,
        }
    }

    /// Appends `row`; every word it completes is appended to `out`.
    pub fn push(&mut self, mut row: &[u8], out: &mut Vec<u8>) {
        self.valid += row.len() as u64;
        if !self.carry.is_empty() {
            let take = (WORD_BYTES - self.carry.len()).min(row.len());
            self.carry.extend_from_slice(&row[..take]);
            row = &row[take..];
            if self.carry.len() < WORD_BYTES {
                return;
            }
            out.extend_from_slice(&self.carry);
            self.carry.clear();
        }
        let whole = row.len() / WORD_BYTES * WORD_BYTES;
        out.extend_from_slice(&row[..whole]);
        self.carry.extend_from_slice(&row[whole..]);
    }

    /// Flushes the valid bytes of the final partial word. Returns the total valid bytes.
    pub fn finish(&mut self, out: &mut Vec<u8>) -> u64 {
        out.append(&mut self.carry);
        self.valid
    }

    pub fn valid_bytes(&self) -> u64 {
        self.valid
    }
}

/// Word stream with the final word zero-padded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packed {
    pub words: Vec<[u8; WORD_BYTES]>,
    pub valid_bytes: usize,
}

impl Packed {
    pub fn bytes(&self) -> Vec<u8> {
        let mut b: Vec<u8> = self.words.iter().flatten().copied().collect();
        b.truncate(self.valid_bytes);
        b
    }
}

pub fn pack_stream<'a>(rows: impl IntoIterator<Item = &'a [u8]>) -> Packed {
    let mut p = Packer::new();
    let mut out = Vec::new();
    for r in rows {
        p.push(r, &mut out);
    }
    let valid = p.finish(&mut out) as usize;
    out.resize(valid.div_ceil(WORD_BYTES) * WORD_BYTES, 0);
    Packed {
        words: out.chunks_exact(WORD_BYTES).map(|w| w.try_into().unwrap()).collect(),
        valid_bytes: valid,
    }
}

/// Response packets carrying the valid bytes of `packed`.
pub fn emit_send_commands(packed: &Packed, qpair: QueuePairId, msg_id: u32, mtu: usize) -> Vec<Packet> {
    let mut ps = packetize(qpair, msg_id, &packed.bytes(), mtu);
    for p in &mut ps {
        p.stream = true;
    }
    ps
}

/// Entries that could not be placed in the hash tables, shipped in the response trailer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverflowBuffer {
    entry_bytes: usize,
    data: Vec<u8>,
    limit: usize,
}

/// Marks the start of the trailer that follows the main payload.
pub const TRAILER_MARKER: u64 = 0x4f56_4652_4c4f_5754;
/// marker, count, entry width, and the closing main-payload length.
pub const TRAILER_FIXED_BYTES: usize = 8 + 4 + 4 + 8;

impl OverflowBuffer {
    pub fn new(entry_bytes: usize, limit: usize) -> Self {
        OverflowBuffer {
            entry_bytes,
            data: Vec::new(),
            limit,
        }
    }

    pub fn push(&mut self, entry: &[u8]) -> Result<(), OperatorError> {
        assert_eq!(entry.len(), self.entry_bytes);
        if self.len() >= self.limit {
            return Err(OperatorError::OverflowFull(self.limit));
        }
        self.data.extend_from_slice(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        if self.entry_bytes == 0 {
            0
        } else {
            self.data.len() / self.entry_bytes
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn entry_bytes(&self) -> usize {
        self.entry_bytes
    }

    pub fn entries(&self) -> impl Iterator<Item = &[u8]> {
        self.data.chunks_exact(self.entry_bytes.max(1))
    }

    /// Trailer layout: marker (8) | count (4) | entry_bytes (4) | entries | main_len (8).
    pub fn encode_trailer(&self, main_len: u64) -> Vec<u8> {
        let mut t = Vec::with_capacity(TRAILER_FIXED_BYTES + self.data.len());
        t.extend_from_slice(&TRAILER_MARKER.to_le_bytes());
        t.extend_from_slice(&(self.len() as u32).to_le_bytes());
        t.extend_from_slice(&(self.entry_bytes as u32).to_le_bytes());
        t.extend_from_slice(&self.data);
        t.extend_from_slice(&main_len.to_le_bytes());
        t
    }
}

/// Main payload and overflow entries of a pipeline response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitResponse<'a> {
    pub main: &'a [u8],
    pub overflow: OverflowBuffer,
}

pub fn split_response(bytes: &[u8]) -> Result<SplitResponse<'_>, OperatorError> {
    let bad = |m: &str| OperatorError::Parse(format!("response trailer: {m}"));
    if bytes.len() < TRAILER_FIXED_BYTES {
        return Err(bad("too short"));
    }
    let main_len = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let main_len = usize::try_from(main_len).map_err(|_| bad("length"))?;
    if main_len > bytes.len() - TRAILER_FIXED_BYTES {
        return Err(bad("main length beyond response"));
    }
    let t = &bytes[main_len..bytes.len() - 8];
    if u64::from_le_bytes(t[..8].try_into().unwrap()) != TRAILER_MARKER {
        return Err(bad("missing marker"));
    }
    let count = u32::from_le_bytes(t[8..12].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(t[12..16].try_into().unwrap()) as usize;
    let data = &t[16..];
    if count.checked_mul(width) != Some(data.len()) {
        return Err(bad("entry count does not match size"));
    }
    Ok(SplitResponse {
        main: &bytes[..main_len],
        overflow: OverflowBuffer {
            entry_bytes: width,
            data: data.to_vec(),
            limit: count,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::Schema;
    use crate::wire::reassemble;
    use proptest::prelude::*;

    #[test]
    fn five_rows_of_24_bytes() {
        let rows: Vec<Vec<u8>> = (0..5u8).map(|i| vec![i + 1; 24]).collect();
        let p = pack_stream(rows.iter().map(|r| r.as_slice()));
        assert_eq!(p.words.len(), 2);
        assert_eq!(p.valid_bytes, 120);
        assert!(p.words[1][120 - 64..].iter().all(|&b| b == 0));
        assert_eq!(p.bytes(), rows.concat());
    }

    #[test]
    fn send_commands() {
        let p = pack_stream([&[1u8; 120][..]]);
        let ps = emit_send_commands(&p, QueuePairId(1), 3, 1024);
        assert_eq!(ps.len(), 1);
        assert!(ps[0].last && ps[0].stream);
        let p = pack_stream([&[1u8; 2500][..]]);
        let ps = emit_send_commands(&p, QueuePairId(1), 3, 1024);
        assert_eq!(ps.iter().map(|p| p.payload.len()).collect::<Vec<_>>(), vec![1024, 1024, 452]);
        assert!(ps[2].last && !ps[1].last);
    }

    #[test]
    fn trailer_round_trip() {
        let mut ob = OverflowBuffer::new(3, 2);
        ob.push(&[1, 2, 3]).unwrap();
        ob.push(&[4, 5, 6]).unwrap();
        assert_eq!(ob.push(&[7, 8, 9]), Err(OperatorError::OverflowFull(2)));
        let mut resp = vec![9u8; 10];
        resp.extend(ob.encode_trailer(10));
        let s = split_response(&resp).unwrap();
        assert_eq!(s.main, &[9u8; 10]);
        assert_eq!(s.overflow.entries().collect::<Vec<_>>(), vec![&[1, 2, 3][..], &[4, 5, 6]]);
        resp[10] ^= 1;
        assert!(split_response(&resp).is_err());
        assert!(split_response(&[0; 5]).is_err());
    }

    proptest! {
        #[test]
        fn unpack_inverts_pack(widths in proptest::collection::vec(1u32..20, 1..8), mask: u64, n in 0usize..80, seed: u8) {
            let s = Schema::new(widths).unwrap();
            let mask = (mask & s.all_columns()).max(1);
            let table: Vec<u8> = (0..n * s.tuple_bytes()).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let rows: Vec<Vec<u8>> = table.chunks_exact(s.tuple_bytes()).map(|r| {
                let mut o = Vec::new();
                s.project_into(r, mask, &mut o);
                o
            }).collect();
            let packed = pack_stream(rows.iter().map(|r| r.as_slice()));
            prop_assert_eq!(packed.valid_bytes, n * s.projected_bytes(mask));
            let width = s.projected_bytes(mask);
            let back: Vec<Vec<u8>> = packed.bytes().chunks_exact(width).map(<[u8]>::to_vec).collect();
            prop_assert_eq!(&back, &rows);

            // Streaming packer agrees and send commands carry exactly the valid bytes.
            let mut pk = Packer::new();
            let mut out = Vec::new();
            for r in &rows {
                pk.push(r, &mut out);
                prop_assert_eq!(out.len() % WORD_BYTES, 0);
            }
            prop_assert_eq!(pk.finish(&mut out) as usize, out.len());
            prop_assert_eq!(&out, &packed.bytes());
            let ps = emit_send_commands(&packed, QueuePairId(2), 9, 64 + seed as usize);
            prop_assert_eq!(reassemble(ps).unwrap(), out);
        }
    }
}
