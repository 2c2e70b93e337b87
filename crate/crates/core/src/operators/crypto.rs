//! AES-128 in counter mode.
//!
//! The counter block is the 96-bit nonce followed by a 32-bit big-endian
//! block counter, incremented (wrapping) once per 16-byte block of the stream.

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CryptoParams {
    pub key: [u8; 16],
    pub nonce: [u8; 12],
    pub initial_counter: u32,
}

impl CryptoParams {
    /// The first counter block.
    pub fn counter_block(&self) -> [u8; 16] {
        let mut b = [0u8; 16];
        b[..12].copy_from_slice(&self.nonce);
        b[12..].copy_from_slice(&self.initial_counter.to_be_bytes());
        b
    }

    pub fn from_counter_block(key: [u8; 16], block: [u8; 16]) -> CryptoParams {
        CryptoParams {
            key,
            nonce: block[..12].try_into().unwrap(),
            initial_counter: u32::from_be_bytes(block[12..].try_into().unwrap()),
        }
    }
}

const BATCH_BLOCKS: usize = 64;

pub struct CtrCipher {
    aes: Aes128,
    params: CryptoParams,
}

impl CtrCipher {
    pub fn new(params: CryptoParams) -> Self {
        CtrCipher {
            aes: Aes128::new(&GenericArray::from(params.key)),
            params,
        }
    }

    /// XORs the keystream starting at byte `offset` of the stream into `buf`.
    pub fn apply_at(&self, offset: u64, buf: &mut [u8]) {
        let mut block = offset / 16;
        let mut skip = (offset % 16) as usize;
        let mut pos = 0;
        let mut ks = [GenericArray::<u8, aes::cipher::consts::U16>::default(); BATCH_BLOCKS];
        while pos < buf.len() {
            let need = (skip + buf.len() - pos).div_ceil(16).min(BATCH_BLOCKS);
            for (i, b) in ks[..need].iter_mut().enumerate() {
                let ctr = self.params.initial_counter.wrapping_add((block + i as u64) as u32);
                b[..12].copy_from_slice(&self.params.nonce);
                b[12..].copy_from_slice(&ctr.to_be_bytes());
            }
            self.aes.encrypt_blocks(&mut ks[..need]);
            for b in &ks[..need] {
                for &k in &b[skip..] {
                    if pos == buf.len() {
                        break;
                    }
                    buf[pos] ^= k;
                    pos += 1;
                }
                skip = 0;
            }
            block += need as u64;
        }
    }
}

pub fn aes_ctr_transform(bytes: &[u8], cp: &CryptoParams) -> Vec<u8> {
    let mut out = bytes.to_vec();
    CtrCipher::new(*cp).apply_at(0, &mut out);
    out
}
