//! Splitting secrets into the chunks each implementation style consumes.
//!
//! Every stream is MSB-first. A chunk holds its least significant bit
//! position, so every scheme reconstructs as `sum(value << position)`.

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::aes;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeysplitError {
    #[error("window width must be at least 1")]
    ZeroWindow,
    #[error("wNAF width must be at least 2, got {0}")]
    WnafWidth(usize),
    #[error("key has {bits} significant bits, more than the declared width {width}")]
    KeyTooWide { bits: u64, width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AesRound {
    First,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Scheme {
    Bitwise,
    FixedWindow { w: usize },
    SlidingWindow { w: usize },
    Wnaf { w: usize },
    AesByte { round: AesRound },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    /// Bit position of the chunk's least significant bit (digit index for
    /// wNAF, byte index for AES).
    pub position: u32,
    pub value: i64,
    /// Bits covered. Zero runs of a sliding-window stream have value 0.
    pub width: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyChunkStream {
    pub scheme: Scheme,
    pub chunks: Vec<Chunk>,
}

impl KeyChunkStream {
    pub fn values(&self) -> Vec<i64> {
        self.chunks.iter().map(|c| c.value).collect()
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// `sum(value * 2^position)` for bit-positioned schemes.
    pub fn reconstruct(&self) -> BigInt {
        self.chunks.iter().fold(BigInt::zero(), |acc, c| acc + (BigInt::from(c.value) << c.position as usize))
    }
}

fn check_width(key: &BigUint, width: usize) -> Result<(), KeysplitError> {
    if key.bits() > width as u64 {
        return Err(KeysplitError::KeyTooWide { bits: key.bits(), width });
    }
    Ok(())
}

fn bits_of(key: &BigUint, lo: usize, width: usize) -> i64 {
    let mut v = 0i64;
    for i in (lo..lo + width).rev() {
        v = (v << 1) | key.bit(i as u64) as i64;
    }
    v
}

/// One chunk per bit over `width` bits.
pub fn split_bits(key: &BigUint, width: usize) -> Result<KeyChunkStream, KeysplitError> {
    check_width(key, width)?;
    let chunks =
        (0..width).rev().map(|i| Chunk { position: i as u32, value: key.bit(i as u64) as i64, width: 1 }).collect();
    Ok(KeyChunkStream { scheme: Scheme::Bitwise, chunks })
}

/// `ceil(width / w)` chunks; the most significant chunk may be narrower.
pub fn split_fixed_window(key: &BigUint, width: usize, w: usize) -> Result<KeyChunkStream, KeysplitError> {
    if w == 0 {
        return Err(KeysplitError::ZeroWindow);
    }
    check_width(key, width)?;
    let n = width.div_ceil(w);
    let chunks = (0..n)
        .rev()
        .map(|i| {
            let lo = i * w;
            let cw = w.min(width - lo);
            Chunk { position: lo as u32, value: bits_of(key, lo, cw), width: cw as u32 }
        })
        .collect();
    Ok(KeyChunkStream { scheme: Scheme::FixedWindow { w }, chunks })
}

/// Left-to-right sliding windows: each window starts on a 1-bit, spans at
/// most `w` bits and ends on a 1-bit, so its value is odd. Runs of zeros
/// between windows are explicit value-0 chunks.
pub fn split_sliding_window(key: &BigUint, width: usize, w: usize) -> Result<KeyChunkStream, KeysplitError> {
    if w == 0 {
        return Err(KeysplitError::ZeroWindow);
    }
    check_width(key, width)?;
    let mut chunks = Vec::new();
    let bit = |i: isize| key.bit(i as u64);
    let mut i = width as isize - 1;
    while i >= 0 {
        if !bit(i) {
            let mut j = i;
            while j >= 0 && !bit(j) {
                j -= 1;
            }
            chunks.push(Chunk { position: (j + 1) as u32, value: 0, width: (i - j) as u32 });
            i = j;
        } else {
            let mut lo = (i - w as isize + 1).max(0);
            while !bit(lo) {
                lo += 1;
            }
            let cw = (i - lo + 1) as usize;
            chunks.push(Chunk { position: lo as u32, value: bits_of(key, lo as usize, cw), width: cw as u32 });
            i = lo - 1;
        }
    }
    Ok(KeyChunkStream { scheme: Scheme::SlidingWindow { w }, chunks })
}

/// Width-`w` non-adjacent form, most significant digit first. Digits are 0
/// or odd with magnitude at most `2^(w-1) - 1`. Zero is encoded as a single
/// zero digit.
pub fn wnaf_recode(key: &BigUint, w: usize) -> Result<KeyChunkStream, KeysplitError> {
    if w < 2 {
        return Err(KeysplitError::WnafWidth(w));
    }
    let modulus = BigInt::from(1u64) << w;
    let half = BigInt::from(1u64) << (w - 1);
    let mut k = BigInt::from_biguint(Sign::Plus, key.clone());
    let mut digits: Vec<i64> = Vec::new();
    while !k.is_zero() {
        let d = if k.bit(0) {
            let mut d = &k % &modulus;
            if d >= half {
                d -= &modulus;
            }
            k -= &d;
            d.to_i64().expect("digit fits in i64")
        } else {
            0
        };
        digits.push(d);
        k >>= 1;
    }
    if digits.is_empty() {
        digits.push(0);
    }
    let chunks =
        digits.iter().enumerate().rev().map(|(i, &d)| Chunk { position: i as u32, value: d, width: 1 }).collect();
    Ok(KeyChunkStream { scheme: Scheme::Wnaf { w }, chunks })
}

/// Pads a wNAF stream with leading zero digits up to `digits` entries.
pub fn pad_wnaf(mut stream: KeyChunkStream, digits: usize) -> KeyChunkStream {
    let have = stream.chunks.len();
    if have < digits {
        let pad = (have..digits).rev().map(|i| Chunk { position: i as u32, value: 0, width: 1 });
        let mut chunks: Vec<Chunk> = pad.collect();
        chunks.append(&mut stream.chunks);
        stream.chunks = chunks;
    }
    stream
}

/// Per-trace AES correlates. `First` yields the 16 cipher key bytes for every
/// trace; `Last` yields each trace's ciphertext bytes, which the last-round
/// table index combines with the fixed last round key.
pub fn aes_round_bytes(key: &[u8; 16], ciphertexts: &[[u8; 16]], round: AesRound) -> Vec<KeyChunkStream> {
    let stream = |bytes: &[u8; 16]| KeyChunkStream {
        scheme: Scheme::AesByte { round },
        chunks: bytes
            .iter()
            .enumerate()
            .map(|(i, &b)| Chunk { position: i as u32, value: b as i64, width: 8 })
            .collect(),
    };
    match round {
        AesRound::First => ciphertexts.iter().map(|_| stream(key)).collect(),
        AesRound::Last => ciphertexts.iter().map(stream).collect(),
    }
}

/// The round-10 key of the AES-128 schedule.
pub fn aes_last_round_key(key: &[u8; 16]) -> [u8; 16] {
    let rk = aes::expand_key(key);
    let mut out = [0u8; 16];
    for (i, w) in rk[40..44].iter().enumerate() {
        out[4 * i..4 * i + 4].copy_from_slice(&w.to_be_bytes());
    }
    out
}
