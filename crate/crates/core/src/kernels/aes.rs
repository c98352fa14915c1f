//! AES-128 encryption in the T-table and S-box styles.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::exec::{Exec, ExecError, KernelSpec, Marker, RegionDecl, RegionId, SecretShape};
use crate::taint::{Taint, Tv};

use super::{AesStyle, KernelVariant, KEY};

pub const RK: &str = "rk";
pub const SBOX_REGION: &str = "sbox";
pub const TE: [&str; 4] = ["Te0", "Te1", "Te2", "Te3"];
pub const TE4: &str = "Te4";

#[rustfmt::skip]
pub const SBOX: [u8; 256] = [
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76,
    0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0,
    0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75,
    0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84,
    0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8,
    0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2,
    0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb,
    0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79,
    0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a,
    0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e,
    0xe1, 0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16,
];

const RCON: [u8; 10] = [0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1b, 0x36];

fn xtime(b: u8) -> u8 {
    (b << 1) ^ if b & 0x80 != 0 { 0x1b } else { 0 }
}

struct Tables {
    te: [[u32; 256]; 4],
    te4: [u32; 256],
    inv_sbox: [u8; 256],
}

fn tables() -> &'static Tables {
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| {
        let mut t = Tables { te: [[0; 256]; 4], te4: [0; 256], inv_sbox: [0; 256] };
        for x in 0..256 {
            let s = SBOX[x];
            let w = u32::from_be_bytes([xtime(s), s, s, xtime(s) ^ s]);
            for (i, te) in t.te.iter_mut().enumerate() {
                te[x] = w.rotate_right(8 * i as u32);
            }
            t.te4[x] = u32::from_be_bytes([s; 4]);
            t.inv_sbox[s as usize] = x as u8;
        }
        t
    })
}

pub fn inv_sbox(b: u8) -> u8 {
    tables().inv_sbox[b as usize]
}

/// AES-128 key expansion into 44 big-endian words.
pub fn expand_key(key: &[u8; 16]) -> [u32; 44] {
    let mut w = [0u32; 44];
    for i in 0..4 {
        w[i] = u32::from_be_bytes(key[4 * i..4 * i + 4].try_into().unwrap());
    }
    for i in 4..44 {
        let mut t = w[i - 1];
        if i % 4 == 0 {
            let b = t.rotate_left(8).to_be_bytes();
            t = u32::from_be_bytes([
                SBOX[b[0] as usize],
                SBOX[b[1] as usize],
                SBOX[b[2] as usize],
                SBOX[b[3] as usize],
            ]) ^ ((RCON[i / 4 - 1] as u32) << 24);
        }
        w[i] = w[i - 4] ^ t;
    }
    w
}

/// Recovers the cipher key from the last round key by running the
/// schedule backwards.
pub fn invert_key_schedule(last: &[u8; 16]) -> [u8; 16] {
    let mut w = [0u32; 44];
    for i in 0..4 {
        w[40 + i] = u32::from_be_bytes(last[4 * i..4 * i + 4].try_into().unwrap());
    }
    for i in (4..44).rev() {
        let mut t = w[i - 1];
        if i % 4 == 0 {
            let b = t.rotate_left(8).to_be_bytes();
            t = u32::from_be_bytes([
                SBOX[b[0] as usize],
                SBOX[b[1] as usize],
                SBOX[b[2] as usize],
                SBOX[b[3] as usize],
            ]) ^ ((RCON[i / 4 - 1] as u32) << 24);
        }
        w[i - 4] = w[i] ^ t;
    }
    let mut key = [0u8; 16];
    for i in 0..4 {
        key[4 * i..4 * i + 4].copy_from_slice(&w[i].to_be_bytes());
    }
    key
}

fn parse(secret: &[u8], input: &[u8]) -> Result<([u8; 16], [u8; 16]), ExecError> {
    let key: [u8; 16] = secret.try_into().map_err(|_| ExecError::SecretLength { expected: 16, got: secret.len() })?;
    let pt: [u8; 16] = input
        .try_into()
        .map_err(|_| ExecError::BadInput(format!("plaintext must be 16 bytes, got {}", input.len())))?;
    Ok((key, pt))
}

/// Byte-oriented textbook encryption, no tables beyond the S-box.
pub fn encrypt_block(key: &[u8; 16], pt: &[u8; 16]) -> [u8; 16] {
    let rk = expand_key(key);
    let mut s = *pt;
    let add = |s: &mut [u8; 16], r: usize| {
        for c in 0..4 {
            let k = rk[4 * r + c].to_be_bytes();
            for i in 0..4 {
                s[4 * c + i] ^= k[i];
            }
        }
    };
    add(&mut s, 0);
    for r in 1..=10 {
        for b in s.iter_mut() {
            *b = SBOX[*b as usize];
        }
        let old = s;
        for c in 0..4 {
            for i in 0..4 {
                s[4 * c + i] = old[4 * ((c + i) % 4) + i];
            }
        }
        if r != 10 {
            for c in 0..4 {
                let a: [u8; 4] = s[4 * c..4 * c + 4].try_into().unwrap();
                let all = a[0] ^ a[1] ^ a[2] ^ a[3];
                for i in 0..4 {
                    s[4 * c + i] = a[i] ^ all ^ xtime(a[i] ^ a[(i + 1) % 4]);
                }
            }
        }
        add(&mut s, r);
    }
    s
}

pub(crate) fn reference(secret: &[u8], input: &[u8]) -> Result<Vec<u8>, ExecError> {
    let (key, pt) = parse(secret, input)?;
    Ok(encrypt_block(&key, &pt).to_vec())
}

pub(crate) fn spec(variant: &KernelVariant, style: AesStyle, _line_size: usize) -> KernelSpec {
    let mut regions = vec![RegionDecl::data(KEY, 16), RegionDecl::data(RK, 176)];
    match style {
        AesStyle::TtableDistinctLast | AesStyle::TtableReusedLast => {
            regions.extend(TE.iter().map(|n| RegionDecl::data(n, 1024)));
            if style == AesStyle::TtableDistinctLast {
                regions.push(RegionDecl::data(TE4, 1024));
            }
        }
        AesStyle::SboxPlain | AesStyle::SboxPrefetch => regions.push(RegionDecl::data(SBOX_REGION, 256)),
    }
    for r in regions.iter_mut() {
        r.base_offset = variant.offset(&r.name);
    }
    let mut parameters = BTreeMap::new();
    parameters.insert("rounds".into(), 10);
    parameters.insert("prefetch".into(), (style == AesStyle::SboxPrefetch) as i64);
    KernelSpec {
        name: variant.name.clone(),
        regions,
        sites: Vec::new(),
        parameters,
        secret_shape: SecretShape { bytes: 16, chunking: "aes_byte".into() },
        secret_region: KEY.into(),
    }
}

/// Loads the cipher key, expands it and stores the round keys.
fn load_round_keys(ctx: &mut Exec<'_, '_>, key: &[u8; 16]) -> Result<(RegionId, [u32; 44]), ExecError> {
    let key_r = ctx.region(KEY)?;
    let rk_r = ctx.region(RK)?;
    let mut kt = Taint::NONE;
    for i in 0..16 {
        kt = kt.union(ctx.load(key_r, i, 1, Taint::NONE)?);
    }
    let rk = expand_key(key);
    for i in 0..44 {
        ctx.store(rk_r, 4 * i, 4, kt, Taint::NONE)?;
    }
    Ok((rk_r, rk))
}

fn rk_word(ctx: &mut Exec<'_, '_>, rk_r: RegionId, rk: &[u32; 44], i: usize) -> Result<Tv<u32>, ExecError> {
    let t = ctx.load(rk_r, 4 * i, 4, Taint::NONE)?;
    Ok(Tv::new(rk[i], t))
}

fn byte_of(w: Tv<u32>, shift: u32) -> Tv<u8> {
    w.map(|v| (v >> shift) as u8)
}

fn lookup(ctx: &mut Exec<'_, '_>, region: RegionId, table: &[u32; 256], idx: Tv<u8>) -> Result<Tv<u32>, ExecError> {
    let t = ctx.load(region, 4 * idx.v as usize, 4, idx.t)?;
    Ok(Tv::new(table[idx.v as usize], t))
}

fn encrypt_ttable(
    ctx: &mut Exec<'_, '_>,
    distinct_last: bool,
    key: &[u8; 16],
    pt: &[u8; 16],
) -> Result<[u8; 16], ExecError> {
    let tb = tables();
    let te_r = [ctx.region(TE[0])?, ctx.region(TE[1])?, ctx.region(TE[2])?, ctx.region(TE[3])?];
    let te4_r = if distinct_last { Some(ctx.region(TE4)?) } else { None };
    let (rk_r, rk) = load_round_keys(ctx, key)?;
    let mut s = [Tv::public(0u32); 4];
    for c in 0..4 {
        let p = u32::from_be_bytes(pt[4 * c..4 * c + 4].try_into().unwrap());
        s[c] = rk_word(ctx, rk_r, &rk, c)?.map(|k| k ^ p);
    }
    for r in 1..10 {
        let mut t = [Tv::public(0u32); 4];
        for c in 0..4 {
            let mut acc = rk_word(ctx, rk_r, &rk, 4 * r + c)?;
            for i in 0..4 {
                let idx = byte_of(s[(c + i) % 4], 24 - 8 * i as u32);
                let v = lookup(ctx, te_r[i], &tb.te[i], idx)?;
                acc = acc.zip(v, |a, b| a ^ b);
            }
            t[c] = acc;
        }
        s = t;
        if r == 1 {
            ctx.marker(Marker::RoundEnd(1));
        }
    }
    let mut out = [0u8; 16];
    for c in 0..4 {
        let mut acc = rk_word(ctx, rk_r, &rk, 40 + c)?;
        for i in 0..4 {
            let idx = byte_of(s[(c + i) % 4], 24 - 8 * i as u32);
            let mask = 0xff00_0000u32 >> (8 * i);
            let v = match te4_r {
                Some(r4) => lookup(ctx, r4, &tb.te4, idx)?,
                // Te[(i + 2) % 4] carries the plain S-box value at byte i from the top.
                None => {
                    let j = (i + 2) % 4;
                    lookup(ctx, te_r[j], &tb.te[j], idx)?
                }
            };
            acc = acc.zip(v, |a, b| a ^ (b & mask));
        }
        out[4 * c..4 * c + 4].copy_from_slice(&acc.v.to_be_bytes());
    }
    Ok(out)
}

fn encrypt_sbox(ctx: &mut Exec<'_, '_>, prefetch: bool, key: &[u8; 16], pt: &[u8; 16]) -> Result<[u8; 16], ExecError> {
    let sbox_r = ctx.region(SBOX_REGION)?;
    let (rk_r, rk) = load_round_keys(ctx, key)?;
    if prefetch {
        let line = ctx.layout().line_size;
        for off in (0..256).step_by(line) {
            ctx.load(sbox_r, off, 1, Taint::NONE)?;
        }
    }
    let mut s = [Tv::public(0u8); 16];
    let add_key = |ctx: &mut Exec<'_, '_>, s: &mut [Tv<u8>; 16], r: usize| -> Result<(), ExecError> {
        for c in 0..4 {
            let k = rk_word(ctx, rk_r, &rk, 4 * r + c)?;
            for i in 0..4 {
                s[4 * c + i] = s[4 * c + i].zip(byte_of(k, 24 - 8 * i as u32), |a, b| a ^ b);
            }
        }
        Ok(())
    };
    for i in 0..16 {
        s[i] = Tv::public(pt[i]);
    }
    add_key(ctx, &mut s, 0)?;
    for r in 1..=10 {
        for b in s.iter_mut() {
            let t = ctx.load(sbox_r, b.v as usize, 1, b.t)?;
            *b = Tv::new(SBOX[b.v as usize], t);
        }
        let old = s;
        for c in 0..4 {
            for i in 0..4 {
                s[4 * c + i] = old[4 * ((c + i) % 4) + i];
            }
        }
        if r != 10 {
            for c in 0..4 {
                let a: [Tv<u8>; 4] = s[4 * c..4 * c + 4].try_into().unwrap();
                let t = a.iter().fold(Taint::NONE, |acc, x| acc.union(x.t));
                let all = a[0].v ^ a[1].v ^ a[2].v ^ a[3].v;
                for i in 0..4 {
                    s[4 * c + i] = Tv::new(a[i].v ^ all ^ xtime(a[i].v ^ a[(i + 1) % 4].v), t);
                }
            }
        }
        add_key(ctx, &mut s, r)?;
        if r == 1 {
            ctx.marker(Marker::RoundEnd(1));
        }
    }
    Ok(s.map(|b| b.v))
}

pub(crate) fn execute(
    ctx: &mut Exec<'_, '_>,
    style: AesStyle,
    secret: &[u8],
    input: &[u8],
) -> Result<Vec<u8>, ExecError> {
    let (key, pt) = parse(secret, input)?;
    ctx.marker(Marker::StepBegin);
    let ct = match style {
        AesStyle::TtableDistinctLast => encrypt_ttable(ctx, true, &key, &pt)?,
        AesStyle::TtableReusedLast => encrypt_ttable(ctx, false, &key, &pt)?,
        AesStyle::SboxPlain => encrypt_sbox(ctx, false, &key, &pt)?,
        AesStyle::SboxPrefetch => encrypt_sbox(ctx, true, &key, &pt)?,
    };
    ctx.marker(Marker::StepEnd);
    Ok(ct.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fips197_vectors() {
        let ct = encrypt_block(&[0; 16], &[0; 16]);
        assert_eq!(hex::encode(ct), "66e94bd4ef8a2c3b884cfa59ca342b2e");
        let key: [u8; 16] = core::array::from_fn(|i| i as u8);
        let pt: [u8; 16] = core::array::from_fn(|i| (i as u8) * 0x11);
        assert_eq!(hex::encode(encrypt_block(&key, &pt)), "69c4e0d86a7b0430d8cdb78070b4c55a");
    }

    #[test]
    fn schedule_inverts() {
        let key: [u8; 16] = core::array::from_fn(|i| (i * 37 + 11) as u8);
        let rk = expand_key(&key);
        let mut last = [0u8; 16];
        for i in 0..4 {
            last[4 * i..4 * i + 4].copy_from_slice(&rk[40 + i].to_be_bytes());
        }
        assert_eq!(invert_key_schedule(&last), key);
    }
}
