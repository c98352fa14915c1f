//! Scalar multiplication on a short-Weierstrass toy curve.
//!
//! Curve: y^2 = x^3 + a x + b over the prime p = 2^64 - 189, with
//! a = p - 3 and b = 0x5ac635d8aa3a93e7. Generator G = (1, 0x88219830a0446cc2).
//! Points are affine; the point at infinity is encoded as 16 zero bytes.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use rand::RngCore;

use crate::exec::{Exec, ExecError, KernelSpec, Marker, RegionDecl, RegionId, SecretShape};
use crate::keysplit;
use crate::taint::{Taint, Tv};

use super::{bad_param, code_sites, read_bit, EccStyle, KernelVariant, LadderRegisters, KEY};

pub const P: u64 = 0xffff_ffff_ffff_ff43;
pub const A: u64 = P - 3;
pub const B: u64 = 0x5ac6_35d8_aa3a_93e7;
pub const G: Point = Some((1, 0x8821_9830_a044_6cc2));

pub const SCALAR_BYTES: usize = 8;
const BITS: usize = 64;
/// Stride of a stored point; one cache line at the default line size.
pub const ENTRY_BYTES: usize = 64;
const POINT_BYTES: usize = 16;

pub const R0: &str = "R0";
pub const R1: &str = "R1";
pub const TEMP: &str = "temp";
pub const TABLE: &str = "T";

pub const DBL: &str = "dbl_routine";
pub const ADD: &str = "add_routine";
pub const SIGN: &str = "sign_change";
pub const BIT_BRANCH: &str = "bit_branch";
pub const LADDER_BRANCH: &str = "ladder_branch";
pub const WINDOW_BRANCH: &str = "window_branch";
pub const DIGIT_BRANCH: &str = "digit_branch";
pub const SIGN_BRANCH: &str = "sign_branch";

/// `None` is the point at infinity.
pub type Point = Option<(u64, u64)>;

fn fadd(a: u64, b: u64) -> u64 {
    ((a as u128 + b as u128) % P as u128) as u64
}

fn fsub(a: u64, b: u64) -> u64 {
    ((a as u128 + P as u128 - b as u128) % P as u128) as u64
}

fn fmul(a: u64, b: u64) -> u64 {
    ((a as u128 * b as u128) % P as u128) as u64
}

fn fpow(mut a: u64, mut e: u64) -> u64 {
    let mut r = 1u64;
    while e > 0 {
        if e & 1 == 1 {
            r = fmul(r, a);
        }
        a = fmul(a, a);
        e >>= 1;
    }
    r
}

fn finv(a: u64) -> u64 {
    fpow(a, P - 2)
}

fn rhs(x: u64) -> u64 {
    fadd(fadd(fmul(fmul(x, x), x), fmul(A, x)), B)
}

pub fn on_curve(p: Point) -> bool {
    match p {
        None => true,
        Some((x, y)) => x < P && y < P && fmul(y, y) == rhs(x),
    }
}

pub fn neg(p: Point) -> Point {
    p.map(|(x, y)| (x, if y == 0 { 0 } else { P - y }))
}

pub fn double(p: Point) -> Point {
    let (x, y) = p?;
    if y == 0 {
        return None;
    }
    let l = fmul(fadd(fmul(3, fmul(x, x)), A), finv(fmul(2, y)));
    let x3 = fsub(fmul(l, l), fmul(2, x));
    Some((x3, fsub(fmul(l, fsub(x, x3)), y)))
}

pub fn add(p: Point, q: Point) -> Point {
    let (Some((x1, y1)), Some((x2, y2))) = (p, q) else {
        return p.or(q);
    };
    if x1 == x2 {
        return if fadd(y1, y2) == 0 { None } else { double(p) };
    }
    let l = fmul(fsub(y2, y1), finv(fsub(x2, x1)));
    let x3 = fsub(fsub(fmul(l, l), x1), x2);
    Some((x3, fsub(fmul(l, fsub(x1, x3)), y1)))
}

/// Plain right-to-left double-and-add.
pub fn mul_reference(mut k: u64, p: Point) -> Point {
    let mut acc = None;
    let mut base = p;
    while k > 0 {
        if k & 1 == 1 {
            acc = add(acc, base);
        }
        base = double(base);
        k >>= 1;
    }
    acc
}

pub fn encode(p: Point) -> Vec<u8> {
    let (x, y) = p.unwrap_or((0, 0));
    let mut v = x.to_be_bytes().to_vec();
    v.extend_from_slice(&y.to_be_bytes());
    v
}

pub fn decode(input: &[u8]) -> Result<Point, ExecError> {
    if input.len() != POINT_BYTES {
        return Err(ExecError::BadInput(format!("point must be {POINT_BYTES} bytes, got {}", input.len())));
    }
    let x = u64::from_be_bytes(input[..8].try_into().unwrap());
    let y = u64::from_be_bytes(input[8..].try_into().unwrap());
    let p = Some((x, y));
    if !on_curve(p) {
        return Err(ExecError::BadInput("point is not on the curve".into()));
    }
    Ok(p)
}

/// A uniformly placed affine point found by x-coordinate trials.
pub(crate) fn sample_input(rng: &mut dyn RngCore) -> Vec<u8> {
    loop {
        let x = rng.next_u64() % P;
        let r = rhs(x);
        let y = fpow(r, (P + 1) / 4);
        if fmul(y, y) == r {
            let y = if rng.next_u32() & 1 == 1 { fsub(0, y) } else { y };
            return encode(Some((x, y)));
        }
    }
}

fn scalar(secret: &[u8]) -> Result<u64, ExecError> {
    let b: [u8; SCALAR_BYTES] =
        secret.try_into().map_err(|_| ExecError::SecretLength { expected: SCALAR_BYTES, got: secret.len() })?;
    Ok(u64::from_be_bytes(b))
}

pub(crate) fn reference(secret: &[u8], input: &[u8]) -> Result<Vec<u8>, ExecError> {
    let k = scalar(secret)?;
    Ok(encode(mul_reference(k, decode(input)?)))
}

fn table_entries(style: EccStyle) -> usize {
    match style {
        EccStyle::SlidingWindow { w } => 1 << (w - 1),
        EccStyle::FixedWindow { w, .. } => 1 << w,
        EccStyle::Wnaf { w } => 1 << (w - 2),
        _ => 0,
    }
}

fn check_style(style: EccStyle) -> Result<(), ExecError> {
    match style {
        EccStyle::SlidingWindow { w } | EccStyle::FixedWindow { w, .. } if w == 0 || w > 8 => {
            Err(bad_param(format!("window width {w} outside 1..=8")))
        }
        EccStyle::Wnaf { w } if !(2..=8).contains(&w) => Err(bad_param(format!("wNAF width {w} outside 2..=8"))),
        _ => Ok(()),
    }
}

pub(crate) fn spec(variant: &KernelVariant, style: EccStyle, line_size: usize) -> KernelSpec {
    let mut regions = vec![RegionDecl::data(KEY, SCALAR_BYTES)];
    let mut parameters = BTreeMap::new();
    let (labels, chunking): (&[&str], String) = match style {
        EccStyle::DoubleAdd => (&[DBL, BIT_BRANCH, ADD], "bitwise".into()),
        EccStyle::MontgomeryLadder { registers } => {
            regions.push(RegionDecl::data(R0, ENTRY_BYTES).at_offset(variant.offset(R0)));
            regions.push(RegionDecl::data(R1, ENTRY_BYTES).at_offset(variant.offset(R1)));
            match registers {
                LadderRegisters::Direct => (&[LADDER_BRANCH, ADD, DBL], "bitwise".into()),
                LadderRegisters::TempConstantFlow => {
                    parameters.insert("temp_constant_flow".into(), 1);
                    regions.push(RegionDecl::data(TEMP, ENTRY_BYTES));
                    (&[ADD, DBL], "bitwise".into())
                }
            }
        }
        EccStyle::SlidingWindow { w } => {
            parameters.insert("w".into(), w as i64);
            (&[DBL, WINDOW_BRANCH, ADD], format!("sliding_window({w})"))
        }
        EccStyle::FixedWindow { w, uniform_scan } => {
            parameters.insert("w".into(), w as i64);
            parameters.insert("uniform_scan".into(), uniform_scan as i64);
            (&[DBL, ADD], format!("fixed_window({w})"))
        }
        EccStyle::Wnaf { w } => {
            parameters.insert("w".into(), w as i64);
            (&[DBL, DIGIT_BRANCH, ADD, SIGN_BRANCH, SIGN], format!("wnaf({w})"))
        }
    };
    let entries = match style {
        EccStyle::SlidingWindow { w } | EccStyle::FixedWindow { w, .. } if (1..=8).contains(&w) => table_entries(style),
        EccStyle::Wnaf { w } if (2..=8).contains(&w) => table_entries(style),
        EccStyle::SlidingWindow { .. } | EccStyle::FixedWindow { .. } | EccStyle::Wnaf { .. } => 1,
        _ => 0,
    };
    if entries > 0 {
        regions.push(RegionDecl::data(TABLE, entries * ENTRY_BYTES).at_offset(variant.offset(TABLE)));
    }
    let (code, sites) = code_sites(variant, labels, line_size);
    regions.push(code);
    KernelSpec {
        name: variant.name.clone(),
        regions,
        sites,
        parameters,
        secret_shape: SecretShape { bytes: SCALAR_BYTES, chunking },
        secret_region: KEY.into(),
    }
}

pub(crate) fn execute(
    variant: &KernelVariant,
    ctx: &mut Exec<'_, '_>,
    style: EccStyle,
    secret: &[u8],
    input: &[u8],
) -> Result<Vec<u8>, ExecError> {
    check_style(style)?;
    let k = scalar(secret)?;
    let p = decode(input)?;
    let key = ctx.region(KEY)?;
    let q = match style {
        EccStyle::DoubleAdd => double_add(ctx, key, secret, p)?,
        EccStyle::MontgomeryLadder { registers: LadderRegisters::Direct } => ladder_direct(ctx, key, secret, p)?,
        EccStyle::MontgomeryLadder { registers: LadderRegisters::TempConstantFlow } => {
            ladder_temp(ctx, key, secret, p)?
        }
        EccStyle::SlidingWindow { w } => sliding(ctx, key, secret, w, p)?,
        EccStyle::FixedWindow { w, uniform_scan } => fixed(ctx, key, secret, w, uniform_scan, p)?,
        EccStyle::Wnaf { w } => wnaf(variant, ctx, key, secret, k, w, p)?,
    };
    Ok(encode(q))
}

fn store_table(ctx: &mut Exec<'_, '_>, table: RegionId, n: usize) -> Result<(), ExecError> {
    for j in 0..n {
        ctx.store(table, j * ENTRY_BYTES, POINT_BYTES, Taint::NONE, Taint::NONE)?;
    }
    Ok(())
}

fn double_add(ctx: &mut Exec<'_, '_>, key: RegionId, secret: &[u8], p: Point) -> Result<Point, ExecError> {
    let dbl = ctx.site(DBL)?;
    let branch = ctx.site(BIT_BRANCH)?;
    let add_s = ctx.site(ADD)?;
    let mut q = None;
    for i in (0..BITS).rev() {
        ctx.marker(Marker::StepBegin);
        let bit = read_bit(ctx, key, secret, i)?;
        ctx.fetch(dbl)?;
        q = double(q);
        ctx.branch(branch, bit.t, &[add_s])?;
        if bit.v == 1 {
            ctx.fetch(add_s)?;
            q = add(q, p);
        }
        ctx.marker(Marker::StepEnd);
    }
    Ok(q)
}

fn ladder_direct(ctx: &mut Exec<'_, '_>, key: RegionId, secret: &[u8], p: Point) -> Result<Point, ExecError> {
    let regs = [ctx.region(R0)?, ctx.region(R1)?];
    let branch = ctx.site(LADDER_BRANCH)?;
    let add_s = ctx.site(ADD)?;
    let dbl = ctx.site(DBL)?;
    let mut r = [None, p];
    for i in (0..BITS).rev() {
        ctx.marker(Marker::StepBegin);
        let bit = read_bit(ctx, key, secret, i)?;
        ctx.branch(branch, bit.t, &[add_s, dbl])?;
        ctx.fetch(add_s)?;
        ctx.fetch(dbl)?;
        let b = bit.v as usize;
        ctx.load(regs[b], 0, POINT_BYTES, bit.t)?;
        r[1 - b] = add(r[0], r[1]);
        r[b] = double(r[b]);
        ctx.marker(Marker::StepEnd);
    }
    Ok(r[0])
}

fn cswap(bit: u8, a: Point, b: Point) -> (Point, Point) {
    if bit == 1 {
        (b, a)
    } else {
        (a, b)
    }
}

fn ladder_temp(ctx: &mut Exec<'_, '_>, key: RegionId, secret: &[u8], p: Point) -> Result<Point, ExecError> {
    let r0_r = ctx.region(R0)?;
    let r1_r = ctx.region(R1)?;
    let temp = ctx.region(TEMP)?;
    let add_s = ctx.site(ADD)?;
    let dbl = ctx.site(DBL)?;
    let (mut r0, mut r1) = (None, p);
    for i in (0..BITS).rev() {
        ctx.marker(Marker::StepBegin);
        let bit = read_bit(ctx, key, secret, i)?;
        let t0 = ctx.load(r0_r, 0, POINT_BYTES, Taint::NONE)?;
        let t1 = ctx.load(r1_r, 0, POINT_BYTES, Taint::NONE)?;
        let swapped = Tv::new(cswap(bit.v, r0, r1), bit.t.union(t0).union(t1));
        ctx.store(temp, 0, 2 * POINT_BYTES, swapped.t, Taint::NONE)?;
        ctx.fetch(add_s)?;
        ctx.fetch(dbl)?;
        let (a, b) = swapped.v;
        let (b, a) = (add(a, b), double(a));
        let back = cswap(bit.v, a, b);
        r0 = back.0;
        r1 = back.1;
        ctx.store(r0_r, 0, POINT_BYTES, swapped.t, Taint::NONE)?;
        ctx.store(r1_r, 0, POINT_BYTES, swapped.t, Taint::NONE)?;
        ctx.marker(Marker::StepEnd);
    }
    Ok(r0)
}

fn sliding(ctx: &mut Exec<'_, '_>, key: RegionId, secret: &[u8], w: usize, p: Point) -> Result<Point, ExecError> {
    let table = ctx.region(TABLE)?;
    let dbl = ctx.site(DBL)?;
    let branch = ctx.site(WINDOW_BRANCH)?;
    let add_s = ctx.site(ADD)?;
    let n = 1usize << (w - 1);
    let p2 = double(p);
    let mut odd = vec![p];
    for j in 1..n {
        odd.push(add(odd[j - 1], p2));
    }
    store_table(ctx, table, n)?;

    let mut q = None;
    let mut i = BITS as isize - 1;
    while i >= 0 {
        ctx.marker(Marker::StepBegin);
        let first = read_bit(ctx, key, secret, i as usize)?;
        let mut t = first.t;
        if first.v == 0 {
            ctx.fetch(dbl)?;
            q = double(q);
            let mut j = i - 1;
            while j >= 0 {
                let bit = read_bit(ctx, key, secret, j as usize)?;
                t = t.union(bit.t);
                if bit.v == 1 {
                    break;
                }
                ctx.fetch(dbl)?;
                q = double(q);
                j -= 1;
            }
            ctx.branch(branch, t, &[add_s])?;
            i = j;
        } else {
            let lo = (i - w as isize + 1).max(0);
            let mut window: Vec<Tv<u8>> = Vec::new();
            for j in (lo..=i).rev() {
                window.push(read_bit(ctx, key, secret, j as usize)?);
            }
            while window.last().is_some_and(|bit| bit.v == 0) {
                window.pop();
            }
            let mut v = 0usize;
            for bit in &window {
                t = t.union(bit.t);
                v = (v << 1) | bit.v as usize;
                ctx.fetch(dbl)?;
                q = double(q);
            }
            ctx.branch(branch, t, &[add_s])?;
            let idx = (v - 1) / 2;
            ctx.load(table, idx * ENTRY_BYTES, POINT_BYTES, t)?;
            ctx.fetch(add_s)?;
            q = add(q, odd[idx]);
            i -= window.len() as isize;
        }
        ctx.marker(Marker::StepEnd);
    }
    Ok(q)
}

fn fixed(
    ctx: &mut Exec<'_, '_>,
    key: RegionId,
    secret: &[u8],
    w: usize,
    uniform_scan: bool,
    p: Point,
) -> Result<Point, ExecError> {
    let table = ctx.region(TABLE)?;
    let dbl = ctx.site(DBL)?;
    let add_s = ctx.site(ADD)?;
    let n = 1usize << w;
    let mut multiples = vec![None];
    for v in 1..n {
        multiples.push(add(multiples[v - 1], p));
    }
    store_table(ctx, table, n)?;

    let mut q = None;
    for c in (0..BITS.div_ceil(w)).rev() {
        ctx.marker(Marker::StepBegin);
        let lo = c * w;
        let cw = w.min(BITS - lo);
        let mut v = 0usize;
        let mut t = Taint::NONE;
        for j in (lo..lo + cw).rev() {
            let bit = read_bit(ctx, key, secret, j)?;
            t = t.union(bit.t);
            v = (v << 1) | bit.v as usize;
        }
        for _ in 0..cw {
            ctx.fetch(dbl)?;
            q = double(q);
        }
        if uniform_scan {
            for j in 0..n {
                ctx.load(table, j * ENTRY_BYTES, POINT_BYTES, Taint::NONE)?;
            }
        }
        ctx.load(table, v * ENTRY_BYTES, POINT_BYTES, t)?;
        ctx.fetch(add_s)?;
        q = add(q, multiples[v]);
        ctx.marker(Marker::StepEnd);
    }
    Ok(q)
}

fn wnaf(
    variant: &KernelVariant,
    ctx: &mut Exec<'_, '_>,
    key: RegionId,
    secret: &[u8],
    k: u64,
    w: usize,
    p: Point,
) -> Result<Point, ExecError> {
    let table = ctx.region(TABLE)?;
    let dbl = ctx.site(DBL)?;
    let digit_branch = ctx.site(DIGIT_BRANCH)?;
    let add_s = ctx.site(ADD)?;
    let sign_branch = ctx.site(SIGN_BRANCH)?;
    let sign = ctx.site(SIGN)?;
    let n = 1usize << (w - 2);
    let p2 = double(p);
    let mut odd = vec![p];
    for j in 1..n {
        odd.push(add(odd[j - 1], p2));
    }
    store_table(ctx, table, n)?;

    // Recoding consumes the whole scalar.
    let mut t = Taint::NONE;
    for i in 0..SCALAR_BYTES {
        t = t.union(ctx.load(key, i, 1, Taint::NONE)?);
    }
    let digits = variant.chunks(secret).map_err(|e| bad_param(e.to_string()))?.values();
    debug_assert_eq!(keysplit::wnaf_recode(&BigUint::from(k), w).map(|s| s.reconstruct()).ok(), Some(k.into()));

    let mut q = None;
    for d in digits {
        ctx.marker(Marker::StepBegin);
        ctx.fetch(dbl)?;
        q = double(q);
        ctx.branch(digit_branch, t, &[add_s])?;
        if d != 0 {
            let idx = ((d.unsigned_abs() - 1) / 2) as usize;
            ctx.load(table, idx * ENTRY_BYTES, POINT_BYTES, t)?;
            let mut addend = odd[idx];
            ctx.branch(sign_branch, t, &[sign])?;
            if d < 0 {
                ctx.fetch(sign)?;
                addend = neg(addend);
            }
            ctx.fetch(add_s)?;
            q = add(q, addend);
        }
        ctx.marker(Marker::StepEnd);
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_on_curve_and_group_law() {
        assert!(on_curve(G));
        let g2 = double(G);
        assert!(on_curve(g2));
        assert_eq!(add(G, G), g2);
        assert_eq!(add(G, neg(G)), None);
        assert_eq!(add(add(G, g2), G), double(g2));
        assert_eq!(mul_reference(0, G), None);
        assert_eq!(mul_reference(1, G), G);
        assert_eq!(mul_reference(5, G), add(double(g2), G));
    }
}
