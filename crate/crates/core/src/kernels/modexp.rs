//! Left-to-right modular exponentiation over big integers.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use num_traits::One;
use rand::RngCore;

use crate::exec::{Exec, ExecError, KernelSpec, Marker, RegionDecl, RegionId, SecretShape};
use crate::taint::{Taint, Tv};

use super::{bad_param, code_sites, read_bit, KernelVariant, ModexpStyle, TableLayout, KEY};

pub const R0: &str = "R0";
pub const R1: &str = "R1";
pub const FILLER: &str = "filler";
pub const WORK: &str = "work";
pub const TABLE: &str = "T";

pub const SQR: &str = "sqr_routine";
pub const MUL: &str = "mul_routine";
pub const BIT_BRANCH: &str = "bit_branch";
pub const LADDER_BRANCH: &str = "ladder_branch";
pub const WINDOW_BRANCH: &str = "window_branch";

fn table_entries(style: ModexpStyle) -> usize {
    match style {
        ModexpStyle::SlidingWindow { w } => 1 << (w.max(1) - 1),
        ModexpStyle::FixedWindow { w, .. } => 1 << w,
        _ => 0,
    }
}

pub(crate) fn spec(variant: &KernelVariant, style: ModexpStyle, line_size: usize) -> KernelSpec {
    let e = variant.operand_bits / 8;
    let mut regions = vec![RegionDecl::data(KEY, e)];
    let mut parameters = BTreeMap::new();
    parameters.insert("operand_bits".to_string(), variant.operand_bits as i64);
    let (labels, chunking): (&[&str], String) = match style {
        ModexpStyle::BitwiseSqmul => (&[SQR, BIT_BRANCH, MUL], "bitwise".into()),
        ModexpStyle::MontgomeryLadder => {
            let o = variant.offset(R0) % line_size;
            parameters.insert("r0_base_offset".into(), o as i64);
            let filler = if o == 0 { line_size } else { o };
            regions.push(RegionDecl::data(FILLER, filler));
            regions.push(RegionDecl::data(R0, e).following(FILLER));
            regions.push(RegionDecl::data(R1, e).following(R0));
            regions.push(RegionDecl::data(WORK, 8).following(R1));
            (&[LADDER_BRANCH, MUL, SQR], "bitwise".into())
        }
        ModexpStyle::SlidingWindow { w } => {
            parameters.insert("w".into(), w as i64);
            regions.push(RegionDecl::data(TABLE, table_entries(style).max(1) * e).at_offset(variant.offset(TABLE)));
            (&[SQR, WINDOW_BRANCH, MUL], format!("sliding_window({w})"))
        }
        ModexpStyle::FixedWindow { w, layout } => {
            parameters.insert("w".into(), w as i64);
            parameters.insert("scatter".into(), (layout == TableLayout::ScatterSubblock) as i64);
            parameters.insert("table_base_offset".into(), variant.offset(TABLE) as i64);
            regions.push(RegionDecl::data(TABLE, table_entries(style).max(1) * e).at_offset(variant.offset(TABLE)));
            (&[SQR, MUL], format!("fixed_window({w})"))
        }
    };
    let (code, sites) = code_sites(variant, labels, line_size);
    regions.push(code);
    KernelSpec {
        name: variant.name.clone(),
        regions,
        sites,
        parameters,
        secret_shape: SecretShape { bytes: e, chunking },
        secret_region: KEY.into(),
    }
}

/// Random base and an odd modulus with its top bit set, `base || modulus`.
pub(crate) fn sample_input(operand_bits: usize, rng: &mut dyn RngCore) -> Vec<u8> {
    let e = operand_bits / 8;
    let mut v = vec![0u8; 2 * e];
    rng.fill_bytes(&mut v);
    if e > 0 {
        v[e] |= 0x80;
        v[2 * e - 1] |= 1;
    }
    v
}

fn parse(style: ModexpStyle, input: &[u8], e: usize) -> Result<(BigUint, BigUint), ExecError> {
    if input.len() != 2 * e {
        return Err(ExecError::BadInput(format!("expected base || modulus of {} bytes, got {}", 2 * e, input.len())));
    }
    let m = BigUint::from_bytes_be(&input[e..]);
    if m <= BigUint::one() {
        return Err(ExecError::BadInput("modulus must exceed 1".into()));
    }
    if style == ModexpStyle::MontgomeryLadder && !m.bit(0) {
        return Err(ExecError::BadInput("Montgomery ladder needs an odd modulus".into()));
    }
    let b = BigUint::from_bytes_be(&input[..e]) % &m;
    Ok((b, m))
}

fn to_bytes(v: &BigUint, e: usize) -> Vec<u8> {
    let raw = v.to_bytes_be();
    let mut out = vec![0u8; e.saturating_sub(raw.len())];
    out.extend_from_slice(&raw);
    out
}

pub(crate) fn reference(style: ModexpStyle, secret: &[u8], input: &[u8]) -> Result<Vec<u8>, ExecError> {
    let e = secret.len();
    let (b, m) = parse(style, input, e)?;
    Ok(to_bytes(&b.modpow(&BigUint::from_bytes_be(secret), &m), e))
}

fn check_style(style: ModexpStyle, operand_bits: usize) -> Result<(), ExecError> {
    if operand_bits == 0 || !operand_bits.is_multiple_of(8) {
        return Err(bad_param(format!("operand width {operand_bits} is not a positive multiple of 8")));
    }
    match style {
        ModexpStyle::SlidingWindow { w } | ModexpStyle::FixedWindow { w, .. } if w == 0 || w > 8 => {
            Err(bad_param(format!("window width {w} outside 1..=8")))
        }
        _ => Ok(()),
    }
}

pub(crate) fn execute(
    variant: &KernelVariant,
    ctx: &mut Exec<'_, '_>,
    style: ModexpStyle,
    secret: &[u8],
    input: &[u8],
) -> Result<Vec<u8>, ExecError> {
    check_style(style, variant.operand_bits)?;
    let e = secret.len();
    let (b, m) = parse(style, input, e)?;
    let key = ctx.region(KEY)?;
    let bits = 8 * e;
    let r = match style {
        ModexpStyle::BitwiseSqmul => bitwise(ctx, key, secret, bits, &b, &m)?,
        ModexpStyle::MontgomeryLadder => ladder(ctx, key, secret, bits, &b, &m)?,
        ModexpStyle::SlidingWindow { w } => sliding(ctx, key, secret, bits, w, &b, &m)?,
        ModexpStyle::FixedWindow { w, layout } => fixed(ctx, key, secret, bits, w, layout, &b, &m)?,
    };
    Ok(to_bytes(&r, e))
}

fn bitwise(
    ctx: &mut Exec<'_, '_>,
    key: RegionId,
    secret: &[u8],
    bits: usize,
    b: &BigUint,
    m: &BigUint,
) -> Result<BigUint, ExecError> {
    let sqr = ctx.site(SQR)?;
    let branch = ctx.site(BIT_BRANCH)?;
    let mul = ctx.site(MUL)?;
    let mut r = BigUint::one() % m;
    for i in (0..bits).rev() {
        ctx.marker(Marker::StepBegin);
        let bit = read_bit(ctx, key, secret, i)?;
        ctx.fetch(sqr)?;
        r = &r * &r % m;
        ctx.branch(branch, bit.t, &[mul])?;
        if bit.v == 1 {
            ctx.fetch(mul)?;
            r = r * b % m;
        }
        ctx.marker(Marker::StepEnd);
    }
    Ok(r)
}

fn ladder(
    ctx: &mut Exec<'_, '_>,
    key: RegionId,
    secret: &[u8],
    bits: usize,
    b: &BigUint,
    m: &BigUint,
) -> Result<BigUint, ExecError> {
    let regs = [ctx.region(R0)?, ctx.region(R1)?];
    let filler = ctx.region(FILLER)?;
    let work = ctx.region(WORK)?;
    let branch = ctx.site(LADDER_BRANCH)?;
    let mul = ctx.site(MUL)?;
    let sqr = ctx.site(SQR)?;
    let e = bits / 8;
    let mut r0 = BigUint::one() % m;
    let mut r1 = b.clone();
    for i in (0..bits).rev() {
        ctx.marker(Marker::StepBegin);
        ctx.load(filler, 0, 1, Taint::NONE)?;
        let bit = read_bit(ctx, key, secret, i)?;
        ctx.branch(branch, bit.t, &[mul, sqr])?;
        ctx.fetch(mul)?;
        ctx.fetch(sqr)?;
        ctx.load(regs[bit.v as usize], 0, e, bit.t)?;
        ctx.load(work, 0, 8, Taint::NONE)?;
        if bit.v == 0 {
            r1 = &r0 * &r1 % m;
            r0 = &r0 * &r0 % m;
        } else {
            r0 = &r0 * &r1 % m;
            r1 = &r1 * &r1 % m;
        }
        ctx.marker(Marker::StepEnd);
    }
    Ok(r0)
}

#[allow(clippy::too_many_arguments)]
fn sliding(
    ctx: &mut Exec<'_, '_>,
    key: RegionId,
    secret: &[u8],
    bits: usize,
    w: usize,
    b: &BigUint,
    m: &BigUint,
) -> Result<BigUint, ExecError> {
    let table = ctx.region(TABLE)?;
    let sqr = ctx.site(SQR)?;
    let branch = ctx.site(WINDOW_BRANCH)?;
    let mul = ctx.site(MUL)?;
    let e = bits / 8;
    // Odd powers b, b^3, ..., b^(2^w - 1).
    let n = 1usize << (w - 1);
    let b2 = b * b % m;
    let mut powers = Vec::with_capacity(n);
    powers.push(b.clone());
    for j in 1..n {
        let next = &powers[j - 1] * &b2 % m;
        powers.push(next);
    }
    for j in 0..n {
        ctx.store(table, j * e, e, Taint::NONE, Taint::NONE)?;
    }

    let mut r = BigUint::one() % m;
    let mut i = bits as isize - 1;
    while i >= 0 {
        ctx.marker(Marker::StepBegin);
        let first = read_bit(ctx, key, secret, i as usize)?;
        let mut t = first.t;
        if first.v == 0 {
            ctx.fetch(sqr)?;
            r = &r * &r % m;
            let mut j = i - 1;
            while j >= 0 {
                let bit = read_bit(ctx, key, secret, j as usize)?;
                t = t.union(bit.t);
                if bit.v == 1 {
                    break;
                }
                ctx.fetch(sqr)?;
                r = &r * &r % m;
                j -= 1;
            }
            ctx.branch(branch, t, &[mul])?;
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
                ctx.fetch(sqr)?;
                r = &r * &r % m;
            }
            ctx.branch(branch, t, &[mul])?;
            let idx = (v - 1) / 2;
            ctx.load(table, idx * e, e, t)?;
            ctx.fetch(mul)?;
            r = r * &powers[idx] % m;
            i -= window.len() as isize;
        }
        ctx.marker(Marker::StepEnd);
    }
    Ok(r)
}

/// Byte ranges of table entry `v` under `layout`.
pub fn entry_ranges(layout: TableLayout, v: usize, n: usize, e: usize, line_size: usize) -> Vec<(usize, usize)> {
    match layout {
        TableLayout::Row => vec![(v * e, e)],
        TableLayout::ScatterSubblock => {
            let ps = line_size / n;
            (0..e / ps).map(|g| (g * line_size + v * ps, ps)).collect()
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn fixed(
    ctx: &mut Exec<'_, '_>,
    key: RegionId,
    secret: &[u8],
    bits: usize,
    w: usize,
    layout: TableLayout,
    b: &BigUint,
    m: &BigUint,
) -> Result<BigUint, ExecError> {
    let table = ctx.region(TABLE)?;
    let sqr = ctx.site(SQR)?;
    let mul = ctx.site(MUL)?;
    let e = bits / 8;
    let n = 1usize << w;
    let line_size = ctx.layout().line_size;
    if layout == TableLayout::ScatterSubblock && (!line_size.is_multiple_of(n) || !e.is_multiple_of(line_size / n)) {
        return Err(bad_param(format!("scatter layout needs {n} entries to divide the {line_size}-byte line")));
    }
    let mut powers = Vec::with_capacity(n);
    powers.push(BigUint::one() % m);
    for v in 1..n {
        let next = &powers[v - 1] * b % m;
        powers.push(next);
    }
    for v in 0..n {
        for (off, size) in entry_ranges(layout, v, n, e, line_size) {
            ctx.store(table, off, size, Taint::NONE, Taint::NONE)?;
        }
    }

    let mut r = BigUint::one() % m;
    let windows = bits.div_ceil(w);
    for c in (0..windows).rev() {
        ctx.marker(Marker::StepBegin);
        let lo = c * w;
        let cw = w.min(bits - lo);
        let mut v = 0usize;
        let mut t = Taint::NONE;
        for j in (lo..lo + cw).rev() {
            let bit = read_bit(ctx, key, secret, j)?;
            t = t.union(bit.t);
            v = (v << 1) | bit.v as usize;
        }
        for _ in 0..cw {
            ctx.fetch(sqr)?;
            r = &r * &r % m;
        }
        for (off, size) in entry_ranges(layout, v, n, e, line_size) {
            ctx.load(table, off, size, t)?;
        }
        ctx.fetch(mul)?;
        r = r * &powers[v] % m;
        ctx.marker(Marker::StepEnd);
    }
    Ok(r)
}
