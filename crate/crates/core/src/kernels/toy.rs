//! Taint example: a per-byte key comparison decides between a scalar `B`
//! and a table `A` indexed by the key byte.

use std::collections::BTreeMap;

use crate::exec::{Exec, ExecError, KernelSpec, Marker, RegionDecl, SecretShape, SiteDecl};
use crate::taint::Taint;

use super::{KernelVariant, CODE, KEY};

pub const KEY_BYTES: usize = 64;
/// Key bytes below this index `A`; the rest take the `B` path.
pub const LIMIT: u8 = 32;
pub const KEY_BRANCH: &str = "key_branch";
pub const TABLE_A: &str = "A";
pub const SCALAR_B: &str = "B";
pub const INDEX: &str = "index";

fn table_a(i: usize) -> u32 {
    i as u32 + 1
}

const B_VALUE: u32 = 5;

pub(crate) fn spec(variant: &KernelVariant, line_size: usize) -> KernelSpec {
    let size = variant.site_size.unwrap_or(line_size).clamp(1, line_size);
    KernelSpec {
        name: variant.name.clone(),
        regions: vec![
            RegionDecl::data(KEY, KEY_BYTES),
            RegionDecl::data(TABLE_A, 4 * LIMIT as usize),
            RegionDecl::data(SCALAR_B, 4),
            RegionDecl::data(INDEX, 4),
            RegionDecl::code(CODE, line_size),
        ],
        sites: vec![SiteDecl { label: KEY_BRANCH.into(), region: CODE.into(), offset: 0, size }],
        parameters: BTreeMap::from([("limit".to_string(), LIMIT as i64)]),
        secret_shape: SecretShape { bytes: KEY_BYTES, chunking: "fixed_window(8)".into() },
        secret_region: KEY.into(),
    }
}

fn compute(acc: u32, input: u32, v: u32) -> u32 {
    acc.rotate_left(5) ^ input.wrapping_add(v)
}

fn parse_input(input: &[u8]) -> Result<u32, ExecError> {
    let b: [u8; 4] = input.try_into().map_err(|_| ExecError::BadInput("expected 4 input bytes".into()))?;
    Ok(u32::from_be_bytes(b))
}

pub(crate) fn execute(ctx: &mut Exec<'_, '_>, secret: &[u8], input: &[u8]) -> Result<Vec<u8>, ExecError> {
    let input = parse_input(input)?;
    let key = ctx.region(KEY)?;
    let a = ctx.region(TABLE_A)?;
    let b = ctx.region(SCALAR_B)?;
    let index = ctx.region(INDEX)?;
    let branch = ctx.site(KEY_BRANCH)?;
    let mut acc = 0u32;
    for (i, &k) in secret.iter().enumerate() {
        ctx.marker(Marker::StepBegin);
        let t = ctx.load(key, i, 1, Taint::NONE)?;
        ctx.branch(branch, t, &[])?;
        let v = if k >= LIMIT {
            ctx.store(index, 0, 4, Taint::NONE, Taint::NONE)?;
            ctx.load(b, 0, 4, Taint::NONE)?;
            B_VALUE
        } else {
            ctx.store(index, 0, 4, t, Taint::NONE)?;
            let it = ctx.load(index, 0, 4, Taint::NONE)?;
            ctx.load(a, 4 * k as usize, 4, it)?;
            table_a(k as usize)
        };
        acc = compute(acc, input, v);
        ctx.marker(Marker::StepEnd);
    }
    Ok(acc.to_be_bytes().to_vec())
}

pub(crate) fn reference(secret: &[u8], input: &[u8]) -> Result<Vec<u8>, ExecError> {
    let input = parse_input(input)?;
    let acc =
        secret.iter().fold(0u32, |acc, &k| compute(acc, input, if k >= LIMIT { B_VALUE } else { table_a(k as usize) }));
    Ok(acc.to_be_bytes().to_vec())
}
