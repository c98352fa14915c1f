//! The two-branch greeting example.

use std::collections::BTreeMap;

use crate::exec::{Exec, ExecError, KernelSpec, Marker, RegionDecl, SecretShape, SiteDecl};

use super::{KernelVariant, CODE, KEY};

pub const MALE: u8 = 0;
pub const FEMALE: u8 = 1;

pub const GENDER_BRANCH: &str = "gender_branch";
pub const B1: &str = "B1";
pub const B2: &str = "B2";

pub(crate) fn spec(variant: &KernelVariant, line_size: usize, same_line: bool) -> KernelSpec {
    let site = |label: &str, offset, size| SiteDecl { label: label.into(), region: CODE.into(), offset, size };
    let full = variant.site_size.unwrap_or(line_size).clamp(1, line_size);
    let sites = if same_line {
        let half = (line_size / 2).max(1);
        vec![site(GENDER_BRANCH, 0, full), site(B1, line_size, half), site(B2, line_size + half, half)]
    } else {
        vec![site(GENDER_BRANCH, 0, full), site(B1, line_size, full), site(B2, 2 * line_size, full)]
    };
    let code_size = if same_line { 2 * line_size } else { 3 * line_size };
    let mut parameters = BTreeMap::new();
    parameters.insert("same_line".into(), same_line as i64);
    KernelSpec {
        name: variant.name.clone(),
        regions: vec![RegionDecl::data(KEY, 1), RegionDecl::code(CODE, code_size)],
        sites,
        parameters,
        secret_shape: SecretShape { bytes: 1, chunking: "gender".into() },
        secret_region: KEY.into(),
    }
}

fn greeting(gender: u8) -> Result<&'static str, ExecError> {
    match gender {
        MALE => Ok("Hello Mr."),
        FEMALE => Ok("Hello Ms."),
        g => Err(ExecError::BadSecret(format!("gender byte {g} is neither male (0) nor female (1)"))),
    }
}

pub(crate) fn execute(ctx: &mut Exec<'_, '_>, secret: &[u8]) -> Result<Vec<u8>, ExecError> {
    let msg = greeting(secret[0])?;
    let key = ctx.region(KEY)?;
    let branch = ctx.site(GENDER_BRANCH)?;
    let b1 = ctx.site(B1)?;
    let b2 = ctx.site(B2)?;
    ctx.marker(Marker::StepBegin);
    let t = ctx.load(key, 0, 1, crate::taint::Taint::NONE)?;
    ctx.branch(branch, t, &[b1, b2])?;
    ctx.fetch(if secret[0] == MALE { b1 } else { b2 })?;
    ctx.marker(Marker::StepEnd);
    Ok(msg.as_bytes().to_vec())
}

pub(crate) fn reference(secret: &[u8]) -> Result<Vec<u8>, ExecError> {
    let g = *secret.first().ok_or(ExecError::SecretLength { expected: 1, got: 0 })?;
    Ok(greeting(g)?.as_bytes().to_vec())
}
