//! Implementation-style kernels written against the execution harness.
//!
//! A [`KernelVariant`] is plain data (family, style, parameters) and fully
//! determines the kernel's behavior, its declared regions and sites, and the
//! way the analyzer splits its secret.

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::detector::ProbeSchedule;
use crate::exec::{Exec, ExecError, KernelSpec, RegionDecl, RegionId, SiteDecl};
use crate::keysplit::{self, Chunk, KeyChunkStream, KeysplitError, Scheme};
use crate::taint::{Taint, Tv};

pub mod aes;
pub mod ecc;
pub mod hello;
pub mod modexp;
pub mod toy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Hello,
    Toy,
    Aes,
    Modexp,
    Ecc,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::Hello => "hello",
            Family::Toy => "toy",
            Family::Aes => "aes",
            Family::Modexp => "modexp",
            Family::Ecc => "ecc",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AesStyle {
    /// Four round tables plus a separate last-round table.
    TtableDistinctLast,
    /// Four round tables, last round masks bytes out of them.
    TtableReusedLast,
    SboxPlain,
    /// Touches every S-box line before each encryption.
    SboxPrefetch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableLayout {
    /// Each entry stored contiguously.
    Row,
    /// Each line holds `line_size / N` bytes of every entry.
    ScatterSubblock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModexpStyle {
    BitwiseSqmul,
    MontgomeryLadder,
    SlidingWindow { w: usize },
    FixedWindow { w: usize, layout: TableLayout },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LadderRegisters {
    /// Reads the register selected by the key bit.
    Direct,
    /// Conditionally swaps both registers through a temporary.
    TempConstantFlow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EccStyle {
    DoubleAdd,
    MontgomeryLadder { registers: LadderRegisters },
    SlidingWindow { w: usize },
    FixedWindow { w: usize, uniform_scan: bool },
    Wnaf { w: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Style {
    Hello {
        same_line: bool,
    },
    /// The small taint example: a key comparison picking between two tables.
    TaintToy,
    Aes {
        style: AesStyle,
    },
    Modexp {
        style: ModexpStyle,
    },
    Ecc {
        style: EccStyle,
    },
}

/// Whether the analyzer draws one secret per key or one per trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecretPolicy {
    PerKey,
    PerTrace,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelVariant {
    pub name: String,
    pub style: Style,
    /// Byte placement knobs keyed by region name.
    #[serde(default)]
    pub offsets: BTreeMap<String, usize>,
    /// Operand and exponent width for modexp.
    pub operand_bits: usize,
    /// Footprint of each code site; `None` means one full line.
    #[serde(default)]
    pub site_size: Option<usize>,
}

pub(crate) const CODE: &str = "code";
pub(crate) const KEY: &str = "key";

impl KernelVariant {
    pub fn new(name: &str, style: Style) -> Self {
        KernelVariant { name: name.into(), style, offsets: BTreeMap::new(), operand_bits: 512, site_size: None }
    }

    pub fn with_offset(mut self, region: &str, bytes: usize) -> Self {
        self.offsets.insert(region.into(), bytes);
        self
    }

    pub fn with_operand_bits(mut self, bits: usize) -> Self {
        self.operand_bits = bits;
        self
    }

    pub fn family(&self) -> Family {
        match self.style {
            Style::Hello { .. } => Family::Hello,
            Style::TaintToy => Family::Toy,
            Style::Aes { .. } => Family::Aes,
            Style::Modexp { .. } => Family::Modexp,
            Style::Ecc { .. } => Family::Ecc,
        }
    }

    pub fn schedule(&self) -> ProbeSchedule {
        match self.style {
            Style::Hello { .. } | Style::Aes { .. } => ProbeSchedule::WholeRun,
            Style::TaintToy => ProbeSchedule::PerIteration,
            Style::Modexp { style } => match style {
                ModexpStyle::BitwiseSqmul | ModexpStyle::MontgomeryLadder => ProbeSchedule::PerIteration,
                _ => ProbeSchedule::PerWindow,
            },
            Style::Ecc { style } => match style {
                EccStyle::DoubleAdd | EccStyle::MontgomeryLadder { .. } => ProbeSchedule::PerIteration,
                _ => ProbeSchedule::PerWindow,
            },
        }
    }

    pub fn secret_policy(&self) -> SecretPolicy {
        match self.style {
            Style::Hello { .. } | Style::Aes { .. } => SecretPolicy::PerTrace,
            _ => SecretPolicy::PerKey,
        }
    }

    pub fn secret_len(&self) -> usize {
        match self.style {
            Style::Hello { .. } => 1,
            Style::TaintToy => toy::KEY_BYTES,
            Style::Aes { .. } => 16,
            Style::Modexp { .. } => self.operand_bits / 8,
            Style::Ecc { .. } => ecc::SCALAR_BYTES,
        }
    }

    fn secret_bits(&self) -> usize {
        self.secret_len() * 8
    }

    /// Regions whose placement the analyzer may randomize per key, with the
    /// alignment of the values they hold.
    pub fn offset_knobs(&self) -> Vec<(String, usize)> {
        match self.style {
            Style::Modexp { style: ModexpStyle::MontgomeryLadder } => vec![(modexp::R0.to_string(), 8)],
            _ => Vec::new(),
        }
    }

    pub fn offset(&self, region: &str) -> usize {
        self.offsets.get(region).copied().unwrap_or(0)
    }

    pub fn spec(&self, line_size: usize) -> KernelSpec {
        match self.style {
            Style::Hello { same_line } => hello::spec(self, line_size, same_line),
            Style::TaintToy => toy::spec(self, line_size),
            Style::Aes { style } => aes::spec(self, style, line_size),
            Style::Modexp { style } => modexp::spec(self, style, line_size),
            Style::Ecc { style } => ecc::spec(self, style, line_size),
        }
    }

    /// Runs the kernel. Callers normally go through `run_kernel`, which
    /// checks the secret length first.
    pub fn execute(&self, ctx: &mut Exec<'_, '_>, secret: &[u8], input: &[u8]) -> Result<Vec<u8>, ExecError> {
        match self.style {
            Style::Hello { .. } => hello::execute(ctx, secret),
            Style::TaintToy => toy::execute(ctx, secret, input),
            Style::Aes { style } => aes::execute(ctx, style, secret, input),
            Style::Modexp { style } => modexp::execute(self, ctx, style, secret, input),
            Style::Ecc { style } => ecc::execute(self, ctx, style, secret, input),
        }
    }

    /// Direct computation without the harness.
    pub fn reference(&self, secret: &[u8], input: &[u8]) -> Result<Vec<u8>, ExecError> {
        match self.style {
            Style::Hello { .. } => hello::reference(secret),
            Style::TaintToy => toy::reference(secret, input),
            Style::Aes { .. } => aes::reference(secret, input),
            Style::Modexp { style } => modexp::reference(style, secret, input),
            Style::Ecc { .. } => ecc::reference(secret, input),
        }
    }

    pub fn random_secret(&self, rng: &mut dyn RngCore) -> Vec<u8> {
        match self.style {
            Style::Hello { .. } => vec![(rng.next_u32() & 1) as u8],
            _ => {
                let mut s = vec![0u8; self.secret_len()];
                rng.fill_bytes(&mut s);
                s
            }
        }
    }

    /// `n` per-trace secrets. Binary secrets are balanced exactly.
    pub fn secret_batch(&self, n: usize, rng: &mut dyn RngCore) -> Vec<Vec<u8>> {
        match self.style {
            Style::Hello { .. } => {
                let mut v: Vec<Vec<u8>> = (0..n).map(|i| vec![(i % 2) as u8]).collect();
                v.shuffle(rng);
                v
            }
            _ => (0..n).map(|_| self.random_secret(rng)).collect(),
        }
    }

    /// Secrets that exercise arms random keys may miss.
    pub fn degenerate_secrets(&self) -> Vec<Vec<u8>> {
        match self.style {
            Style::Hello { .. } => vec![vec![hello::MALE], vec![hello::FEMALE]],
            _ => vec![vec![0u8; self.secret_len()], vec![0xffu8; self.secret_len()]],
        }
    }

    pub fn sample_input(&self, rng: &mut dyn RngCore) -> Vec<u8> {
        match self.style {
            Style::Hello { .. } => Vec::new(),
            Style::TaintToy => {
                let mut v = vec![0u8; 4];
                rng.fill_bytes(&mut v);
                v
            }
            Style::Aes { .. } => {
                let mut v = vec![0u8; 16];
                rng.fill_bytes(&mut v);
                v
            }
            Style::Modexp { .. } => modexp::sample_input(self.operand_bits, rng),
            Style::Ecc { .. } => ecc::sample_input(rng),
        }
    }

    /// Chunks aligned one-to-one with the kernel's probe steps.
    pub fn chunks(&self, secret: &[u8]) -> Result<KeyChunkStream, KeysplitError> {
        let key = BigUint::from_bytes_be(secret);
        let bits = self.secret_bits();
        match self.style {
            Style::Hello { .. } => Ok(KeyChunkStream {
                scheme: Scheme::Bitwise,
                chunks: vec![Chunk { position: 0, value: secret.first().copied().unwrap_or(0) as i64, width: 1 }],
            }),
            Style::TaintToy => keysplit::split_fixed_window(&key, bits, 8),
            Style::Aes { .. } => {
                let k: [u8; 16] = secret
                    .try_into()
                    .map_err(|_| KeysplitError::KeyTooWide { bits: secret.len() as u64 * 8, width: 128 })?;
                Ok(keysplit::aes_round_bytes(&k, &[[0u8; 16]], keysplit::AesRound::First).remove(0))
            }
            Style::Modexp { style } => match style {
                ModexpStyle::BitwiseSqmul | ModexpStyle::MontgomeryLadder => keysplit::split_bits(&key, bits),
                ModexpStyle::SlidingWindow { w } => keysplit::split_sliding_window(&key, bits, w),
                ModexpStyle::FixedWindow { w, .. } => keysplit::split_fixed_window(&key, bits, w),
            },
            Style::Ecc { style } => match style {
                EccStyle::DoubleAdd | EccStyle::MontgomeryLadder { .. } => keysplit::split_bits(&key, bits),
                EccStyle::SlidingWindow { w } => keysplit::split_sliding_window(&key, bits, w),
                EccStyle::FixedWindow { w, .. } => keysplit::split_fixed_window(&key, bits, w),
                EccStyle::Wnaf { w } => Ok(keysplit::pad_wnaf(keysplit::wnaf_recode(&key, w)?, bits + 1)),
            },
        }
    }

    /// Human-readable parameter summary for listings.
    pub fn params(&self) -> BTreeMap<String, i64> {
        self.spec(64).parameters
    }
}

/// Lays out one line-strided site per label in a single code region.
pub(crate) fn code_sites(variant: &KernelVariant, labels: &[&str], line_size: usize) -> (RegionDecl, Vec<SiteDecl>) {
    let size = variant.site_size.unwrap_or(line_size).clamp(1, line_size);
    let sites = labels
        .iter()
        .enumerate()
        .map(|(i, l)| SiteDecl { label: l.to_string(), region: CODE.into(), offset: i * line_size, size })
        .collect();
    (RegionDecl::code(CODE, labels.len().max(1) * line_size), sites)
}

/// Reads bit `i` (LSB index) of a big-endian secret held in `key`.
pub(crate) fn read_bit(ctx: &mut Exec<'_, '_>, key: RegionId, secret: &[u8], i: usize) -> Result<Tv<u8>, ExecError> {
    let byte = secret.len() - 1 - i / 8;
    let t = ctx.load(key, byte, 1, Taint::NONE)?;
    Ok(Tv::new((secret[byte] >> (i % 8)) & 1, t))
}

pub(crate) fn bad_param(msg: impl Into<String>) -> ExecError {
    ExecError::BadParameter(msg.into())
}
