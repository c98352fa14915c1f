//! Named kernel variants and the library-analog verdict table.

use serde::{Deserialize, Serialize};

use crate::detector::Verdict;
use crate::kernels::{AesStyle, EccStyle, KernelVariant, LadderRegisters, ModexpStyle, Style, TableLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub variant: KernelVariant,
    /// Part of the default `suite` run.
    pub in_suite: bool,
    /// Verdict the style is expected to receive at default settings.
    pub expected: Verdict,
    pub description: String,
}

fn entry(variant: KernelVariant, in_suite: bool, expected: Verdict, description: &str) -> Entry {
    Entry { variant, in_suite, expected, description: description.into() }
}

fn aes(name: &str, style: AesStyle) -> KernelVariant {
    KernelVariant::new(name, Style::Aes { style })
}

fn modexp(name: &str, style: ModexpStyle) -> KernelVariant {
    KernelVariant::new(name, Style::Modexp { style })
}

fn ecc(name: &str, style: EccStyle) -> KernelVariant {
    KernelVariant::new(name, Style::Ecc { style })
}

pub fn entries() -> Vec<Entry> {
    use Verdict::{Leaks, NoLeak};
    let scatter = |w| ModexpStyle::FixedWindow { w, layout: TableLayout::ScatterSubblock };
    vec![
        entry(
            KernelVariant::new("hello", Style::Hello { same_line: false }),
            false,
            Leaks,
            "greeting, branch arms on separate lines",
        ),
        entry(
            KernelVariant::new("hello-same-line", Style::Hello { same_line: true }),
            false,
            NoLeak,
            "greeting, both arms in one line",
        ),
        entry(
            KernelVariant::new("taint-toy", Style::TaintToy),
            false,
            Leaks,
            "key byte compared, small bytes index a table",
        ),
        entry(
            aes("aes-ttable", AesStyle::TtableDistinctLast),
            true,
            Leaks,
            "T-tables with a separate last-round table",
        ),
        entry(
            aes("aes-ttable-reused", AesStyle::TtableReusedLast),
            true,
            Leaks,
            "T-tables, last round masks the round tables",
        ),
        entry(aes("aes-sbox", AesStyle::SboxPlain), true, Leaks, "byte S-box"),
        entry(aes("aes-sbox-prefetch", AesStyle::SboxPrefetch), true, NoLeak, "byte S-box, every line touched first"),
        entry(modexp("modexp-bitwise", ModexpStyle::BitwiseSqmul), true, Leaks, "square and multiply"),
        entry(
            modexp("modexp-ladder", ModexpStyle::MontgomeryLadder),
            true,
            Leaks,
            "Montgomery ladder, R0 placement varies",
        ),
        entry(modexp("modexp-sliding", ModexpStyle::SlidingWindow { w: 4 }), true, Leaks, "sliding window, w = 4"),
        entry(
            modexp("modexp-fixed-row", ModexpStyle::FixedWindow { w: 4, layout: TableLayout::Row }),
            true,
            Leaks,
            "fixed window, entries stored row by row",
        ),
        entry(modexp("modexp-fixed-scatter", scatter(4)), true, NoLeak, "fixed window, scatter-gather table"),
        entry(
            modexp("modexp-fixed-scatter-misaligned", scatter(2)).with_offset("T", 16),
            true,
            Leaks,
            "fixed window w = 2, scatter-gather table starting 16 bytes into a line",
        ),
        entry(ecc("ecc-double-add", EccStyle::DoubleAdd), true, Leaks, "double and add"),
        entry(
            ecc("ecc-ladder", EccStyle::MontgomeryLadder { registers: LadderRegisters::Direct }),
            true,
            Leaks,
            "Montgomery ladder reading the bit-selected register",
        ),
        entry(
            ecc("ecc-ladder-ct", EccStyle::MontgomeryLadder { registers: LadderRegisters::TempConstantFlow }),
            true,
            NoLeak,
            "Montgomery ladder with a conditional swap through a temporary",
        ),
        entry(ecc("ecc-sliding", EccStyle::SlidingWindow { w: 4 }), true, Leaks, "sliding window, w = 4"),
        entry(
            ecc("ecc-fixed-uniform", EccStyle::FixedWindow { w: 4, uniform_scan: true }),
            true,
            NoLeak,
            "fixed window reading every entry before the selected one",
        ),
        entry(
            ecc("ecc-fixed", EccStyle::FixedWindow { w: 4, uniform_scan: false }),
            true,
            Leaks,
            "fixed window, direct table read",
        ),
        entry(ecc("ecc-wnaf", EccStyle::Wnaf { w: 4 }), true, Leaks, "width-4 NAF"),
    ]
}

pub fn lookup(name: &str) -> Option<Entry> {
    entries().into_iter().find(|e| e.variant.name == name)
}

pub fn names() -> Vec<String> {
    entries().into_iter().map(|e| e.variant.name).collect()
}

pub fn suite() -> Vec<Entry> {
    entries().into_iter().filter(|e| e.in_suite).collect()
}

/// Default implementation of a primitive in a library, mapped to the kernel
/// style that reproduces its access pattern.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryRow {
    pub primitive: String,
    pub library: String,
    pub kernel: String,
}

const LIBRARY_TABLE: [(&str, &str, &str); 24] = [
    ("AES", "OpenSSL", "aes-sbox-prefetch"),
    ("AES", "WolfSSL", "aes-ttable"),
    ("AES", "IPP", "aes-sbox-prefetch"),
    ("AES", "LibreSSL", "aes-sbox-prefetch"),
    ("AES", "NSS", "aes-ttable-reused"),
    ("AES", "Libgcrypt", "aes-sbox-prefetch"),
    ("AES", "BouncyCastle", "aes-ttable"),
    ("AES", "MbedTLS", "aes-ttable"),
    ("RSA", "OpenSSL", "modexp-fixed-scatter"),
    ("RSA", "WolfSSL", "modexp-sliding"),
    ("RSA", "IPP", "modexp-fixed-scatter-misaligned"),
    ("RSA", "LibreSSL", "modexp-fixed-scatter"),
    ("RSA", "NSS", "modexp-fixed-scatter"),
    ("RSA", "Libgcrypt", "modexp-fixed-scatter"),
    ("RSA", "BouncyCastle", "modexp-sliding"),
    ("RSA", "MbedTLS", "modexp-sliding"),
    ("ECC", "OpenSSL", "ecc-wnaf"),
    ("ECC", "WolfSSL", "ecc-sliding"),
    ("ECC", "IPP", "ecc-ladder-ct"),
    ("ECC", "LibreSSL", "ecc-wnaf"),
    ("ECC", "NSS", "ecc-fixed-uniform"),
    ("ECC", "Libgcrypt", "ecc-ladder-ct"),
    ("ECC", "BouncyCastle", "ecc-fixed"),
    ("ECC", "MbedTLS", "ecc-fixed-uniform"),
];

pub fn library_table() -> Vec<LibraryRow> {
    LIBRARY_TABLE
        .iter()
        .map(|(p, l, k)| LibraryRow { primitive: p.to_string(), library: l.to_string(), kernel: k.to_string() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique_and_table_resolves() {
        let mut n = names();
        let len = n.len();
        n.sort();
        n.dedup();
        assert_eq!(n.len(), len);
        for row in library_table() {
            assert!(lookup(&row.kernel).is_some_and(|e| e.in_suite), "{}", row.kernel);
        }
    }

    #[test]
    fn library_table_expectation_is_half() {
        let leaks = library_table().iter().filter(|r| lookup(&r.kernel).unwrap().expected == Verdict::Leaks).count();
        assert_eq!(leaks, 12);
    }
}
