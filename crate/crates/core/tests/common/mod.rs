//! Generators and independent reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::HashSet;

use num_bigint::BigUint;
use num_traits::One;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rowcast_core::numeric::format_scientific;
use rowcast_core::table::{
    canonicalize_table, infer_schema, CanonicalCell, CanonicalTable, Column, ColumnKind, InferenceConfig, RawTable,
    Schema, Separators, Table,
};

/// Five-significant-digit scientific notation computed on the exact binary
/// value with big integers, rounding half to even.
pub fn oracle_format(x: f64) -> String {
    assert!(x.is_finite());
    if x == 0.0 {
        return "+0.0000e+00".to_string();
    }
    let sign = if x < 0.0 { '-' } else { '+' };
    let bits = x.abs().to_bits();
    let biased = (bits >> 52) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (mant, e2) = if biased == 0 { (frac, -1074) } else { (frac | (1u64 << 52), biased - 1075) };
    // |x| = num / den exactly
    let (num, den) = if e2 >= 0 {
        (BigUint::from(mant) << (e2 as usize), BigUint::one())
    } else {
        (BigUint::from(mant), BigUint::one() << ((-e2) as usize))
    };
    let ten = BigUint::from(10u32);
    let pow10 = |e: i64| ten.pow(e.unsigned_abs() as u32);
    // compare num/den with 10^e
    let cmp_pow = |e: i64| -> Ordering {
        if e >= 0 {
            num.cmp(&(&den * pow10(e)))
        } else {
            (&num * pow10(e)).cmp(&den)
        }
    };
    let mut e10 = x.abs().log10().floor() as i64;
    loop {
        if cmp_pow(e10) == Ordering::Less {
            e10 -= 1;
        } else if cmp_pow(e10 + 1) != Ordering::Less {
            e10 += 1;
        } else {
            break;
        }
    }
    // scaled = |x| / 10^(e10 - 4), in [10000, 100000)
    let shift = 4 - e10;
    let (n, d) = if shift >= 0 { (&num * pow10(shift), den.clone()) } else { (num.clone(), &den * pow10(shift)) };
    let mut q = &n / &d;
    let r = &n % &d;
    let twice = &r << 1usize;
    let round_up = match twice.cmp(&d) {
        Ordering::Greater => true,
        Ordering::Equal => (&q % 2u32) == BigUint::one(),
        Ordering::Less => false,
    };
    if round_up {
        q += 1u32;
    }
    if q == BigUint::from(100_000u32) {
        q = BigUint::from(10_000u32);
        e10 += 1;
    }
    let q: u64 = q.try_into().expect("five digits");
    let esign = if e10 < 0 { '-' } else { '+' };
    format!("{sign}{}.{:04}e{esign}{:02}", q / 10_000, q % 10_000, e10.abs())
}

/// Dot product of every stored row against `q` (f64 accumulation over all
/// coordinates), sorted by descending score then ascending id.
pub fn brute_force_knn(rows: &[(u64, Vec<f32>)], q: &[f32], k: usize, exclude: &HashSet<u64>) -> Vec<(u64, f64)> {
    let mut scored: Vec<(u64, f64)> = rows
        .iter()
        .filter(|(id, _)| !exclude.contains(id))
        .map(|(id, v)| {
            let mut s = 0.0f64;
            for i in 0..q.len() {
                s += v[i] as f64 * q[i] as f64;
            }
            (*id, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

const WORDS: &[&str] = &[
    "red", "green", "blue", "alpha", "beta", "gamma", "Zürich", "naïve", "東京", "x", "yes", "no", "pending", "n/a",
    "  padded  ", "multi word value", "O'Brien", "a,b", "\"quoted\"",
];

const NASTY: &[&str] = &[" | ", "|", "\n", "\r\n", " |", "| ", "a | b", "x |", "|| |", "\t|\t", "line\nbreak", "e\u{301}"];

/// A raw cell: numbers, dates, words, missing markers and, with
/// `adversarial`, separator and line-break fragments.
pub fn random_cell(rng: &mut ChaCha8Rng, adversarial: bool) -> Option<String> {
    match rng.gen_range(0..10) {
        0 => None,
        1 => Some(["", "NA", "null", "NaN", "N/A"][rng.gen_range(0..5)].to_string()),
        2 | 3 => {
            let x: f64 = rng.gen_range(-1e6..1e6) * 10f64.powi(rng.gen_range(-8..8));
            Some(format!("{x}"))
        }
        4 => Some(format!("20{:02}-{:02}-{:02}", rng.gen_range(0..30), rng.gen_range(1..13), rng.gen_range(1..29))),
        5 if adversarial => {
            let mut s = String::new();
            for _ in 0..rng.gen_range(1..4) {
                s.push_str(NASTY.choose(rng).unwrap());
                s.push_str(WORDS.choose(rng).unwrap());
            }
            Some(s)
        }
        _ => Some(WORDS.choose(rng).unwrap().to_string()),
    }
}

/// A raw table whose columns lean numeric, date or text so inference sees
/// every type.
pub fn random_raw_table(rng: &mut ChaCha8Rng, max_rows: usize, max_cols: usize, adversarial: bool) -> RawTable {
    let n_cols = rng.gen_range(2..=max_cols);
    let n_rows = rng.gen_range(1..=max_rows);
    let headers: Vec<String> = (0..n_cols).map(|j| format!("col {j}")).collect();
    let styles: Vec<u8> = (0..n_cols).map(|_| rng.gen_range(0..3)).collect();
    let rows = (0..n_rows)
        .map(|_| {
            styles
                .iter()
                .map(|&style| {
                    let cell = random_cell(rng, adversarial);
                    match (style, rng.gen_bool(0.9)) {
                        (0, true) => Some(format!("{}", rng.gen_range(-1000.0..1000.0f64))),
                        (1, true) => Some(format!("2021-0{}-1{}", rng.gen_range(1..10), rng.gen_range(0..10))),
                        _ => cell,
                    }
                })
                .collect()
        })
        .collect();
    RawTable::new(headers, rows).unwrap()
}

/// Missing markers become `None` as they would when read from CSV.
pub fn canonical(raw: &RawTable, target: Option<usize>) -> CanonicalTable {
    let cfg = InferenceConfig::default();
    let rows = raw
        .rows
        .iter()
        .map(|r| r.iter().map(|c| c.clone().filter(|s| !cfg.is_missing(s))).collect())
        .collect();
    let raw = RawTable::new(raw.headers.clone(), rows).unwrap();
    let schema = infer_schema(&raw, &cfg).unwrap().with_target_index(target).unwrap();
    canonicalize_table(&Table::new(schema, raw.rows).unwrap(), &Separators::default())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const WARM: [&str; 5] = ["crimson", "scarlet", "amber", "ruby", "coral"];
const COOL: [&str; 5] = ["navy", "teal", "azure", "cobalt", "indigo"];

fn cluster_row(rng: &mut ChaCha8Rng, cluster: usize) -> Vec<CanonicalCell> {
    let (group, shades, label) = if cluster == 0 { ("alpha", &WARM, "A") } else { ("omega", &COOL, "B") };
    vec![
        CanonicalCell::present(group),
        CanonicalCell::present(*shades.choose(rng).unwrap()),
        CanonicalCell::present(label),
    ]
}

fn cluster_schema() -> Schema {
    Schema {
        columns: ["group", "shade", "label"]
            .iter()
            .map(|n| Column { name: n.to_string(), kind: ColumnKind::Text, nullable: false })
            .collect(),
        target_index: Some(2),
    }
}

/// Two clusters whose feature words never overlap, labelled A and B. A
/// `noise` fraction of training labels is flipped.
pub fn cluster_dataset(n_train: usize, n_test: usize, noise: f64, seed: u64) -> (CanonicalTable, CanonicalTable) {
    let mut r = rng(seed);
    let make = |n: usize, r: &mut ChaCha8Rng| -> Vec<Vec<CanonicalCell>> {
        (0..n)
            .map(|_| {
                let c = r.gen_range(0..2);
                cluster_row(r, c)
            })
            .collect()
    };
    let mut train = make(n_train, &mut r);
    let test = make(n_test, &mut r);
    let flips = (n_train as f64 * noise).round() as usize;
    for i in rand::seq::index::sample(&mut r, n_train, flips) {
        let label = &mut train[i][2];
        *label = CanonicalCell::present(if label.text == "A" { "B" } else { "A" });
    }
    let table = |rows| CanonicalTable { schema: cluster_schema(), rows, report: Default::default() };
    (table(train), table(test))
}

/// Peak resident set size of this process, from /proc.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// A finite double drawn uniformly over decimal exponents `lo..=hi`.
pub fn random_real(rng: &mut ChaCha8Rng, lo: i32, hi: i32) -> f64 {
    let mant: f64 = rng.gen_range(1.0..10.0);
    let sign = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
    // powi loses precision for big exponents; parse keeps the value exact
    format!("{}e{}", sign * mant, rng.gen_range(lo..=hi)).parse().unwrap()
}

/// Values whose exact binary expansion sits on a five-digit rounding tie.
pub fn half_even_ties() -> Vec<f64> {
    let mut v = vec![12345.5, 12346.5, 10000.5, 99999.5, 123465.0, 123455.0, 2.5, 0.5, 1.5];
    v.extend((0..64).map(|i| (10_000 + 2 * i) as f64 + 0.5));
    v.extend((0..32).map(|i| ((10_000 + i) * 10 + 5) as f64));
    v.extend(v.clone().iter().map(|x| -x));
    v
}

/// Canonical strings must agree with the oracle; used as a spot check.
pub fn agrees_with_oracle(x: f64) -> bool {
    format_scientific(x).unwrap() == oracle_format(x)
}
