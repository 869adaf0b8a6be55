mod common;

use common::{half_even_ties, oracle_format};
use proptest::prelude::*;
use rowcast_core::numeric::{format_scientific, is_canonical, parse_scientific};

#[test]
fn oracle_fixtures() {
    assert_eq!(oracle_format(3141.592), "+3.1416e+03");
    assert_eq!(oracle_format(-0.000012345), "-1.2345e-05");
    assert_eq!(oracle_format(12345.5), "+1.2346e+04");
    assert_eq!(oracle_format(12346.5), "+1.2346e+04");
    assert_eq!(oracle_format(99999.5), "+1.0000e+05");
    assert_eq!(oracle_format(5e-324), "+4.9407e-324");
    assert_eq!(oracle_format(f64::MAX), "+1.7977e+308");
}

#[test]
fn formatter_matches_oracle_on_fixtures() {
    for x in [3141.592, -0.000012345, 1.0, -1.0, 0.1, 1e-300, 1e300, 5e-324, f64::MAX, f64::MIN_POSITIVE] {
        assert_eq!(format_scientific(x).unwrap(), oracle_format(x), "{x:e}");
    }
    assert_eq!(format_scientific(-0.0).unwrap(), "+0.0000e+00");
}

#[test]
fn formatter_matches_oracle_on_ties() {
    for x in half_even_ties() {
        assert_eq!(format_scientific(x).unwrap(), oracle_format(x), "{x}");
    }
}

#[test]
fn powers_of_ten() {
    for e in -307..=308 {
        let x: f64 = format!("1e{e}").parse().unwrap();
        assert_eq!(format_scientific(x).unwrap(), oracle_format(x), "1e{e}");
    }
}

fn finite() -> impl Strategy<Value = f64> {
    any::<u64>().prop_map(f64::from_bits).prop_filter("finite", |x| x.is_finite())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn agrees_with_bigint_oracle(x in finite()) {
        prop_assert_eq!(format_scientific(x).unwrap(), oracle_format(x));
    }

    #[test]
    fn round_trip_within_half_unit(x in finite()) {
        let s = format_scientific(x).unwrap();
        prop_assert!(is_canonical(&s));
        let back = parse_scientific(&s).unwrap();
        if x != 0.0 && x.abs() >= 1e-300 {
            prop_assert!(((back - x) / x).abs() <= 5e-5, "{} -> {} -> {}", x, s, back);
        }
    }

    #[test]
    fn format_is_idempotent(x in finite()) {
        let s = format_scientific(x).unwrap();
        prop_assert_eq!(format_scientific(parse_scientific(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn ordering_is_preserved(a in -1e12..1e12f64, b in -1e12..1e12f64) {
        let (fa, fb) = (parse_scientific(&format_scientific(a).unwrap()).unwrap(),
                        parse_scientific(&format_scientific(b).unwrap()).unwrap());
        if a <= b {
            prop_assert!(fa <= fb);
        }
    }
}
