//! Number formatting for CSV outputs.

/// `%.{sig}g`-style formatting: fixed notation for moderate exponents,
/// scientific otherwise, trailing zeros trimmed.
pub fn fmt_sig(v: f64, sig: usize) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{:.*e}", sig - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= sig as i32 {
        format!("{}e{}", trim(mantissa), exp)
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        trim(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::fmt_sig;

    #[test]
    fn matches_printf_g() {
        assert_eq!(fmt_sig(0.1, 9), "0.1");
        assert_eq!(fmt_sig(1.0 / 3.0, 9), "0.333333333");
        assert_eq!(fmt_sig(123456789.4, 9), "123456789");
        assert_eq!(fmt_sig(1234567890.0, 9), "1.23456789e9");
        assert_eq!(fmt_sig(-2.5e-7, 9), "-2.5e-7");
        assert_eq!(fmt_sig(0.000123, 9), "0.000123");
        assert_eq!(fmt_sig(0.0, 9), "0");
        assert_eq!(fmt_sig(9.9999999996, 9), "10");
    }
}
