//! Locale-independent fixed-point formatting with half-away-from-zero rounding.
//!
//! Rounding operates on the shortest decimal representation of the value, so
//! `1.005` formats as `1.01` even though its binary value is slightly below.

/// Formats `x` with exactly `dp` fractional digits.
pub fn fixed(x: f64, dp: usize) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let negative = x < 0.0;
    let sci = format!("{:e}", x.abs());
    let (mantissa, exponent) = sci.split_once('e').expect("scientific notation");
    let exponent: i32 = exponent.parse().expect("integer exponent");
    let digits: Vec<u8> = mantissa
        .bytes()
        .filter(u8::is_ascii_digit)
        .map(|b| b - b'0')
        .collect();

    // Digits of round(|x| * 10^dp) before rounding; the value is
    // 0.d1d2d3... * 10^(exponent + 1).
    let point = exponent + 1 + dp as i32;
    let (mut kept, round_up): (Vec<u8>, bool) = if point < 0 {
        (Vec::new(), false)
    } else {
        let p = point as usize;
        if p >= digits.len() {
            let mut v = digits.clone();
            v.resize(p, 0);
            (v, false)
        } else {
            (digits[..p].to_vec(), digits[p] >= 5)
        }
    };
    if round_up {
        let mut i = kept.len();
        loop {
            if i == 0 {
                kept.insert(0, 1);
                break;
            }
            i -= 1;
            if kept[i] == 9 {
                kept[i] = 0;
            } else {
                kept[i] += 1;
                break;
            }
        }
    }
    if kept.len() < dp + 1 {
        let pad = dp + 1 - kept.len();
        kept.splice(0..0, std::iter::repeat_n(0, pad));
    }
    let split = kept.len() - dp;
    let int_part: String = kept[..split].iter().map(|d| char::from(b'0' + d)).collect();
    let frac_part: String = kept[split..].iter().map(|d| char::from(b'0' + d)).collect();
    let int_part = int_part.trim_start_matches('0');
    let int_part = if int_part.is_empty() { "0" } else { int_part };
    let is_zero = kept.iter().all(|&d| d == 0);
    let sign = if negative && !is_zero { "-" } else { "" };
    if dp == 0 {
        format!("{sign}{int_part}")
    } else {
        format!("{sign}{int_part}.{frac_part}")
    }
}

/// Rounds to `dp` decimals with the same rule as [`fixed`].
pub fn round_to(x: f64, dp: usize) -> f64 {
    fixed(x, dp).parse().unwrap_or(x)
}
