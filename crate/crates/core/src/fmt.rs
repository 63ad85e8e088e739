//! Fixed-precision number formatting for text outputs.

/// Formats `v` rounded to 9 significant digits, using the shortest
/// representation of the rounded value.
pub fn sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let rounded: f64 = format!("{v:.8e}").parse().unwrap_or(v);
    format!("{rounded}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounds_to_nine_digits() {
        assert_eq!(sig9(1.0), "1");
        assert_eq!(sig9(0.1234567891234), "0.123456789");
        assert_eq!(sig9(-2.5e-12), "-0.0000000000025");
        assert_eq!(sig9(123456789012.0), "123456789000");
        assert_eq!(sig9(-0.0), "0");
    }
}
