//! Text serialization helpers shared by the file formats.

use crate::error::{Error, Result};
use std::path::Path;

/// Formats a float with 17 significant digits so that parsing the text
/// recovers the exact bit pattern.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

pub(crate) fn parse_f64(s: &str, path: &Path, context: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::malformed(path, format!("{context}: bad float {s:?}")))
}

pub(crate) fn parse_usize(s: &str, path: &Path, context: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|_| Error::malformed(path, format!("{context}: bad integer {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn float_text_round_trip_is_bit_exact() {
        let path = PathBuf::from("test");
        let cases = [
            0.0,
            -0.0,
            1.0,
            std::f64::consts::PI,
            1.0 / 3.0,
            -2.2250738585072014e-308,
            1.7976931348623157e308,
            5e-324,
            0.1 + 0.2,
        ];
        for &x in &cases {
            let text = fmt_f64(x);
            let back = parse_f64(&text, &path, "case").unwrap();
            assert_eq!(x.to_bits(), back.to_bits(), "round trip failed for {x:?}");
        }
    }
}
