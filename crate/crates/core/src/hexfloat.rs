//! Bit-exact text encoding of `f64` as 16 lowercase hex digits of its
//! IEEE-754 representation.

pub fn encode(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

/// Decodes exactly 16 lowercase hex digits.
pub fn decode(s: &str) -> Option<f64> {
    if s.len() != 16 || !s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
        return None;
    }
    u64::from_str_radix(s, 16).ok().map(f64::from_bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_words() {
        // 1.5 = sign 0, exponent 0x3ff, mantissa 0x8000000000000
        assert_eq!(encode(1.5), "3ff8000000000000");
        assert_eq!(decode("3ff8000000000000"), Some(1.5));
        assert_eq!(encode(-0.0), "8000000000000000");
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["3FF8000000000000", "3ff800000000000", "3ff80000000000000", "3ff800000000000g", "+ff8000000000000"] {
            assert_eq!(decode(bad), None, "{bad}");
        }
    }

    proptest! {
        #[test]
        fn round_trips_every_bit_pattern(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assert_eq!(decode(&encode(x)).unwrap().to_bits(), bits);
        }
    }
}
