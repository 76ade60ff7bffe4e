//! Low-bit code packing.
//!
//! Codes are written as an LSB-first bit stream: code `k` occupies bits
//! `[bits·k, bits·k + bits)` of the little-endian buffer. For 4-bit codes this
//! puts the first code in the low nibble; for 3-bit codes every 8 codes form a
//! 24-bit word stored as 3 bytes. Widths that do not divide a byte evenly are
//! padded with zero codes to a multiple of 8.

use crate::error::{Error, Result};

/// Byte length of `count` packed codes.
pub fn packed_len(count: usize, bits: u8) -> usize {
    let bits = bits as usize;
    if 8 % bits == 0 {
        (count * bits).div_ceil(8)
    } else {
        count.div_ceil(8) * bits
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if (1..=8).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!("bit width {bits} not in 1..=8")))
    }
}

pub fn pack_codes(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let limit = 1u16 << bits;
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    for (k, &code) in codes.iter().enumerate() {
        if code as u16 >= limit {
            return Err(Error::CodeOutOfRange { code, bits });
        }
        let bit = k * bits as usize;
        let (byte, shift) = (bit / 8, bit % 8);
        let wide = (code as u16) << shift;
        out[byte] |= wide as u8;
        if shift + bits as usize > 8 {
            out[byte + 1] |= (wide >> 8) as u8;
        }
    }
    Ok(out)
}

pub fn unpack_codes(buf: &[u8], count: usize, bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let expected = packed_len(count, bits);
    if buf.len() != expected {
        return Err(Error::PackedLength {
            expected,
            actual: buf.len(),
        });
    }
    let mask = (1u16 << bits) - 1;
    Ok((0..count)
        .map(|k| {
            let bit = k * bits as usize;
            let (byte, shift) = (bit / 8, bit % 8);
            let lo = buf[byte] as u16;
            let hi = buf.get(byte + 1).copied().unwrap_or(0) as u16;
            (((lo | (hi << 8)) >> shift) & mask) as u8
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn four_bit_low_nibble_first() {
        assert_eq!(pack_codes(&[0x3, 0xA], 4).unwrap(), vec![0xA3]);
        assert_eq!(unpack_codes(&[0xA3], 2, 4).unwrap(), vec![0x3, 0xA]);
    }

    #[test]
    fn three_bit_word_layout() {
        // 0b000_111_110_101_100_011_010_001 = 0x1F58D1
        let packed = pack_codes(&[1, 2, 3, 4, 5, 6, 7, 0], 3).unwrap();
        assert_eq!(packed, vec![0xD1, 0x58, 0x1F]);
        let word = packed
            .iter()
            .enumerate()
            .fold(0u32, |w, (i, &b)| w | (b as u32) << (8 * i));
        for k in 0..8 {
            assert_eq!((word >> (3 * k)) & 7, [1, 2, 3, 4, 5, 6, 7, 0][k]);
        }
    }

    #[test]
    fn empty_and_tail_padding() {
        assert!(pack_codes(&[], 3).unwrap().is_empty());
        assert!(unpack_codes(&[], 0, 4).unwrap().is_empty());
        assert_eq!(pack_codes(&[7], 3).unwrap(), vec![7, 0, 0]);
        assert_eq!(pack_codes(&[1, 2, 3], 4).unwrap(), vec![0x21, 0x03]);
        assert_eq!(packed_len(9, 3), 6);
        assert_eq!(packed_len(9, 8), 9);
    }

    #[test]
    fn rejects_out_of_range_and_bad_lengths() {
        assert!(matches!(
            pack_codes(&[8], 3),
            Err(Error::CodeOutOfRange { code: 8, bits: 3 })
        ));
        assert!(matches!(
            unpack_codes(&[0, 0], 3, 3),
            Err(Error::PackedLength { expected: 3, actual: 2 })
        ));
    }

    proptest! {
        #[test]
        fn pack_unpack_bijection(bits in 1u8..=8, raw in prop::collection::vec(any::<u8>(), 0..200)) {
            let codes: Vec<u8> = raw.iter().map(|c| c & ((1u16 << bits) - 1) as u8).collect();
            let packed = pack_codes(&codes, bits).unwrap();
            prop_assert_eq!(packed.len(), packed_len(codes.len(), bits));
            prop_assert_eq!(unpack_codes(&packed, codes.len(), bits).unwrap(), codes);
        }
    }
}
