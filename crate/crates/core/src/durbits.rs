//! Gray-coded analog bits for frame counts, and packing of flow targets.
//!
//! A frame count `n < 2^b` is gray-coded, written most-significant bit first
//! and mapped to `{-1, +1}`. A flow target for one token is
//! `[s | analog(gray(f_before)) | analog(gray(f_after))]`.

use crate::error::{Error, Result};

/// Default bit width (counts up to 255 frames).
pub const DEFAULT_BITS: usize = 8;

fn check_width(b: usize) -> Result<()> {
    if b == 0 || b > 31 {
        return Err(Error::Config(format!("bit width {b} outside 1..=31")));
    }
    Ok(())
}

/// Gray code of `n` as `b` bits, most significant first.
pub fn gray_encode(n: u32, b: usize) -> Result<Vec<u8>> {
    check_width(b)?;
    if n >= 1 << b {
        return Err(Error::OutOfRange(format!("{n} does not fit in {b} bits")));
    }
    let g = n ^ (n >> 1);
    Ok((0..b).rev().map(|i| ((g >> i) & 1) as u8).collect())
}

/// Inverse of [`gray_encode`] via prefix XOR.
pub fn gray_decode(bits: &[u8]) -> u32 {
    let mut n = 0u32;
    let mut acc = 0u8;
    for &bit in bits {
        acc ^= bit & 1;
        n = (n << 1) | acc as u32;
    }
    n
}

pub fn to_analog(bits: &[u8]) -> Vec<f64> {
    bits.iter().map(|&b| if b != 0 { 1.0 } else { -1.0 }).collect()
}

/// `x > 0 -> 1`, otherwise 0 (exact zero maps to 0).
pub fn quantize<F: Into<f64> + Copy>(x: &[F]) -> Vec<u8> {
    x.iter().map(|&v| u8::from(v.into() > 0.0)).collect()
}

/// Analog gray bits of a frame count.
pub fn encode_count(n: u32, b: usize) -> Result<Vec<f64>> {
    Ok(to_analog(&gray_encode(n, b)?))
}

pub fn decode_count<F: Into<f64> + Copy>(x: &[F]) -> u32 {
    gray_decode(&quantize(x))
}

/// Leading/trailing blank-frame counts of one token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DurationPair {
    pub before: u32,
    pub after: u32,
}

/// Durations implied by aligned positions: `before_i = p_i - p_{i-1} - 1`
/// (with `p_0 = 0`) and `after_i = before_{i+1}`, `after_L = T - p_L`. The
/// chain constraint `after_i = before_{i+1}` holds by construction.
pub fn durations_from_positions(p: &[usize], t: usize) -> Result<Vec<DurationPair>> {
    crate::masks::validate_positions(p, t)?;
    let before: Vec<u32> = p
        .iter()
        .scan(0usize, |prev, &q| {
            let d = q - *prev - 1;
            *prev = q;
            Some(d as u32)
        })
        .collect();
    let last_after = (t - p[p.len() - 1]) as u32;
    Ok((0..p.len())
        .map(|i| DurationPair {
            before: before[i],
            after: before.get(i + 1).copied().unwrap_or(last_after),
        })
        .collect())
}

/// Rebuilds positions and frame count from per-token durations. The gap
/// between tokens `i` and `i+1` is taken from `before_{i+1}`; `after` is only
/// used for the trailing gap of the last token.
pub fn positions_from_durations(d: &[DurationPair]) -> (Vec<usize>, usize) {
    let mut p = Vec::with_capacity(d.len());
    let mut prev = 0usize;
    for pair in d {
        prev += pair.before as usize + 1;
        p.push(prev);
    }
    let t = prev + d.last().map_or(0, |x| x.after as usize);
    (p, t)
}

/// Fraction of adjacent pairs with `after_i == before_{i+1}` (1 when there
/// are no pairs).
pub fn chain_consistency(d: &[DurationPair]) -> f64 {
    if d.len() < 2 {
        return 1.0;
    }
    let ok = d.windows(2).filter(|w| w[0].after == w[1].before).count();
    ok as f64 / (d.len() - 1) as f64
}

/// Packs `[s | analog(gray(before)) | analog(gray(after))]`.
pub fn pack(s: &[f64], before: u32, after: u32, b: usize) -> Result<Vec<f64>> {
    let mut y = s.to_vec();
    y.extend(encode_count(before, b)?);
    y.extend(encode_count(after, b)?);
    Ok(y)
}

/// Inverse of [`pack`]: splits off `s` and decodes both counts.
pub fn unpack(y: &[f64], d: usize, b: usize) -> Result<(Vec<f64>, DurationPair)> {
    if y.len() != d + 2 * b {
        return Err(Error::shape("unpack", format!("width {} != {d} + 2*{b}", y.len())));
    }
    Ok((
        y[..d].to_vec(),
        DurationPair {
            before: decode_count(&y[d..d + b]),
            after: decode_count(&y[d + b..]),
        },
    ))
}

/// Exhaustive checks over every `n < 2^b`: roundtrip and single-bit adjacency.
/// Returns the number of values checked.
pub fn exhaustive_check(b: usize) -> Result<usize> {
    check_width(b)?;
    let max = 1u32 << b;
    for n in 0..max {
        let code = gray_encode(n, b)?;
        if gray_decode(&code) != n {
            return Err(Error::OutOfRange(format!("roundtrip failed for {n}")));
        }
        if decode_count(&to_analog(&code)) != n {
            return Err(Error::OutOfRange(format!("analog roundtrip failed for {n}")));
        }
        if n + 1 < max {
            let next = gray_encode(n + 1, b)?;
            let diff = code.iter().zip(&next).filter(|(a, b)| a != b).count();
            if diff != 1 {
                return Err(Error::OutOfRange(format!(
                    "codes of {n} and {} differ in {diff} bits",
                    n + 1
                )));
            }
        }
    }
    Ok(max as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gray_examples() {
        assert_eq!(gray_encode(0, 8).unwrap(), vec![0; 8]);
        assert_eq!(gray_encode(5, 3).unwrap(), vec![1, 1, 1]);
        let (g3, g4) = (gray_encode(3, 3).unwrap(), gray_encode(4, 3).unwrap());
        assert_eq!(g3, vec![0, 1, 0]);
        assert_eq!(g4, vec![1, 1, 0]);
        assert!(gray_encode(256, 8).is_err());
    }

    #[test]
    fn exhaustive_up_to_ten_bits() {
        for b in 1..=10 {
            assert_eq!(exhaustive_check(b).unwrap(), 1 << b);
        }
    }

    #[test]
    fn sign_rule() {
        assert_eq!(quantize(&[0.3, -0.2, 1.7]), vec![1, 0, 1]);
        assert_eq!(quantize(&[0.0]), vec![0]);
        let v = [1.0, -1.0, -1.0, 1.0];
        assert_eq!(to_analog(&quantize(&v)), v.to_vec());
    }

    #[test]
    fn zero_count_is_all_minus_one() {
        let y = pack(&[0.5], 0, 0, 8).unwrap();
        assert!(y[1..].iter().all(|&v| v == -1.0));
    }

    #[test]
    fn durations_roundtrip_through_positions() {
        let p = [2, 5, 6, 11];
        let d = durations_from_positions(&p, 14).unwrap();
        assert_eq!(d.iter().map(|x| x.before).collect::<Vec<_>>(), vec![1, 2, 0, 4]);
        assert_eq!(d[3].after, 3);
        assert_eq!(chain_consistency(&d), 1.0);
        assert_eq!(positions_from_durations(&d), (p.to_vec(), 14));
    }

    proptest! {
        #[test]
        fn pack_unpack_identity(s in proptest::collection::vec(-3.0f64..3.0, 8), before in 0u32..256, after in 0u32..256) {
            let y = pack(&s, before, after, 8).unwrap();
            let (s2, d) = unpack(&y, 8, 8).unwrap();
            prop_assert_eq!(s2, s);
            prop_assert_eq!(d, DurationPair { before, after });
        }

        #[test]
        fn sign_preserving_noise_is_harmless(n in 0u32..256, noise in proptest::collection::vec(0.0f64..0.999, 8)) {
            let mut y = encode_count(n, 8).unwrap();
            for (v, e) in y.iter_mut().zip(&noise) {
                *v -= v.signum() * e;
            }
            prop_assert_eq!(decode_count(&y), n);
        }
    }
}
