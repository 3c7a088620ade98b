//! Attention masks and indicator signals derived from aligned positions.
//!
//! Positions are 1-based frame indices `p_1 < ... < p_L <= T`; masks are
//! returned 0-based (`row q-1`, `column k-1`).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::Mask;

/// Checks that `p` is non-empty, strictly increasing and inside `1..=t`.
pub fn validate_positions(p: &[usize], t: usize) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidAlignment("no aligned positions".into()));
    }
    if p[0] < 1 {
        return Err(Error::InvalidAlignment("positions are 1-based".into()));
    }
    if let Some(w) = p.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::InvalidAlignment(format!(
            "positions not strictly increasing at {} -> {}",
            w[0], w[1]
        )));
    }
    if p[p.len() - 1] > t {
        return Err(Error::InvalidAlignment(format!(
            "position {} beyond T = {t}",
            p[p.len() - 1]
        )));
    }
    Ok(())
}

/// Which segment governs a decoder row that is itself an aligned position.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StreamVariant {
    /// Row `p_j` closes segment `j` and attends `[p_{j-2}+1, p_j]`.
    #[default]
    SelfInclusive,
    /// Row `p_j` belongs to the following segment.
    Strict,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPair {
    pub encoder: Mask,
    pub decoder: Mask,
}

impl MaskPair {
    pub fn new(p: &[usize], t: usize) -> Result<Self> {
        Ok(Self {
            encoder: encoder_mask(p, t)?,
            decoder: decoder_stream_mask(p, t, StreamVariant::SelfInclusive)?,
        })
    }
}

fn window_mask(t: usize, range: impl Fn(usize) -> (usize, usize)) -> Mask {
    let mut allow = vec![false; t * t];
    for q in 1..=t {
        let (lo, hi) = range(q);
        for k in lo.max(1)..=hi.min(t) {
            allow[(q - 1) * t + (k - 1)] = true;
        }
        // A row whose window would exclude it still attends itself.
        allow[(q - 1) * t + (q - 1)] = true;
    }
    Mask::new(t, t, allow)
}

/// Encoder mask: row `p_i` sees `[p_{i-1}+1, p_{i+1}-1]`; an unassigned row
/// between `p_i` and `p_{i+1}` sees `[p_i+1, p_{i+1}-1]`, with sentinels
/// `p_0 = 0` and `p_{L+1} = T+1`.
pub fn encoder_mask(p: &[usize], t: usize) -> Result<Mask> {
    validate_positions(p, t)?;
    let l = p.len();
    // ext[j] = p_j for j = 0..=L+1
    let ext: Vec<usize> = std::iter::once(0)
        .chain(p.iter().copied())
        .chain(std::iter::once(t + 1))
        .collect();
    Ok(window_mask(t, |q| match p.binary_search(&q) {
        Ok(i) => (ext[i] + 1, ext[i + 2] - 1),
        Err(i) => {
            // p_i < q < p_{i+1} in 1-based terms, i in 0..=L
            debug_assert!(i <= l);
            (ext[i] + 1, ext[i + 1] - 1)
        }
    }))
}

/// Index (1-based, may be `L+1` for trailing frames) of the segment that
/// governs row `q`.
pub fn governing_segment(p: &[usize], q: usize, variant: StreamVariant) -> usize {
    let idx = match variant {
        StreamVariant::SelfInclusive => p.partition_point(|&x| x < q),
        StreamVariant::Strict => p.partition_point(|&x| x <= q),
    };
    idx + 1
}

/// Streaming decoder mask: a row governed by segment `i` (the first aligned
/// position at or after it) sees `[p_{i-2}+1, p_i]`, with `p_0 = p_{-1} = 0`
/// and `p_{L+1} = T` for trailing frames.
pub fn decoder_stream_mask(p: &[usize], t: usize, variant: StreamVariant) -> Result<Mask> {
    validate_positions(p, t)?;
    let at = |j: isize| -> usize {
        if j <= 0 {
            0
        } else if j as usize > p.len() {
            t
        } else {
            p[j as usize - 1]
        }
    };
    Ok(window_mask(t, |q| {
        let i = governing_segment(p, q, variant) as isize;
        (at(i - 2) + 1, at(i))
    }))
}

/// 1 at aligned positions, 0 elsewhere (length `T`).
pub fn indicator(p: &[usize], t: usize) -> Result<Vec<usize>> {
    validate_positions(p, t)?;
    let mut v = vec![0; t];
    for &q in p {
        v[q - 1] = 1;
    }
    Ok(v)
}

/// Frame ranges `(start, end)` (1-based, inclusive) of the decoder segments:
/// segment `i` covers `(p_{i-1}, p_i]`, plus a trailing segment `(p_L, T]`
/// when `p_L < T`.
pub fn segments(p: &[usize], t: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(p.len() + 1);
    let mut prev = 0;
    for &q in p {
        out.push((prev + 1, q));
        prev = q;
    }
    if prev < t {
        out.push((prev + 1, t));
    }
    out
}

/// ASCII rendering: `#` attendable, `.` masked, `*` marks aligned rows/columns.
pub fn render_grid(mask: &Mask, p: &[usize]) -> String {
    let t = mask.rows();
    let mut s = String::from("    ");
    for k in 1..=mask.cols() {
        s.push(if p.contains(&k) { '*' } else { ' ' });
        s.push(' ');
    }
    s.push('\n');
    for q in 1..=t {
        let _ = write!(s, "{q:>3}{}", if p.contains(&q) { '*' } else { ' ' });
        for k in 1..=mask.cols() {
            s.push(if mask.get(q - 1, k - 1) { '#' } else { '.' });
            s.push(' ');
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cols(m: &Mask, q: usize) -> Vec<usize> {
        m.allowed(q - 1).map(|c| c + 1).collect()
    }

    #[test]
    fn encoder_examples() {
        let m = encoder_mask(&[2, 5], 6).unwrap();
        assert_eq!(cols(&m, 2), vec![1, 2, 3, 4]);
        assert_eq!(cols(&m, 5), vec![3, 4, 5, 6]);
        assert_eq!(cols(&m, 3), vec![3, 4]);
        assert_eq!(cols(&m, 1), vec![1]);
        assert_eq!(cols(&m, 6), vec![6]);
        assert_eq!(encoder_mask(&[1], 1).unwrap(), Mask::full(1, 1));
        let m = encoder_mask(&[1, 2], 2).unwrap();
        assert_eq!(cols(&m, 1), vec![1]);
        assert_eq!(cols(&m, 2), vec![2]);
    }

    #[test]
    fn decoder_examples() {
        let m = decoder_stream_mask(&[2, 5], 6, StreamVariant::SelfInclusive).unwrap();
        assert_eq!(cols(&m, 3), vec![1, 2, 3, 4, 5]);
        assert_eq!(cols(&m, 2), vec![1, 2]);
        assert_eq!(cols(&m, 6), vec![3, 4, 5, 6]);
        assert_eq!(
            decoder_stream_mask(&[1], 1, StreamVariant::SelfInclusive).unwrap(),
            Mask::full(1, 1)
        );
        let m = decoder_stream_mask(&[3], 3, StreamVariant::SelfInclusive).unwrap();
        for q in 1..=3 {
            assert_eq!(cols(&m, q), vec![1, 2, 3]);
        }
    }

    #[test]
    fn strict_variant_moves_assigned_rows_forward() {
        let m = decoder_stream_mask(&[2, 5], 6, StreamVariant::Strict).unwrap();
        // Row 2 is now governed by p_2 = 5.
        assert_eq!(cols(&m, 2), vec![1, 2, 3, 4, 5]);
        // Row 5 is trailing: [p_1 + 1, T].
        assert_eq!(cols(&m, 5), vec![3, 4, 5, 6]);
    }

    #[test]
    fn indicator_examples() {
        assert_eq!(indicator(&[2, 5], 6).unwrap(), vec![0, 1, 0, 0, 1, 0]);
        assert_eq!(indicator(&[1], 1).unwrap(), vec![1]);
        assert!(indicator(&[], 3).is_err());
    }

    #[test]
    fn invalid_positions_are_rejected() {
        assert!(encoder_mask(&[3, 3], 5).is_err());
        assert!(encoder_mask(&[0, 2], 5).is_err());
        assert!(decoder_stream_mask(&[2, 6], 5, StreamVariant::SelfInclusive).is_err());
    }

    /// Every non-empty position set for every T <= 10.
    fn all_alignments(max_t: usize) -> impl Iterator<Item = (Vec<usize>, usize)> {
        (1..=max_t).flat_map(|t| {
            (1u32..(1 << t)).map(move |bits| ((1..=t).filter(|&q| bits >> (q - 1) & 1 == 1).collect(), t))
        })
    }

    #[test]
    fn exhaustive_mask_invariants() {
        for (p, t) in all_alignments(10) {
            let enc = encoder_mask(&p, t).unwrap();
            let dec = decoder_stream_mask(&p, t, StreamVariant::SelfInclusive).unwrap();
            let ind = indicator(&p, t).unwrap();
            assert_eq!(ind.iter().sum::<usize>(), p.len());
            for q in 1..=t {
                assert!(enc.get(q - 1, q - 1) && dec.get(q - 1, q - 1));
            }
            for (i, &pi) in p.iter().enumerate() {
                let lo = if i == 0 { 1 } else { p[i - 1] + 1 };
                let hi = if i + 1 == p.len() { t } else { p[i + 1] - 1 };
                assert_eq!(cols(&enc, pi), (lo..=hi).collect::<Vec<_>>(), "p={p:?} t={t}");
            }
            // Causal by segment: nothing beyond the governing position.
            for q in 1..=t {
                let i = governing_segment(&p, q, StreamVariant::SelfInclusive);
                let bound = if i > p.len() { t } else { p[i - 1] };
                assert!(cols(&dec, q).iter().all(|&k| k <= bound));
            }
            // Pure function of (p, T).
            assert_eq!(enc, encoder_mask(&p, t).unwrap());
        }
    }

    #[test]
    fn grid_marks_assigned_rows() {
        let g = render_grid(&encoder_mask(&[2, 5], 6).unwrap(), &[2, 5]);
        let lines: Vec<&str> = g.lines().collect();
        assert_eq!(lines.len(), 7);
        assert!(lines[2].starts_with("  2*"));
        assert_eq!(lines[2].trim_start_matches("  2*"), "# # # # . . ");
    }
}
