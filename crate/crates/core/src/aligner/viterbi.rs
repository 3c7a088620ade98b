use super::{Alignment, CtcLogits};
use crate::error::{Error, Result};

/// Max-sum alignment over strictly increasing positions:
/// `argmax_{p_1 < ... < p_L} sum_i y[p_i, w_i]`.
///
/// Ties go to the earliest position: the last token takes the earliest
/// optimal frame, and each earlier token the earliest optimal frame before
/// its successor.
pub fn viterbi_align(logits: &CtcLogits, tokens: &[usize]) -> Result<Alignment> {
    let (p, _) = viterbi_score(logits.scores().data(), logits.frames(), logits.classes(), tokens)?;
    Alignment::new(p, tokens.to_vec(), logits.frames())
}

/// Raw-slice form of [`viterbi_align`]; returns positions and the optimal score.
pub fn viterbi_score(y: &[f64], t_len: usize, classes: usize, tokens: &[usize]) -> Result<(Vec<usize>, f64)> {
    let l = tokens.len();
    if l == 0 {
        return Err(Error::InvalidAlignment("no tokens to align".into()));
    }
    if l > t_len {
        return Err(Error::Infeasible(format!("{l} tokens cannot align to {t_len} frames")));
    }
    if let Some(&bad) = tokens.iter().find(|&&w| w >= classes) {
        return Err(Error::OutOfRange(format!("token {bad} outside {classes} classes")));
    }
    let score = |t: usize, w: usize| y[t * classes + w];
    let ninf = f64::NEG_INFINITY;
    // dp[i][t], 0-based token i at 0-based frame t; back[i][t] = best t' < t for token i-1.
    let mut dp = vec![ninf; l * t_len];
    let mut back = vec![usize::MAX; l * t_len];
    for t in 0..=t_len - l {
        dp[t] = score(t, tokens[0]);
    }
    for i in 1..l {
        let (mut best, mut arg) = (ninf, usize::MAX);
        for t in i..=t_len - l + i {
            let prev = dp[(i - 1) * t_len + t - 1];
            if prev > best {
                best = prev;
                arg = t - 1;
            }
            dp[i * t_len + t] = score(t, tokens[i]) + best;
            back[i * t_len + t] = arg;
        }
    }
    let mut t = usize::MAX;
    let mut best = ninf;
    for tt in l - 1..t_len {
        if dp[(l - 1) * t_len + tt] > best {
            best = dp[(l - 1) * t_len + tt];
            t = tt;
        }
    }
    if t == usize::MAX {
        return Err(Error::NonFinite("all alignment scores are -inf or NaN".into()));
    }
    let mut p = vec![0; l];
    for i in (0..l).rev() {
        p[i] = t + 1;
        if i > 0 {
            t = back[i * t_len + t];
        }
    }
    Ok((p, best))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_example() {
        let y = [1.0, 0.0, 0.0, 2.0, 3.0, 1.0];
        let (p, s) = viterbi_score(&y, 3, 2, &[0, 1]).unwrap();
        assert_eq!(p, vec![1, 2]);
        assert_eq!(s, 3.0);
    }

    #[test]
    fn single_token_takes_earliest_max() {
        let y = [0.0, 5.0, 1.0, 5.0];
        assert_eq!(viterbi_score(&y, 4, 1, &[0]).unwrap().0, vec![2]);
    }

    #[test]
    fn l_equals_t_is_forced() {
        let y = [9.0, 0.0, 0.0, 9.0, 9.0, 0.0];
        assert_eq!(viterbi_score(&y, 3, 2, &[1, 1, 1]).unwrap().0, vec![1, 2, 3]);
    }

    #[test]
    fn infeasible_and_empty() {
        let y = [0.0; 4];
        assert!(matches!(viterbi_score(&y, 2, 2, &[0, 0, 0]), Err(Error::Infeasible(_))));
        assert!(viterbi_score(&y, 2, 2, &[]).is_err());
    }
}
