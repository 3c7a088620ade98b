//! CTC log-likelihood by the forward-backward recursion in log space.

use super::CtcLogits;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Var};

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum number of frames needed to emit `targets`: one per label plus one
/// blank between each pair of equal neighbours.
pub fn min_frames(targets: &[usize]) -> usize {
    targets.len() + targets.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Result of the forward-backward pass.
#[derive(Clone, Debug)]
pub struct CtcResult {
    pub log_likelihood: f64,
    /// `d log_likelihood / d logp[t, k]`, row-major `[T, C]`: the posterior
    /// occupancy of symbol `k` at frame `t`.
    pub grad: Vec<f64>,
}

/// Log of the total probability of all CTC paths that collapse to `targets`.
///
/// `logp` is `[T, C]` log-probabilities with the blank at column `blank`.
pub fn ctc_forward_backward(
    logp: &[f64],
    t_len: usize,
    classes: usize,
    targets: &[usize],
    blank: usize,
) -> Result<CtcResult> {
    if t_len == 0 {
        return Err(Error::Infeasible("CTC needs at least one frame".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&k| k >= classes || k == blank) {
        return Err(Error::OutOfRange(format!(
            "target {bad} is blank or outside {classes} classes"
        )));
    }
    let need = min_frames(targets);
    if need > t_len {
        return Err(Error::Infeasible(format!(
            "{} labels need {need} frames, got {t_len}",
            targets.len()
        )));
    }
    let s_len = 2 * targets.len() + 1;
    let label = |s: usize| if s % 2 == 0 { blank } else { targets[s / 2] };
    let skip_ok = |s: usize| s >= 2 && label(s) != blank && label(s) != label(s - 2);
    let y = |t: usize, k: usize| logp[t * classes + k];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = y(0, blank);
    if s_len > 1 {
        alpha[1] = y(0, label(1));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + y(t, label(s)) };
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let log_likelihood = if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    if !log_likelihood.is_finite() {
        return Err(Error::NonFinite(format!("CTC log-likelihood is {log_likelihood}")));
    }

    // beta excludes the emission at its own frame.
    let mut beta = vec![ninf; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s] + y(t + 1, label(s));
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1] + y(t + 1, label(s + 1)));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = log_add(acc, next[s + 2] + y(t + 1, label(s + 2)));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = vec![0.0; t_len * classes];
    for t in 0..t_len {
        for s in 0..s_len {
            let lp = alpha[t * s_len + s] + beta[t * s_len + s];
            if lp > ninf {
                grad[t * classes + label(s)] += (lp - log_likelihood).exp();
            }
        }
    }
    Ok(CtcResult { log_likelihood, grad })
}

/// [`ctc_forward_backward`] on validated CTC logits.
pub fn ctc_log_likelihood(logits: &CtcLogits, targets: &[usize]) -> Result<f64> {
    let t = logits.frames();
    let c = logits.classes();
    let data: Vec<f64> = logits.scores().data().iter().map(|v| v.as_f64()).collect();
    Ok(ctc_forward_backward(&data, t, c, targets, c - 1)?.log_likelihood)
}

/// Differentiable CTC log-likelihood of a `[T, C]` log-probability node.
pub fn ctc_log_likelihood_node<F: Real>(g: &mut Graph<F>, logp: Var, targets: &[usize], blank: usize) -> Result<Var> {
    let shape = g.shape(logp).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("ctc", format!("expected [T, C], got {shape:?}")));
    }
    let data: Vec<f64> = g.value(logp).data().iter().map(|v| v.as_f64()).collect();
    let r = ctc_forward_backward(&data, shape[0], shape[1], targets, blank)?;
    let grad = r.grad.into_iter().map(F::of).collect();
    g.scalar_with_grad(logp, F::of(r.log_likelihood), grad)
}

#[cfg(test)]
pub(crate) mod oracle {
    /// Sum over every frame-level path that collapses to `targets`.
    pub fn brute_force(logp: &[f64], t_len: usize, classes: usize, targets: &[usize], blank: usize) -> f64 {
        let mut total = f64::NEG_INFINITY;
        let mut path = vec![0usize; t_len];
        loop {
            let mut collapsed = Vec::new();
            let mut prev = None;
            for &k in &path {
                if Some(k) != prev && k != blank {
                    collapsed.push(k);
                }
                prev = Some(k);
            }
            if collapsed == targets {
                let s: f64 = path.iter().enumerate().map(|(t, &k)| logp[t * classes + k]).sum();
                total = super::log_add(total, s);
            }
            // odometer increment
            let mut i = 0;
            loop {
                if i == t_len {
                    return total;
                }
                path[i] += 1;
                if path[i] < classes {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logp(rng: &mut impl Rng, t: usize, c: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for _ in 0..t {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lse = raw.iter().map(|v| v.exp()).sum::<f64>().ln();
            out.extend(raw.iter().map(|v| v - lse));
        }
        out
    }

    #[test]
    fn single_frame_single_label() {
        let lp = random_logp(&mut ChaCha8Rng::seed_from_u64(0), 1, 3);
        let r = ctc_forward_backward(&lp, 1, 3, &[1], 2).unwrap();
        assert_eq!(r.log_likelihood, lp[1]);
    }

    #[test]
    fn two_frames_three_paths() {
        let lp = random_logp(&mut ChaCha8Rng::seed_from_u64(1), 2, 3);
        let (w, b) = (0, 2);
        let y = |t: usize, k: usize| lp[t * 3 + k];
        let expect = [y(0, w) + y(1, w), y(0, b) + y(1, w), y(0, w) + y(1, b)]
            .iter()
            .fold(f64::NEG_INFINITY, |a, &x| log_add(a, x));
        let got = ctc_forward_backward(&lp, 2, 3, &[w], b).unwrap().log_likelihood;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_targets_is_all_blank() {
        let lp = random_logp(&mut ChaCha8Rng::seed_from_u64(2), 3, 4);
        let got = ctc_forward_backward(&lp, 3, 4, &[], 3).unwrap().log_likelihood;
        assert!((got - (lp[3] + lp[7] + lp[11])).abs() < 1e-12);
    }

    #[test]
    fn infeasible_lengths_are_errors() {
        let lp = vec![0.0; 2 * 3];
        assert!(matches!(
            ctc_forward_backward(&lp, 2, 3, &[0, 0], 2),
            Err(Error::Infeasible(_))
        ));
        assert!(matches!(
            ctc_forward_backward(&lp, 2, 3, &[0, 1, 0], 2),
            Err(Error::Infeasible(_))
        ));
        assert!(ctc_forward_backward(&lp[..3], 1, 3, &[2], 2).is_err());
    }

    #[test]
    fn matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..60 {
            let t = rng.random_range(1..=6);
            let c = rng.random_range(2..=4);
            let l = rng.random_range(0..=3.min(t));
            let targets: Vec<usize> = (0..l).map(|_| rng.random_range(0..c - 1)).collect();
            if min_frames(&targets) > t {
                continue;
            }
            let lp = random_logp(&mut rng, t, c);
            let got = ctc_forward_backward(&lp, t, c, &targets, c - 1).unwrap().log_likelihood;
            let expect = oracle::brute_force(&lp, t, c, &targets, c - 1);
            assert!(((got - expect) / expect).abs() < 1e-9, "{got} vs {expect}");
        }
    }

    #[test]
    fn gradient_through_log_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..10 {
            let raw = Tensor::new(vec![6, 4], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let targets = [seed % 3, (seed + 1) % 3];
            let err = finite_difference_check(&[raw], 1e-5, |g, v| {
                let lp = g.log_softmax(v[0], None)?;
                ctc_log_likelihood_node(g, lp, &targets, 3)
            })
            .unwrap();
            assert!(err < 1e-3, "{err}");
        }
    }
}
