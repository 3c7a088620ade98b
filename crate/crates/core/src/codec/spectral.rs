//! Multi-scale log-magnitude spectra computed with DFT matrices on the tape.

use std::f64::consts::PI;

use crate::error::Result;
use crate::numerics::{Graph, Real, Tensor, Var};

pub const SCALES: [usize; 3] = [32, 64, 128];

const LOG_EPS: f64 = 1e-5;

/// Number of analysis frames for `n` samples: enough hops to cover the
/// signal, with zero padding at the end.
pub fn frame_count(n: usize, window: usize) -> usize {
    let hop = window / 4;
    if n <= window {
        1
    } else {
        (n - window).div_ceil(hop) + 1
    }
}

fn dft_bases<F: Real>(window: usize) -> (Tensor<F>, Tensor<F>) {
    let bins = window / 2 + 1;
    let mut re = Vec::with_capacity(window * bins);
    let mut im = Vec::with_capacity(window * bins);
    for n in 0..window {
        let hann = 0.5 - 0.5 * (2.0 * PI * n as f64 / window as f64).cos();
        for k in 0..bins {
            let ang = 2.0 * PI * (k * n) as f64 / window as f64;
            re.push(F::of(hann * ang.cos()));
            im.push(F::of(-hann * ang.sin()));
        }
    }
    (
        Tensor::new(vec![window, bins], re).expect("dft shape"),
        Tensor::new(vec![window, bins], im).expect("dft shape"),
    )
}

/// `0.5 * log(|X|^2 + eps)` of a Hann-windowed STFT of the flattened rows of
/// `signal`; returns `[frames, window/2 + 1]`.
pub fn log_magnitude<F: Real>(g: &mut Graph<F>, signal: Var, window: usize) -> Result<Var> {
    let n = g.value(signal).numel();
    let col = g.reshape(signal, &[n, 1])?;
    let hop = window / 4;
    let frames = frame_count(n, window);
    let idx: Vec<Option<usize>> = (0..frames)
        .flat_map(|f| (0..window).map(move |j| Some(f * hop + j).filter(|&i| i < n)))
        .collect();
    let chunks = g.gather_rows(col, &idx)?;
    let chunks = g.reshape(chunks, &[frames, window])?;
    let (re_b, im_b) = dft_bases::<F>(window);
    let re_b = g.constant(re_b);
    let im_b = g.constant(im_b);
    let re = g.matmul(chunks, re_b)?;
    let im = g.matmul(chunks, im_b)?;
    let re2 = g.mul(re, re)?;
    let im2 = g.mul(im, im)?;
    let p = g.add(re2, im2)?;
    let p = g.add_scalar(p, LOG_EPS);
    let lp = g.log(p);
    Ok(g.scale(lp, 0.5))
}

/// Sum over scales of the mean absolute log-magnitude difference.
pub fn multiscale_spectral_l1<F: Real>(g: &mut Graph<F>, pred: Var, target: &Tensor<F>) -> Result<Var> {
    let tgt = g.constant(target.clone());
    let mut total: Option<Var> = None;
    for w in SCALES {
        let a = log_magnitude(g, pred, w)?;
        let b = log_magnitude(g, tgt, w)?;
        let d = g.l1(a, b)?;
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    Ok(total.expect("at least one scale"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_tone_peaks_at_its_bin() {
        let w = 64;
        let sig: Vec<f64> = (0..256).map(|i| (2.0 * PI * 8.0 * i as f64 / w as f64).sin()).collect();
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(vec![16, 16], sig).unwrap());
        let lm = log_magnitude(&mut g, s, w).unwrap();
        let row = g.value(lm).row(1).to_vec();
        let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(peak, 8);
    }

    #[test]
    fn identical_signals_have_zero_loss() {
        let t = Tensor::new(vec![5, 16], (0..80).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut g = Graph::new();
        let s = g.constant(t.clone());
        let l = multiscale_spectral_l1(&mut g, s, &t).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn frame_counts_cover_the_signal() {
        assert_eq!(frame_count(10, 32), 1);
        assert_eq!(frame_count(32, 32), 1);
        assert_eq!(frame_count(33, 32), 2);
        assert_eq!(frame_count(800, 128), 22);
    }
}
