//! Template-matching decoder for frames produced by the synthetic corpus (or
//! anything imitating it).

use super::corpus::Templates;
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleDecode {
    pub tokens: Vec<usize>,
    /// Best-fitting speaker of the template bank.
    pub speaker: usize,
    /// Least-squares speaker offset: mean residual after removing the
    /// matched templates.
    pub speaker_estimate: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Label {
    Silence,
    Token { id: usize, k: usize },
}

fn sq_dist(x: &[f32], base: &[f64], offset: &[f64]) -> f64 {
    x.iter()
        .zip(base)
        .zip(offset)
        .map(|((&a, b), o)| {
            let d = a as f64 - b - o;
            d * d
        })
        .sum()
}

/// Nearest-template labelling of every frame under each candidate speaker;
/// the speaker with the smallest total residual wins. One token is read off
/// every frame matching a final-frame template; run frames before it carry
/// too little of the token to be trusted.
pub fn oracle_decode(templates: &Templates, features: &Tensor<f32>) -> OracleDecode {
    let c = &templates.config;
    let mut bank: Vec<(Label, Vec<f64>)> = vec![(Label::Silence, templates.silence.clone())];
    for id in 0..c.vocab {
        for k in 0..c.max_run {
            bank.push((Label::Token { id, k }, templates.token_frame(id, k)));
        }
    }
    let t = features.rows();
    let mut best: Option<(f64, usize, Vec<usize>)> = None;
    for (s, offset) in templates.speaker.iter().enumerate() {
        let mut total = 0.0;
        let mut picks = Vec::with_capacity(t);
        for q in 0..t {
            let x = features.row(q);
            let (k, d) = bank
                .iter()
                .enumerate()
                .map(|(k, (_, b))| (k, sq_dist(x, b, offset)))
                .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            total += d;
            picks.push(k);
        }
        if best.as_ref().is_none_or(|b| total < b.0) {
            best = Some((total, s, picks));
        }
    }
    let (_, speaker, picks) = best.expect("at least one speaker");

    let tokens = picks
        .iter()
        .filter_map(|&k| match bank[k].0 {
            Label::Token { id, k: 0 } => Some(id),
            _ => None,
        })
        .collect();

    let mut est = vec![0.0; c.d_a];
    for (q, &k) in picks.iter().enumerate() {
        for (e, (&x, b)) in est.iter_mut().zip(features.row(q).iter().zip(&bank[k].1)) {
            *e += x as f64 - b;
        }
    }
    est.iter_mut().for_each(|e| *e /= t.max(1) as f64);
    OracleDecode {
        tokens,
        speaker,
        speaker_estimate: est,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::corpus::{render, Layout, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pure_silence_decodes_to_nothing() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..SynthConfig::default()
        };
        let t = Templates::new(&cfg).unwrap();
        let layout = Layout {
            gaps: vec![],
            runs: vec![],
            trailing_gap: 5,
        };
        let (f, _) = render(&t, &[], 2, &layout, &mut ChaCha8Rng::seed_from_u64(0));
        let d = oracle_decode(&t, &f);
        assert!(d.tokens.is_empty());
        assert_eq!(d.speaker, 2);
    }

    #[test]
    fn repeated_token_is_split_at_final_frames() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..SynthConfig::default()
        };
        let t = Templates::new(&cfg).unwrap();
        let layout = Layout {
            gaps: vec![0, 0],
            runs: vec![2, 3],
            trailing_gap: 0,
        };
        let (f, _) = render(&t, &[4, 4], 0, &layout, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(oracle_decode(&t, &f).tokens, vec![4, 4]);
    }
}
