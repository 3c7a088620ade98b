//! Synthetic speech corpus with known tokens, speakers and alignments.
//!
//! Each token is a run of frames ending in a frame that carries the token's
//! template at full strength; earlier frames of the run carry a shared filler
//! pattern (indexed by position within the run) plus a weak copy of the token
//! template. Gap frames carry a silence template. Every frame is offset by
//! the speaker vector and perturbed by Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::aligner::{filter_alignment, FilterConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab: usize,
    pub speakers: usize,
    /// Frame feature width.
    pub d_a: usize,
    /// Token runs last `1..=max_run` frames.
    pub max_run: usize,
    /// Gaps before each token (and after the last) last `0..=max_gap` frames.
    pub max_gap: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub noise: f64,
    /// Signal samples per frame.
    pub r: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            speakers: 4,
            d_a: 16,
            max_run: 6,
            max_gap: 3,
            min_tokens: 5,
            max_tokens: 10,
            noise: 0.1,
            r: 16,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.vocab >= 2
            && self.speakers >= 1
            && self.d_a >= 1
            && self.max_run >= 1
            && self.min_tokens >= 1
            && self.max_tokens >= self.min_tokens
            && self.r >= 4
            && self.noise >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid synth config {self:?}")));
        }
        if self.max_gap + self.max_run > 255 {
            return Err(Error::Config("durations exceed the 8-bit range".into()));
        }
        Ok(())
    }
}

/// Weak share of the token template on non-final frames.
pub const FILLER_TOKEN_WEIGHT: f64 = 0.3;

/// Deterministic templates of one corpus configuration.
#[derive(Clone, Debug)]
pub struct Templates {
    pub config: SynthConfig,
    /// `[vocab][d_a]`
    pub token: Vec<Vec<f64>>,
    /// `[max_run - 1][d_a]`, indexed by distance to the run end minus one.
    pub filler: Vec<Vec<f64>>,
    pub silence: Vec<f64>,
    /// `[speakers][d_a]`
    pub speaker: Vec<Vec<f64>>,
    /// Successor table of the text chain: `[vocab][4]` with fixed weights.
    pub successors: Vec<Vec<usize>>,
}

pub const SUCCESSOR_WEIGHTS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

fn gaussian_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

impl Templates {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7e3a_91c5);
        let d = config.d_a;
        let token = (0..config.vocab).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect();
        let filler = (1..config.max_run).map(|_| gaussian_vec(&mut rng, d, 0.8)).collect();
        let silence = gaussian_vec(&mut rng, d, 0.5);
        let speaker = (0..config.speakers).map(|_| gaussian_vec(&mut rng, d, 0.7)).collect();
        let successors = (0..config.vocab)
            .map(|a| {
                let mut next = Vec::with_capacity(4);
                while next.len() < 4.min(config.vocab - 1) {
                    let b = rng.random_range(0..config.vocab);
                    if b != a && !next.contains(&b) {
                        next.push(b);
                    }
                }
                next
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            token,
            filler,
            silence,
            speaker,
            successors,
        })
    }

    /// Noise-free feature of a token frame: `k = 0` is the final frame of the
    /// run, `k >= 1` the `k`-th frame from the run start.
    pub fn token_frame(&self, tok: usize, k: usize) -> Vec<f64> {
        if k == 0 {
            return self.token[tok].clone();
        }
        let f = &self.filler[(k - 1).min(self.filler.len() - 1)];
        f.iter()
            .zip(&self.token[tok])
            .map(|(a, b)| a + FILLER_TOKEN_WEIGHT * b)
            .collect()
    }

    /// Samples a token sequence from the text chain.
    pub fn sample_text(&self, len: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut cur = rng.random_range(0..self.config.vocab);
        out.push(cur);
        while out.len() < len {
            let succ = &self.successors[cur];
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = succ[succ.len() - 1];
            for (k, &b) in succ.iter().enumerate() {
                acc += SUCCESSOR_WEIGHTS[k];
                if u < acc {
                    pick = b;
                    break;
                }
            }
            cur = pick;
            out.push(cur);
        }
        out
    }

    /// Probability of `b` following `a` under the text chain.
    pub fn transition(&self, a: usize, b: usize) -> f64 {
        self.successors[a]
            .iter()
            .position(|&x| x == b)
            .map_or(0.0, |k| SUCCESSOR_WEIGHTS[k])
    }

    /// Signal samples of one frame.
    pub fn signal_frame(&self, tok: Option<usize>, speaker: usize) -> Vec<f64> {
        let r = self.config.r;
        match tok {
            None => vec![0.0; r],
            Some(w) => {
                let freq = 1 + w % (r / 2 - 1);
                let amp = 0.6 + 0.15 * speaker as f64;
                (0..r)
                    .map(|m| amp * (2.0 * std::f64::consts::PI * freq as f64 * m as f64 / r as f64).sin())
                    .collect()
            }
        }
    }
}

/// Frame-level layout of one utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    /// Gap frames before each token.
    pub gaps: Vec<usize>,
    /// Run length of each token.
    pub runs: Vec<usize>,
    pub trailing_gap: usize,
}

impl Layout {
    pub fn positions(&self) -> Vec<usize> {
        let mut p = Vec::with_capacity(self.runs.len());
        let mut t = 0;
        for (g, r) in self.gaps.iter().zip(&self.runs) {
            t += g + r;
            p.push(t);
        }
        p
    }

    pub fn frames(&self) -> usize {
        self.gaps.iter().sum::<usize>() + self.runs.iter().sum::<usize>() + self.trailing_gap
    }

    /// Per-frame `(token, k)` as in [`Templates::token_frame`]; `None` for gap
    /// frames.
    pub fn frame_labels(&self, tokens: &[usize]) -> Vec<Option<(usize, usize)>> {
        let mut out = Vec::with_capacity(self.frames());
        for ((&g, &r), &w) in self.gaps.iter().zip(&self.runs).zip(tokens) {
            out.extend(std::iter::repeat_n(None, g));
            out.extend((1..r).map(|k| Some((w, k))));
            out.push(Some((w, 0)));
        }
        out.extend(std::iter::repeat_n(None, self.trailing_gap));
        out
    }
}

/// One rendered utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: u32,
    pub speaker: usize,
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    /// `[T, d_a]`
    pub features: Tensor<f32>,
    /// `[T, r]`
    pub signal: Tensor<f32>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

/// Renders frames for a fixed text, speaker and layout.
pub fn render(
    templates: &Templates,
    tokens: &[usize],
    speaker: usize,
    layout: &Layout,
    rng: &mut impl Rng,
) -> (Tensor<f32>, Tensor<f32>) {
    let c = &templates.config;
    let labels = layout.frame_labels(tokens);
    let t = labels.len();
    let mut feat = Vec::with_capacity(t * c.d_a);
    let mut sig = Vec::with_capacity(t * c.r);
    for lab in &labels {
        let base = match *lab {
            Some((w, k)) => templates.token_frame(w, k),
            None => templates.silence.clone(),
        };
        for (b, s) in base.iter().zip(&templates.speaker[speaker]) {
            let n: f64 = StandardNormal.sample(rng);
            feat.push((b + s + c.noise * n) as f32);
        }
        for v in templates.signal_frame(lab.map(|x| x.0), speaker) {
            let n: f64 = StandardNormal.sample(rng);
            sig.push((v + 0.1 * c.noise * n) as f32);
        }
    }
    (
        Tensor::new(vec![t, c.d_a], feat).expect("feature shape"),
        Tensor::new(vec![t, c.r], sig).expect("signal shape"),
    )
}

/// Samples a layout that passes the alignment filter.
pub fn sample_layout(config: &SynthConfig, len: usize, rng: &mut impl Rng) -> Layout {
    loop {
        let layout = Layout {
            gaps: (0..len).map(|_| rng.random_range(0..=config.max_gap)).collect(),
            runs: (0..len).map(|_| rng.random_range(1..=config.max_run)).collect(),
            trailing_gap: rng.random_range(0..=config.max_gap),
        };
        if filter_alignment(&layout.positions(), layout.frames(), &FilterConfig::default()).is_keep() {
            return layout;
        }
    }
}

fn utterance_rng(seed: u64, id: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (id as u64 + 1))
}

/// Generates utterances `first_id .. first_id + n`.
pub fn gen_utterances(templates: &Templates, first_id: u32, n: usize) -> Vec<Utterance> {
    let c = &templates.config;
    (0..n as u32)
        .into_par_iter()
        .map(|k| {
            let id = first_id + k;
            let mut rng = utterance_rng(c.seed, id);
            let len = rng.random_range(c.min_tokens..=c.max_tokens);
            let speaker = rng.random_range(0..c.speakers);
            let tokens = templates.sample_text(len, &mut rng);
            let layout = sample_layout(c, len, &mut rng);
            let (features, signal) = render(templates, &tokens, speaker, &layout, &mut rng);
            Utterance {
                id,
                speaker,
                positions: layout.positions(),
                tokens,
                features,
                signal,
            }
        })
        .collect()
}
