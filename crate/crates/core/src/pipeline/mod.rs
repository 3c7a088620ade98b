//! Inference: prompt preparation, autoregressive generation with flow
//! sampling and guidance, online rejection sampling, streaming decode.

mod speaker;

pub use speaker::{cosine_rows, SpeakerExample, SpeakerHead};

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aligner::{filter_alignment, CtcAligner, FilterConfig, FilterDecision};
use crate::backbone::{sfg_logits, Acoustic, Backbone, FusedStep, Mode};
use crate::codec::{Codec, DecodeOutput, DecoderMode, StreamingSession};
use crate::durbits::{chain_consistency, durations_from_positions, positions_from_durations, DurationPair};
use crate::error::{Error, Result};
use crate::flowhead::{FlowConfig, NegativeMode};
use crate::nn::KvCache;
use crate::numerics::Tensor;

/// Resampling threshold on the speaker cosine.
pub const DEFAULT_THETA: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub frames: usize,
    /// Encoder means `[L, d_latent]`.
    pub latents: Tensor<f32>,
    pub durations: Vec<DurationPair>,
    /// Unit-norm mean speaker embedding.
    pub reference: Vec<f32>,
}

/// Prompt from known aligned positions.
pub fn prompt_from_positions(
    features: &Tensor<f32>,
    tokens: &[usize],
    positions: &[usize],
    codec: &Codec,
    head: &SpeakerHead,
) -> Result<Prompt> {
    if tokens.is_empty() {
        return Err(Error::Config("empty prompt transcript".into()));
    }
    let t = features.rows();
    let durations = durations_from_positions(positions, t)?;
    let latents = codec.encode(features, positions)?;
    let reference = head.reference(&latents)?;
    Ok(Prompt {
        tokens: tokens.to_vec(),
        positions: positions.to_vec(),
        frames: t,
        latents,
        durations,
        reference,
    })
}

/// Aligns, filters and encodes a prompt.
pub fn prepare_prompt(
    features: &Tensor<f32>,
    tokens: &[usize],
    aligner: &CtcAligner,
    codec: &Codec,
    head: &SpeakerHead,
    filter: &FilterConfig,
) -> Result<Prompt> {
    if tokens.is_empty() {
        return Err(Error::Config("empty prompt transcript".into()));
    }
    let a = aligner.align(features, tokens)?;
    if let FilterDecision::Drop(reason) = filter_alignment(&a.positions, features.rows(), filter) {
        return Err(Error::InvalidAlignment(format!("prompt alignment filtered ({reason})")));
    }
    prompt_from_positions(features, tokens, &a.positions, codec, head)
}

#[derive(Clone, Debug, PartialEq)]
pub enum GenMode {
    /// Text-to-speech for a fixed continuation transcript.
    Tts { text: Vec<usize> },
    /// Spoken continuation: text tokens are sampled.
    Slm {
        max_tokens: usize,
        temperature: f64,
        top_k: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationParams {
    pub flow: FlowConfig,
    /// Candidates per round.
    pub candidates: usize,
    pub theta: f64,
    /// Extra rounds allowed when every candidate is below `theta`.
    pub max_resample: usize,
    pub lambda_sfg: f64,
    pub mode: GenMode,
    pub seed: u64,
}

impl GenerationParams {
    pub fn tts(text: Vec<usize>) -> Self {
        Self {
            flow: FlowConfig::default(),
            candidates: 1,
            theta: DEFAULT_THETA,
            max_resample: 2,
            lambda_sfg: 1.0,
            mode: GenMode::Tts { text },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        if self.candidates == 0 {
            return Err(Error::Config("at least one candidate is required".into()));
        }
        match &self.mode {
            GenMode::Tts { text } if text.is_empty() => Err(Error::Config("empty target text".into())),
            GenMode::Slm { max_tokens: 0, .. } => Err(Error::Config("max_tokens must be >= 1".into())),
            GenMode::Slm { temperature, .. } if !(*temperature > 0.0) => Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Candidates drawn over all rounds.
    pub candidates: usize,
    pub rounds: usize,
    pub cosine: f64,
    /// Accepted below the threshold.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    /// Text tokens of the generated part.
    pub tokens: Vec<usize>,
    /// Raw latents `[n, d_latent]`.
    pub latents: Tensor<f32>,
    pub durations: Vec<DurationPair>,
    pub steps: Vec<StepStats>,
    pub chain_consistency: f64,
    pub lm_time: Duration,
    pub flow_time: Duration,
    pub lm_steps: usize,
    pub flow_samples: usize,
}

impl GenerationResult {
    /// Positions and frame count; gaps between tokens come from the later
    /// token's `before`.
    pub fn layout(&self) -> (Vec<usize>, usize) {
        positions_from_durations(&self.durations)
    }

    pub fn decode(&self, codec: &Codec, mode: DecoderMode) -> Result<DecodeOutput> {
        let (p, t) = self.layout();
        codec.decode(&self.latents, &p, t, mode)
    }

    pub fn mean_cosine(&self) -> f64 {
        crate::harness::mean(&self.steps.iter().map(|s| s.cosine).collect::<Vec<_>>())
    }
}

/// Outcome of one rejection round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub cosine: f64,
    /// Every candidate was below the threshold and a retry remains.
    pub resample: bool,
    /// Best candidate is below the threshold.
    pub flagged: bool,
}

/// Argmax cosine (earliest index on ties). With a single candidate there is
/// never a resample.
pub fn rejection_select(cosines: &[f64], theta: f64, retries_left: usize) -> Result<Selection> {
    if cosines.is_empty() {
        return Err(Error::Config("no candidates to select from".into()));
    }
    let mut best = 0;
    for (i, &c) in cosines.iter().enumerate() {
        if c > cosines[best] {
            best = i;
        }
    }
    let below = !(cosines[best] >= theta);
    Ok(Selection {
        index: best,
        cosine: cosines[best],
        resample: below && retries_left > 0 && cosines.len() > 1,
        flagged: below,
    })
}

/// Text-free copy of a context: every token becomes padding, acoustics and
/// modes are kept.
pub fn tfg_negative(steps: &[FusedStep], pad: usize) -> Vec<FusedStep> {
    steps
        .iter()
        .map(|s| FusedStep {
            token: pad,
            ..s.clone()
        })
        .collect()
}

fn step_seed(seed: u64, index: usize, round: usize) -> u64 {
    let mut x = seed ^ 0x243f_6a88_85a3_08d3;
    for v in [index as u64, round as u64] {
        x = (x ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        x ^= x >> 29;
    }
    x
}

fn sample_token(logits: &[f32], temperature: f64, top_k: usize, rng: &mut impl Rng) -> usize {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(top_k.max(1));
    let mx = logits[idx[0]] as f64;
    let w: Vec<f64> = idx
        .iter()
        .map(|&i| ((logits[i] as f64 - mx) / temperature).exp())
        .collect();
    let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
    for (k, &wi) in w.iter().enumerate() {
        if u < wi {
            return idx[k];
        }
        u -= wi;
    }
    idx[idx.len() - 1]
}

struct Branch {
    caches: Vec<KvCache<f32>>,
    len: usize,
}

impl Branch {
    fn new(model: &Backbone) -> Self {
        Self {
            caches: model.new_caches(),
            len: 0,
        }
    }

    fn feed(&mut self, model: &Backbone, steps: &[FusedStep]) -> Result<crate::backbone::BackboneOutput> {
        let out = model.forward_cached(steps, self.len, Some(&mut self.caches))?;
        self.len += steps.len();
        Ok(out)
    }
}

fn last_row(t: &Tensor<f32>) -> Vec<f32> {
    t.row(t.rows() - 1).to_vec()
}

/// Autoregressive generation after `prompt`. Step `j` feeds token `w_j` and
/// the slot of token `j - K`; its condition vector is flow-sampled into the
/// slot of token `j - K + 1`. Padding steps close the sequence.
pub fn generate(
    model: &Backbone,
    head: &SpeakerHead,
    prompt: &Prompt,
    params: &GenerationParams,
) -> Result<GenerationResult> {
    params.validate()?;
    let c = &model.config;
    if params.flow.d != c.d_latent || params.flow.bits != c.bits {
        return Err(Error::Config(
            "flow config does not match the backbone latent layout".into(),
        ));
    }
    if prompt.latents.cols() != c.d_latent || head.d_latent != c.d_latent {
        return Err(Error::Config("prompt latents do not match the backbone".into()));
    }
    let k = c.k;
    let pad = model.pad();
    let la = prompt.tokens.len();
    if la == 0 {
        return Err(Error::Config("empty prompt".into()));
    }
    let mut tokens = prompt.tokens.clone();
    let mut slots: Vec<Vec<f32>> = (0..la)
        .map(|i| model.pack_target(prompt.latents.row(i), prompt.durations[i]))
        .collect::<Result<_>>()?;
    let (mut total, slm) = match &params.mode {
        GenMode::Tts { text } => {
            tokens.extend(text);
            (Some(tokens.len()), None)
        }
        GenMode::Slm {
            max_tokens,
            temperature,
            top_k,
        } => (None, Some((*max_tokens, *temperature, *top_k))),
    };
    if let Some(&w) = tokens.iter().find(|&&w| w >= c.vocab) {
        return Err(Error::OutOfRange(format!("token {w} outside vocabulary")));
    }
    let guided = params.flow.lambda_cfg != 1.0;
    let tfg = guided && params.flow.negative == NegativeMode::TextFree;
    let use_sfg = slm.is_some() && params.lambda_sfg != 1.0;

    let mut pos = Branch::new(model);
    let mut neg = Branch::new(model);
    let mut text_only = Branch::new(model);
    let mut result = GenerationResult {
        tokens: Vec::new(),
        latents: Tensor::zeros(&[0, c.d_latent]),
        durations: Vec::new(),
        steps: Vec::new(),
        chain_consistency: 1.0,
        lm_time: Duration::ZERO,
        flow_time: Duration::ZERO,
        lm_steps: 0,
        flow_samples: 0,
    };
    let mut latents: Vec<f32> = Vec::new();
    let mut token_rng = ChaCha8Rng::seed_from_u64(step_seed(params.seed, usize::MAX, 0));

    let step_at = |j: usize, tokens: &[usize], slots: &[Vec<f32>]| FusedStep {
        token: tokens.get(j).copied().unwrap_or(pad),
        acoustic: if j < k {
            Acoustic::Bos
        } else {
            Acoustic::Packed(slots[j - k].clone())
        },
        mode: Mode::TextSpeech,
    };

    let mut j = 0;
    loop {
        // chunk: prefill up to the first step that needs a generated value
        let end = if j == 0 {
            match total {
                Some(_) => la + k,
                None => la,
            }
        } else {
            j + 1
        };
        let chunk: Vec<FusedStep> = (j..end).map(|i| step_at(i, &tokens, &slots)).collect();
        let t0 = Instant::now();
        let out = pos.feed(model, &chunk)?;
        let c_neg = if tfg {
            Some(last_row(&neg.feed(model, &tfg_negative(&chunk, pad))?.cond))
        } else if guided {
            Some(vec![0f32; c.d_cond])
        } else {
            None
        };
        let z_text = if use_sfg {
            let to: Vec<FusedStep> = chunk.iter().map(|s| FusedStep::text_only(s.token)).collect();
            Some(last_row(&text_only.feed(model, &to)?.logits))
        } else {
            None
        };
        result.lm_time += t0.elapsed();
        result.lm_steps += chunk.len();
        j = end;
        let last = j - 1;

        if let Some((max_tokens, temperature, top_k)) = slm {
            if total.is_none() && last + 1 == tokens.len() {
                let z_ts = last_row(&out.logits);
                let z = match &z_text {
                    Some(zt) => sfg_logits(zt, &z_ts, params.lambda_sfg)?,
                    None => z_ts,
                };
                let w = sample_token(&z, temperature, top_k, &mut token_rng);
                if w != pad {
                    tokens.push(w);
                }
                if w == pad || tokens.len() - la >= max_tokens {
                    total = Some(tokens.len());
                }
                if total == Some(la) {
                    break;
                }
            }
        }

        // slot predicted by the last fed step
        let target = (last + 1).checked_sub(k);
        if let Some(ti) = target.filter(|&ti| ti >= la && total.is_none_or(|n| ti < n)) {
            let t1 = Instant::now();
            let c_pos = Tensor::new(vec![1, c.d_cond], last_row(&out.cond))?;
            let (y, stats) = sample_slot(model, head, prompt, params, &c_pos, c_neg.as_deref(), ti, &mut result)?;
            result.flow_time += t1.elapsed();
            let (s, d) = model.unpack_target(&y)?;
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("sampled latent of token {ti}")));
            }
            slots.push(model.pack_target(&s, d)?);
            latents.extend(&s);
            result.durations.push(d);
            result.steps.push(stats);
            if total == Some(ti + 1) {
                break;
            }
        }
        if j >= c.max_context {
            return Err(Error::OutOfRange(format!(
                "generation exceeded the context of {} steps",
                c.max_context
            )));
        }
    }
    let n = result.durations.len();
    result.tokens = tokens[la..la + n].to_vec();
    result.latents = Tensor::new(vec![n, c.d_latent], latents)?;
    result.chain_consistency = chain_consistency(&result.durations);
    Ok(result)
}

#[allow(clippy::too_many_arguments)]
fn sample_slot(
    model: &Backbone,
    head: &SpeakerHead,
    prompt: &Prompt,
    params: &GenerationParams,
    c_pos: &Tensor<f32>,
    c_neg: Option<&[f32]>,
    index: usize,
    result: &mut GenerationResult,
) -> Result<(Vec<f32>, StepStats)> {
    let r = params.candidates;
    let pos = Tensor::from_rows(&vec![c_pos.row(0).to_vec(); r])?;
    let neg = c_neg.map(|v| Tensor::from_rows(&vec![v.to_vec(); r])).transpose()?;
    let mut best: Option<(Vec<f32>, f64)> = None;
    let mut drawn = 0;
    let mut rounds = 0;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(params.seed, index, rounds));
        let y = model
            .flow
            .sample(&model.store, &pos, neg.as_ref(), &params.flow, &mut rng)?;
        if y.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("flow sample for token {index}")));
        }
        drawn += r;
        rounds += 1;
        result.flow_samples += r;
        let cos = if r > 1 {
            let mut s = Vec::with_capacity(r * model.config.d_latent);
            for i in 0..r {
                s.extend(model.unpack_target(y.row(i))?.0);
            }
            head.cosines(&Tensor::new(vec![r, model.config.d_latent], s)?, &prompt.reference)?
        } else {
            let (s, _) = model.unpack_target(y.row(0))?;
            head.cosines(&Tensor::new(vec![1, model.config.d_latent], s)?, &prompt.reference)?
        };
        let sel = rejection_select(&cos, params.theta, params.max_resample + 1 - rounds)?;
        if best.as_ref().is_none_or(|b| sel.cosine > b.1) {
            best = Some((y.row(sel.index).to_vec(), sel.cosine));
        }
        if !sel.resample {
            break;
        }
    }
    let (y, cosine) = best.expect("at least one round");
    Ok((
        y,
        StepStats {
            candidates: drawn,
            rounds,
            cosine,
            flagged: !(cosine >= params.theta),
        },
    ))
}

/// Segment-by-segment streaming decode of a generation result. Returns one
/// emission per token (the last one includes the trailing frames) and the
/// peak cache size.
pub fn stream_synthesize(codec: &Codec, result: &GenerationResult) -> Result<(Vec<DecodeOutput>, usize)> {
    let (p, t) = result.layout();
    if p.is_empty() {
        return Err(Error::Config("nothing to synthesize".into()));
    }
    let mut session = StreamingSession::new(codec);
    let mut out = Vec::with_capacity(p.len() + 1);
    let mut prev = 0;
    for (i, &q) in p.iter().enumerate() {
        out.push(session.push_segment(result.latents.row(i), q - prev)?);
        prev = q;
    }
    if t > prev {
        let tail = session.finish(t - prev)?;
        out.last_mut().expect("at least one token").extend(&tail);
    }
    Ok((out, session.peak_cache()))
}
