//! Full training loop on a synthetic corpus and the held-out evaluation.

use std::time::Instant;

use rayon::prelude::*;

use super::corpus::{Templates, Utterance};
use super::manifest::Corpus;
use super::metrics::{corpus_error_rate, cosine, mean, std_dev, MetricsReport};
use super::oracle::oracle_decode;
use crate::aligner::{filter_alignment, train_aligner, AlignerConfig, CtcAligner, FilterConfig, TrainExample};
use crate::backbone::{train_backbone, train_text_lm, Backbone, BackboneConfig, LmTrainConfig, LmUtterance};
use crate::codec::{train_codec, Codec, CodecConfig, CodecExample, CodecTrainConfig, CodecTrainMode, DecoderMode};
use crate::durbits::durations_from_positions;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pipeline::{
    generate, prepare_prompt, prompt_from_positions, GenMode, GenerationParams, GenerationResult, Prompt,
    SpeakerExample, SpeakerHead,
};

/// One synthesized utterance ready for scoring.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub target_tokens: Vec<usize>,
    pub prompt_speaker: usize,
    /// Synthesized frame features `[T, d_a]`.
    pub features: Tensor<f32>,
    pub chain_consistency: f64,
}

/// Token error rate, speaker cosine and chain consistency of `items`.
pub fn evaluate(templates: &Templates, items: &[EvalItem]) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    if let Some(it) = items.iter().find(|it| it.prompt_speaker >= templates.speaker.len()) {
        return Err(Error::OutOfRange(format!(
            "speaker {} not in the template bank",
            it.prompt_speaker
        )));
    }
    let decoded: Vec<_> = items
        .par_iter()
        .map(|it| oracle_decode(templates, &it.features))
        .collect();
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = decoded
        .iter()
        .zip(items)
        .map(|(d, it)| (d.tokens.clone(), it.target_tokens.clone()))
        .collect();
    let cos: Vec<f64> = decoded
        .iter()
        .zip(items)
        .map(|(d, it)| cosine(&d.speaker_estimate, &templates.speaker[it.prompt_speaker]))
        .collect();
    Ok(MetricsReport {
        token_error_rate: Some(corpus_error_rate(&pairs)),
        speaker_cosine: Some(mean(&cos)),
        chain_consistency: Some(mean(&items.iter().map(|i| i.chain_consistency).collect::<Vec<_>>())),
        ..Default::default()
    })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub aligner: AlignerConfig,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub stream_steps: u64,
    pub backbone: BackboneConfig,
    pub base_steps: u64,
    pub base_batch: usize,
    pub base_lr: f64,
    pub lm_train: LmTrainConfig,
    pub speaker_steps: u64,
    pub filter: FilterConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            aligner: AlignerConfig {
                steps: 2000,
                ..Default::default()
            },
            codec: CodecConfig::default(),
            codec_train: CodecTrainConfig::default(),
            stream_steps: 600,
            backbone: BackboneConfig::default(),
            base_steps: 600,
            base_batch: 16,
            base_lr: 2e-3,
            lm_train: LmTrainConfig::default(),
            speaker_steps: 400,
            filter: FilterConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Models {
    pub aligner: CtcAligner,
    pub codec: Codec,
    pub base: Backbone,
    pub lm: Backbone,
    pub head: SpeakerHead,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub models: Models,
    /// `(stage, seconds)`
    pub timings: Vec<(String, f64)>,
    /// Training utterances whose aligner output was filtered out.
    pub dropped: usize,
}

/// Fraction of tokens whose aligned position is within `tol` frames of the
/// corpus ground truth.
pub fn alignment_accuracy(aligner: &CtcAligner, corpus: &Corpus, tol: usize) -> Result<f64> {
    let per: Vec<(usize, usize)> = corpus
        .utterances
        .par_iter()
        .map(|u| {
            let a = aligner.align(&u.features, &u.tokens)?;
            let ok = a
                .positions
                .iter()
                .zip(&u.positions)
                .filter(|(x, y)| x.abs_diff(**y) <= tol)
                .count();
            Ok((ok, u.tokens.len()))
        })
        .collect::<Result<_>>()?;
    let (ok, n) = per.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(if n == 0 { 1.0 } else { ok as f64 / n as f64 })
}

/// Trains aligner, codec (joint then streaming decoder), base text LM,
/// backbone and speaker head. Codec and LM data use aligner positions.
pub fn train_pipeline(train: &Corpus, config: &PipelineConfig, mut progress: impl FnMut(&str)) -> Result<TrainOutcome> {
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let examples: Vec<TrainExample> = train
        .utterances
        .iter()
        .map(|u| TrainExample {
            frames: u.features.clone(),
            tokens: u.tokens.clone(),
        })
        .collect();
    let (aligner, _) = train_aligner(&examples, config.aligner.clone(), |s, l| {
        if s % 100 == 0 {
            progress(&format!("align step {s} loss {l:.4}"));
        }
    })?;
    lap("train_aligner", &mut timings);

    let aligned: Vec<Option<Vec<usize>>> = train
        .utterances
        .par_iter()
        .map(|u| {
            let a = aligner.align(&u.features, &u.tokens)?;
            Ok(filter_alignment(&a.positions, u.frames(), &config.filter)
                .is_keep()
                .then_some(a.positions))
        })
        .collect::<Result<_>>()?;
    let kept: Vec<(&super::corpus::Utterance, Vec<usize>)> = train
        .utterances
        .iter()
        .zip(aligned)
        .filter_map(|(u, p)| p.map(|p| (u, p)))
        .collect();
    let dropped = train.utterances.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::InvalidAlignment("every training alignment was filtered".into()));
    }
    lap("align_corpus", &mut timings);

    let codec_examples: Vec<CodecExample> = kept
        .iter()
        .map(|(u, p)| CodecExample {
            features: u.features.clone(),
            signal: u.signal.clone(),
            tokens: u.tokens.clone(),
            p: p.clone(),
        })
        .collect();
    let codec = train_codec_stages(&codec_examples, config, &mut progress)?;
    lap("train_codec", &mut timings);

    let lm_data = lm_corpus(&codec, kept.iter().map(|(u, p)| (*u, p.as_slice())))?;
    lap("encode_corpus", &mut timings);

    let transcripts: Vec<&[usize]> = lm_data.iter().map(|u| u.tokens.as_slice()).collect();
    let base = train_base_lm(&transcripts, config, &mut progress)?;
    lap("train_base_lm", &mut timings);

    let lm_cfg = LmTrainConfig {
        seed: config.seed,
        ..config.lm_train.clone()
    };
    let (lm, _) = train_backbone(&base, &lm_data, &lm_cfg, |s, r| {
        if s % 200 == 0 {
            progress(&format!(
                "backbone step {s} flow {:.4} ce {:.4} kd {:.4}",
                r.flow, r.ce, r.kd
            ));
        }
    })?;
    lap("train_backbone", &mut timings);

    let head = train_speaker_head(&train.templates, &lm_data, config)?;
    lap("train_speaker_head", &mut timings);

    Ok(TrainOutcome {
        models: Models {
            aligner,
            codec,
            base,
            lm,
            head,
        },
        timings,
        dropped,
    })
}

/// Joint encoder/decoder training followed by the streaming decoder stage.
pub fn train_codec_stages(
    examples: &[CodecExample],
    config: &PipelineConfig,
    mut progress: impl FnMut(&str),
) -> Result<Codec> {
    let mut codec = Codec::new(config.codec.clone());
    let joint = CodecTrainConfig {
        mode: CodecTrainMode::Joint,
        seed: config.seed,
        ..config.codec_train.clone()
    };
    train_codec(&mut codec, examples, &joint, |s, l| {
        if s % 200 == 0 {
            progress(&format!("codec step {s} loss {l:.4}"));
        }
    })?;
    let stream = CodecTrainConfig {
        mode: CodecTrainMode::StreamingFrozenEncoder,
        steps: config.stream_steps,
        seed: config.seed + 1,
        ..config.codec_train.clone()
    };
    train_codec(&mut codec, examples, &stream, |s, l| {
        if s % 200 == 0 {
            progress(&format!("stream decoder step {s} loss {l:.4}"));
        }
    })?;
    Ok(codec)
}

/// Encodes aligned utterances into backbone training sequences.
pub fn lm_corpus<'a>(
    codec: &Codec,
    aligned: impl Iterator<Item = (&'a Utterance, &'a [usize])>,
) -> Result<Vec<LmUtterance>> {
    let aligned: Vec<_> = aligned.collect();
    aligned
        .par_iter()
        .map(|&(u, p)| {
            Ok(LmUtterance {
                tokens: u.tokens.clone(),
                latents: codec.encode(&u.features, p)?,
                durations: durations_from_positions(p, u.frames())?,
                speaker: u.speaker,
            })
        })
        .collect()
}

/// Text-only language model on consecutive pairs of concatenated transcripts.
pub fn train_base_lm(
    transcripts: &[&[usize]],
    config: &PipelineConfig,
    mut progress: impl FnMut(&str),
) -> Result<Backbone> {
    let mut base = Backbone::new(config.backbone.clone())?;
    let texts: Vec<Vec<usize>> = transcripts.chunks(2).map(|c| c.concat()).collect();
    train_text_lm(
        &mut base,
        &texts,
        config.base_steps,
        config.base_batch,
        config.base_lr,
        config.seed,
        |s, l| {
            if s % 200 == 0 {
                progress(&format!("base lm step {s} loss {l:.4}"));
            }
        },
    )?;
    Ok(base)
}

/// Speaker head regressing latents onto the template speaker vectors.
pub fn train_speaker_head(templates: &Templates, data: &[LmUtterance], config: &PipelineConfig) -> Result<SpeakerHead> {
    let d_latent = data.first().map_or(config.codec.d_latent, |u| u.latents.cols());
    let mut head = SpeakerHead::new(d_latent, 64, templates.config.d_a, config.seed + 2);
    let spk: Vec<SpeakerExample> = data
        .iter()
        .map(|u| {
            let target = templates
                .speaker
                .get(u.speaker)
                .ok_or_else(|| Error::OutOfRange(format!("speaker {} not in the template bank", u.speaker)))?;
            Ok(SpeakerExample {
                latents: u.latents.clone(),
                target: target.iter().map(|&v| v as f32).collect(),
            })
        })
        .collect::<Result<_>>()?;
    head.train(
        &spk,
        config.speaker_steps,
        16,
        3e-3,
        config.codec_train.k_sigma,
        config.seed,
    )?;
    Ok(head)
}

/// Models needed at synthesis time. Without an aligner, prompts use the
/// corpus positions.
#[derive(Clone, Copy, Debug)]
pub struct Voice<'a> {
    pub lm: &'a Backbone,
    pub codec: &'a Codec,
    pub head: &'a SpeakerHead,
    pub aligner: Option<&'a CtcAligner>,
}

impl Models {
    pub fn voice(&self) -> Voice<'_> {
        Voice {
            lm: &self.lm,
            codec: &self.codec,
            head: &self.head,
            aligner: Some(&self.aligner),
        }
    }
}

impl Voice<'_> {
    pub fn prompt(&self, u: &Utterance, filter: &FilterConfig) -> Result<Prompt> {
        match self.aligner {
            Some(a) => prepare_prompt(&u.features, &u.tokens, a, self.codec, self.head, filter),
            None => prompt_from_positions(&u.features, &u.tokens, &u.positions, self.codec, self.head),
        }
    }
}

/// Prompt/target pairs: each held-out utterance prompts the text of the next
/// held-out utterance of the same speaker (wrapping around).
pub fn tts_pairs(corpus: &Corpus, n: usize) -> Vec<(usize, usize)> {
    let u = &corpus.utterances;
    (0..n.min(u.len()))
        .filter_map(|i| {
            (1..u.len())
                .map(|k| (i + k) % u.len())
                .find(|&j| u[j].speaker == u[i].speaker)
                .map(|j| (i, j))
        })
        .collect()
}

/// Runs TTS for every pair with `params` (seed offset by the pair index) and
/// scores the joint-decoder output.
pub fn run_tts(
    voice: Voice<'_>,
    corpus: &Corpus,
    pairs: &[(usize, usize)],
    params: &GenerationParams,
    filter: &FilterConfig,
) -> Result<(MetricsReport, Vec<GenerationResult>)> {
    let u = &corpus.utterances;
    let out: Vec<(EvalItem, GenerationResult)> = pairs
        .par_iter()
        .enumerate()
        .map(|(k, &(a, b))| {
            let prompt = voice.prompt(&u[a], filter)?;
            let p = GenerationParams {
                mode: GenMode::Tts {
                    text: u[b].tokens.clone(),
                },
                seed: params.seed.wrapping_add(k as u64),
                ..params.clone()
            };
            let res = generate(voice.lm, voice.head, &prompt, &p)?;
            let dec = res.decode(voice.codec, DecoderMode::Joint)?;
            Ok((
                EvalItem {
                    target_tokens: u[b].tokens.clone(),
                    prompt_speaker: u[a].speaker,
                    features: dec.features,
                    chain_consistency: res.chain_consistency,
                },
                res,
            ))
        })
        .collect::<Result<_>>()?;
    let (items, results): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    let mut report = evaluate(&corpus.templates, &items)?;
    report.push(
        "head_cosine",
        mean(&results.iter().map(|r| r.mean_cosine()).collect::<Vec<_>>()),
    );
    Ok((report, results))
}

/// Per-component wall time for each `N_FM` in `nfms`, measured `runs` times
/// on a single worker: prompt preparation (`align_s`), per LM step, per flow
/// sample and joint decoding (`decode_s`), plus LM steps per second.
/// `flow_monotone` is 1 when the mean flow time strictly grows with `N_FM`.
pub fn benchmark(
    voice: Voice<'_>,
    corpus: &Corpus,
    pairs: &[(usize, usize)],
    params: &GenerationParams,
    nfms: &[usize],
    runs: usize,
    filter: &FilterConfig,
) -> Result<MetricsReport> {
    if pairs.is_empty() || runs == 0 || nfms.is_empty() {
        return Err(Error::Config("benchmark needs pairs, runs and step counts".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("benchmark worker: {e}")))?;
    pool.install(|| bench_single(voice, corpus, pairs, params, nfms, runs, filter))
}

fn bench_single(
    voice: Voice<'_>,
    corpus: &Corpus,
    pairs: &[(usize, usize)],
    params: &GenerationParams,
    nfms: &[usize],
    runs: usize,
    filter: &FilterConfig,
) -> Result<MetricsReport> {
    let u = &corpus.utterances;
    let t0 = Instant::now();
    let prompts: Vec<_> = pairs
        .iter()
        .map(|&(a, _)| voice.prompt(&u[a], filter))
        .collect::<Result<_>>()?;
    let mut report = MetricsReport::default();
    report.push_timing("align_s", t0.elapsed().as_secs_f64() / pairs.len() as f64);
    let mut flow_means = Vec::new();
    for &nfm in nfms {
        let mut flow = Vec::with_capacity(runs);
        let mut lm = Vec::with_capacity(runs);
        let mut dec = Vec::with_capacity(runs);
        let mut rate = Vec::with_capacity(runs);
        for run in 0..runs {
            let (mut ft, mut lt, mut dt, mut fs, mut ls, mut wall) = (0.0, 0.0, 0.0, 0usize, 0usize, 0.0);
            for (k, (prompt, &(_, b))) in prompts.iter().zip(pairs).enumerate() {
                let mut p = params.clone();
                p.flow.steps = nfm;
                p.mode = GenMode::Tts {
                    text: u[b].tokens.clone(),
                };
                p.seed = params.seed.wrapping_add((run * pairs.len() + k) as u64);
                let t0 = Instant::now();
                let r = generate(voice.lm, voice.head, prompt, &p)?;
                wall += t0.elapsed().as_secs_f64();
                let t1 = Instant::now();
                r.decode(voice.codec, DecoderMode::Joint)?;
                dt += t1.elapsed().as_secs_f64();
                ft += r.flow_time.as_secs_f64();
                lt += r.lm_time.as_secs_f64();
                fs += r.flow_samples;
                ls += r.lm_steps;
            }
            flow.push(ft / fs.max(1) as f64);
            lm.push(lt / ls.max(1) as f64);
            dec.push(dt / pairs.len() as f64);
            rate.push(ls as f64 / wall.max(1e-12));
        }
        report.push_timing(format!("flow_sample_s_nfm{nfm}"), mean(&flow));
        report.push_timing(format!("flow_sample_std_nfm{nfm}"), std_dev(&flow));
        report.push_timing(format!("lm_step_s_nfm{nfm}"), mean(&lm));
        report.push_timing(format!("lm_step_std_nfm{nfm}"), std_dev(&lm));
        report.push_timing(format!("decode_s_nfm{nfm}"), mean(&dec));
        report.push(format!("steps_per_sec_nfm{nfm}"), mean(&rate));
        flow_means.push(mean(&flow));
    }
    let monotone = flow_means.windows(2).all(|w| w[1] > w[0]);
    report.push("flow_monotone", if monotone { 1.0 } else { 0.0 });
    Ok(report)
}
