use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use tada_core::aligner::{read_cache, train_aligner, write_cache, CacheRecord, CtcAligner, FilterConfig, TrainExample};
use tada_core::backbone::{train_backbone, Backbone, LmTrainConfig};
use tada_core::codec::{Codec, CodecExample, DecoderMode};
use tada_core::durbits::exhaustive_check;
use tada_core::error::{Error, Result};
use tada_core::flowhead::{flow_oracle_error, NegativeMode};
use tada_core::harness::{
    alignment_accuracy, benchmark, feature_key, lm_corpus, mean, oracle_decode, run_tts, signal_key, token_error_rate,
    train_base_lm, train_codec_stages, train_pipeline, train_speaker_head, tts_pairs, write_synth_config, Corpus,
    ManifestRecord, PipelineConfig, SynthConfig, Utterance, Voice,
};
use tada_core::masks::{decoder_stream_mask, encoder_mask, render_grid, StreamVariant};
use tada_core::numerics::Checkpoint;
use tada_core::pipeline::{generate, GenMode, GenerationParams, SpeakerHead};

#[derive(Parser)]
#[command(name = "tada", version, about = "Text-acoustic dual alignment toolkit")]
struct Cli {
    /// Seed overriding the configured ones.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file with `[synth]` and `[pipeline]` tables overriding defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (manifest.jsonl + corpus.tada).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        first_id: u32,
    },
    /// Train the CTC aligner.
    AlignTrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Write the alignment cache for every utterance of a manifest.
    Align {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the codec (joint stage, then the streaming decoder).
    CodecTrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        stream_steps: Option<u64>,
        /// Alignment cache to use instead of the manifest positions.
        #[arg(long)]
        alignments: Option<PathBuf>,
    },
    /// Encode and decode one utterance and print reconstruction metrics.
    CodecRoundtrip {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        utt: u32,
    },
    /// Train the text-only base language model.
    BaseLmTrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Train the speech-text backbone and the speaker head.
    LmTrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long = "base-lm")]
        base_lm: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        alignments: Option<PathBuf>,
    },
    /// Synthesize speech for a text given a prompt utterance.
    Synth {
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Utterance id of the prompt.
        #[arg(long)]
        prompt: u32,
        /// Space- or comma-separated token ids; without it the model writes its own text.
        #[arg(long)]
        text: Option<String>,
        #[arg(long, default_value_t = 16)]
        max_tokens: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        top_k: usize,
        /// Aligner checkpoint for the prompt; the manifest positions are used otherwise.
        #[arg(long)]
        aligner: Option<PathBuf>,
        #[command(flatten)]
        gen: GenArgs,
        /// Id of the generated record.
        #[arg(long, default_value_t = 1_000_000)]
        id: u32,
        /// Array file for the generated frames; the record goes next to it as `.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// TTS evaluation over prompt/target pairs of a held-out manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        aligner: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        #[command(flatten)]
        gen: GenArgs,
    },
    /// Component timings for several flow step counts.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        aligner: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2,4,10,20")]
        steps: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long, default_value_t = 8)]
        pairs: usize,
        #[command(flatten)]
        gen: GenArgs,
    },
    /// Euler sampler wall time and error against the exact flow of a narrow Gaussian.
    FmBench {
        #[arg(long, value_delimiter = ',', default_value = "2,4,10,20")]
        steps: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        trials: usize,
    },
    /// Exhaustive gray-code checks.
    Graycheck {
        #[arg(long, default_value_t = 8)]
        b: usize,
    },
    /// Print an attention mask as an ASCII grid.
    Mask {
        #[arg(long, value_delimiter = ',')]
        p: Vec<usize>,
        #[arg(long)]
        t: usize,
        #[arg(long, value_enum)]
        which: Which,
        #[arg(long)]
        strict: bool,
    },
    /// Train every stage on a fresh corpus and evaluate on held-out prompts.
    E2e {
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        /// Directory for the trained checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Enc,
    Dec,
}

#[derive(Clone, Copy, ValueEnum)]
enum Neg {
    Zero,
    Tfg,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 10)]
    nfm: usize,
    #[arg(long, default_value_t = 1.8)]
    cfg: f64,
    #[arg(long, value_enum, default_value = "tfg")]
    neg: Neg,
    /// Candidates per step for speaker rejection sampling.
    #[arg(long, default_value_t = 1)]
    reject: usize,
    #[arg(long, default_value_t = 0.7)]
    theta: f64,
    #[arg(long, default_value_t = 1.0)]
    sfg: f64,
}

impl GenArgs {
    fn params(&self, mode: GenMode, seed: u64, d: usize, bits: usize) -> GenerationParams {
        let mut p = GenerationParams::tts(Vec::new());
        p.flow.steps = self.nfm;
        p.flow.lambda_cfg = self.cfg;
        p.flow.negative = match self.neg {
            Neg::Zero => NegativeMode::Zero,
            Neg::Tfg => NegativeMode::TextFree,
        };
        p.flow.d = d;
        p.flow.bits = bits;
        p.candidates = self.reject;
        p.theta = self.theta;
        p.lambda_sfg = self.sfg;
        p.mode = mode;
        p.seed = seed;
        p
    }
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    synth: SynthConfig,
    pipeline: PipelineConfig,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn status(msg: &str) {
    eprintln!("{msg}");
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn parse_tokens(text: &str) -> Result<Vec<usize>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("bad token id `{s}`"))))
        .collect()
}

/// Utterances with the positions to train on: the manifest's own, or the
/// cache's when given (utterances missing from the cache or failing the
/// filter are skipped).
fn aligned_set<'a>(
    corpus: &'a Corpus,
    cache: Option<&Path>,
    filter: &FilterConfig,
) -> Result<Vec<(&'a Utterance, Vec<usize>)>> {
    let Some(cache) = cache else {
        return Ok(corpus.utterances.iter().map(|u| (u, u.positions.clone())).collect());
    };
    let records = read_cache(cache)?;
    let mut out = Vec::new();
    for r in records {
        let Some(u) = corpus.get(r.id) else { continue };
        if r.t != u.frames() || r.positions.len() != u.tokens.len() {
            return Err(Error::InvalidAlignment(format!(
                "cache record {} does not match the manifest",
                r.id
            )));
        }
        if tada_core::aligner::filter_alignment(&r.positions, r.t, filter).is_keep() {
            out.push((u, r.positions));
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidAlignment("no usable alignments in the cache".into()));
    }
    Ok(out)
}

struct Loaded {
    lm: Backbone,
    head: SpeakerHead,
    codec: Codec,
    aligner: Option<CtcAligner>,
}

impl Loaded {
    fn load(lm: &Path, codec: &Path, aligner: Option<&Path>) -> Result<Self> {
        let ck = load_ckpt(lm)?;
        Ok(Self {
            lm: Backbone::from_checkpoint(&ck)?,
            head: SpeakerHead::from_checkpoint(&ck)?,
            codec: Codec::from_checkpoint(&load_ckpt(codec)?)?,
            aligner: aligner
                .map(|p| load_ckpt(p).and_then(|c| CtcAligner::from_checkpoint(&c)))
                .transpose()?,
        })
    }

    fn voice(&self) -> Voice<'_> {
        Voice {
            lm: &self.lm,
            codec: &self.codec,
            head: &self.head,
            aligner: self.aligner.as_ref(),
        }
    }

    fn params(&self, gen: &GenArgs, mode: GenMode, seed: u64) -> GenerationParams {
        gen.params(mode, seed, self.lm.config.d_latent, self.lm.config.bits)
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.synth.seed = s;
        cfg.pipeline.seed = s;
    }
    let pc = &mut cfg.pipeline;
    let seed = cli.seed.unwrap_or(0);

    match cli.command {
        Command::GenData { out, count, first_id } => {
            let corpus = Corpus::generate(&cfg.synth, first_id, count)?;
            let path = corpus.write(&out)?;
            println!("manifest={} utterances={count}", path.display());
        }
        Command::AlignTrain { manifest, out, steps } => {
            let corpus = Corpus::load(&manifest)?;
            if let Some(s) = steps {
                pc.aligner.steps = s;
            }
            pc.aligner.seed = pc.seed;
            let examples: Vec<TrainExample> = corpus
                .utterances
                .iter()
                .map(|u| TrainExample {
                    frames: u.features.clone(),
                    tokens: u.tokens.clone(),
                })
                .collect();
            let (aligner, _) = train_aligner(&examples, pc.aligner.clone(), |s, l| {
                if s % 100 == 0 {
                    status(&format!("align step {s} loss {l:.4}"));
                }
            })?;
            aligner.to_checkpoint().save(&out)?;
            println!("within1={:.6}", alignment_accuracy(&aligner, &corpus, 1)?);
        }
        Command::Align { manifest, model, out } => {
            use rayon::prelude::*;
            let corpus = Corpus::load(&manifest)?;
            let aligner = CtcAligner::from_checkpoint(&load_ckpt(&model)?)?;
            let records: Vec<CacheRecord> = corpus
                .utterances
                .par_iter()
                .map(|u| {
                    Ok(CacheRecord {
                        id: u.id,
                        t: u.frames(),
                        positions: aligner.align(&u.features, &u.tokens)?.positions,
                    })
                })
                .collect::<Result<_>>()?;
            write_cache(&out, &records)?;
            let (mut ok, mut n, mut kept) = (0, 0, 0);
            for (r, u) in records.iter().zip(&corpus.utterances) {
                ok += r
                    .positions
                    .iter()
                    .zip(&u.positions)
                    .filter(|(a, b)| a.abs_diff(**b) <= 1)
                    .count();
                n += u.tokens.len();
                kept += tada_core::aligner::filter_alignment(&r.positions, r.t, &pc.filter).is_keep() as usize;
            }
            println!(
                "utterances={} kept={kept} within1={:.6}",
                records.len(),
                ok as f64 / n.max(1) as f64
            );
        }
        Command::CodecTrain {
            manifest,
            out,
            steps,
            stream_steps,
            alignments,
        } => {
            let corpus = Corpus::load(&manifest)?;
            if let Some(s) = steps {
                pc.codec_train.steps = s;
            }
            if let Some(s) = stream_steps {
                pc.stream_steps = s;
            }
            pc.codec.d_a = corpus.templates.config.d_a;
            pc.codec.r = corpus.templates.config.r;
            pc.codec.vocab = corpus.templates.config.vocab;
            let examples: Vec<CodecExample> = aligned_set(&corpus, alignments.as_deref(), &pc.filter)?
                .into_iter()
                .map(|(u, p)| CodecExample {
                    features: u.features.clone(),
                    signal: u.signal.clone(),
                    tokens: u.tokens.clone(),
                    p,
                })
                .collect();
            let codec = train_codec_stages(&examples, pc, status)?;
            codec.to_checkpoint().save(&out)?;
            println!("utterances={}", examples.len());
        }
        Command::CodecRoundtrip { ckpt, manifest, utt } => {
            let corpus = Corpus::load(&manifest)?;
            let u = corpus
                .get(utt)
                .ok_or_else(|| Error::Config(format!("no utterance {utt} in the manifest")))?;
            let codec = Codec::from_checkpoint(&load_ckpt(&ckpt)?)?;
            let s = codec.encode(&u.features, &u.positions)?;
            let t = u.frames();
            let joint = codec.decode(&s, &u.positions, t, DecoderMode::Joint)?;
            let stream = codec.decode(&s, &u.positions, t, DecoderMode::Streaming)?;
            let mse = |a: &[f32], b: &[f32]| {
                a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len().max(1) as f64
            };
            let ter = |f| token_error_rate(&oracle_decode(&corpus.templates, f).tokens, &u.tokens);
            println!(
                "utt={utt} frames={t} tokens={} feature_mse_joint={:.6} feature_mse_stream={:.6} signal_mse_joint={:.6} ter_joint={:.6} ter_stream={:.6}",
                u.tokens.len(),
                mse(joint.features.data(), u.features.data()),
                mse(stream.features.data(), u.features.data()),
                mse(joint.signal.data(), u.signal.data()),
                ter(&joint.features),
                ter(&stream.features),
            );
        }
        Command::BaseLmTrain { manifest, out, steps } => {
            let corpus = Corpus::load(&manifest)?;
            if let Some(s) = steps {
                pc.base_steps = s;
            }
            pc.backbone.vocab = corpus.templates.config.vocab;
            let texts: Vec<&[usize]> = corpus.utterances.iter().map(|u| u.tokens.as_slice()).collect();
            let base = train_base_lm(&texts, pc, status)?;
            base.to_checkpoint().save(&out)?;
            println!("sequences={}", texts.len().div_ceil(2));
        }
        Command::LmTrain {
            manifest,
            codec,
            base_lm,
            out,
            k,
            dropout,
            steps,
            alignments,
        } => {
            let corpus = Corpus::load(&manifest)?;
            let codec = Codec::from_checkpoint(&load_ckpt(&codec)?)?;
            let mut base = Backbone::from_checkpoint(&load_ckpt(&base_lm)?)?;
            if let Some(k) = k {
                base.config.k = k;
                base.config.validate()?;
            }
            let lm_cfg = LmTrainConfig {
                steps: steps.unwrap_or(pc.lm_train.steps),
                dropout: dropout.unwrap_or(pc.lm_train.dropout),
                seed: pc.seed,
                ..pc.lm_train.clone()
            };
            let set = aligned_set(&corpus, alignments.as_deref(), &pc.filter)?;
            let data = lm_corpus(&codec, set.iter().map(|(u, p)| (*u, p.as_slice())))?;
            let t0 = Instant::now();
            let (lm, report) = train_backbone(&base, &data, &lm_cfg, |s, r| {
                if s % 200 == 0 {
                    status(&format!(
                        "backbone step {s} flow {:.4} ce {:.4} kd {:.4}",
                        r.flow, r.ce, r.kd
                    ));
                }
            })?;
            let head = train_speaker_head(&corpus.templates, &data, pc)?;
            let mut ck = lm.to_checkpoint();
            ck.merge(head.to_checkpoint());
            ck.save(&out)?;
            let tail = &report.losses[report.losses.len().saturating_sub(50)..];
            println!(
                "sequences={} final_loss={:.6} seconds={:.1}",
                data.len(),
                mean(&tail.iter().map(|r| r.total).collect::<Vec<_>>()),
                t0.elapsed().as_secs_f64()
            );
        }
        Command::Synth {
            lm,
            codec,
            manifest,
            prompt,
            text,
            max_tokens,
            temperature,
            top_k,
            aligner,
            gen,
            id,
            out,
        } => {
            let corpus = Corpus::load(&manifest)?;
            let m = Loaded::load(&lm, &codec, aligner.as_deref())?;
            let u = corpus
                .get(prompt)
                .ok_or_else(|| Error::Config(format!("no utterance {prompt} in the manifest")))?;
            let mode = match text {
                Some(t) => GenMode::Tts {
                    text: parse_tokens(&t)?,
                },
                None => GenMode::Slm {
                    max_tokens,
                    temperature,
                    top_k,
                },
            };
            let p = m.params(&gen, mode, seed);
            let pr = m.voice().prompt(u, &pc.filter)?;
            let res = generate(&m.lm, &m.head, &pr, &p)?;
            let dec = res.decode(&m.codec, DecoderMode::Joint)?;
            let (positions, t) = res.layout();
            let heard = oracle_decode(&corpus.templates, &dec.features);
            if let Some(out) = out {
                let name = out
                    .file_name()
                    .and_then(|n| n.to_str())
                    .ok_or_else(|| Error::Config("--out needs a file name".into()))?
                    .to_string();
                let mut arrays = Checkpoint::new();
                write_synth_config(&mut arrays, &corpus.templates.config);
                arrays.insert(feature_key(id), dec.features.clone());
                arrays.insert(signal_key(id), dec.signal.clone());
                arrays.save(&out)?;
                let record = ManifestRecord {
                    id,
                    speaker: u.speaker,
                    tokens: res.tokens.clone(),
                    p: positions.clone(),
                    t,
                    arrays: name,
                };
                let line = serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?;
                let rec_path = out.with_extension("jsonl");
                std::fs::write(&rec_path, format!("{line}\n"))
                    .map_err(|e| Error::Config(format!("{}: {e}", rec_path.display())))?;
            }
            println!(
                "tokens={} frames={t} chain_consistency={:.6} speaker_cosine={:.6} oracle_ter={:.6}",
                res.tokens.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
                res.chain_consistency,
                res.mean_cosine(),
                token_error_rate(&heard.tokens, &res.tokens),
            );
        }
        Command::Eval {
            manifest,
            lm,
            codec,
            aligner,
            pairs,
            gen,
        } => {
            let corpus = Corpus::load(&manifest)?;
            let m = Loaded::load(&lm, &codec, aligner.as_deref())?;
            let pairs = tts_pairs(&corpus, pairs);
            let p = m.params(&gen, GenMode::Tts { text: vec![0] }, seed);
            let (report, _) = run_tts(m.voice(), &corpus, &pairs, &p, &pc.filter)?;
            print!("{}", report.to_lines());
        }
        Command::Bench {
            manifest,
            lm,
            codec,
            aligner,
            steps,
            runs,
            pairs,
            gen,
        } => {
            let corpus = Corpus::load(&manifest)?;
            let m = Loaded::load(&lm, &codec, aligner.as_deref())?;
            let pairs = tts_pairs(&corpus, pairs);
            let p = m.params(&gen, GenMode::Tts { text: vec![0] }, seed);
            let report = benchmark(m.voice(), &corpus, &pairs, &p, &steps, runs, &pc.filter)?;
            print!("{}", report.to_lines());
            if report.get("flow_monotone") != Some(1.0) {
                eprintln!("warning: flow time does not grow with the step count");
            }
        }
        Command::FmBench { steps, trials } => {
            if steps.is_empty() || steps.contains(&0) || trials == 0 {
                return Err(Error::Config("fm-bench needs positive step counts and trials".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cases: Vec<(Vec<f64>, Vec<f64>)> = (0..trials)
                .map(|_| {
                    let start = (0..24).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
                    let target = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
                    (start, target)
                })
                .collect();
            for &n in &steps {
                let t0 = Instant::now();
                let errs: Vec<f64> = cases
                    .iter()
                    .map(|(s, m)| flow_oracle_error(s, m, 0.2, n, 1e-5))
                    .collect::<Result<_>>()?;
                let per_step = t0.elapsed().as_secs_f64() / (n * trials) as f64;
                println!("steps={n} step_time_s={per_step:.9} oracle_error={:.6}", mean(&errs));
            }
        }
        Command::Graycheck { b } => {
            let n = exhaustive_check(b)?;
            println!("bits={b} values={n} ok=1");
        }
        Command::Mask { p, t, which, strict } => {
            let mask = match which {
                Which::Enc => encoder_mask(&p, t)?,
                Which::Dec => {
                    let v = if strict {
                        StreamVariant::Strict
                    } else {
                        StreamVariant::SelfInclusive
                    };
                    decoder_stream_mask(&p, t, v)?
                }
            };
            print!("{}", render_grid(&mask, &p));
        }
        Command::E2e {
            train,
            test,
            pairs,
            out,
        } => {
            let t0 = Instant::now();
            let train_set = Corpus::generate(&cfg.synth, 0, train)?;
            let test_set = Corpus::generate(&cfg.synth, 1_000_000, test)?;
            let outcome = train_pipeline(&train_set, pc, status)?;
            let total = t0.elapsed().as_secs_f64();
            let models = &outcome.models;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
                models.aligner.to_checkpoint().save(dir.join("aligner.tada"))?;
                models.codec.to_checkpoint().save(dir.join("codec.tada"))?;
                models.base.to_checkpoint().save(dir.join("base_lm.tada"))?;
                let mut ck = models.lm.to_checkpoint();
                ck.merge(models.head.to_checkpoint());
                ck.save(dir.join("lm.tada"))?;
            }
            for (stage, s) in &outcome.timings {
                println!("{stage}_s={s:.3}");
            }
            println!("train_total_s={total:.3}");
            println!("dropped={}", outcome.dropped);
            println!(
                "align_within1={:.6}",
                alignment_accuracy(&models.aligner, &test_set, 1)?
            );
            let pairs = tts_pairs(&test_set, pairs);
            let p = GenerationParams {
                seed,
                ..GenerationParams::tts(vec![0])
            };
            let (report, _) = run_tts(models.voice(), &test_set, &pairs, &p, &pc.filter)?;
            print!("{}", report.to_lines());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
