//! Synthetic corpus, oracle evaluation and benchmarking.

pub mod corpus;
pub mod e2e;
pub mod manifest;
pub mod metrics;
pub mod oracle;

pub use corpus::{gen_utterances, render, sample_layout, Layout, SynthConfig, Templates, Utterance};
pub use e2e::{
    alignment_accuracy, benchmark, evaluate, lm_corpus, run_tts, train_base_lm, train_codec_stages, train_pipeline,
    train_speaker_head, tts_pairs, EvalItem, Models, PipelineConfig, TrainOutcome, Voice,
};
pub use manifest::{feature_key, read_synth_config, signal_key, write_synth_config, Corpus, Manifest, ManifestRecord};
pub use metrics::{corpus_error_rate, cosine, edit_distance, mean, std_dev, token_error_rate, MetricsReport};
pub use oracle::{oracle_decode, OracleDecode};
