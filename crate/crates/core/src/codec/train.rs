use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{codec_loss_var, dropout_mask, latent_noise, Codec, DecoderMode, LossWeights};
use crate::error::{Error, Result};
use crate::masks::validate_positions;
use crate::nn::batch_gradients;
use crate::numerics::{lr_at, Adam, Graph, ParamStore, Real, Tensor, Var};

/// One aligned training utterance.
#[derive(Clone, Debug)]
pub struct CodecExample {
    pub features: Tensor<f32>,
    pub signal: Tensor<f32>,
    pub tokens: Vec<usize>,
    pub p: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodecTrainMode {
    /// Encoder and joint decoder together.
    Joint,
    /// Streaming decoder only; encoder and joint decoder stay fixed.
    StreamingFrozenEncoder,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecTrainConfig {
    pub mode: CodecTrainMode,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub k_sigma: f64,
    pub latent_dropout: f64,
    /// Utterances are drawn with weight `max_i (mean count / count(w_i))^token_balance`
    /// (at least 1); 0 samples uniformly.
    pub token_balance: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            mode: CodecTrainMode::Joint,
            steps: 2000,
            batch: 8,
            lr: 3e-3,
            k_sigma: 1.0,
            latent_dropout: 0.02,
            token_balance: 1.0,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CodecTrainReport {
    pub losses: Vec<f64>,
}

impl CodecExample {
    pub fn validate(&self, codec: &Codec) -> Result<()> {
        let c = &codec.config;
        let t = self.features.rows();
        validate_positions(&self.p, t)?;
        if self.features.cols() != c.d_a || self.signal.shape() != [t, c.r] {
            return Err(Error::shape(
                "codec example",
                format!("features {:?}, signal {:?}", self.features.shape(), self.signal.shape()),
            ));
        }
        if self.tokens.len() != self.p.len() || self.tokens.iter().any(|&w| w >= c.vocab) {
            return Err(Error::InvalidAlignment(format!(
                "{} tokens for {} positions",
                self.tokens.len(),
                self.p.len()
            )));
        }
        Ok(())
    }
}

impl Codec {
    /// Training loss of one example with externally drawn noise and dropout.
    #[allow(clippy::too_many_arguments)]
    pub fn train_loss<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        features: &Tensor<F>,
        signal: &Tensor<F>,
        tokens: &[usize],
        p: &[usize],
        mode: DecoderMode,
        noise: Tensor<F>,
        keep: Tensor<F>,
        weights: LossWeights,
    ) -> Result<Var> {
        let t = features.rows();
        let mu = self.encode_var(g, store, features, p)?;
        let e = g.constant(noise);
        let s = g.add(mu, e)?;
        let m = g.constant(keep);
        let s = g.mul(s, m)?;
        let pred = self.decode_var(g, store, s, p, t, mode)?;
        Ok(codec_loss_var(g, &pred, features, signal, tokens, p, mu, weights)?.total)
    }
}

/// Per-utterance sampling weight from its rarest token.
pub fn sampling_weights(examples: &[CodecExample], balance: f64) -> Result<Vec<f64>> {
    if !(balance.is_finite() && balance >= 0.0) {
        return Err(Error::Config(format!(
            "token_balance must be finite and >= 0, got {balance}"
        )));
    }
    let mut counts = std::collections::HashMap::new();
    for w in examples.iter().flat_map(|ex| &ex.tokens) {
        *counts.entry(*w).or_insert(0usize) += 1;
    }
    let mean = counts.values().sum::<usize>() as f64 / counts.len().max(1) as f64;
    Ok(examples
        .iter()
        .map(|ex| {
            ex.tokens
                .iter()
                .map(|w| (mean / counts[w] as f64).powf(balance))
                .fold(1.0, f64::max)
        })
        .collect())
}

/// Trains `codec` in place. `on_step` sees `(step, mean loss)`.
pub fn train_codec(
    codec: &mut Codec,
    examples: &[CodecExample],
    config: &CodecTrainConfig,
    mut on_step: impl FnMut(u64, f64),
) -> Result<CodecTrainReport> {
    if examples.is_empty() {
        return Err(Error::Config("empty codec corpus".into()));
    }
    config.weights.validate()?;
    for ex in examples {
        ex.validate(codec)?;
    }
    let mode = match config.mode {
        CodecTrainMode::Joint => {
            codec.store.set_trainable("codec.stream.", false);
            DecoderMode::Joint
        }
        CodecTrainMode::StreamingFrozenEncoder => {
            codec.store.set_trainable("codec.enc.", false);
            codec.store.set_trainable("codec.joint.", false);
            DecoderMode::Streaming
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xc0dec);
    let mut opt = Adam::new(config.lr);
    let mut report = CodecTrainReport::default();
    let d = codec.config.d_latent;
    let weights = sampling_weights(examples, config.token_balance)?;
    let indexed: Vec<usize> = (0..examples.len()).collect();
    let result = (|| {
        for step in 0..config.steps {
            let batch: Vec<(&CodecExample, Tensor<f32>, Tensor<f32>)> = indexed
                .choose_multiple_weighted(&mut rng, config.batch.min(examples.len()), |&i| weights[i])
                .map_err(|e| Error::Config(format!("codec sampling weights: {e}")))?
                .collect::<Vec<_>>()
                .into_iter()
                .map(|&i| {
                    let ex = &examples[i];
                    let shape = [ex.p.len(), d];
                    let mut r = ChaCha8Rng::seed_from_u64(rng.random());
                    Ok((
                        ex,
                        latent_noise(&shape, config.k_sigma, &mut r)?,
                        dropout_mask(&shape, config.latent_dropout, &mut r)?,
                    ))
                })
                .collect::<Result<_>>()?;
            let (loss, grads) = batch_gradients(&codec.store, &batch, |g, (ex, noise, keep)| {
                codec.train_loss(
                    g,
                    &codec.store,
                    &ex.features,
                    &ex.signal,
                    &ex.tokens,
                    &ex.p,
                    mode,
                    noise.clone(),
                    keep.clone(),
                    config.weights,
                )
            })
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("codec step {step}: {m}")),
                other => other,
            })?;
            opt.lr = lr_at(step, config.steps, config.lr, config.steps / 20 + 1, 0.1);
            opt.step(&mut codec.store, &grads)?;
            report.losses.push(loss);
            on_step(step, loss);
        }
        Ok(())
    })();
    codec.store.set_trainable("", true);
    result.map(|_| report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(tokens: &[usize]) -> CodecExample {
        let t = tokens.len();
        CodecExample {
            features: Tensor::zeros(&[t, 1]),
            signal: Tensor::zeros(&[t, 1]),
            tokens: tokens.to_vec(),
            p: (1..=t).collect(),
        }
    }

    #[test]
    fn rare_tokens_raise_the_weight() {
        // counts: 0 -> 6, 1 -> 1, 2 -> 1; mean 8/3
        let exs = [ex(&[0, 0, 0]), ex(&[0, 0, 0]), ex(&[1]), ex(&[2])];
        let w = sampling_weights(&exs, 1.0).unwrap();
        assert_eq!(w[0], 1.0);
        assert!((w[2] - 8.0 / 3.0).abs() < 1e-12);
        assert_eq!(sampling_weights(&exs, 0.0).unwrap(), vec![1.0; 4]);
        assert!(sampling_weights(&exs, -1.0).is_err());
    }
}
