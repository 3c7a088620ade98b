use std::sync::Mutex;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};

use super::{Acoustic, Backbone, FusedStep, Mode};
use crate::codec::latent_noise;
use crate::durbits::DurationPair;
use crate::error::{Error, Result};
use crate::flowhead::gaussian;
use crate::nn::batch_gradients;
use crate::numerics::{lr_at, Adam, Graph, ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub flow: f64,
    pub ce: f64,
    pub kd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            flow: 1.0,
            ce: 0.05,
            kd: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLossReport {
    pub flow: f64,
    pub ce: f64,
    pub kd: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// One utterance with encoder means and token durations.
#[derive(Clone, Debug)]
pub struct LmUtterance {
    pub tokens: Vec<usize>,
    /// Raw latent means `[L, d_latent]`.
    pub latents: Tensor<f32>,
    pub durations: Vec<DurationPair>,
    pub speaker: usize,
}

impl LmUtterance {
    pub fn validate(&self, model: &Backbone) -> Result<()> {
        let l = self.tokens.len();
        if l == 0 || self.latents.shape() != [l, model.config.d_latent] || self.durations.len() != l {
            return Err(Error::shape(
                "lm utterance",
                format!(
                    "{l} tokens, latents {:?}, {} durations",
                    self.latents.shape(),
                    self.durations.len()
                ),
            ));
        }
        if let Some(&w) = self.tokens.iter().find(|&&w| w >= model.config.vocab) {
            return Err(Error::OutOfRange(format!("token {w} outside vocabulary")));
        }
        Ok(())
    }

    /// `self ++ other` as one sequence.
    pub fn concat(&self, other: &LmUtterance) -> Result<LmUtterance> {
        let mut rows: Vec<Vec<f32>> = (0..self.latents.rows()).map(|i| self.latents.row(i).to_vec()).collect();
        rows.extend((0..other.latents.rows()).map(|i| other.latents.row(i).to_vec()));
        Ok(LmUtterance {
            tokens: [self.tokens.as_slice(), &other.tokens].concat(),
            latents: Tensor::from_rows(&rows)?,
            durations: [self.durations.as_slice(), &other.durations].concat(),
            speaker: self.speaker,
        })
    }
}

/// Conditioning seen by the flow head for one training sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CondVariant {
    Normal,
    /// All text replaced by padding; only the flow loss is kept.
    TextFree,
    /// Flow head conditioned on the zero vector.
    ZeroCond,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub weights: LossWeights,
    /// Probability that a segment is switched to text-only mode.
    pub dropout: f64,
    pub mean_segment: f64,
    pub text_free: f64,
    pub zero_cond: f64,
    /// Noise draws per flow target.
    pub flow_samples: usize,
    pub k_sigma: f64,
    pub sigma_min: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 16,
            lr: 1e-3,
            weights: LossWeights::default(),
            dropout: 0.3,
            mean_segment: 8.0,
            text_free: 0.1,
            zero_cond: 0.1,
            flow_samples: 4,
            k_sigma: 1.0,
            sigma_min: 1e-5,
            seed: 0,
        }
    }
}

impl LmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let p = |x: f64| (0.0..1.0).contains(&x);
        if !p(self.dropout) || !p(self.text_free) || !p(self.zero_cond) || self.text_free + self.zero_cond >= 1.0 {
            return Err(Error::Config(format!("probabilities out of range in {self:?}")));
        }
        if self.mean_segment < 1.0 || self.flow_samples == 0 || self.batch == 0 {
            return Err(Error::Config(format!("degenerate training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct LmTrainReport {
    pub losses: Vec<TrainLossReport>,
}

/// Mode of each of `n` steps: segments of geometric length (mean
/// `mean_len`) switch to text-only with probability `rate`.
pub fn segment_modes(n: usize, rate: f64, mean_len: f64, rng: &mut impl Rng) -> Vec<Mode> {
    let geo = Geometric::new(1.0 / mean_len.max(1.0)).expect("valid geometric parameter");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = 1 + geo.sample(rng) as usize;
        let mode = if rng.random::<f64>() < rate {
            Mode::TextOnly
        } else {
            Mode::TextSpeech
        };
        out.extend(std::iter::repeat_n(mode, len.min(n - out.len())));
    }
    out
}

/// Fully drawn training example for one sequence.
#[derive(Clone, Debug)]
pub struct LmItem {
    pub steps: Vec<FusedStep>,
    /// `(step, next token)` pairs.
    pub ce: Vec<(usize, usize)>,
    pub kd_steps: Vec<usize>,
    /// Frozen-base logits at `kd_steps`.
    pub base_logits: Option<Tensor<f32>>,
    /// Step producing each flow row (targets repeated per noise draw).
    pub flow_steps: Vec<usize>,
    pub flow_targets: Tensor<f32>,
    pub flow_t: Vec<f64>,
    pub flow_noise: Tensor<f32>,
    pub zero_cond: bool,
}

/// Builds the fused context of `seq` and draws all training randomness.
/// Step `j` carries token `w_j` and the slot of token `j - K`; its condition
/// vector targets token `j - K + 1`. The context has `L + K - 1` steps.
pub fn build_item(
    model: &Backbone,
    base: Option<&Backbone>,
    seq: &LmUtterance,
    config: &LmTrainConfig,
    seed: u64,
) -> Result<LmItem> {
    seq.validate(model)?;
    let k = model.config.k;
    let l = seq.tokens.len();
    let n = l + k - 1;
    let mut flow_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seg_rng = flow_rng.clone();
    seg_rng.set_stream(1);
    let mut var_rng = flow_rng.clone();
    var_rng.set_stream(2);

    let u: f64 = var_rng.random();
    let variant = if u < config.text_free {
        CondVariant::TextFree
    } else if u < config.text_free + config.zero_cond {
        CondVariant::ZeroCond
    } else {
        CondVariant::Normal
    };
    let modes = segment_modes(n, config.dropout, config.mean_segment, &mut seg_rng);

    let noise: Tensor<f32> = latent_noise(&[l, model.config.d_latent], config.k_sigma, &mut flow_rng)?;
    let mut packed = Vec::with_capacity(l);
    for i in 0..l {
        let s: Vec<f32> = seq
            .latents
            .row(i)
            .iter()
            .zip(noise.row(i))
            .map(|(a, b)| a + b)
            .collect();
        packed.push(model.pack_target(&s, seq.durations[i])?);
    }

    let pad = model.pad();
    let text_free = variant == CondVariant::TextFree;
    let steps: Vec<FusedStep> = (0..n)
        .map(|j| FusedStep {
            token: if j < l && !text_free { seq.tokens[j] } else { pad },
            acoustic: if j < k {
                Acoustic::Bos
            } else {
                Acoustic::Packed(packed[j - k].clone())
            },
            mode: modes[j],
        })
        .collect();

    let (mut ce, mut kd_steps) = (Vec::new(), Vec::new());
    if !text_free {
        ce = (0..l.saturating_sub(1)).map(|j| (j, seq.tokens[j + 1])).collect();
        kd_steps = (0..l).filter(|&j| modes[j] == Mode::TextOnly).collect();
    }
    let base_logits = match (base, kd_steps.is_empty()) {
        (Some(b), false) => {
            let z = b.text_logits(&seq.tokens)?;
            Some(Tensor::from_rows(
                &kd_steps.iter().map(|&j| z.row(j).to_vec()).collect::<Vec<_>>(),
            )?)
        }
        _ => None,
    };

    let mut flow_steps = Vec::new();
    let mut rows = Vec::new();
    for j in (k - 1)..n {
        if modes[j] == Mode::TextSpeech {
            for _ in 0..config.flow_samples {
                flow_steps.push(j);
                rows.push(packed[j + 1 - k].clone());
            }
        }
    }
    let w = model.config.width();
    let m = rows.len();
    let flow_targets = Tensor::new(vec![m, w], rows.concat())?;
    let flow_t = (0..m).map(|_| flow_rng.random::<f64>()).collect();
    let flow_noise = gaussian::<f32>(&[m, w], &mut flow_rng);
    Ok(LmItem {
        steps,
        ce,
        kd_steps,
        base_logits,
        flow_steps,
        flow_targets,
        flow_t,
        flow_noise,
        zero_cond: variant == CondVariant::ZeroCond,
    })
}

/// Loss nodes of one item.
#[derive(Clone, Copy, Debug)]
pub struct ItemLoss {
    pub total: Var,
    pub flow: Var,
    pub ce: Var,
    pub kd: Var,
}

impl Backbone {
    pub fn item_loss<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        item: &LmItem,
        weights: LossWeights,
        sigma_min: f64,
    ) -> Result<ItemLoss> {
        let out = self.forward_var(g, store, &item.steps, 0, None)?;
        let zero = g.constant(Tensor::scalar(F::zero()));
        let flow = if item.flow_steps.is_empty() {
            zero
        } else {
            let c = if item.zero_cond {
                g.constant(Tensor::zeros(&[item.flow_steps.len(), self.config.d_cond]))
            } else {
                let idx: Vec<Option<usize>> = item.flow_steps.iter().map(|&j| Some(j)).collect();
                g.gather_rows(out.cond, &idx)?
            };
            self.flow.loss_with_noise(
                g,
                store,
                &item.flow_targets.cast(),
                c,
                &item.flow_t,
                &item.flow_noise.cast(),
                sigma_min,
            )?
        };
        let ce = if item.ce.is_empty() {
            zero
        } else {
            let idx: Vec<Option<usize>> = item.ce.iter().map(|&(j, _)| Some(j)).collect();
            let z = g.gather_rows(out.logits, &idx)?;
            let targets: Vec<usize> = item.ce.iter().map(|&(_, t)| t).collect();
            g.cross_entropy(z, &targets)?
        };
        let kd = match &item.base_logits {
            Some(reference) if !item.kd_steps.is_empty() => {
                let idx: Vec<Option<usize>> = item.kd_steps.iter().map(|&j| Some(j)).collect();
                let z = g.gather_rows(out.logits, &idx)?;
                g.kl_categorical(&reference.cast(), z)?
            }
            _ => zero,
        };
        let a = g.scale(flow, weights.flow);
        let b = g.scale(ce, weights.ce);
        let c = g.scale(kd, weights.kd);
        let total = g.add(a, b)?;
        let total = g.add(total, c)?;
        Ok(ItemLoss { total, flow, ce, kd })
    }

    fn batch_report(&self, items: &[LmItem], config: &LmTrainConfig) -> Result<(TrainLossReport, Vec<Vec<f32>>)> {
        let parts = Mutex::new(Vec::with_capacity(items.len()));
        let (total, grads) = batch_gradients(&self.store, items, |g, item| {
            let l = self.item_loss(g, &self.store, item, config.weights, config.sigma_min)?;
            let v = |x: Var| g.value(x).item().as_f64();
            parts.lock().expect("loss parts").push([v(l.flow), v(l.ce), v(l.kd)]);
            Ok(l.total)
        })?;
        let parts = parts.into_inner().expect("loss parts");
        let n = parts.len().max(1) as f64;
        let avg = |k: usize| parts.iter().map(|p| p[k]).sum::<f64>() / n;
        Ok((
            TrainLossReport {
                flow: avg(0),
                ce: avg(1),
                kd: avg(2),
                total,
                weights: config.weights,
            },
            grads,
        ))
    }

    /// Loss of a batch of sequences without updating parameters.
    pub fn loss_report(
        &self,
        base: &Backbone,
        batch: &[LmUtterance],
        config: &LmTrainConfig,
        seed: u64,
    ) -> Result<TrainLossReport> {
        let items = self.build_batch(base, batch, config, seed)?;
        Ok(self.batch_report(&items, config)?.0)
    }

    /// One optimizer step on `batch`.
    pub fn train_step(
        &mut self,
        opt: &mut Adam<f32>,
        base: &Backbone,
        batch: &[LmUtterance],
        config: &LmTrainConfig,
        seed: u64,
    ) -> Result<TrainLossReport> {
        let items = self.build_batch(base, batch, config, seed)?;
        let (report, grads) = self.batch_report(&items, config)?;
        opt.step(&mut self.store, &grads)?;
        Ok(report)
    }

    fn build_batch(
        &self,
        base: &Backbone,
        batch: &[LmUtterance],
        config: &LmTrainConfig,
        seed: u64,
    ) -> Result<Vec<LmItem>> {
        config.validate()?;
        if base.config != self.config {
            return Err(Error::Config("base LM architecture differs from the backbone".into()));
        }
        batch
            .iter()
            .enumerate()
            .map(|(i, seq)| {
                let s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64);
                build_item(self, Some(base), seq, config, s)
            })
            .collect()
    }
}

/// Trains the text-only twin with next-token cross-entropy.
pub fn train_text_lm(
    model: &mut Backbone,
    texts: &[Vec<usize>],
    steps: u64,
    batch: usize,
    lr: f64,
    seed: u64,
    mut on_step: impl FnMut(u64, f64),
) -> Result<Vec<f64>> {
    let texts: Vec<&Vec<usize>> = texts.iter().filter(|t| t.len() >= 2).collect();
    if texts.is_empty() {
        return Err(Error::Config("no text sequences of length >= 2".into()));
    }
    for t in &texts {
        if t.len() > model.config.max_context || t.iter().any(|&w| w >= model.config.vocab) {
            return Err(Error::OutOfRange(format!(
                "text sequence of {} tokens does not fit the model",
                t.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47);
    let mut opt = Adam::new(lr);
    let mut losses = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let picked: Vec<&Vec<usize>> = (0..batch)
            .map(|_| *texts.choose(&mut rng).expect("non-empty"))
            .collect();
        let m = &*model;
        let (loss, grads) = batch_gradients(&m.store, &picked, |g, t| {
            let steps: Vec<FusedStep> = t.iter().map(|&w| FusedStep::text_only(w)).collect();
            let out = m.forward_var(g, &m.store, &steps[..t.len() - 1], 0, None)?;
            g.cross_entropy(out.logits, &t[1..])
        })?;
        opt.lr = lr_at(step, steps, lr, steps / 20 + 1, 0.1);
        opt.step(&mut model.store, &grads)?;
        losses.push(loss);
        on_step(step, loss);
    }
    Ok(losses)
}

/// Trains a backbone initialised from `base` on same-speaker pairs
/// `a ++ b`.
pub fn train_backbone(
    base: &Backbone,
    corpus: &[LmUtterance],
    config: &LmTrainConfig,
    mut on_step: impl FnMut(u64, &TrainLossReport),
) -> Result<(Backbone, LmTrainReport)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("empty LM corpus".into()));
    }
    let mut model = base.clone();
    for u in corpus {
        u.validate(&model)?;
    }
    model.fit_latent_stats(
        corpus
            .iter()
            .flat_map(|u| (0..u.latents.rows()).map(move |i| u.latents.row(i))),
    );
    let mut by_speaker: std::collections::BTreeMap<usize, Vec<&LmUtterance>> = Default::default();
    for u in corpus {
        by_speaker.entry(u.speaker).or_default().push(u);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x1a2b);
    let mut opt = Adam::new(config.lr);
    let mut report = LmTrainReport::default();
    for step in 0..config.steps {
        let batch: Vec<LmUtterance> = (0..config.batch)
            .map(|_| {
                let a = corpus.choose(&mut rng).expect("non-empty");
                let b = by_speaker[&a.speaker].choose(&mut rng).expect("non-empty");
                a.concat(b)
            })
            .collect::<Result<_>>()?;
        opt.lr = lr_at(step, config.steps, config.lr, config.steps / 20 + 1, 0.1);
        let r = model.train_step(&mut opt, base, &batch, config, rng.random())?;
        on_step(step, &r);
        report.losses.push(r);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny;
    use super::*;

    fn utt(l: usize, seed: u64) -> LmUtterance {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        LmUtterance {
            tokens: (0..l).map(|_| r.random_range(0..5)).collect(),
            latents: Tensor::new(vec![l, 2], (0..2 * l).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap(),
            durations: (0..l)
                .map(|_| DurationPair {
                    before: r.random_range(0..4),
                    after: r.random_range(0..4),
                })
                .collect(),
            speaker: 0,
        }
    }

    #[test]
    fn k_shift_pairs_step_with_token_j_minus_k_plus_1() {
        for k in 1..=3 {
            for l in 1..=6 {
                let model = Backbone::new(BackboneConfig { k, ..tiny() }).unwrap();
                let u = utt(l, (k * 10 + l) as u64);
                let cfg = LmTrainConfig {
                    dropout: 0.0,
                    text_free: 0.0,
                    zero_cond: 0.0,
                    flow_samples: 1,
                    ..Default::default()
                };
                let item = build_item(&model, None, &u, &cfg, 5).unwrap();
                assert_eq!(item.steps.len(), l + k - 1);
                // flow rows are packed targets; recover their durations
                assert_eq!(item.flow_steps, ((k - 1)..(l + k - 1)).collect::<Vec<_>>());
                for (row, &j) in item.flow_steps.iter().enumerate() {
                    let (_, d) = model.unpack_target(item.flow_targets.row(row)).unwrap();
                    assert_eq!(d, u.durations[j + 1 - k]);
                }
                for (j, st) in item.steps.iter().enumerate() {
                    match &st.acoustic {
                        Acoustic::Bos => assert!(j < k),
                        Acoustic::Packed(y) => assert_eq!(model.unpack_target(y).unwrap().1, u.durations[j - k]),
                    }
                    assert_eq!(st.token, if j < l { u.tokens[j] } else { model.pad() });
                }
            }
        }
    }

    #[test]
    fn segments_are_contiguous_and_rate_zero_is_all_speech() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!(segment_modes(40, 0.0, 8.0, &mut r)
            .iter()
            .all(|&m| m == Mode::TextSpeech));
        let mut lens = Vec::new();
        for _ in 0..400 {
            let m = segment_modes(200, 0.5, 8.0, &mut r);
            let mut run = 1;
            for w in m.windows(2) {
                if w[0] == w[1] {
                    run += 1;
                } else {
                    lens.push(run);
                    run = 1;
                }
            }
        }
        // adjacent equal segments merge, so runs are at least the segment mean
        let mean = lens.iter().sum::<usize>() as f64 / lens.len() as f64;
        assert!(mean > 8.0 && mean < 24.0, "{mean}");
    }

    #[test]
    fn zero_rate_dropout_is_bit_exact() {
        let model = Backbone::new(tiny()).unwrap();
        let batch = vec![utt(4, 1), utt(3, 2)];
        let a = LmTrainConfig {
            dropout: 0.0,
            text_free: 0.0,
            zero_cond: 0.0,
            ..Default::default()
        };
        let b = LmTrainConfig {
            dropout: 0.0,
            mean_segment: 3.0,
            ..a.clone()
        };
        let ra = model.loss_report(&model, &batch, &a, 9).unwrap();
        let rb = model.loss_report(&model, &batch, &b, 9).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ra.kd, 0.0);
    }

    #[test]
    fn zero_text_weights_leave_only_flow() {
        let model = Backbone::new(tiny()).unwrap();
        let batch = vec![utt(5, 3)];
        let cfg = LmTrainConfig {
            weights: LossWeights {
                flow: 1.0,
                ce: 0.0,
                kd: 0.0,
            },
            ..Default::default()
        };
        let r = model.loss_report(&model, &batch, &cfg, 4).unwrap();
        assert_eq!(r.total, r.flow);
        assert!(r.ce > 0.0);
    }

    #[test]
    fn kd_vanishes_against_itself_without_acoustics() {
        let model = Backbone::new(tiny()).unwrap();
        let cfg = LmTrainConfig {
            dropout: 0.999,
            text_free: 0.0,
            zero_cond: 0.0,
            ..Default::default()
        };
        let r = model.loss_report(&model, &[utt(6, 4)], &cfg, 1).unwrap();
        assert!(r.kd.abs() < 1e-6, "{}", r.kd);
        assert!(r.ce > 0.0);
    }

    #[test]
    fn total_loss_gradient_on_three_steps() {
        let model = Backbone::new(BackboneConfig { k: 1, ..tiny() }).unwrap();
        let base = Backbone::new(BackboneConfig {
            k: 1,
            seed: 8,
            ..tiny()
        })
        .unwrap();
        let cfg = LmTrainConfig {
            dropout: 0.5,
            mean_segment: 1.0,
            text_free: 0.0,
            zero_cond: 0.0,
            flow_samples: 2,
            ..Default::default()
        };
        let store = model.store.cast::<f64>();
        for seed in 0..3 {
            let item = build_item(&model, Some(&base), &utt(3, seed), &cfg, seed).unwrap();
            assert_eq!(item.steps.len(), 3);
            let w = LossWeights {
                flow: 1.0,
                ce: 0.5,
                kd: 0.5,
            };
            let err = crate::numerics::param_gradcheck(&store, 1e-6, 3, |g, s| {
                Ok(model.item_loss(g, s, &item, w, 1e-5)?.total)
            })
            .unwrap();
            assert!(err < 1e-3, "seed {seed}: {err}");
        }
    }

    #[test]
    fn training_reduces_loss() {
        let base = Backbone::new(tiny()).unwrap();
        let corpus: Vec<LmUtterance> = (0..6).map(|s| utt(4, s)).collect();
        let cfg = LmTrainConfig {
            steps: 60,
            batch: 4,
            lr: 3e-3,
            ..Default::default()
        };
        let (_, rep) = train_backbone(&base, &corpus, &cfg, |_, _| {}).unwrap();
        let first: f64 = rep.losses[..10].iter().map(|r| r.flow).sum();
        let last: f64 = rep.losses[50..].iter().map(|r| r.flow).sum();
        assert!(last < first, "{first} -> {last}");
    }

    use super::super::BackboneConfig;
}
