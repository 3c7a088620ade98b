use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ctc_log_likelihood_node, min_frames, viterbi_score, Alignment, CtcLogits, Curriculum, CurriculumSchedule};
use crate::error::{Error, Result};
use crate::nn::{batch_gradients, causal_context, meta_tensor, read_meta, Linear, Transformer};
use crate::numerics::{lr_at, Adam, Checkpoint, Graph, Mask, ParamStore, Real, Tensor, Var};

/// Resolution (nats) of the scores used for alignment.
pub const SCORE_GRID: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignerConfig {
    pub vocab: usize,
    pub d_in: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    /// Size of the reduced alphabet of the intermediate head (token mod this).
    pub inter_classes: usize,
    pub lambda_inter: f64,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub curriculum: Option<CurriculumSchedule>,
    pub seed: u64,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            d_in: 16,
            hidden: 64,
            heads: 4,
            layers: 2,
            inter_classes: 8,
            lambda_inter: 0.3,
            steps: 600,
            batch: 8,
            lr: 3e-3,
            curriculum: Some(CurriculumSchedule::default()),
            seed: 0,
        }
    }
}

/// One training utterance: `[T, d_in]` frames and its token ids.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub frames: Tensor<f32>,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct AlignerReport {
    pub losses: Vec<f64>,
    /// Active-set size (including blank) at every step.
    pub active_sizes: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Arch {
    conv1: Linear,
    conv2: Linear,
    tf: Transformer,
    head: Linear,
    inter_head: Linear,
}

/// Local mixing -> transformer -> CTC head, with an auxiliary CTC head on the
/// hidden state after the first transformer layer.
#[derive(Clone, Debug)]
pub struct CtcAligner {
    pub config: AlignerConfig,
    pub store: ParamStore<f32>,
    arch: Arch,
}

impl CtcAligner {
    pub fn new(config: AlignerConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let arch = Arch {
            conv1: Linear::new(&mut store, "aligner.conv1", 3 * config.d_in, h, true, 1.0, &mut rng),
            conv2: Linear::new(&mut store, "aligner.conv2", 3 * h, h, true, 0.5, &mut rng),
            tf: Transformer::new(&mut store, "aligner.tf", config.layers, h, config.heads, &mut rng),
            head: Linear::new(&mut store, "aligner.head", h, config.vocab + 1, true, 1.0, &mut rng),
            inter_head: Linear::new(
                &mut store,
                "aligner.inter",
                h,
                config.inter_classes + 1,
                true,
                1.0,
                &mut rng,
            ),
        };
        Self { config, store, arch }
    }

    pub fn blank(&self) -> usize {
        self.config.vocab
    }

    /// Raw main and intermediate logits, `[T, V+1]` and `[T, inter+1]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, frames: &Tensor<F>) -> Result<(Var, Var)> {
        if frames.rank() != 2 || frames.cols() != self.config.d_in {
            return Err(Error::shape(
                "aligner",
                format!("frames {:?}, expected [T, {}]", frames.shape(), self.config.d_in),
            ));
        }
        let t = frames.rows();
        let x = g.constant(frames.clone());
        let x = causal_context(g, x)?;
        let x = self.arch.conv1.forward(g, store, x)?;
        let x = g.gelu(x);
        let c = causal_context(g, x)?;
        let c = self.arch.conv2.forward(g, store, c)?;
        let c = g.gelu(c);
        let x = g.add(x, c)?;
        let positions: Vec<usize> = (0..t).collect();
        let mask = Mask::causal(t, t);
        let (out, tapped) = self
            .arch
            .tf
            .forward_with_tap(g, store, x, &positions, Some(&mask), None, Some(1))?;
        let main = self.arch.head.forward(g, store, out)?;
        let inter = self.arch.inter_head.forward(g, store, tapped.unwrap_or(out))?;
        Ok((main, inter))
    }

    /// `-log p(tokens) - lambda_inter * log p(tokens mod inter)`, with the main
    /// softmax restricted to `active` when given.
    pub fn loss<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        frames: &Tensor<F>,
        tokens: &[usize],
        active: Option<Arc<Vec<bool>>>,
    ) -> Result<Var> {
        let (main, inter) = self.forward(g, store, frames)?;
        let lp = g.log_softmax(main, active)?;
        let ll = ctc_log_likelihood_node(g, lp, tokens, self.blank())?;
        let mut loss = g.scale(ll, -1.0);
        if self.config.lambda_inter != 0.0 {
            let k = self.config.inter_classes;
            let inter_tokens: Vec<usize> = tokens.iter().map(|&w| w % k).collect();
            let lpi = g.log_softmax(inter, None)?;
            let lli = ctc_log_likelihood_node(g, lpi, &inter_tokens, k)?;
            let term = g.scale(lli, -self.config.lambda_inter);
            loss = g.add(loss, term)?;
        }
        Ok(loss)
    }

    /// Full-vocabulary log-softmax scores.
    pub fn logits(&self, frames: &Tensor<f32>) -> Result<CtcLogits> {
        let mut g = Graph::new();
        let (main, _) = self.forward(&mut g, &self.store, frames)?;
        CtcLogits::from_scores(&g.value(main).cast())
    }

    /// Viterbi positions over the log-probabilities snapped to a
    /// [`SCORE_GRID`] grid, so frames whose scores differ only by f32
    /// round-off (typically several saturated frames of one token) tie and
    /// the earliest wins.
    pub fn align(&self, frames: &Tensor<f32>, tokens: &[usize]) -> Result<Alignment> {
        let logits = self.logits(frames)?;
        let y: Vec<f64> = logits
            .scores()
            .data()
            .iter()
            .map(|v| (v / SCORE_GRID).round() * SCORE_GRID)
            .collect();
        let (p, _) = viterbi_score(&y, logits.frames(), logits.classes(), tokens)?;
        Alignment::new(p, tokens.to_vec(), logits.frames())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ckpt = Checkpoint::new();
        ckpt.insert(
            "meta.aligner",
            meta_tensor(&[c.vocab, c.d_in, c.hidden, c.heads, c.layers, c.inter_classes]),
        );
        self.store.save_into(&mut ckpt, "");
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let m = read_meta(ckpt, "meta.aligner", 6)?;
        let config = AlignerConfig {
            vocab: m[0],
            d_in: m[1],
            hidden: m[2],
            heads: m[3],
            layers: m[4],
            inter_classes: m[5],
            ..AlignerConfig::default()
        };
        let mut model = Self::new(config);
        model.store.load_from(ckpt, "")?;
        Ok(model)
    }
}

/// Trains a fresh aligner. `on_step` sees `(step, loss)` after every update.
pub fn train_aligner(
    corpus: &[TrainExample],
    config: AlignerConfig,
    mut on_step: impl FnMut(u64, f64),
) -> Result<(CtcAligner, AlignerReport)> {
    if corpus.is_empty() {
        return Err(Error::Config("empty aligner corpus".into()));
    }
    for (i, ex) in corpus.iter().enumerate() {
        if min_frames(&ex.tokens) > ex.frames.rows() || ex.tokens.is_empty() {
            return Err(Error::Infeasible(format!(
                "utterance {i}: {} tokens in {} frames",
                ex.tokens.len(),
                ex.frames.rows()
            )));
        }
    }
    let mut model = CtcAligner::new(config.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xa11);
    let mut opt = Adam::new(config.lr);
    let mut curriculum = config.curriculum.clone().map(|s| Curriculum::new(config.vocab, s));
    let mut report = AlignerReport::default();
    for step in 0..config.steps {
        let batch: Vec<&TrainExample> = corpus
            .choose_multiple(&mut rng, config.batch.min(corpus.len()))
            .collect();
        let active = curriculum.as_mut().map(|c| {
            let targets: Vec<usize> = batch.iter().flat_map(|e| e.tokens.iter().copied()).collect();
            c.update(step, &targets)
        });
        report
            .active_sizes
            .push(active.as_ref().map_or(config.vocab + 1, |a| a.len()));
        let mask = active.as_ref().filter(|a| !a.is_full()).map(|a| a.mask());
        let (loss, grads) = batch_gradients(&model.store, &batch, |g, ex| {
            model.loss(g, &model.store, &ex.frames, &ex.tokens, mask.clone())
        })
        .map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("aligner step {step}: {m}")),
            other => other,
        })?;
        opt.lr = lr_at(step, config.steps, config.lr, config.steps / 20 + 1, 0.1);
        opt.step(&mut model.store, &grads)?;
        report.losses.push(loss);
        on_step(step, loss);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::param_gradcheck;

    fn tiny() -> AlignerConfig {
        AlignerConfig {
            vocab: 5,
            d_in: 4,
            hidden: 8,
            heads: 2,
            layers: 2,
            inter_classes: 2,
            ..AlignerConfig::default()
        }
    }

    fn frames(t: usize, d: usize) -> Tensor<f64> {
        Tensor::new(
            vec![t, d],
            (0..t * d).map(|i| ((i * 37 % 17) as f64 / 17.0) - 0.5).collect(),
        )
        .unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = CtcAligner::new(tiny());
        let store = model.store.cast::<f64>();
        let x = frames(6, 4);
        let err = param_gradcheck(&store, 1e-5, 4, |g, s| model.loss(g, s, &x, &[1, 3], None)).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn zero_lambda_is_main_ctc_only() {
        let mut cfg = tiny();
        cfg.lambda_inter = 0.0;
        let model = CtcAligner::new(cfg);
        let store = model.store.cast::<f64>();
        let x = frames(6, 4);
        let mut g = Graph::new();
        let loss = model.loss(&mut g, &store, &x, &[1, 3], None).unwrap();
        let mut g2 = Graph::new();
        let (main, _) = model.forward(&mut g2, &store, &x).unwrap();
        let lp = g2.log_softmax(main, None).unwrap();
        let ll = ctc_log_likelihood_node(&mut g2, lp, &[1, 3], 5).unwrap();
        assert_eq!(g.value(loss).item(), -g2.value(ll).item());
    }

    #[test]
    fn restricted_softmax_never_scores_inactive_symbols() {
        let model = CtcAligner::new(tiny());
        let store = model.store.cast::<f64>();
        let x = frames(6, 4);
        let active = Arc::new(vec![false, true, false, true, false, true]);
        let mut g = Graph::new();
        let (main, _) = model.forward(&mut g, &store, &x).unwrap();
        let lp = g.log_softmax(main, Some(active.clone())).unwrap();
        let ll = ctc_log_likelihood_node(&mut g, lp, &[1, 3], 5).unwrap();
        let grads = g.backward(ll).unwrap();
        let gm = grads.get(main).unwrap();
        for t in 0..6 {
            for k in 0..6 {
                if !active[k] {
                    assert_eq!(gm.at(t, k), 0.0);
                    assert_eq!(g.value(lp).at(t, k), f64::NEG_INFINITY);
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = CtcAligner::new(tiny());
        let back = CtcAligner::from_checkpoint(&model.to_checkpoint()).unwrap();
        let x: Tensor<f32> = frames(5, 4).cast();
        assert_eq!(model.logits(&x).unwrap(), back.logits(&x).unwrap());
    }
}
