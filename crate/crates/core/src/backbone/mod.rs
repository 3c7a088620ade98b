//! Single-stream decoder-only model over text tokens with additively fused
//! acoustic latents (shifted `K` steps behind the text).

mod train;

pub use train::{
    build_item, segment_modes, train_backbone, train_text_lm, CondVariant, ItemLoss, LmItem, LmTrainConfig,
    LmTrainReport, LmUtterance, LossWeights, TrainLossReport,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::durbits::{encode_count, unpack, DurationPair, DEFAULT_BITS};
use crate::error::{Error, Result};
use crate::flowhead::VectorField;
use crate::nn::{meta_tensor, read_meta, KvCache, Linear, Transformer};
use crate::numerics::{Checkpoint, Graph, Mask, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Text vocabulary without the padding token.
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Acoustic lag in steps.
    pub k: usize,
    pub d_latent: usize,
    pub bits: usize,
    pub d_cond: usize,
    pub flow_hidden: usize,
    pub flow_layers: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            d_model: 128,
            heads: 4,
            layers: 4,
            k: 2,
            d_latent: 8,
            bits: DEFAULT_BITS,
            d_cond: 128,
            flow_hidden: 256,
            flow_layers: 3,
            max_context: 64,
            seed: 2,
        }
    }
}

impl BackboneConfig {
    /// Width of a packed acoustic slot / flow target.
    pub fn width(&self) -> usize {
        self.d_latent + 2 * self.bits
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if self.vocab == 0 || self.max_context == 0 || self.layers == 0 {
            return Err(Error::Config(format!("degenerate backbone config {self:?}")));
        }
        if self.d_model % self.heads != 0 || (self.d_model / self.heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "d_model {} not splittable into {} even heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    TextOnly,
    TextSpeech,
}

impl Mode {
    fn index(self) -> usize {
        match self {
            Mode::TextOnly => 0,
            Mode::TextSpeech => 1,
        }
    }
}

/// Acoustic input of one step.
#[derive(Clone, Debug, PartialEq)]
pub enum Acoustic {
    /// Learned placeholder for the first `K` steps.
    Bos,
    /// Packed `[s | before bits | after bits]` (latent already normalized).
    Packed(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedStep {
    pub token: usize,
    pub acoustic: Acoustic,
    pub mode: Mode,
}

impl FusedStep {
    pub fn text_only(token: usize) -> Self {
        Self {
            token,
            acoustic: Acoustic::Bos,
            mode: Mode::TextOnly,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput {
    /// `[n, vocab + 1]`
    pub logits: Tensor<f32>,
    /// `[n, d_cond]`
    pub cond: Tensor<f32>,
}

#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    pub logits: Var,
    pub cond: Var,
}

#[derive(Clone, Debug)]
struct Arch {
    text: ParamId,
    mode: ParamId,
    bos: ParamId,
    acoustic: Linear,
    tf: Transformer,
    lm_head: Linear,
    cond: Linear,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub store: ParamStore<f32>,
    pub flow: VectorField,
    /// Per-coordinate mean and std used to normalize latents before packing.
    pub latent_mean: Vec<f32>,
    pub latent_std: Vec<f32>,
    arch: Arch,
}

/// `(1 - lambda) z_text_only + lambda z_text_speech`
pub fn sfg_logits(z_text_only: &[f32], z_text_speech: &[f32], lambda: f64) -> Result<Vec<f32>> {
    if z_text_only.len() != z_text_speech.len() {
        return Err(Error::shape(
            "sfg",
            format!("{} vs {}", z_text_only.len(), z_text_speech.len()),
        ));
    }
    if lambda == 0.0 {
        return Ok(z_text_only.to_vec());
    }
    if lambda == 1.0 {
        return Ok(z_text_speech.to_vec());
    }
    let (a, b) = ((1.0 - lambda) as f32, lambda as f32);
    Ok(z_text_only
        .iter()
        .zip(z_text_speech)
        .map(|(&x, &y)| a * x + b * y)
        .collect())
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let arch = Arch {
            text: store.add_normal("lm.text", &[config.vocab + 1, d], 0.5, &mut rng),
            mode: store.add_normal("lm.mode", &[2, d], 0.1, &mut rng),
            bos: store.add_normal("lm.bos", &[1, d], 0.1, &mut rng),
            acoustic: Linear::new(&mut store, "lm.acoustic", config.width(), d, true, 1.0, &mut rng),
            tf: Transformer::new(&mut store, "lm.tf", config.layers, d, config.heads, &mut rng),
            lm_head: Linear::new(&mut store, "lm.head", d, config.vocab + 1, true, 1.0, &mut rng),
            cond: Linear::new(&mut store, "lm.cond", d, config.d_cond, true, 1.0, &mut rng),
        };
        let flow = VectorField::new(
            &mut store,
            "lm.flow",
            config.width(),
            config.d_cond,
            config.flow_hidden,
            config.flow_layers,
            &mut rng,
        );
        Ok(Self {
            latent_mean: vec![0.0; config.d_latent],
            latent_std: vec![1.0; config.d_latent],
            config,
            store,
            flow,
            arch,
        })
    }

    /// Padding token (tail steps and text-free contexts).
    pub fn pad(&self) -> usize {
        self.config.vocab
    }

    pub fn new_caches(&self) -> Vec<KvCache<f32>> {
        self.arch.tf.new_caches()
    }

    /// `[normalized s | analog gray(before) | analog gray(after)]`
    pub fn pack_target(&self, s: &[f32], d: DurationPair) -> Result<Vec<f32>> {
        if s.len() != self.config.d_latent {
            return Err(Error::shape(
                "pack",
                format!("latent width {} != {}", s.len(), self.config.d_latent),
            ));
        }
        let mut y: Vec<f32> = s
            .iter()
            .zip(&self.latent_mean)
            .zip(&self.latent_std)
            .map(|((&v, &m), &sd)| (v - m) / sd)
            .collect();
        y.extend(encode_count(d.before, self.config.bits)?.iter().map(|&v| v as f32));
        y.extend(encode_count(d.after, self.config.bits)?.iter().map(|&v| v as f32));
        Ok(y)
    }

    /// Inverse of [`Self::pack_target`] (durations are quantized).
    pub fn unpack_target(&self, y: &[f32]) -> Result<(Vec<f32>, DurationPair)> {
        let y64: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let (s, d) = unpack(&y64, self.config.d_latent, self.config.bits)?;
        let s = s
            .iter()
            .zip(&self.latent_mean)
            .zip(&self.latent_std)
            .map(|((&v, &m), &sd)| v as f32 * sd + m)
            .collect();
        Ok((s, d))
    }

    /// Sets the latent normalization from raw latent rows.
    pub fn fit_latent_stats<'a>(&mut self, rows: impl IntoIterator<Item = &'a [f32]>) {
        let d = self.config.d_latent;
        let (mut sum, mut sq, mut n) = (vec![0f64; d], vec![0f64; d], 0usize);
        for r in rows {
            for k in 0..d {
                sum[k] += r[k] as f64;
                sq[k] += (r[k] as f64).powi(2);
            }
            n += 1;
        }
        if n < 2 {
            return;
        }
        for k in 0..d {
            let m = sum[k] / n as f64;
            self.latent_mean[k] = m as f32;
            self.latent_std[k] = ((sq[k] / n as f64 - m * m).max(1e-6)).sqrt() as f32;
        }
    }

    /// Fused inputs `[n, d_model]`: text embedding + mode embedding +
    /// (text-speech steps only) projected acoustic slot or the placeholder.
    pub fn fuse_var<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, steps: &[FusedStep]) -> Result<Var> {
        let c = &self.config;
        let w = c.width();
        let n = steps.len();
        let mut tokens = Vec::with_capacity(n);
        let mut modes = Vec::with_capacity(n);
        let mut packed = vec![F::zero(); n * w];
        let mut ac_idx = vec![None; n];
        let mut bos_idx = vec![None; n];
        for (i, st) in steps.iter().enumerate() {
            if st.token > c.vocab {
                return Err(Error::OutOfRange(format!(
                    "token {} outside vocabulary of {}",
                    st.token,
                    c.vocab + 1
                )));
            }
            tokens.push(st.token);
            modes.push(st.mode.index());
            if st.mode == Mode::TextSpeech {
                match &st.acoustic {
                    Acoustic::Bos => bos_idx[i] = Some(0),
                    Acoustic::Packed(y) => {
                        if y.len() != w {
                            return Err(Error::shape("fuse", format!("acoustic slot width {} != {w}", y.len())));
                        }
                        for (dst, &v) in packed[i * w..(i + 1) * w].iter_mut().zip(y) {
                            *dst = F::of(v as f64);
                        }
                        ac_idx[i] = Some(i);
                    }
                }
            }
        }
        let table = g.param(store, self.arch.text);
        let mut x = g.embedding(table, &tokens)?;
        let mt = g.param(store, self.arch.mode);
        let m = g.embedding(mt, &modes)?;
        x = g.add(x, m)?;
        if ac_idx.iter().any(Option::is_some) {
            let y = g.constant(Tensor::new(vec![n, w], packed)?);
            let a = self.arch.acoustic.forward(g, store, y)?;
            let a = g.gather_rows(a, &ac_idx)?;
            x = g.add(x, a)?;
        }
        if bos_idx.iter().any(Option::is_some) {
            let b = g.param(store, self.arch.bos);
            let b = g.gather_rows(b, &bos_idx)?;
            x = g.add(x, b)?;
        }
        Ok(x)
    }

    /// Causal forward over `steps` placed at positions `offset..`. With
    /// caches, earlier rows come from the caches (whose length must equal
    /// `offset`).
    pub fn forward_var<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        steps: &[FusedStep],
        offset: usize,
        caches: Option<&mut [KvCache<F>]>,
    ) -> Result<OutputVars> {
        let n = steps.len();
        if n == 0 {
            return Err(Error::Config("empty context".into()));
        }
        if offset + n > self.config.max_context {
            return Err(Error::OutOfRange(format!(
                "context of {} steps exceeds the maximum of {}",
                offset + n,
                self.config.max_context
            )));
        }
        let cached = caches.as_ref().map_or(0, |c| c.first().map_or(0, |k| k.len()));
        if cached != offset && caches.is_some() {
            return Err(Error::shape(
                "backbone",
                format!("cache holds {cached} rows, offset is {offset}"),
            ));
        }
        let x = self.fuse_var(g, store, steps)?;
        let positions: Vec<usize> = (offset..offset + n).collect();
        let mask = Mask::causal(n, cached + n);
        let h = self.arch.tf.forward(g, store, x, &positions, Some(&mask), caches)?;
        Ok(OutputVars {
            logits: self.arch.lm_head.forward(g, store, h)?,
            cond: self.arch.cond.forward(g, store, h)?,
        })
    }

    pub fn forward(&self, steps: &[FusedStep]) -> Result<BackboneOutput> {
        self.forward_cached(steps, 0, None)
    }

    pub fn forward_cached(
        &self,
        steps: &[FusedStep],
        offset: usize,
        caches: Option<&mut [KvCache<f32>]>,
    ) -> Result<BackboneOutput> {
        let mut g = Graph::new();
        let out = self.forward_var(&mut g, &self.store, steps, offset, caches)?;
        Ok(BackboneOutput {
            logits: g.value(out.logits).clone(),
            cond: g.value(out.cond).clone(),
        })
    }

    /// Logits of a purely text-only pass over `tokens`.
    pub fn text_logits(&self, tokens: &[usize]) -> Result<Tensor<f32>> {
        let steps: Vec<FusedStep> = tokens.iter().map(|&t| FusedStep::text_only(t)).collect();
        Ok(self.forward(&steps)?.logits)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new();
        ck.insert(
            "meta.lm",
            meta_tensor(&[
                c.vocab,
                c.d_model,
                c.heads,
                c.layers,
                c.k,
                c.d_latent,
                c.bits,
                c.d_cond,
                c.flow_hidden,
                c.flow_layers,
                c.max_context,
            ]),
        );
        ck.insert("lm.latent_mean", Tensor::vector(self.latent_mean.clone()));
        ck.insert("lm.latent_std", Tensor::vector(self.latent_std.clone()));
        self.store.save_into(&mut ck, "");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = read_meta(ck, "meta.lm", 11)?;
        let mut model = Self::new(BackboneConfig {
            vocab: m[0],
            d_model: m[1],
            heads: m[2],
            layers: m[3],
            k: m[4],
            d_latent: m[5],
            bits: m[6],
            d_cond: m[7],
            flow_hidden: m[8],
            flow_layers: m[9],
            max_context: m[10],
            seed: 0,
        })?;
        model.store.load_from(ck, "")?;
        let mean = ck.require("lm.latent_mean")?;
        let std = ck.require("lm.latent_std")?;
        if mean.numel() != model.config.d_latent || std.numel() != model.config.d_latent {
            return Err(Error::Format("latent statistics do not match the latent width".into()));
        }
        model.latent_mean = mean.data().to_vec();
        model.latent_std = std.data().to_vec();
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> BackboneConfig {
        BackboneConfig {
            vocab: 5,
            d_model: 8,
            heads: 2,
            layers: 2,
            k: 2,
            d_latent: 2,
            bits: 3,
            d_cond: 4,
            flow_hidden: 6,
            flow_layers: 2,
            max_context: 16,
            seed: 1,
        }
    }

    fn ts_step(token: usize, y: Option<Vec<f32>>) -> FusedStep {
        FusedStep {
            token,
            acoustic: y.map_or(Acoustic::Bos, Acoustic::Packed),
            mode: Mode::TextSpeech,
        }
    }

    fn fused(model: &Backbone, steps: &[FusedStep]) -> Tensor<f32> {
        let mut g = Graph::new();
        let x = model.fuse_var(&mut g, &model.store, steps).unwrap();
        g.value(x).clone()
    }

    #[test]
    fn text_only_fusion_has_no_acoustic_term() {
        let model = Backbone::new(tiny()).unwrap();
        let y = vec![0.5f32; 8];
        let a = fused(
            &model,
            &[FusedStep {
                token: 3,
                acoustic: Acoustic::Packed(y),
                mode: Mode::TextOnly,
            }],
        );
        let text = model.store.value(model.arch.text).row(3).to_vec();
        let mode = model.store.value(model.arch.mode).row(0).to_vec();
        let expect: Vec<f32> = text.iter().zip(&mode).map(|(a, b)| a + b).collect();
        assert_eq!(a.row(0), expect.as_slice());
    }

    #[test]
    fn durations_reach_the_input_only_in_text_speech_mode() {
        let model = Backbone::new(tiny()).unwrap();
        let y1 = model
            .pack_target(&[0.1, 0.2], DurationPair { before: 3, after: 1 })
            .unwrap();
        let y2 = model
            .pack_target(&[0.1, 0.2], DurationPair { before: 4, after: 1 })
            .unwrap();
        assert_ne!(
            fused(&model, &[ts_step(1, Some(y1.clone()))]),
            fused(&model, &[ts_step(1, Some(y2.clone()))])
        );
        let to = |y: Vec<f32>| FusedStep {
            token: 1,
            acoustic: Acoustic::Packed(y),
            mode: Mode::TextOnly,
        };
        assert_eq!(fused(&model, &[to(y1)]), fused(&model, &[to(y2)]));
    }

    #[test]
    fn outputs_are_causal() {
        let model = Backbone::new(tiny()).unwrap();
        let y = model
            .pack_target(&[0.3, -0.4], DurationPair { before: 2, after: 0 })
            .unwrap();
        let steps = vec![
            ts_step(0, None),
            ts_step(2, None),
            ts_step(4, Some(y.clone())),
            ts_step(1, Some(y)),
        ];
        let full = model.forward(&steps).unwrap();
        let head = model.forward(&steps[..2]).unwrap();
        for i in 0..2 {
            for (a, b) in full.logits.row(i).iter().zip(head.logits.row(i)) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn cached_forward_matches_full_pass() {
        let model = Backbone::new(tiny()).unwrap();
        let steps: Vec<FusedStep> = (0..5).map(|t| ts_step(t, None)).collect();
        let full = model.forward(&steps).unwrap();
        let mut caches = model.new_caches();
        let a = model.forward_cached(&steps[..3], 0, Some(&mut caches)).unwrap();
        let b = model.forward_cached(&steps[3..], 3, Some(&mut caches)).unwrap();
        assert!(
            a.cond.max_abs_diff(
                &Tensor::from_rows(&[
                    full.cond.row(0).to_vec(),
                    full.cond.row(1).to_vec(),
                    full.cond.row(2).to_vec()
                ])
                .unwrap()
            ) <= 1e-6
        );
        for i in 0..2 {
            for (x, y) in b.logits.row(i).iter().zip(full.logits.row(3 + i)) {
                assert!((x - y).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn context_overflow_is_an_error() {
        let model = Backbone::new(tiny()).unwrap();
        let steps: Vec<FusedStep> = (0..17).map(|_| FusedStep::text_only(0)).collect();
        assert!(matches!(model.forward(&steps), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn sfg_blend_examples() {
        assert_eq!(sfg_logits(&[2.0, 0.0], &[0.0, 2.0], 0.5).unwrap(), vec![1.0, 1.0]);
        assert_eq!(sfg_logits(&[2.0, 0.0], &[0.0, 2.0], 0.0).unwrap(), vec![2.0, 0.0]);
        assert_eq!(sfg_logits(&[2.0, 0.0], &[0.0, 2.0], 1.0).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn pack_roundtrip_and_checkpoint() {
        let mut model = Backbone::new(tiny()).unwrap();
        model.fit_latent_stats([[1.0f32, 2.0].as_slice(), &[3.0, -2.0], &[2.0, 0.0]]);
        let d = DurationPair { before: 5, after: 2 };
        let y = model.pack_target(&[2.5, 1.0], d).unwrap();
        let (s, back) = model.unpack_target(&y).unwrap();
        assert_eq!(back, d);
        assert!((s[0] - 2.5).abs() < 1e-6 && (s[1] - 1.0).abs() < 1e-6);
        let re = Backbone::from_checkpoint(&model.to_checkpoint()).unwrap();
        assert_eq!(re.latent_std, model.latent_std);
        let steps = vec![ts_step(1, Some(y))];
        assert_eq!(re.forward(&steps).unwrap(), model.forward(&steps).unwrap());
    }
}
