//! Alignment-aware variational tokenizer.
//!
//! The encoder turns `T` frames into one latent per text token by reading the
//! transformer output at each aligned position, under a mask that keeps every
//! token's latent inside its own stretch of audio. The decoder scatters the
//! latents back to their frames and rebuilds features, signal and a frame-wise
//! token prediction, either with global attention (joint) or under the
//! segment-causal streaming mask.

mod loss;
mod spectral;
mod stream;
mod train;

pub use loss::{
    codec_loss, codec_loss_var, kl_clamped, semantic_targets, CodecLossReport, LossVars, LossWeights, KL_FLOOR,
};
pub use spectral::{frame_count, log_magnitude, multiscale_spectral_l1, SCALES};
pub use stream::StreamingSession;
pub use train::{train_codec, CodecExample, CodecTrainConfig, CodecTrainMode, CodecTrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::masks::{decoder_stream_mask, encoder_mask, indicator, validate_positions, StreamVariant};
use crate::nn::{local_context, meta_tensor, read_meta, Linear, Transformer};
use crate::numerics::{Checkpoint, Graph, Mask, ParamId, ParamStore, Real, Tensor, Var};

/// Fixed latent standard deviation scale.
pub const SIGMA0: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub d_a: usize,
    /// Signal samples per frame.
    pub r: usize,
    pub vocab: usize,
    pub d_latent: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            d_a: 16,
            r: 16,
            vocab: 32,
            d_latent: 8,
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderMode {
    /// Global attention over all frames.
    Joint,
    /// Segment-causal attention (decodable segment by segment).
    Streaming,
}

#[derive(Clone, Debug)]
struct Encoder {
    mixer: Linear,
    ind: ParamId,
    tf: Transformer,
    out: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct Decoder {
    inp: Linear,
    ind: ParamId,
    pub(crate) tf: Transformer,
    feat: Linear,
    sig: Linear,
    sem: Linear,
}

/// Decoder outputs as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct DecodeVars {
    /// `[T, d_a]`
    pub features: Var,
    /// `[T, r]`
    pub signal: Var,
    /// `[T, V+1]`
    pub sem: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub features: Tensor<f32>,
    pub signal: Tensor<f32>,
    pub sem_logits: Tensor<f32>,
}

impl DecodeOutput {
    fn from_vars(g: &Graph<f32>, v: DecodeVars) -> Self {
        Self {
            features: g.value(v.features).clone(),
            signal: g.value(v.signal).clone(),
            sem_logits: g.value(v.sem).clone(),
        }
    }

    /// Appends the rows of `other`.
    pub fn extend(&mut self, other: &DecodeOutput) {
        fn cat(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
            let mut d = a.data().to_vec();
            d.extend_from_slice(b.data());
            Tensor::new(vec![a.rows() + b.rows(), b.cols()], d).expect("row concat")
        }
        self.features = cat(&self.features, &other.features);
        self.signal = cat(&self.signal, &other.signal);
        self.sem_logits = cat(&self.sem_logits, &other.sem_logits);
    }
}

#[derive(Clone, Debug)]
pub struct Codec {
    pub config: CodecConfig,
    pub store: ParamStore<f32>,
    enc: Encoder,
    joint: Decoder,
    stream: Decoder,
}

fn build_decoder<F: Real>(store: &mut ParamStore<F>, name: &str, c: &CodecConfig, rng: &mut impl Rng) -> Decoder {
    let d = c.d_model;
    Decoder {
        inp: Linear::new(store, &format!("{name}.inp"), c.d_latent, d, true, 1.0, rng),
        ind: store.add_normal(format!("{name}.ind"), &[2, d], 0.5, rng),
        tf: Transformer::new(store, &format!("{name}.tf"), c.dec_layers, d, c.heads, rng),
        feat: Linear::new(store, &format!("{name}.feat"), d, c.d_a, true, 1.0, rng),
        sig: Linear::new(store, &format!("{name}.sig"), d, c.r, true, 1.0, rng),
        sem: Linear::new(store, &format!("{name}.sem"), d, c.vocab + 1, true, 1.0, rng),
    }
}

/// Row `q` of the result is `s_i` when `q + 1 = p_i` and zero otherwise.
pub fn scatter<F: Real>(s: &Tensor<F>, p: &[usize], t: usize) -> Result<Tensor<F>> {
    validate_positions(p, t)?;
    if s.rank() != 2 || s.rows() != p.len() {
        return Err(Error::shape(
            "scatter",
            format!("{:?} latents for {} positions", s.shape(), p.len()),
        ));
    }
    let d = s.cols();
    let mut out = Tensor::zeros(&[t, d]);
    for (i, &q) in p.iter().enumerate() {
        out.row_mut(q - 1).copy_from_slice(s.row(i));
    }
    Ok(out)
}

fn scatter_index(p: &[usize], t: usize) -> Vec<Option<usize>> {
    let mut idx = vec![None; t];
    for (i, &q) in p.iter().enumerate() {
        idx[q - 1] = Some(i);
    }
    idx
}

/// `sigma * eps` with `sigma = |N(0, k_sigma * SIGMA0)|` and `eps ~ N(0, 1)`,
/// drawn independently per element.
pub fn latent_noise<F: Real>(shape: &[usize], k_sigma: f64, rng: &mut impl Rng) -> Result<Tensor<F>> {
    if !(k_sigma >= 1.0) {
        return Err(Error::Config(format!("k_sigma must be >= 1, got {k_sigma}")));
    }
    let scale = Normal::new(0.0, k_sigma * SIGMA0).map_err(|e| Error::Config(e.to_string()))?;
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let sigma: f64 = scale.sample(rng);
            let eps: f64 = StandardNormal.sample(rng);
            F::of(sigma.abs() * eps)
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// `s = s_mu + sigma * eps`; deterministic per seed.
pub fn reparameterize<F: Real>(s_mu: &Tensor<F>, k_sigma: f64, seed: u64) -> Result<Tensor<F>> {
    let noise = latent_noise::<F>(s_mu.shape(), k_sigma, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let data = s_mu.data().iter().zip(noise.data()).map(|(&m, &e)| m + e).collect();
    Tensor::new(s_mu.shape().to_vec(), data)
}

/// Multiplicative dropout mask: 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask<F: Real>(shape: &[usize], rate: f64, rng: &mut impl Rng) -> Result<Tensor<F>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    let keep = F::of(1.0 / (1.0 - rate));
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if rate > 0.0 && rng.random::<f64>() < rate {
                F::zero()
            } else {
                keep
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Zeroes each latent coordinate with probability `rate` and rescales the
/// survivors; the identity at rate 0.
pub fn latent_dropout<F: Real>(s: &Tensor<F>, rate: f64, seed: u64) -> Result<Tensor<F>> {
    let m = dropout_mask::<F>(s.shape(), rate, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let data = s.data().iter().zip(m.data()).map(|(&a, &b)| a * b).collect();
    Tensor::new(s.shape().to_vec(), data)
}

impl Codec {
    pub fn new(config: CodecConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let enc = Encoder {
            mixer: Linear::new(&mut store, "codec.enc.mixer", 3 * config.d_a, d, true, 1.0, &mut rng),
            ind: store.add_normal("codec.enc.ind", &[2, d], 0.5, &mut rng),
            tf: Transformer::new(&mut store, "codec.enc.tf", config.enc_layers, d, config.heads, &mut rng),
            out: Linear::new(&mut store, "codec.enc.out", d, config.d_latent, true, 1.0, &mut rng),
        };
        let joint = build_decoder(&mut store, "codec.joint", &config, &mut rng);
        let stream = build_decoder(&mut store, "codec.stream", &config, &mut rng);
        Self {
            config,
            store,
            enc,
            joint,
            stream,
        }
    }

    pub(crate) fn decoder(&self, mode: DecoderMode) -> &Decoder {
        match mode {
            DecoderMode::Joint => &self.joint,
            DecoderMode::Streaming => &self.stream,
        }
    }

    /// Local mixer plus indicator embedding: the encoder transformer's input.
    pub fn encoder_input<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        frames: &Tensor<F>,
        p: &[usize],
    ) -> Result<Var> {
        let t = frames.rows();
        if frames.rank() != 2 || frames.cols() != self.config.d_a {
            return Err(Error::shape(
                "encode",
                format!("frames {:?}, expected [T, {}]", frames.shape(), self.config.d_a),
            ));
        }
        let ind = indicator(p, t)?;
        let x = g.constant(frames.clone());
        let x = local_context(g, x)?;
        let x = self.enc.mixer.forward(g, store, x)?;
        let x = g.gelu(x);
        let table = g.param(store, self.enc.ind);
        let e = g.embedding(table, &ind)?;
        g.add(x, e)
    }

    /// Masked transformer over `h` (`[T, d_model]`), read out at `p`: `[L, d_latent]`.
    pub fn encode_from_input<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        h: Var,
        p: &[usize],
    ) -> Result<Var> {
        let t = g.shape(h)[0];
        let mask = encoder_mask(p, t)?;
        let positions: Vec<usize> = (0..t).collect();
        let y = self.enc.tf.forward(g, store, h, &positions, Some(&mask), None)?;
        let idx: Vec<Option<usize>> = p.iter().map(|&q| Some(q - 1)).collect();
        let rows = g.gather_rows(y, &idx)?;
        self.enc.out.forward(g, store, rows)
    }

    pub fn encode_var<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        frames: &Tensor<F>,
        p: &[usize],
    ) -> Result<Var> {
        let h = self.encoder_input(g, store, frames, p)?;
        self.encode_from_input(g, store, h, p)
    }

    /// Latent means `[L, d_latent]`.
    pub fn encode(&self, frames: &Tensor<f32>, p: &[usize]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let mu = self.encode_var(&mut g, &self.store, frames, p)?;
        Ok(g.value(mu).clone())
    }

    /// Decoder input rows for frames `rows` (0-based) given the scattered
    /// latent node `z` covering exactly those rows.
    fn decoder_rows<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        dec: &Decoder,
        z: Var,
        ind: &[usize],
    ) -> Result<Var> {
        let x = dec.inp.forward(g, store, z)?;
        let table = g.param(store, dec.ind);
        let e = g.embedding(table, ind)?;
        g.add(x, e)
    }

    fn heads<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, dec: &Decoder, y: Var) -> Result<DecodeVars> {
        Ok(DecodeVars {
            features: dec.feat.forward(g, store, y)?,
            signal: dec.sig.forward(g, store, y)?,
            sem: dec.sem.forward(g, store, y)?,
        })
    }

    /// Attention mask of a decoder mode.
    pub fn decoder_mask(mode: DecoderMode, p: &[usize], t: usize) -> Result<Mask> {
        match mode {
            DecoderMode::Joint => {
                validate_positions(p, t)?;
                Ok(Mask::full(t, t))
            }
            DecoderMode::Streaming => decoder_stream_mask(p, t, StreamVariant::SelfInclusive),
        }
    }

    /// Full-pass decode of latents `s` (`[L, d_latent]` node).
    pub fn decode_var<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        s: Var,
        p: &[usize],
        t: usize,
        mode: DecoderMode,
    ) -> Result<DecodeVars> {
        let mask = Self::decoder_mask(mode, p, t)?;
        if g.shape(s) != [p.len(), self.config.d_latent] {
            return Err(Error::shape(
                "decode",
                format!("latents {:?} for {} positions", g.shape(s), p.len()),
            ));
        }
        let dec = self.decoder(mode);
        let z = g.gather_rows(s, &scatter_index(p, t))?;
        let x = self.decoder_rows(g, store, dec, z, &indicator(p, t)?)?;
        let positions: Vec<usize> = (0..t).collect();
        let y = dec.tf.forward(g, store, x, &positions, Some(&mask), None)?;
        self.heads(g, store, dec, y)
    }

    pub fn decode(&self, s: &Tensor<f32>, p: &[usize], t: usize, mode: DecoderMode) -> Result<DecodeOutput> {
        let mut g = Graph::new();
        let sv = g.constant(s.clone());
        let v = self.decode_var(&mut g, &self.store, sv, p, t, mode)?;
        Ok(DecodeOutput::from_vars(&g, v))
    }

    /// Streaming decode one segment at a time with cache eviction; returns the
    /// output and the peak number of cached keys.
    pub fn decode_segments(&self, s: &Tensor<f32>, p: &[usize], t: usize) -> Result<(DecodeOutput, usize)> {
        validate_positions(p, t)?;
        let mut session = StreamingSession::new(self);
        let mut out: Option<DecodeOutput> = None;
        let mut prev = 0;
        for (i, &q) in p.iter().enumerate() {
            let seg = session.push_segment(s.row(i), q - prev)?;
            prev = q;
            match out.as_mut() {
                Some(o) => o.extend(&seg),
                None => out = Some(seg),
            }
        }
        if t > prev {
            let seg = session.finish(t - prev)?;
            out.as_mut().expect("at least one token").extend(&seg);
        }
        Ok((out.expect("at least one token"), session.peak_cache()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::new();
        ck.insert(
            "meta.codec",
            meta_tensor(&[
                c.d_a,
                c.r,
                c.vocab,
                c.d_latent,
                c.d_model,
                c.heads,
                c.enc_layers,
                c.dec_layers,
            ]),
        );
        self.store.save_into(&mut ck, "");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = read_meta(ck, "meta.codec", 8)?;
        let mut codec = Self::new(CodecConfig {
            d_a: m[0],
            r: m[1],
            vocab: m[2],
            d_latent: m[3],
            d_model: m[4],
            heads: m[5],
            enc_layers: m[6],
            dec_layers: m[7],
            seed: 0,
        });
        codec.store.load_from(ck, "")?;
        Ok(codec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> CodecConfig {
        CodecConfig {
            d_a: 3,
            r: 4,
            vocab: 5,
            d_latent: 2,
            d_model: 8,
            heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            seed: 3,
        }
    }

    #[test]
    fn scatter_examples() {
        let s = Tensor::from_rows(&[vec![1.0f64, 2.0]]).unwrap();
        let z = scatter(&s, &[2], 3).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0, 1.0, 2.0, 0.0, 0.0]);
        let s = Tensor::from_rows(&[vec![1.0f64], vec![-2.0], vec![3.0]]).unwrap();
        assert_eq!(scatter(&s, &[1, 2, 3], 3).unwrap(), s);
        assert!(scatter(&s, &[1, 1, 3], 3).is_err());
    }

    #[test]
    fn zero_noise_and_identity_dropout() {
        let mu = Tensor::from_rows(&[vec![0.3f64, -1.0], vec![2.0, 0.5]]).unwrap();
        assert_eq!(latent_dropout(&mu, 0.0, 9).unwrap(), mu);
        assert!(latent_dropout(&mu, 1.0, 9).is_err());
        assert!(reparameterize(&mu, 0.5, 1).is_err());
        assert_eq!(
            reparameterize(&mu, 1.0, 4).unwrap(),
            reparameterize(&mu, 1.0, 4).unwrap()
        );
    }

    #[test]
    fn single_frame_encode() {
        let codec = Codec::new(tiny());
        let x = Tensor::from_rows(&[vec![0.1f32, 0.2, 0.3]]).unwrap();
        assert_eq!(codec.encode(&x, &[1]).unwrap().shape(), &[1, 2]);
    }

    #[test]
    fn zero_latents_decode_deterministically() {
        let codec = Codec::new(tiny());
        let s = Tensor::zeros(&[2, 2]);
        let a = codec.decode(&s, &[2, 4], 5, DecoderMode::Joint).unwrap();
        let b = codec.decode(&s, &[2, 4], 5, DecoderMode::Joint).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let codec = Codec::new(tiny());
        let back = Codec::from_checkpoint(&codec.to_checkpoint()).unwrap();
        let s = Tensor::from_rows(&[vec![0.5f32, -0.5]]).unwrap();
        assert_eq!(
            codec.decode(&s, &[2], 3, DecoderMode::Streaming).unwrap(),
            back.decode(&s, &[2], 3, DecoderMode::Streaming).unwrap()
        );
    }

    fn frames(t: usize, d: usize, k: f64) -> Tensor<f64> {
        Tensor::new(vec![t, d], (0..t * d).map(|i| (i as f64 * k).sin()).collect()).unwrap()
    }

    #[test]
    fn latent_depends_only_on_its_window() {
        let codec = Codec::new(tiny());
        let store = codec.store.cast::<f64>();
        let p = [2, 5, 6, 9];
        let x = frames(10, 3, 0.61);
        let mut g = Graph::new();
        let h = codec.encoder_input(&mut g, &store, &x, &p).unwrap();
        let h0 = g.value(h).clone();
        let base = codec.encode_from_input(&mut g, &store, h, &p).unwrap();
        let base = g.value(base).clone();
        for i in 0..p.len() {
            let lo = if i == 0 { 1 } else { p[i - 1] + 1 };
            let hi = if i + 1 == p.len() { 10 } else { p[i + 1] - 1 };
            let mut h1 = h0.clone();
            for q in (1..=10).filter(|q| *q < lo || *q > hi) {
                for v in h1.row_mut(q - 1) {
                    *v += 3.0;
                }
            }
            let mut g = Graph::new();
            let hv = g.constant(h1);
            let out = codec.encode_from_input(&mut g, &store, hv, &p).unwrap();
            assert_eq!(g.value(out).row(i), base.row(i), "token {i}");
        }
    }

    #[test]
    fn segment_decode_matches_full_streaming_pass() {
        let codec = Codec::new(tiny());
        let p = [1, 3, 4, 8];
        let s: Tensor<f32> = frames(4, 2, 0.9).cast();
        let full = codec.decode(&s, &p, 10, DecoderMode::Streaming).unwrap();
        let (seg, peak) = codec.decode_segments(&s, &p, 10).unwrap();
        assert!(full.features.max_abs_diff(&seg.features) <= 1e-6);
        assert!(full.signal.max_abs_diff(&seg.signal) <= 1e-6);
        assert!(full.sem_logits.max_abs_diff(&seg.sem_logits) <= 1e-6);
        assert_eq!(peak, 6);
    }

    #[test]
    fn noise_moments() {
        let n = 100_000;
        let e = latent_noise::<f64>(&[n], 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let sd = (e.data().iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        assert!((sd - SIGMA0).abs() / SIGMA0 < 0.02, "{sd}");
        let mad = e.data().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        let expect = SIGMA0 * 2.0 / std::f64::consts::PI;
        assert!((mad - expect).abs() / expect < 0.02, "{mad}");
    }

    #[test]
    fn dropout_moments() {
        let s = Tensor::full(&[100_000], 1.0f64);
        let d = latent_dropout(&s, 0.5, 8).unwrap();
        let zeros = d.data().iter().filter(|v| **v == 0.0).count() as f64 / 1e5;
        assert!((zeros - 0.5).abs() < 0.01);
        let m = d.data().iter().sum::<f64>() / 1e5;
        assert!((m - 1.0).abs() < 0.01);
    }

    #[test]
    fn codec_loss_gradients() {
        let codec = Codec::new(tiny());
        let store = codec.store.cast::<f64>();
        let x = frames(5, 3, 0.37);
        let sig = frames(5, 4, 1.3);
        let noise = frames(2, 2, 0.5).map(|v| 0.3 * v);
        let keep = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 1.0]]).unwrap();
        for mode in [DecoderMode::Joint, DecoderMode::Streaming] {
            let err = crate::numerics::param_gradcheck(&store, 1e-5, 3, |g, s| {
                codec.train_loss(
                    g,
                    s,
                    &x,
                    &sig,
                    &[1, 4],
                    &[2, 5],
                    mode,
                    noise.clone(),
                    keep.clone(),
                    LossWeights::default(),
                )
            })
            .unwrap();
            assert!(err < 1e-3, "{mode:?} {err}");
        }
    }
}
