use super::{Codec, DecodeOutput, DecodeVars, DecoderMode};
use crate::error::{Error, Result};
use crate::nn::KvCache;
use crate::numerics::{Graph, Mask, Tensor};

/// Incremental streaming decoder. Segment `i` covers frames
/// `(p_{i-1}, p_i]`; before it is decoded, every cached row at or before
/// `p_{i-2}` is evicted, so the cache never holds more than two segments.
pub struct StreamingSession<'a> {
    codec: &'a Codec,
    caches: Vec<KvCache<f32>>,
    frames_done: usize,
    last_len: usize,
    peak: usize,
    finished: bool,
}

impl<'a> StreamingSession<'a> {
    pub fn new(codec: &'a Codec) -> Self {
        Self {
            codec,
            caches: codec.decoder(DecoderMode::Streaming).tf.new_caches(),
            frames_done: 0,
            last_len: 0,
            peak: 0,
            finished: false,
        }
    }

    pub fn frames_done(&self) -> usize {
        self.frames_done
    }

    /// Largest number of cached keys seen (per layer).
    pub fn peak_cache(&self) -> usize {
        self.peak
    }

    pub fn cache_len(&self) -> usize {
        self.caches.first().map_or(0, |c| c.len())
    }

    fn run(&mut self, latent: Option<&[f32]>, len: usize) -> Result<DecodeOutput> {
        if self.finished {
            return Err(Error::Config("streaming session already finished".into()));
        }
        let c = &self.codec.config;
        for cache in &mut self.caches {
            let drop = cache.len().saturating_sub(self.last_len);
            cache.evict_front(drop);
        }
        let cached = self.cache_len();
        let mut z = Tensor::<f32>::zeros(&[len, c.d_latent]);
        let mut ind = vec![0usize; len];
        if let Some(s) = latent {
            if s.len() != c.d_latent {
                return Err(Error::shape(
                    "stream",
                    format!("latent width {} != {}", s.len(), c.d_latent),
                ));
            }
            z.row_mut(len - 1).copy_from_slice(s);
            ind[len - 1] = 1;
        }
        let dec = self.codec.decoder(DecoderMode::Streaming);
        let store = &self.codec.store;
        let mut g = Graph::new();
        let zv = g.constant(z);
        let x = self.codec.decoder_rows(&mut g, store, dec, zv, &ind)?;
        let positions: Vec<usize> = (self.frames_done..self.frames_done + len).collect();
        let mask = Mask::full(len, cached + len);
        let y = dec
            .tf
            .forward(&mut g, store, x, &positions, Some(&mask), Some(&mut self.caches))?;
        let v: DecodeVars = self.codec.heads(&mut g, store, dec, y)?;
        self.peak = self.peak.max(self.cache_len());
        self.frames_done += len;
        self.last_len = len;
        Ok(DecodeOutput::from_vars(&g, v))
    }

    /// Decodes the segment closed by a token latent; `len` counts the frames
    /// from the previous aligned position (exclusive) to this one (inclusive).
    pub fn push_segment(&mut self, latent: &[f32], len: usize) -> Result<DecodeOutput> {
        if len == 0 {
            return Err(Error::InvalidAlignment("empty segment".into()));
        }
        self.run(Some(latent), len)
    }

    /// Decodes `len` trailing frames after the last aligned position and
    /// closes the session.
    pub fn finish(&mut self, len: usize) -> Result<DecodeOutput> {
        let out = self.run(None, len)?;
        self.finished = true;
        Ok(out)
    }
}
