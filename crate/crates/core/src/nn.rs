//! Layers shared by the aligner, the codec and the language model.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{sum_grads, Graph, Mask, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_normal(format!("{name}.w"), &[d_in, d_out], gain / (d_in as f64).sqrt(), rng);
        let b = bias.then(|| store.add_full(format!("{name}.b"), &[d_out], 0.0));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add_full(format!("{name}.gamma"), &[d], 1.0),
            beta: store.add_full(format!("{name}.beta"), &[d], 0.0),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let gm = g.param(store, self.gamma);
        let bt = g.param(store, self.beta);
        g.layer_norm(x, gm, bt, 1e-5)
    }
}

/// Stack of linear layers with GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, 1.0, rng))
            .collect();
        Self { layers }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, mut x: Var) -> Result<Var> {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, store, x)?;
            if i + 1 < self.layers.len() {
                x = g.gelu(x);
            }
        }
        Ok(x)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }
}

/// Keys and values (after rotary rotation) of already-processed rows.
#[derive(Clone, Debug)]
pub struct KvCache<F> {
    keys: Vec<F>,
    values: Vec<F>,
    width: usize,
}

impl<F: Real> KvCache<F> {
    pub fn new(width: usize) -> Self {
        Self {
            keys: Vec::new(),
            values: Vec::new(),
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Drops the oldest `n` rows.
    pub fn evict_front(&mut self, n: usize) {
        let n = n.min(self.len()) * self.width;
        self.keys.drain(..n);
        self.values.drain(..n);
    }

    fn tensors(&self) -> (Tensor<F>, Tensor<F>) {
        let shape = vec![self.len(), self.width];
        (
            Tensor::new(shape.clone(), self.keys.clone()).expect("cache shape"),
            Tensor::new(shape, self.values.clone()).expect("cache shape"),
        )
    }
}

/// Pre-norm transformer layer with rotary multi-head self-attention.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    heads: usize,
    d_model: usize,
}

pub const ROPE_BASE: f64 = 10_000.0;

impl TransformerLayer {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            d_model % heads == 0 && (d_model / heads) % 2 == 0,
            "head width must be even"
        );
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model),
            wq: Linear::new(store, &format!("{name}.wq"), d_model, d_model, false, 1.0, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d_model, d_model, false, 1.0, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d_model, d_model, false, 1.0, rng),
            wo: Linear::new(store, &format!("{name}.wo"), d_model, d_model, true, 0.5, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model),
            ff1: Linear::new(store, &format!("{name}.ff1"), d_model, d_ff, true, 1.0, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), d_ff, d_model, true, 0.5, rng),
            heads,
            d_model,
        }
    }

    /// Rotates `[n, d]` rows, head by head.
    fn rope_rows<F: Real>(&self, g: &mut Graph<F>, x: Var, positions: &[usize]) -> Result<Var> {
        let n = positions.len();
        let dh = self.d_model / self.heads;
        let flat = g.reshape(x, &[1, n * self.heads, dh])?;
        let rep: Vec<usize> = positions
            .iter()
            .flat_map(|&p| std::iter::repeat_n(p, self.heads))
            .collect();
        let r = g.rope(flat, &rep, ROPE_BASE)?;
        g.reshape(r, &[n, self.d_model])
    }

    /// `x` is `[n, d]` with one absolute position per row. With a cache, the
    /// cached rows are prepended to the keys and values and the new rows are
    /// appended to the cache afterwards; `mask` is then `[n, cached + n]`.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        positions: &[usize],
        mask: Option<&Mask>,
        cache: Option<&mut KvCache<F>>,
    ) -> Result<Var> {
        let n = g.shape(x)[0];
        if positions.len() != n {
            return Err(Error::shape(
                "attention",
                format!("{n} rows with {} positions", positions.len()),
            ));
        }
        let h = self.ln1.forward(g, store, x)?;
        let q = self.wq.forward(g, store, h)?;
        let k = self.wk.forward(g, store, h)?;
        let v = self.wv.forward(g, store, h)?;
        let q = self.rope_rows(g, q, positions)?;
        let k = self.rope_rows(g, k, positions)?;
        let (k_all, v_all) = match cache {
            Some(c) => {
                let (k_new, v_new) = (g.value(k).data().to_vec(), g.value(v).data().to_vec());
                let out = if c.is_empty() {
                    (k, v)
                } else {
                    let (kc, vc) = c.tensors();
                    let kc = g.constant(kc);
                    let vc = g.constant(vc);
                    (g.concat_rows(kc, k)?, g.concat_rows(vc, v)?)
                };
                c.keys.extend(k_new);
                c.values.extend(v_new);
                out
            }
            None => (k, v),
        };
        let qh = g.split_heads(q, self.heads)?;
        let kh = g.split_heads(k_all, self.heads)?;
        let vh = g.split_heads(v_all, self.heads)?;
        let scores = g.matmul_t(qh, kh, false, true)?;
        let dh = (self.d_model / self.heads) as f64;
        let scores = g.scale(scores, 1.0 / dh.sqrt());
        let probs = g.softmax(scores, mask)?;
        let ctx = g.matmul(probs, vh)?;
        let ctx = g.merge_heads(ctx)?;
        let o = self.wo.forward(g, store, ctx)?;
        let x = g.add(x, o)?;
        let h = self.ln2.forward(g, store, x)?;
        let f = self.ff1.forward(g, store, h)?;
        let f = g.gelu(f);
        let f = self.ff2.forward(g, store, f)?;
        g.add(x, f)
    }
}

/// Stack of transformer layers followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Transformer {
    layers: Vec<TransformerLayer>,
    ln_f: LayerNorm,
    pub d_model: usize,
}

impl Transformer {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        layers: usize,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            layers: (0..layers)
                .map(|i| TransformerLayer::new(store, &format!("{name}.{i}"), d_model, heads, 4 * d_model, rng))
                .collect(),
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), d_model),
            d_model,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn new_caches<F: Real>(&self) -> Vec<KvCache<F>> {
        (0..self.layers.len()).map(|_| KvCache::new(self.d_model)).collect()
    }

    /// Runs all layers; `tap` (if any) receives the hidden state after that
    /// many layers, before the final norm.
    pub fn forward_with_tap<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        mut x: Var,
        positions: &[usize],
        mask: Option<&Mask>,
        mut caches: Option<&mut [KvCache<F>]>,
        tap: Option<usize>,
    ) -> Result<(Var, Option<Var>)> {
        let mut tapped = None;
        for (i, layer) in self.layers.iter().enumerate() {
            if tap == Some(i) {
                tapped = Some(x);
            }
            let cache = caches.as_deref_mut().map(|c| &mut c[i]);
            x = layer.forward(g, store, x, positions, mask, cache)?;
        }
        if tap == Some(self.layers.len()) {
            tapped = Some(x);
        }
        Ok((self.ln_f.forward(g, store, x)?, tapped))
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        positions: &[usize],
        mask: Option<&Mask>,
        caches: Option<&mut [KvCache<F>]>,
    ) -> Result<Var> {
        Ok(self.forward_with_tap(g, store, x, positions, mask, caches, None)?.0)
    }
}

/// Concatenates each row with its neighbours (zero padded): `[T, 3d]`.
pub fn local_context<F: Real>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let t = g.shape(x)[0];
    let prev: Vec<Option<usize>> = (0..t).map(|i| i.checked_sub(1)).collect();
    let next: Vec<Option<usize>> = (0..t).map(|i| (i + 1 < t).then_some(i + 1)).collect();
    let a = g.gather_rows(x, &prev)?;
    let b = g.gather_rows(x, &next)?;
    g.concat_cols(&[a, x, b])
}

/// Concatenates each row with the two rows before it (zero padded): `[T, 3d]`.
pub fn causal_context<F: Real>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let t = g.shape(x)[0];
    let back1: Vec<Option<usize>> = (0..t).map(|i| i.checked_sub(1)).collect();
    let back2: Vec<Option<usize>> = (0..t).map(|i| i.checked_sub(2)).collect();
    let a = g.gather_rows(x, &back2)?;
    let b = g.gather_rows(x, &back1)?;
    g.concat_cols(&[a, b, x])
}

/// Sinusoidal embedding of a scalar in `[0, 1]`, `width` even.
pub fn sinusoidal<F: Real>(t: f64, width: usize) -> Vec<F> {
    let half = width / 2;
    let mut out = Vec::with_capacity(width);
    for j in 0..half {
        let freq = (1000f64).powf(-(j as f64) / half.max(1) as f64) * 1000.0;
        out.push(F::of((t * freq).sin()));
    }
    for j in 0..half {
        let freq = (1000f64).powf(-(j as f64) / half.max(1) as f64) * 1000.0;
        out.push(F::of((t * freq).cos()));
    }
    out
}

/// Evaluates `loss_fn` on every item in its own graph (in parallel) and
/// returns the mean loss with the summed parameter gradients scaled by
/// `1 / items.len()`.
pub fn batch_gradients<F, T, L>(store: &ParamStore<F>, items: &[T], loss_fn: L) -> Result<(f64, Vec<Vec<F>>)>
where
    F: Real,
    T: Sync,
    L: Fn(&mut Graph<F>, &T) -> Result<Var> + Sync,
{
    let shards: Vec<(f64, Vec<Vec<F>>)> = items
        .par_iter()
        .map(|item| {
            let mut g = Graph::new();
            let loss = loss_fn(&mut g, item)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss is {value}")));
            }
            Ok((value, g.backward(loss)?.param_grads(store)))
        })
        .collect::<Result<_>>()?;
    let n = items.len().max(1) as f64;
    let loss = shards.iter().map(|s| s.0).sum::<f64>() / n;
    let mut grads = sum_grads(shards.into_iter().map(|s| s.1).collect());
    crate::numerics::scale_grads(&mut grads, 1.0 / n);
    Ok((loss, grads))
}

/// Integer hyperparameters stored next to the weights in a checkpoint.
pub fn meta_tensor(values: &[usize]) -> Tensor<f32> {
    Tensor::vector(values.iter().map(|&v| v as f32).collect())
}

pub fn read_meta(ckpt: &crate::numerics::Checkpoint, name: &str, n: usize) -> Result<Vec<usize>> {
    let t = ckpt.require(name)?;
    if t.numel() != n {
        return Err(Error::Format(format!(
            "{name} holds {} values, expected {n}",
            t.numel()
        )));
    }
    Ok(t.data().iter().map(|&v| v.max(0.0).round() as usize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::param_gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (ParamStore<f64>, Transformer, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let tf = Transformer::new(&mut store, "tf", 2, 8, 2, &mut rng);
        let x = Tensor::new(
            vec![5, 8],
            (0..40).map(|i| ((i * 7 % 11) as f64 / 11.0) - 0.5).collect(),
        )
        .unwrap();
        (store, tf, x)
    }

    #[test]
    fn incremental_cache_matches_full_causal_pass() {
        let (store, tf, x) = toy();
        let pos: Vec<usize> = (0..5).collect();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let full = tf
            .forward(&mut g, &store, xv, &pos, Some(&Mask::causal(5, 5)), None)
            .unwrap();
        let full = g.value(full).clone();
        let mut caches = tf.new_caches();
        for i in 0..5 {
            let mut g = Graph::new();
            let row = g.constant(Tensor::new(vec![1, 8], x.row(i).to_vec()).unwrap());
            let y = tf
                .forward(
                    &mut g,
                    &store,
                    row,
                    &[i],
                    Some(&Mask::full(1, i + 1)),
                    Some(&mut caches),
                )
                .unwrap();
            for (a, b) in g.value(y).data().iter().zip(full.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(caches[0].len(), 5);
        caches[0].evict_front(3);
        assert_eq!(caches[0].len(), 2);
    }

    #[test]
    fn transformer_gradients_match_finite_differences() {
        let (store, tf, x) = toy();
        let pos: Vec<usize> = (0..5).collect();
        let err = param_gradcheck(&store, 1e-5, 6, |g, s| {
            let xv = g.constant(x.clone());
            let y = tf.forward(g, s, xv, &pos, Some(&Mask::causal(5, 5)), None)?;
            let y2 = g.mul(y, y)?;
            let y3 = g.mul(y2, y)?;
            Ok(g.mean(y3))
        })
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
