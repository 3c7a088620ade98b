use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::latent_noise;
use crate::error::{Error, Result};
use crate::nn::{batch_gradients, meta_tensor, read_meta, Mlp};
use crate::numerics::{lr_at, Adam, Checkpoint, Graph, ParamStore, Real, Tensor, Var};

const EPS: f64 = 1e-8;

/// Per-token speaker embedding of a latent.
#[derive(Clone, Debug)]
pub struct SpeakerHead {
    pub d_latent: usize,
    pub hidden: usize,
    pub d_out: usize,
    pub store: ParamStore<f32>,
    mlp: Mlp,
}

/// Training rows for [`SpeakerHead::train`].
#[derive(Clone, Debug)]
pub struct SpeakerExample {
    /// Latent means `[L, d_latent]`.
    pub latents: Tensor<f32>,
    /// Target direction (any norm).
    pub target: Vec<f32>,
}

fn normalize(v: &mut [f32]) {
    let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
    }
}

/// Row-wise cosine between `h` and the constant unit rows of `target`.
pub fn cosine_rows<F: Real>(g: &mut Graph<F>, h: Var, target: &Tensor<F>) -> Result<Var> {
    let t = g.constant(target.clone());
    let dot = g.mul(h, t)?;
    let dot = g.sum_last(dot);
    let sq = g.mul(h, h)?;
    let sq = g.sum_last(sq);
    let sq = g.add_scalar(sq, EPS);
    let inv = g.log(sq);
    let inv = g.scale(inv, -0.5);
    let inv = g.exp(inv);
    g.mul(dot, inv)
}

impl SpeakerHead {
    pub fn new(d_latent: usize, hidden: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "spk", &[d_latent, hidden, hidden, d_out], &mut rng);
        Self {
            d_latent,
            hidden,
            d_out,
            store,
            mlp,
        }
    }

    /// Head outputs `[n, d_out]` for latent rows `[n, d_latent]`.
    pub fn embed(&self, s: &Tensor<f32>) -> Result<Tensor<f32>> {
        if s.cols() != self.d_latent {
            return Err(Error::shape(
                "speaker head",
                format!("latent width {} != {}", s.cols(), self.d_latent),
            ));
        }
        let mut g = Graph::new();
        let x = g.constant(s.clone());
        let h = self.mlp.forward(&mut g, &self.store, x)?;
        Ok(g.value(h).clone())
    }

    /// Unit-norm mean of the head outputs over `s`.
    pub fn reference(&self, s: &Tensor<f32>) -> Result<Vec<f32>> {
        if s.rows() == 0 {
            return Err(Error::Config("reference embedding of an empty prompt".into()));
        }
        let h = self.embed(s)?;
        let mut m = vec![0f32; self.d_out];
        for i in 0..h.rows() {
            for (a, b) in m.iter_mut().zip(h.row(i)) {
                *a += b / h.rows() as f32;
            }
        }
        normalize(&mut m);
        Ok(m)
    }

    /// Cosine of each row's embedding with `reference`.
    pub fn cosines(&self, s: &Tensor<f32>, reference: &[f32]) -> Result<Vec<f64>> {
        let h = self.embed(s)?;
        Ok((0..h.rows())
            .map(|i| {
                let a: Vec<f64> = h.row(i).iter().map(|&v| v as f64).collect();
                let b: Vec<f64> = reference.iter().map(|&v| v as f64).collect();
                crate::harness::cosine(&a, &b)
            })
            .collect())
    }

    pub fn loss<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        s: &Tensor<F>,
        target: &Tensor<F>,
    ) -> Result<Var> {
        let x = g.constant(s.clone());
        let h = self.mlp.forward(g, store, x)?;
        let c = cosine_rows(g, h, target)?;
        let m = g.mean(c);
        let m = g.scale(m, -1.0);
        Ok(g.add_scalar(m, 1.0))
    }

    /// Cosine regression of every (noisy) latent onto its utterance target.
    pub fn train(
        &mut self,
        data: &[SpeakerExample],
        steps: u64,
        batch: usize,
        lr: f64,
        k_sigma: f64,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::Config("empty speaker corpus".into()));
        }
        for ex in data {
            if ex.latents.cols() != self.d_latent || ex.target.len() != self.d_out || ex.latents.rows() == 0 {
                return Err(Error::shape(
                    "speaker example",
                    format!("{:?} / {}", ex.latents.shape(), ex.target.len()),
                ));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5be4);
        let mut opt = Adam::new(lr);
        let mut losses = Vec::new();
        for step in 0..steps {
            let mut items = Vec::with_capacity(batch);
            for _ in 0..batch {
                let ex = data.choose(&mut rng).expect("non-empty");
                let noise: Tensor<f32> = latent_noise(ex.latents.shape(), k_sigma, &mut rng)?;
                let s = Tensor::new(
                    ex.latents.shape().to_vec(),
                    ex.latents.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect(),
                )?;
                let mut t = ex.target.clone();
                normalize(&mut t);
                let target = Tensor::from_rows(&vec![t; s.rows()])?;
                items.push((s, target));
            }
            let head = &*self;
            let (loss, grads) = batch_gradients(&head.store, &items, |g, (s, t)| head.loss(g, &head.store, s, t))?;
            opt.lr = lr_at(step, steps, lr, steps / 20 + 1, 0.1);
            opt.step(&mut self.store, &grads)?;
            losses.push(loss);
        }
        Ok(losses)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("meta.spk", meta_tensor(&[self.d_latent, self.hidden, self.d_out]));
        self.store.save_into(&mut ck, "");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = read_meta(ck, "meta.spk", 3)?;
        let mut head = Self::new(m[0], m[1], m[2], 0);
        head.store.load_from(ck, "")?;
        Ok(head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn cosine_loss_gradient() {
        let head = SpeakerHead::new(3, 5, 4, 1);
        let store = head.store.cast::<f64>();
        let s = Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.9, 1.1, 0.4, -0.5]).unwrap();
        let t = Tensor::from_rows(&[vec![0.5, 0.5, 0.5, 0.5], vec![0.0, 0.6, 0.0, 0.8]]).unwrap();
        let err = crate::numerics::param_gradcheck(&store, 1e-6, 4, |g, st| head.loss(g, st, &s, &t)).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn learns_separable_speakers() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let centers = [vec![2.0f32, 0.0, 0.0], vec![0.0, 2.0, 0.0]];
        let targets = [vec![1.0f32, 0.0], vec![0.0, 1.0]];
        let data: Vec<SpeakerExample> = (0..20)
            .map(|i| {
                let c = &centers[i % 2];
                let rows: Vec<Vec<f32>> = (0..4)
                    .map(|_| c.iter().map(|&v| v + r.random_range(-0.3..0.3)).collect())
                    .collect();
                SpeakerExample {
                    latents: Tensor::from_rows(&rows).unwrap(),
                    target: targets[i % 2].clone(),
                }
            })
            .collect();
        let mut head = SpeakerHead::new(3, 16, 2, 0);
        head.train(&data, 200, 8, 1e-2, 1.0, 0).unwrap();
        let reference = head.reference(&data[0].latents).unwrap();
        assert!((reference.iter().map(|v| v * v).sum::<f32>() - 1.0).abs() < 1e-5);
        let same = head.cosines(&data[2].latents, &reference).unwrap();
        let other = head.cosines(&data[3].latents, &reference).unwrap();
        assert!(same.iter().all(|&c| c > 0.9), "{same:?}");
        assert!(other.iter().all(|&c| c < 0.5), "{other:?}");
        let re = SpeakerHead::from_checkpoint(&head.to_checkpoint()).unwrap();
        assert_eq!(
            re.embed(&data[0].latents).unwrap(),
            head.embed(&data[0].latents).unwrap()
        );
    }
}
