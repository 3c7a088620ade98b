//! Conditional flow matching over packed `[s | before bits | after bits]`
//! targets, with Euler sampling and guidance on the latent slots only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::durbits::{unpack, DurationPair, DEFAULT_BITS};
use crate::error::{Error, Result};
use crate::nn::{meta_tensor, read_meta, sinusoidal, Mlp};
use crate::numerics::{Checkpoint, Graph, ParamStore, Real, Tensor, Var};

pub const TIME_EMBED: usize = 32;

/// Which condition the guidance branch subtracts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMode {
    /// All-zero condition vector.
    Zero,
    /// Condition computed from the context with its text removed.
    TextFree,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub sigma_min: f64,
    pub steps: usize,
    pub lambda_cfg: f64,
    pub negative: NegativeMode,
    /// Latent width; the first `d` coordinates are guided.
    pub d: usize,
    /// Bits per duration; the last `2 * bits` coordinates bypass guidance.
    pub bits: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sigma_min: 1e-5,
            steps: 10,
            lambda_cfg: 1.8,
            negative: NegativeMode::TextFree,
            d: 8,
            bits: DEFAULT_BITS,
        }
    }
}

impl FlowConfig {
    pub fn width(&self) -> usize {
        self.d + 2 * self.bits
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("flow steps must be >= 1".into()));
        }
        if !(self.lambda_cfg >= 0.0 && self.lambda_cfg.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_cfg must be >= 0, got {}",
                self.lambda_cfg
            )));
        }
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(Error::Config(format!(
                "sigma_min must be in [0, 1), got {}",
                self.sigma_min
            )));
        }
        Ok(())
    }
}

/// `y_t = t y1 + (1 - (1 - sigma_min) t) y0`
pub fn interpolate<F: Real>(y1: &[F], y0: &[F], t: f64, sigma_min: f64) -> Vec<F> {
    let a = F::of(t);
    let b = F::of(1.0 - (1.0 - sigma_min) * t);
    y1.iter().zip(y0).map(|(&x1, &x0)| a * x1 + b * x0).collect()
}

/// Regression target `y1 - (1 - sigma_min) y0`.
pub fn target_velocity<F: Real>(y1: &[F], y0: &[F], sigma_min: f64) -> Vec<F> {
    let c = F::of(1.0 - sigma_min);
    y1.iter().zip(y0).map(|(&x1, &x0)| x1 - c * x0).collect()
}

/// Guided field: `v_neg + lambda (v_pos - v_neg)` on the first `d`
/// coordinates, `v_pos` on the rest. `lambda = 1` returns `v_pos` exactly.
pub fn cfg_combine<F: Real>(v_pos: &[F], v_neg: &[F], lambda: f64, d: usize) -> Result<Vec<F>> {
    if v_pos.len() != v_neg.len() || d > v_pos.len() {
        return Err(Error::shape(
            "cfg_combine",
            format!("{} vs {} (split {d})", v_pos.len(), v_neg.len()),
        ));
    }
    if lambda == 1.0 {
        return Ok(v_pos.to_vec());
    }
    let l = F::of(lambda);
    Ok(v_pos
        .iter()
        .zip(v_neg)
        .enumerate()
        .map(|(k, (&p, &n))| if k < d { n + l * (p - n) } else { p })
        .collect())
}

/// Fixed-step Euler integration from `y` over `t = k / steps`.
pub fn euler_integrate<F: Real>(
    mut y: Tensor<F>,
    steps: usize,
    mut field: impl FnMut(&Tensor<F>, f64) -> Result<Tensor<F>>,
) -> Result<Tensor<F>> {
    if steps == 0 {
        return Err(Error::Config("flow steps must be >= 1".into()));
    }
    let h = F::of(1.0 / steps as f64);
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = field(&y, t)?;
        if v.shape() != y.shape() {
            return Err(Error::shape(
                "euler",
                format!("field {:?} for state {:?}", v.shape(), y.shape()),
            ));
        }
        for (a, &b) in y.data_mut().iter_mut().zip(v.data()) {
            *a += h * b;
        }
        if !y.is_finite() {
            return Err(Error::NonFinite(format!(
                "euler state at step {k} of {steps} (t = {t:.3})"
            )));
        }
    }
    Ok(y)
}

/// Exact marginal field when the data distribution is `N(mean, spread^2 I)`
/// (`spread = 0` is a point mass, whose paths are straight lines).
pub fn gaussian_target_field(y: &[f64], t: f64, mean: &[f64], spread: f64, sigma_min: f64) -> Vec<f64> {
    let a = 1.0 - (1.0 - sigma_min) * t;
    let var = t * t * spread * spread + a * a;
    let rate = (t * spread * spread - (1.0 - sigma_min) * a) / var;
    y.iter().zip(mean).map(|(&yv, &m)| m + rate * (yv - t * m)).collect()
}

/// Where the exact flow carries `start` at `t = 1`.
pub fn gaussian_target_endpoint(start: &[f64], mean: &[f64], spread: f64, sigma_min: f64) -> Vec<f64> {
    let s1 = (spread * spread + sigma_min * sigma_min).sqrt();
    start.iter().zip(mean).map(|(&y, &m)| m + s1 * y).collect()
}

/// Terminal L2 error of Euler integration of [`gaussian_target_field`].
pub fn flow_oracle_error(start: &[f64], mean: &[f64], spread: f64, steps: usize, sigma_min: f64) -> Result<f64> {
    let y = Tensor::new(vec![1, start.len()], start.to_vec())?;
    let end = euler_integrate(y, steps, |y, t| {
        Tensor::new(
            vec![1, mean.len()],
            gaussian_target_field(y.row(0), t, mean, spread, sigma_min),
        )
    })?;
    let exact = gaussian_target_endpoint(start, mean, spread, sigma_min);
    Ok(end
        .data()
        .iter()
        .zip(&exact)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Standard normal tensor.
pub fn gaussian<F: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape.to_vec(), data).expect("gaussian shape")
}

/// MLP vector field over `[y_t, time embedding, c]`.
#[derive(Clone, Debug)]
pub struct VectorField {
    pub width: usize,
    pub d_cond: usize,
    pub hidden: usize,
    pub layers: usize,
    mlp: Mlp,
}

impl VectorField {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        width: usize,
        d_cond: usize,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut widths = vec![width + TIME_EMBED + d_cond];
        widths.extend(std::iter::repeat_n(hidden, layers));
        widths.push(width);
        Self {
            width,
            d_cond,
            hidden,
            layers,
            mlp: Mlp::new(store, name, &widths, rng),
        }
    }

    /// `v(y_t, t | c)` for `n` rows: `y` is `[n, width]`, `c` is `[n, d_cond]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, y: Var, t: &[f64], c: Var) -> Result<Var> {
        let n = g.shape(y)[0];
        if t.len() != n || g.shape(c) != [n, self.d_cond] || g.shape(y)[1] != self.width {
            return Err(Error::shape(
                "vector field",
                format!("y {:?}, {} times, c {:?}", g.shape(y), t.len(), g.shape(c)),
            ));
        }
        let emb: Vec<F> = t.iter().flat_map(|&tv| sinusoidal::<F>(tv, TIME_EMBED)).collect();
        let e = g.constant(Tensor::new(vec![n, TIME_EMBED], emb)?);
        let x = g.concat_cols(&[y, e, c])?;
        self.mlp.forward(g, store, x)
    }

    pub fn eval<F: Real>(&self, store: &ParamStore<F>, y: &Tensor<F>, t: f64, c: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let yv = g.constant(y.clone());
        let cv = g.constant(c.clone());
        let v = self.forward(&mut g, store, yv, &vec![t; y.rows()], cv)?;
        Ok(g.value(v).clone())
    }

    /// Flow-matching loss for given times and noise: mean over rows of
    /// `||v(y_t, t | c) - (y1 - (1 - sigma_min) y0)||^2`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_with_noise<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        y1: &Tensor<F>,
        c: Var,
        t: &[f64],
        y0: &Tensor<F>,
        sigma_min: f64,
    ) -> Result<Var> {
        if y1.shape() != y0.shape() || t.len() != y1.rows() {
            return Err(Error::shape(
                "flow loss",
                format!("y1 {:?}, y0 {:?}, {} times", y1.shape(), y0.shape(), t.len()),
            ));
        }
        let w = y1.cols();
        let mut yt = Vec::with_capacity(y1.numel());
        let mut u = Vec::with_capacity(y1.numel());
        for (i, &ti) in t.iter().enumerate() {
            yt.extend(interpolate(y1.row(i), y0.row(i), ti, sigma_min));
            u.extend(target_velocity(y1.row(i), y0.row(i), sigma_min));
        }
        let yt = g.constant(Tensor::new(y1.shape().to_vec(), yt)?);
        let u = g.constant(Tensor::new(y1.shape().to_vec(), u)?);
        let v = self.forward(g, store, yt, t, c)?;
        let l = g.l2(v, u)?;
        Ok(g.scale(l, w as f64))
    }

    /// [`Self::loss_with_noise`] with `t ~ U(0, 1)` per row and `y0 ~ N(0, I)`.
    #[allow(clippy::too_many_arguments)]
    pub fn flow_loss<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        y1: &Tensor<F>,
        c: Var,
        sigma_min: f64,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let t: Vec<f64> = (0..y1.rows()).map(|_| rng.random::<f64>()).collect();
        let y0 = gaussian::<F>(y1.shape(), rng);
        self.loss_with_noise(g, store, y1, c, &t, &y0, sigma_min)
    }

    /// Euler sampling of `n = c_pos.rows()` independent targets. With a
    /// negative condition and `lambda_cfg != 1` both branches run as one
    /// batch and are combined with [`cfg_combine`].
    pub fn sample(
        &self,
        store: &ParamStore<f32>,
        c_pos: &Tensor<f32>,
        c_neg: Option<&Tensor<f32>>,
        config: &FlowConfig,
        rng: &mut impl Rng,
    ) -> Result<Tensor<f32>> {
        config.validate()?;
        if config.width() != self.width {
            return Err(Error::Config(format!(
                "flow config width {} != model width {}",
                config.width(),
                self.width
            )));
        }
        let n = c_pos.rows();
        let y = gaussian::<f32>(&[n, self.width], rng);
        let guided = c_neg.filter(|_| config.lambda_cfg != 1.0);
        if let Some(neg) = guided {
            if neg.shape() != c_pos.shape() {
                return Err(Error::shape("cfg", format!("{:?} vs {:?}", neg.shape(), c_pos.shape())));
            }
        }
        let cond = match guided {
            Some(neg) => stack(c_pos, neg),
            None => c_pos.clone(),
        };
        euler_integrate(y, config.steps, |y, t| {
            let input = if guided.is_some() { stack(y, y) } else { y.clone() };
            let v = self.eval(store, &input, t, &cond)?;
            if guided.is_none() {
                return Ok(v);
            }
            let w = self.width;
            let mut out = Vec::with_capacity(n * w);
            for i in 0..n {
                out.extend(cfg_combine(v.row(i), v.row(n + i), config.lambda_cfg, config.d)?);
            }
            Tensor::new(vec![n, w], out)
        })
    }
}

fn stack(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    let mut d = a.data().to_vec();
    d.extend_from_slice(b.data());
    Tensor::new(vec![a.rows() + b.rows(), a.cols()], d).expect("row stack")
}

/// One sampled flow target, split into latent and durations.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub y: Vec<f32>,
    pub s: Vec<f32>,
    pub durations: DurationPair,
}

impl FlowSample {
    pub fn from_packed(y: &[f32], d: usize, bits: usize) -> Result<Self> {
        let y64: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let (s, durations) = unpack(&y64, d, bits)?;
        Ok(Self {
            y: y.to_vec(),
            s: s.iter().map(|&v| v as f32).collect(),
            durations,
        })
    }
}

/// Stand-alone flow head with its own parameters (used by the benches and
/// tests; the backbone embeds a [`VectorField`] in its own store).
#[derive(Clone, Debug)]
pub struct FlowHead {
    pub field: VectorField,
    pub store: ParamStore<f32>,
}

impl FlowHead {
    pub fn new(width: usize, d_cond: usize, hidden: usize, layers: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let field = VectorField::new(&mut store, "flow", width, d_cond, hidden, layers, &mut rng);
        Self { field, store }
    }

    pub fn euler_sample(
        &self,
        c_pos: &[f32],
        c_neg: Option<&[f32]>,
        config: &FlowConfig,
        seed: u64,
    ) -> Result<FlowSample> {
        let cp = Tensor::new(vec![1, c_pos.len()], c_pos.to_vec())?;
        let cn = c_neg.map(|c| Tensor::new(vec![1, c.len()], c.to_vec())).transpose()?;
        let y = self.field.sample(
            &self.store,
            &cp,
            cn.as_ref(),
            config,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )?;
        FlowSample::from_packed(y.row(0), config.d, config.bits)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let f = &self.field;
        let mut ck = Checkpoint::new();
        ck.insert("meta.flow", meta_tensor(&[f.width, f.d_cond, f.hidden, f.layers]));
        self.store.save_into(&mut ck, "");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = read_meta(ck, "meta.flow", 4)?;
        let mut head = Self::new(m[0], m[1], m[2], m[3], 0);
        head.store.load_from(ck, "")?;
        Ok(head)
    }
}
