use super::{multiscale_spectral_l1, DecodeOutput, DecodeVars};
use crate::error::{Error, Result};
use crate::masks::validate_positions;
use crate::numerics::{Graph, Real, Tensor, Var};

/// Per-token floor of the dimension-normalized squared latent mean.
pub const KL_FLOOR: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mel: f64,
    pub sem: f64,
    pub kl: f64,
    /// Scale of the feature L1 inside the reconstruction term.
    pub feature: f64,
    /// Adversarial slots; always 0 here.
    pub gen: f64,
    pub disc: f64,
    pub fm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mel: 1.0,
            sem: 0.1,
            kl: 0.02,
            feature: 20.0,
            gen: 0.0,
            disc: 0.0,
            fm: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.gen != 0.0 || self.disc != 0.0 || self.fm != 0.0 {
            return Err(Error::Config("adversarial loss weights are not supported".into()));
        }
        if [self.mel, self.sem, self.kl, self.feature]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodecLossReport {
    pub mel: f64,
    pub sem: f64,
    pub kl: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Loss nodes built by [`codec_loss_var`].
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub mel: Var,
    pub sem: Var,
    pub kl: Var,
}

impl LossVars {
    pub fn report<F: Real>(&self, g: &Graph<F>, weights: LossWeights) -> CodecLossReport {
        CodecLossReport {
            mel: g.value(self.mel).item().as_f64(),
            sem: g.value(self.sem).item().as_f64(),
            kl: g.value(self.kl).item().as_f64(),
            total: g.value(self.total).item().as_f64(),
            weights,
        }
    }
}

/// `mean_i max(|mu_i|^2 / d, 0.5)` over the rows of `mu`.
pub fn kl_clamped<F: Real>(g: &mut Graph<F>, mu: Var) -> Result<Var> {
    let d = g.shape(mu).last().copied().unwrap_or(1).max(1);
    let sq = g.mul(mu, mu)?;
    let per = g.sum_last(sq);
    let per = g.scale(per, 1.0 / d as f64);
    let per = g.clamp_min(per, KL_FLOOR);
    Ok(g.mean(per))
}

/// Frame-wise targets: `w_i` at frame `p_i`, blank elsewhere.
pub fn semantic_targets(tokens: &[usize], p: &[usize], t: usize, blank: usize) -> Result<Vec<usize>> {
    validate_positions(p, t)?;
    if tokens.len() != p.len() {
        return Err(Error::shape(
            "semantic targets",
            format!("{} tokens for {} positions", tokens.len(), p.len()),
        ));
    }
    let mut out = vec![blank; t];
    for (&w, &q) in tokens.iter().zip(p) {
        out[q - 1] = w;
    }
    Ok(out)
}

/// Weighted reconstruction, semantic and KL terms. The reconstruction term is
/// the multi-scale spectral L1 of the signal plus the scaled L1 of the
/// features.
#[allow(clippy::too_many_arguments)]
pub fn codec_loss_var<F: Real>(
    g: &mut Graph<F>,
    pred: &DecodeVars,
    target_features: &Tensor<F>,
    target_signal: &Tensor<F>,
    tokens: &[usize],
    p: &[usize],
    mu: Var,
    weights: LossWeights,
) -> Result<LossVars> {
    weights.validate()?;
    let t = target_features.rows();
    if g.shape(pred.features) != target_features.shape() || g.shape(pred.signal) != target_signal.shape() {
        return Err(Error::shape(
            "codec loss",
            format!(
                "pred {:?}/{:?} vs target {:?}/{:?}",
                g.shape(pred.features),
                g.shape(pred.signal),
                target_features.shape(),
                target_signal.shape()
            ),
        ));
    }
    let spec = multiscale_spectral_l1(g, pred.signal, target_signal)?;
    let tf = g.constant(target_features.clone());
    let feat = g.l1(pred.features, tf)?;
    let feat = g.scale(feat, weights.feature);
    let mel = g.add(spec, feat)?;
    let blank = g.shape(pred.sem)[1] - 1;
    let sem = g.cross_entropy(pred.sem, &semantic_targets(tokens, p, t, blank)?)?;
    let kl = kl_clamped(g, mu)?;
    let a = g.scale(mel, weights.mel);
    let b = g.scale(sem, weights.sem);
    let c = g.scale(kl, weights.kl);
    let total = g.add(a, b)?;
    let total = g.add(total, c)?;
    Ok(LossVars { total, mel, sem, kl })
}

/// [`codec_loss_var`] on plain tensors.
pub fn codec_loss(
    pred: &DecodeOutput,
    target_features: &Tensor<f32>,
    target_signal: &Tensor<f32>,
    tokens: &[usize],
    p: &[usize],
    mu: &Tensor<f32>,
    weights: LossWeights,
) -> Result<CodecLossReport> {
    let mut g = Graph::<f64>::new();
    let vars = DecodeVars {
        features: g.constant(pred.features.cast()),
        signal: g.constant(pred.signal.cast()),
        sem: g.constant(pred.sem_logits.cast()),
    };
    let mu = g.constant(mu.cast());
    let l = codec_loss_var(
        &mut g,
        &vars,
        &target_features.cast(),
        &target_signal.cast(),
        tokens,
        p,
        mu,
        weights,
    )?;
    Ok(l.report(&g, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: usize, cols: usize, k: f64) -> Tensor<f32> {
        Tensor::new(
            vec![t, cols],
            (0..t * cols).map(|i| ((i as f64 * k).sin()) as f32).collect(),
        )
        .unwrap()
    }

    fn pred(t: usize) -> DecodeOutput {
        DecodeOutput {
            features: sample(t, 3, 0.7),
            signal: sample(t, 4, 0.3),
            sem_logits: sample(t, 6, 1.1),
        }
    }

    #[test]
    fn perfect_reconstruction_with_zero_means() {
        let p = pred(4);
        let mu = Tensor::zeros(&[2, 2]);
        let r = codec_loss(
            &p,
            &p.features,
            &p.signal,
            &[1, 2],
            &[2, 4],
            &mu,
            LossWeights::default(),
        )
        .unwrap();
        assert_eq!(r.mel, 0.0);
        assert!(r.sem > 0.0);
        assert_eq!(r.kl, 0.5);
        assert!((r.total - (0.1 * r.sem + 0.02 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn doubling_mel_weight_doubles_its_share() {
        let p = pred(5);
        let tf = sample(5, 3, 0.2);
        let ts = sample(5, 4, 0.9);
        let mu = sample(2, 2, 0.4);
        let w = LossWeights::default();
        let a = codec_loss(&p, &tf, &ts, &[0, 3], &[1, 5], &mu, w).unwrap();
        let b = codec_loss(&p, &tf, &ts, &[0, 3], &[1, 5], &mu, LossWeights { mel: 2.0, ..w }).unwrap();
        assert!(((b.total - a.total) - a.mel).abs() < 1e-9);
        assert!(a.mel >= 0.0 && a.sem >= 0.0 && a.kl >= 0.0);
    }

    #[test]
    fn kl_has_no_gradient_below_the_floor() {
        let mut g = Graph::<f64>::new();
        let mu = g.leaf(Tensor::from_rows(&[vec![0.1, -0.2], vec![1.5, 1.0]]).unwrap());
        let kl = kl_clamped(&mut g, mu).unwrap();
        let gr = g.backward(kl).unwrap();
        let d = gr.get(mu).unwrap();
        assert_eq!(&d.data()[..2], &[0.0, 0.0]);
        // row 2: |mu|^2/d = 1.625; d/dmu = 2 mu / d / L
        assert!((d.data()[2] - 0.75).abs() < 1e-12);
        assert!((d.data()[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adversarial_weights_rejected() {
        assert!(LossWeights {
            gen: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
