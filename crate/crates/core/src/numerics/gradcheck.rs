use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// Relative error metric used by every gradient check.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the tape gradient of `f` at `point` with central differences
/// `(f(x+eps) - f(x-eps)) / 2eps`, returning the maximum relative error over
/// every coordinate of every input.
pub fn finite_difference_check<B>(point: &[Tensor<f64>], eps: f64, build: B) -> Result<f64>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).unwrap_or_else(|| Tensor::zeros(point[k].shape()));
        for i in 0..point[k].numel() {
            let x0 = point[k].data()[i];
            probe[k].data_mut()[i] = x0 + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Gradient check over model parameters. At most `per_param` coordinates of
/// each parameter are probed (evenly strided), which keeps checks on full
/// models tractable.
pub fn param_gradcheck<B>(store: &ParamStore<f64>, eps: f64, per_param: usize, build: B) -> Result<f64>
where
    B: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let analytic = g.backward(loss)?.param_grads(store);
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.value(id).numel();
        let stride = n.div_ceil(per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let x0 = store.value(id).data()[i];
            let mut eval = |x: f64| -> Result<f64> {
                probe.value_mut(id).data_mut()[i] = x;
                let mut g = Graph::new();
                let l = build(&mut g, &probe)?;
                Ok(g.value(l).item())
            };
            let up = eval(x0 + eps)?;
            let down = eval(x0 - eps)?;
            probe.value_mut(id).data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[id.0][i], numeric));
        }
    }
    Ok(worst)
}
