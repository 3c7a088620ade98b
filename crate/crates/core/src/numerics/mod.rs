//! Dense tensors and a reverse-mode differentiation tape.
//!
//! Everything trainable in this crate is built from the primitives on
//! [`Graph`]. Attention masking removes positions from the softmax
//! normalization set instead of adding a large negative bias, so masked
//! positions get exactly zero weight and outputs are bit-identical under any
//! perturbation of what they cannot see.

mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod real;
mod tensor;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use gradcheck::{finite_difference_check, param_gradcheck};
pub use graph::{Gradients, Graph, Var};
pub use params::{lr_at, scale_grads, sum_grads, Adam, Param, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

/// Boolean attention mask, row = query, column = key, `true` = attendable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Self {
        assert_eq!(allow.len(), rows * cols, "mask extents");
        Self { rows, cols, allow }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![true; rows * cols])
    }

    /// Lower-triangular mask where query `i` sees keys `0..=i + offset`.
    pub fn causal(rows: usize, cols: usize) -> Self {
        let offset = cols - rows;
        let allow = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| j <= i + offset))
            .collect();
        Self::new(rows, cols, allow)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.allow[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }

    /// Allowed columns of row `r`.
    pub fn allowed(&self, r: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(r).iter().enumerate().filter(|(_, &a)| a).map(|(c, _)| c)
    }

    /// Rows `start..end` as a new mask.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self::new(
            end - start,
            self.cols,
            self.allow[start * self.cols..end * self.cols].to_vec(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i = g.constant(Tensor::eye(3));
        let xv = g.constant(x.clone());
        let y = g.matmul(i, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn masked_softmax_semantics() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let s = g.softmax(a, Some(&Mask::full(1, 2))).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let b = g.constant(Tensor::new(vec![1, 2], vec![5.0, 100.0]).unwrap());
        let s = g.softmax(b, Some(&Mask::new(1, 2, vec![true, false]))).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 0.0]);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant_like_scalar();
        let err = g.add(a, c).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    impl Graph<f64> {
        fn constant_like_scalar(&mut self) -> Var {
            self.constant(Tensor::scalar(1.0))
        }
    }

    #[test]
    fn backward_trivial_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 3]));
        let s = g.sum(x);
        let gr = g.backward(s).unwrap();
        assert!(gr.get(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item(), 6.0);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(crate::Error::NonScalarLoss(_))));
    }

    #[test]
    fn finite_difference_constant_and_quadratic() {
        let p = [Tensor::vector(vec![0.3, -0.2])];
        let e = finite_difference_check(&p, 1e-5, |g, v| {
            let c = g.constant(Tensor::scalar(2.0));
            let z = g.scale(v[0], 0.0);
            let z = g.sum(z);
            g.add(z, c)
        })
        .unwrap();
        assert_eq!(e, 0.0);

        let a = Tensor::new(vec![2, 2], vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        let p = [Tensor::new(vec![2, 1], vec![0.7, -0.4]).unwrap()];
        let e = finite_difference_check(&p, 1e-5, |g, v| {
            let av = g.constant(a.clone());
            let ax = g.matmul(av, v[0])?;
            let xax = g.mul(v[0], ax)?;
            Ok(g.sum(xax))
        })
        .unwrap();
        assert!(e < 1e-6, "{e}");
    }

    /// Every primitive against central differences on random inputs.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> crate::Result<Var>>;
        let weights = |g: &mut Graph<f64>, y: Var, seed: u64| -> crate::Result<Var> {
            // Random projection so every output coordinate matters.
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
            let w = rand_t(&mut rng, g.shape(y));
            let wv = g.constant(w);
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        };
        let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
            (
                "matmul",
                vec![vec![3, 4], vec![4, 2]],
                Box::new(|g, v| g.matmul(v[0], v[1])),
            ),
            (
                "matmul_tb",
                vec![vec![3, 4], vec![2, 4]],
                Box::new(|g, v| g.matmul_t(v[0], v[1], false, true)),
            ),
            (
                "bmm",
                vec![vec![2, 3, 4], vec![2, 4, 5]],
                Box::new(|g, v| g.matmul(v[0], v[1])),
            ),
            (
                "bmm_ta",
                vec![vec![2, 4, 3], vec![2, 4, 5]],
                Box::new(|g, v| g.matmul_t(v[0], v[1], true, false)),
            ),
            (
                "bmm_tb",
                vec![vec![2, 3, 4], vec![2, 5, 4]],
                Box::new(|g, v| g.matmul_t(v[0], v[1], false, true)),
            ),
            (
                "batch_expand",
                vec![vec![2, 3, 4], vec![4, 2]],
                Box::new(|g, v| g.matmul(v[0], v[1])),
            ),
            (
                "add_row",
                vec![vec![3, 4], vec![4]],
                Box::new(|g, v| g.add_row(v[0], v[1])),
            ),
            ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.mul(v[0], v[1]))),
            ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| g.sub(v[0], v[1]))),
            ("gelu", vec![vec![3, 4]], Box::new(|g, v| Ok(g.gelu(v[0])))),
            ("exp", vec![vec![3, 4]], Box::new(|g, v| Ok(g.exp(v[0])))),
            (
                "log_sqrt",
                vec![vec![3, 4]],
                Box::new(|g, v| {
                    let sq = g.mul(v[0], v[0])?;
                    let s = g.add_scalar(sq, 0.5);
                    let r = g.sqrt(s);
                    Ok(g.log(r))
                }),
            ),
            (
                "softmax_masked",
                vec![vec![2, 3, 3]],
                Box::new(|g, v| {
                    let m = Mask::new(3, 3, vec![true, false, true, true, true, false, false, false, true]);
                    g.softmax(v[0], Some(&m))
                }),
            ),
            (
                "log_softmax_active",
                vec![vec![3, 5]],
                Box::new(|g, v| {
                    let lp = g.log_softmax(v[0], Some(std::sync::Arc::new(vec![true, false, true, true, false])))?;
                    g.slice_cols(lp, 2, 4)
                }),
            ),
            (
                "layer_norm",
                vec![vec![3, 6], vec![6], vec![6]],
                Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
            ),
            (
                "embedding",
                vec![vec![5, 3]],
                Box::new(|g, v| g.embedding(v[0], &[4, 0, 4, 2])),
            ),
            (
                "gather_rows",
                vec![vec![4, 3]],
                Box::new(|g, v| g.gather_rows(v[0], &[Some(3), None, Some(0), Some(3)])),
            ),
            (
                "index_select",
                vec![vec![4, 3]],
                Box::new(|g, v| g.index_select(v[0], &[0, 5, 5, 11, 2, 7], &[2, 3])),
            ),
            (
                "concat_slice",
                vec![vec![3, 2], vec![3, 4]],
                Box::new(|g, v| {
                    let c = g.concat_cols(&[v[0], v[1]])?;
                    g.slice_cols(c, 1, 5)
                }),
            ),
            (
                "concat_rows",
                vec![vec![2, 3], vec![1, 3]],
                Box::new(|g, v| g.concat_rows(v[0], v[1])),
            ),
            (
                "heads_rope",
                vec![vec![3, 8]],
                Box::new(|g, v| {
                    let h = g.split_heads(v[0], 2)?;
                    let r = g.rope(h, &[0, 3, 7], 10_000.0)?;
                    g.merge_heads(r)
                }),
            ),
            ("sum_last", vec![vec![3, 4]], Box::new(|g, v| Ok(g.sum_last(v[0])))),
            (
                "l1_l2",
                vec![vec![3, 4], vec![3, 4]],
                Box::new(|g, v| {
                    let a = g.l1(v[0], v[1])?;
                    let b = g.l2(v[0], v[1])?;
                    let s = g.add(a, b)?;
                    g.reshape(s, &[1])
                }),
            ),
            (
                "cross_entropy",
                vec![vec![3, 4]],
                Box::new(|g, v| {
                    let c = g.cross_entropy(v[0], &[1, 3, 0])?;
                    g.reshape(c, &[1])
                }),
            ),
            (
                "kl",
                vec![vec![3, 4]],
                Box::new(|g, v| {
                    let reference =
                        Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
                    let k = g.kl_categorical(&reference, v[0])?;
                    g.reshape(k, &[1])
                }),
            ),
            (
                "clamp_min",
                vec![vec![3, 4]],
                Box::new(|g, v| {
                    let sq = g.mul(v[0], v[0])?;
                    Ok(g.clamp_min(sq, 0.25))
                }),
            ),
        ];
        for (name, shapes, build) in &cases {
            for seed in 0..20u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let point: Vec<_> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
                let err = finite_difference_check(&point, 1e-5, |g, v| {
                    let y = build(g, v)?;
                    weights(g, y, seed)
                })
                .unwrap();
                assert!(err < 1e-3, "{name} seed {seed}: rel err {err}");
            }
        }
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_t(&mut rng, &[2, 3, 4]);
        let mut g = Graph::<f64>::new();
        let v = g.constant(x.clone());
        let r = g.rope(v, &[1, 5, 9], 10_000.0).unwrap();
        let y = g.value(r);
        for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
            let na = a[0] * a[0] + a[1] * a[1];
            let nb = b[0] * b[0] + b[1] * b[1];
            assert!((na - nb).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_positions_do_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores = rand_t(&mut rng, &[3, 3]);
        let vals = rand_t(&mut rng, &[3, 2]);
        let mask = Mask::new(3, 3, vec![true, true, false, true, true, false, false, false, true]);
        let run = |vals: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let s = g.constant(scores.clone());
            let v = g.constant(vals.clone());
            let p = g.softmax(s, Some(&mask)).unwrap();
            let o = g.matmul(p, v).unwrap();
            g.value(o).clone()
        };
        let base = run(&vals);
        let mut pert = vals.clone();
        pert.data_mut()[4] = 1e6;
        pert.data_mut()[5] = -3e5;
        let out = run(&pert);
        assert_eq!(base.row(0), out.row(0));
        assert_eq!(base.row(1), out.row(1));
    }

    #[test]
    fn param_grads_reach_bound_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let w = store.add_normal("w", &[3, 2], 0.5, &mut rng);
        let frozen = store.add_normal("frozen", &[2], 0.5, &mut rng);
        store.set_trainable("frozen", false);
        let err = param_gradcheck(&store, 1e-5, 16, |g, s| {
            let x = g.constant(Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap());
            let wv = g.param(s, w);
            let fv = g.param(s, frozen);
            let y = g.matmul(x, wv)?;
            let y = g.add_row(y, fv)?;
            let y = g.gelu(y);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(err < 1e-6);
    }
}
