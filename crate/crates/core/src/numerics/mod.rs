//! Tensor autodiff substrate: tape, parameters, optimizer, gradient checking.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use optim::{AdamW, AdamWConfig, CosineSchedule};
pub use params::{Gradients, ParamId, ParamStore, ParamView, Trainable, TrainableSet};
pub use tape::{attention_probs, Reduction, Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent central-difference oracle: max relative error over all
    /// parameter elements.
    fn fd_max_rel_err<F>(store: &ParamStore, f: F) -> f64
    where
        F: for<'p> Fn(&mut Tape<'p>, &'p ParamStore) -> Result<Var>,
    {
        let eps = 1e-5;
        let mut tape = Tape::new();
        let loss = f(&mut tape, store).unwrap();
        let analytic = tape.backward(loss, store).unwrap();
        let value = |s: &ParamStore| {
            let mut t = Tape::new();
            let l = f(&mut t, s).unwrap();
            t.value(l).item()
        };
        let mut worst: f64 = 0.0;
        let mut s = store.clone();
        for id in store.ids() {
            for i in 0..store.get(id).len() {
                let orig = s.get(id).data()[i];
                s.get_mut(id).data_mut()[i] = orig + eps;
                let p = value(&s);
                s.get_mut(id).data_mut()[i] = orig - eps;
                let m = value(&s);
                s.get_mut(id).data_mut()[i] = orig;
                let num = (p - m) / (2.0 * eps);
                let a = analytic.get(id).data()[i];
                worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-8));
            }
        }
        worst
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Scalarize `x` as `Σ x ⊙ r` with a fixed random `r`.
    fn project<'p>(tape: &mut Tape<'p>, x: Var, seed: u64) -> Result<Var> {
        let r = Tensor::randn(tape.value(x).shape(), 1.0, &mut rng(seed));
        let r = tape.constant(r);
        let p = tape.mul(x, r)?;
        Ok(tape.sum(p))
    }

    fn store_with(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore {
        let mut r = rng(seed);
        let mut s = ParamStore::new();
        for (name, shape) in shapes {
            s.insert(*name, Tensor::randn(shape, 1.0, &mut r));
        }
        s
    }

    #[test]
    fn elementwise_and_linear_ops_match_finite_differences() {
        let s = store_with(&[("a", &[3, 4]), ("b", &[4, 5]), ("c", &[3, 5]), ("bias", &[5])], 1);
        let err = fd_max_rel_err(&s, |t, s| {
            let a = t.param(s, s.id("a")?);
            let b = t.param(s, s.id("b")?);
            let c = t.param(s, s.id("c")?);
            let bias = t.param(s, s.id("bias")?);
            let ab = t.matmul(a, b)?;
            let x = t.add_bias(ab, bias)?;
            let x = t.mul(x, c)?;
            let x = t.sub(x, c)?;
            let x = t.add(x, c)?;
            let x = t.scale(x, 0.7);
            project(t, x, 9)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn nonlinear_ops_match_finite_differences() {
        let s = store_with(&[("x", &[6, 4]), ("g", &[4]), ("b", &[4]), ("w", &[3, 2])], 2);
        let err = fd_max_rel_err(&s, |t, s| {
            let x = t.param(s, s.id("x")?);
            let g = t.param(s, s.id("g")?);
            let b = t.param(s, s.id("b")?);
            let w = t.param(s, s.id("w")?);
            let ln = t.layer_norm(x, g, b)?;
            let r = t.relu(ln);
            let sm = t.softmax(r);
            let mx = t.max_pool(sm, 2)?;
            let mn = t.mean_pool(x, 3)?;
            let ww = t.softmax(w);
            let wp = t.weighted_pool(x, ww)?;
            let cat = t.concat_rows(&[mx, mn, wp])?;
            let flat = t.reshape(cat, &[4, 8])?;
            let l1 = project(t, flat, 3)?;
            let m = t.mean(x);
            let l = t.add(l1, m)?;
            Ok(l)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gather_and_cross_entropy_match_finite_differences() {
        let s = store_with(&[("emb", &[7, 3]), ("head", &[3, 7])], 3);
        for reduction in [Reduction::Mean, Reduction::Sum] {
            let err = fd_max_rel_err(&s, |t, s| {
                let e = t.param(s, s.id("emb")?);
                let h = t.param(s, s.id("head")?);
                let x = t.gather(e, &[1, 4, 4, 0, 6])?;
                let logits = t.matmul(x, h)?;
                t.cross_entropy(logits, &[2, 3, 0, 6, 1], &[true, false, true, true, true], reduction)
            });
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn attention_matches_finite_differences() {
        let s = store_with(&[("q", &[5, 6]), ("k", &[5, 6]), ("v", &[5, 6])], 4);
        let err = fd_max_rel_err(&s, |t, s| {
            let q = t.param(s, s.id("q")?);
            let k = t.param(s, s.id("k")?);
            let v = t.param(s, s.id("v")?);
            let o = t.causal_attention(q, k, v, 2)?;
            project(t, o, 5)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_layer_cross_entropy_grad_check() {
        let s = store_with(&[("w", &[4, 3]), ("b", &[3])], 5);
        let x = Tensor::randn(&[6, 4], 1.0, &mut rng(6));
        let report = grad_check(&s, 1e-5, crate::par::Exec::Sequential, |t, s| {
            let xv = t.constant(x.clone());
            let w = t.param(s, s.id("w")?);
            let b = t.param(s, s.id("b")?);
            let logits = t.affine(xv, w, b)?;
            t.cross_entropy(logits, &[0, 1, 2, 0, 1, 2], &[true; 6], Reduction::Mean)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.checked, 15);
    }

    #[test]
    fn zero_parameter_model_has_zero_error() {
        let s = ParamStore::new();
        let report = grad_check(&s, 1e-5, crate::par::Exec::Sequential, |t, _| {
            let c = t.constant(Tensor::scalar(3.0));
            Ok(t.sum(c))
        })
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.checked, 0);
    }

    #[test]
    fn sum_of_wx_gradient_is_ones_times_x_transpose() {
        let mut s = ParamStore::new();
        let w = s.insert("w", Tensor::randn(&[3, 4], 1.0, &mut rng(7)));
        let x = Tensor::new(vec![4, 1], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut t = Tape::new();
        let wv = t.param(&s, w);
        let xv = t.constant(x.clone());
        let y = t.matmul(wv, xv).unwrap();
        let l = t.sum(y);
        let g = t.backward(l, &s).unwrap();
        for r in 0..3 {
            assert_eq!(g.get(w).row(r), x.data());
        }
    }

    #[test]
    fn constant_loss_and_unreached_params_get_zero_gradients() {
        let s = store_with(&[("used", &[2, 2]), ("unused", &[3])], 8);
        let mut t = Tape::new();
        let u = t.param(&s, s.id("used").unwrap());
        let sg = t.stop_grad(u);
        let l = t.sum(sg);
        let g = t.backward(l, &s).unwrap();
        assert!(g.is_all_zero());
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let s = store_with(&[("w", &[2, 2])], 9);
        let mut t = Tape::new();
        let w = t.param(&s, s.id("w").unwrap());
        assert!(matches!(
            t.backward(w, &s),
            Err(crate::error::Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[20, 17], 5.0, &mut rng(10)));
        let y = t.softmax(x);
        for r in 0..20 {
            assert!((t.value(y).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[10, 32], 3.0, &mut rng(11)));
        let g = t.constant(Tensor::full(&[32], 1.0));
        let b = t.constant(Tensor::zeros(&[32]));
        let y = t.layer_norm(x, g, b).unwrap();
        for r in 0..10 {
            let row = t.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 32.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn single_row_max_pool_is_identity() {
        let mut t = Tape::new();
        let row = Tensor::new(vec![1, 4], vec![1.0, -3.0, 2.5, 0.0]).unwrap();
        let x = t.constant(row.clone());
        let y = t.max_pool(x, 1).unwrap();
        assert_eq!(t.value(y), &row);
    }

    #[test]
    fn cross_entropy_of_confident_correct_logit_vanishes() {
        let mut t = Tape::new();
        let mut logits = Tensor::zeros(&[1, 10]);
        logits.data_mut()[3] = 50.0;
        let l = t.constant(logits);
        let ce = t.cross_entropy(l, &[3], &[true], Reduction::Mean).unwrap();
        assert!(t.value(ce).item() < 1e-3);
    }

    #[test]
    fn attention_is_causal_and_normalized() {
        let q = Tensor::randn(&[6, 8], 1.0, &mut rng(12));
        let k = Tensor::randn(&[6, 8], 1.0, &mut rng(13));
        let p = attention_probs(&q, &k, 2);
        for h in 0..2 {
            for i in 0..6 {
                let row = &p[(h * 6 + i) * 6..(h * 6 + i + 1) * 6];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let s = store_with(&[("a", &[4, 4]), ("b", &[4])], 14);
        let run = || {
            let mut t = Tape::new();
            let a = t.param(&s, s.id("a").unwrap());
            let b = t.param(&s, s.id("b").unwrap());
            let x = t.layer_norm(a, b, b).unwrap();
            let y = t.causal_attention(x, x, a, 2).unwrap();
            let l = project(&mut t, y, 1).unwrap();
            t.backward(l, &s).unwrap()
        };
        let (g1, g2) = (run(), run());
        for id in s.ids() {
            let bits = |g: &Gradients| g.get(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&g1), bits(&g2));
        }
    }

    #[test]
    fn shape_mismatch_is_structured() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3, 2]));
        let err = t.add(a, b).unwrap_err();
        assert!(matches!(err, crate::error::Error::ShapeMismatch { op: "add", .. }));
    }
}
