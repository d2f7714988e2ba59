//! Minimal reverse-mode differentiation: a tape of dense-array operations,
//! named parameters, Adam, and a finite-difference checker.

mod adam;
mod gradcheck;
mod graph;
mod params;

pub use adam::{adam_update, Adam, AdamConfig, Moments};
pub use gradcheck::{finite_diff_check, relative_error, GradCheck, DEFAULT_EPS};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DenseTensor;

    fn store_with(values: &[(&str, Vec<f64>)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, v)| store.add(*n, DenseTensor::vector(v.clone()).unwrap(), true).unwrap())
            .collect();
        (store, ids)
    }

    #[test]
    fn square_gradient() {
        let (mut store, ids) = store_with(&[("x", vec![3.0])]);
        let mut g = Graph::new();
        let x = g.param(&store, ids[0]);
        let y = g.mul(x, x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(ids[0]).grad.data(), &[6.0]);
    }

    #[test]
    fn product_rule() {
        let (mut store, ids) = store_with(&[("x", vec![2.0]), ("y", vec![5.0])]);
        let mut g = Graph::new();
        let x = g.param(&store, ids[0]);
        let y = g.param(&store, ids[1]);
        let p = g.mul(x, y).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(ids[0]).grad.data(), &[5.0]);
        assert_eq!(store.get(ids[1]).grad.data(), &[2.0]);
    }

    #[test]
    fn cross_entropy_logit_gradient() {
        let (mut store, ids) = store_with(&[("logits", vec![0.0, 0.0])]);
        let build = |s: &ParamStore, g: &mut Graph| {
            let l = g.param(s, ids[0]);
            g.softmax_cross_entropy(l, 0)
        };
        // Central-difference oracle for d/dz of ln(e^{z0}+e^{z1}) − z0.
        let f = |z0: f64, z1: f64| (z0.exp() + z1.exp()).ln() - z0;
        let h = 1e-6;
        let oracle = [
            (f(h, 0.0) - f(-h, 0.0)) / (2.0 * h),
            (f(0.0, h) - f(0.0, -h)) / (2.0 * h),
        ];
        let mut g = Graph::new();
        let loss = build(&store, &mut g).unwrap();
        assert!((g.value(loss).item().unwrap() - 2f64.ln()).abs() < 1e-15);
        g.backward(loss, &mut store).unwrap();
        let grad = store.get(ids[0]).grad.data().to_vec();
        assert_eq!(grad, vec![-0.5, 0.5]);
        for (a, o) in grad.iter().zip(oracle) {
            assert!((a - o).abs() < 1e-9);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let (mut store, ids) = store_with(&[("x", vec![1.0, 2.0])]);
        let mut g = Graph::new();
        let x = g.param(&store, ids[0]);
        assert!(matches!(
            g.backward(x, &mut store),
            Err(crate::HocaError::Argument(_))
        ));
    }

    #[test]
    fn shared_node_accumulates_both_paths() {
        // f = sum(tanh(x) ∘ exp(x)) uses x twice.
        let (mut store, ids) = store_with(&[("x", vec![0.3, -1.2, 0.7])]);
        let check = finite_diff_check(&mut store, &ids, DEFAULT_EPS, |s, g| {
            let x = g.param(s, ids[0]);
            let a = g.tanh(x)?;
            let b = g.exp(x)?;
            let m = g.mul(a, b)?;
            g.sum(m)
        })
        .unwrap();
        assert!(check.max_rel_error < 1e-8, "{check:?}");
        let x = [0.3f64, -1.2, 0.7];
        for (k, &xv) in x.iter().enumerate() {
            let expected = (1.0 - xv.tanh().powi(2)) * xv.exp() + xv.tanh() * xv.exp();
            assert!((store.get(ids[0]).grad.data()[k] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn repeated_backward_doubles_gradients() {
        let (mut store, ids) = store_with(&[("w", vec![0.4, -0.9]), ("v", vec![1.3, 0.2])]);
        let mut g = Graph::new();
        let w = g.param(&store, ids[0]);
        let v = g.param(&store, ids[1]);
        let wv = g.mul(w, v).unwrap();
        let t = g.tanh(wv).unwrap();
        let loss = g.sum(t).unwrap();
        g.backward(loss, &mut store).unwrap();
        let once: Vec<Vec<f64>> = ids.iter().map(|&i| store.get(i).grad.data().to_vec()).collect();
        g.backward(loss, &mut store).unwrap();
        for (&i, first) in ids.iter().zip(&once) {
            let twice: Vec<f64> = first.iter().map(|x| 2.0 * x).collect();
            assert_eq!(store.get(i).grad.data(), twice.as_slice());
        }
    }

    #[test]
    fn finite_diff_quadratic_and_constant() {
        let (mut store, ids) = store_with(&[("x", vec![3.0])]);
        let sq = finite_diff_check(&mut store, &ids, 1e-6, |s, g| {
            let x = g.param(s, ids[0]);
            g.dot(x, x)
        })
        .unwrap();
        assert!(sq.max_rel_error < 1e-8, "{sq:?}");

        let c = finite_diff_check(&mut store, &ids, 1e-6, |_, g| Ok(g.scalar(4.0))).unwrap();
        assert_eq!(c.max_rel_error, 0.0);
        assert_eq!(store.get(ids[0]).grad.data(), &[0.0]);
    }

    #[test]
    fn finite_diff_rejects_non_finite_output() {
        let (mut store, ids) = store_with(&[("x", vec![-1.0])]);
        let err = finite_diff_check(&mut store, &ids, 1e-6, |s, g| {
            let x = g.param(s, ids[0]);
            let l = g.log(x)?;
            g.sum(l)
        });
        assert!(matches!(err, Err(crate::HocaError::Numeric(_))));
        let bad_eps = finite_diff_check(&mut store, &ids, 0.0, |_, g| Ok(g.scalar(0.0)));
        assert!(matches!(bad_eps, Err(crate::HocaError::Argument(_))));
    }

    #[test]
    fn every_primitive_passes_gradient_check() {
        let mut store = ParamStore::new();
        let m = store
            .add("m", DenseTensor::matrix(2, 3, vec![0.5, -0.3, 0.8, 0.1, 0.9, -0.6]).unwrap(), true)
            .unwrap();
        let n = store
            .add("n", DenseTensor::matrix(3, 2, vec![0.2, 0.7, -0.4, 0.3, 0.6, -0.9]).unwrap(), true)
            .unwrap();
        let v = store.add("v", DenseTensor::vector(vec![0.3, -0.8]).unwrap(), true).unwrap();
        let u = store.add("u", DenseTensor::vector(vec![1.1, 0.4, -0.5]).unwrap(), true).unwrap();
        let s = store.add("s", DenseTensor::scalar(0.7), true).unwrap();
        let w = store
            .add("w", DenseTensor::matrix(3, 2, vec![0.9, -0.2, 0.4, 0.5, -0.7, 0.1]).unwrap(), true)
            .unwrap();
        let ids = [m, n, v, u, s, w];
        let check = finite_diff_check(&mut store, &ids, 1e-6, |st, g| {
            let (m, n, v, u, s, w) = (
                g.param(st, m),
                g.param(st, n),
                g.param(st, v),
                g.param(st, u),
                g.param(st, s),
                g.param(st, w),
            );
            let mn = g.matmul(m, n)?; // 2×2
            let mv = g.matvec(mn, v)?; // 2
            let um = g.vecmat(u, n)?; // 2
            let sig = g.sigmoid(um)?;
            let sc = g.mul_scalar(sig, s)?;
            let sum2 = g.add(mv, sc)?;
            let diff = g.sub(sum2, v)?;
            let th = g.tanh(diff)?;
            let ex = g.exp(th)?;
            let ac = g.add_column(m, v)?; // 2×3
            let c1 = g.column(ac, 2)?;
            let r1 = g.row(ac, 1)?;
            let cat = g.concat(&[ex, c1, r1])?; // 7
            let sl = g.slice(cat, 1, 5)?;
            let sm = g.softmax(sl)?;
            let lg = g.log(sm)?;
            let sc2 = g.scale(lg, -0.5)?;
            let st_cols = g.stack_columns(&[sum2, c1])?; // 2×2
            let feats = g.add_column(w, u)?; // 3×2
            let c = g.tensor_multiply(&[st_cols, st_cols])?; // 2×2
            let o = g.outer(&[v])?;
            let con = g.contract_slices(c, o, 0)?;
            let corr = g.tensor_multiply(&[feats, feats, feats])?;
            let wts = g.outer(&[v, v])?;
            let con3 = g.contract_slices(corr, wts, 1)?;
            let a = g.sum(sc2)?;
            let b = g.dot(con, con)?;
            let c3 = g.sum(con3)?;
            let ce = g.softmax_cross_entropy(con3, 1)?;
            let ab = g.add(a, b)?;
            let abc = g.add(ab, c3)?;
            g.add(abc, ce)
        })
        .unwrap();
        assert!(check.max_rel_error < 1e-6, "{check:?}");
    }
}
