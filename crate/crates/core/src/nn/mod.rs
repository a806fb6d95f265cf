//! Minimal CPU training engine: NCHW tensors, a recording tape, the handful of
//! layers the depth network needs, and Adam.

mod graph;
mod layers;
mod ops;
mod optim;
mod params;
mod tensor;

pub use graph::{Backprop, Graph, Var, BN_MOMENTUM};
pub use layers::{Conv2d, Norm, NormKind};
pub use optim::Adam;
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks `build` against central differences on the input and on every
    /// trainable parameter, using the scalar objective `sum(r * y)`.
    fn grad_check(store: &mut ParamStore, input: Tensor, train: bool, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let objective = |store: &ParamStore, x: &Tensor, r: &Tensor| -> f64 {
            let mut g = Graph::new(store, train);
            let v = g.input(x.clone());
            let y = build(&mut g, v);
            g.value(y).data().iter().zip(r.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let (r, analytic_x, analytic_p) = {
            let mut g = Graph::new(store, train);
            let v = g.input(input.clone());
            let y = build(&mut g, v);
            let r = random(g.shape(y), &mut rng);
            let bp = g.backward(y, r.clone()).unwrap();
            let ax = bp.input_grad(v).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
            (r, ax, bp.params)
        };
        let h = 1e-3f32;
        let close = |a: f64, n: f64| (a - n).abs() <= 5e-3 + 2e-2 * a.abs().max(n.abs());
        for i in 0..input.numel() {
            let mut plus = input.clone();
            plus.data_mut()[i] += h;
            let mut minus = input.clone();
            minus.data_mut()[i] -= h;
            let num = (objective(store, &plus, &r) - objective(store, &minus, &r)) / (2.0 * h as f64);
            let a = analytic_x.data()[i] as f64;
            assert!(close(a, num), "input[{i}]: analytic {a} numeric {num}");
        }
        for p in 0..store.len() {
            let id = ParamId(p);
            if !store.get(id).trainable {
                continue;
            }
            for j in 0..store.get(id).numel() {
                let orig = store.value(id)[j];
                store.value_mut(id)[j] = orig + h;
                let fp = objective(store, &input, &r);
                store.value_mut(id)[j] = orig - h;
                let fm = objective(store, &input, &r);
                store.value_mut(id)[j] = orig;
                let num = (fp - fm) / (2.0 * h as f64);
                let a = analytic_p.get(id)[j] as f64;
                assert!(close(a, num), "{}[{j}]: analytic {a} numeric {num}", store.get(id).name);
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, stride) in [(3, 1), (3, 2), (1, 1), (5, 1)] {
            let mut store = ParamStore::new();
            let conv = Conv2d::new(&mut store, "c", 2, 3, k, stride, &mut rng);
            let x = random([2, 2, 6, 6], &mut rng);
            grad_check(&mut store, x, true, |g, v| g.conv2d(v, &conv).unwrap());
        }
    }

    #[test]
    fn norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [NormKind::Batch, NormKind::Group] {
            for train in [true, false] {
                let mut store = ParamStore::new();
                let norm = Norm::new(&mut store, "n", 4, kind);
                store.value_mut(norm.gamma).copy_from_slice(&[0.5, 1.5, -1.0, 2.0]);
                store.value_mut(norm.beta).copy_from_slice(&[0.1, 0.0, -0.3, 0.2]);
                let x = random([3, 4, 3, 2], &mut rng);
                grad_check(&mut store, x, train, |g, v| g.norm(v, &norm).unwrap());
            }
        }
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let x = random([2, 3, 4, 4], &mut rng);
        grad_check(&mut store, x.clone(), true, |g, v| g.sigmoid(v));
        grad_check(&mut store, x.clone(), true, |g, v| g.softplus(v));
        grad_check(&mut store, x.clone(), true, |g, v| g.scale(v, -2.5));
        grad_check(&mut store, x.clone(), true, |g, v| g.resize(v, 7, 3));
        grad_check(&mut store, x.clone(), true, |g, v| g.resize(v, 8, 8));
        grad_check(&mut store, x.clone(), true, |g, v| {
            let p = g.global_avg_pool(v);
            let s = g.sigmoid(p);
            let prod = g.channel_mul(v, s).unwrap();
            g.concat(&[prod, v]).unwrap()
        });
    }

    #[test]
    fn relu_gradient_masks_negatives() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, true);
        let x = g.input(Tensor::from_vec([1, 1, 1, 4], vec![-1.0, 2.0, -0.5, 0.25]).unwrap());
        let y = g.relu(x);
        let bp = g.backward(y, Tensor::full([1, 1, 1, 4], 1.0)).unwrap();
        assert_eq!(bp.input_grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_stays_open_interval() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, false);
        let x = g.input(Tensor::from_vec([1, 1, 1, 3], vec![-200.0, 0.0, 200.0]).unwrap());
        let y = g.sigmoid(x);
        assert!(g.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn batch_norm_train_records_running_stats() {
        let mut store = ParamStore::new();
        let norm = Norm::new(&mut store, "n", 1, NormKind::Batch);
        let mut g = Graph::new(&store, true);
        let x = g.input(Tensor::from_vec([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        g.norm(x, &norm).unwrap();
        let updates = g.take_stat_updates();
        assert_eq!(updates.len(), 2);
        assert!((updates[0].1[0] - 0.25).abs() < 1e-6);
        // Unbiased variance 5/3, blended into an initial 1.0.
        assert!((updates[1].1[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);
    }
}
