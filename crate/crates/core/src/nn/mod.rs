//! Sinusoidal value networks: evaluation with exact input gradients,
//! second-order parameter gradients, Adam, the exact-terminal-condition
//! wrappers, and checkpoint persistence.

mod adam;
pub mod checkpoint;
mod mlp;
mod value;

pub use adam::{AdamConfig, AdamState};
pub use mlp::{Arch, EvalResult, NetParams, SampleLoss, SHARD_SIZE};
pub use value::{
    aux_value, aux_value_eval, aux_value_eval_obs, epigraph_boundary, safety_value_eval, ModelKind,
    Normalization, ResidualBatch, ValueModel,
};

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, ArrayView2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    fn value_at(p: &NetParams, x: &[f64]) -> f64 {
        p.eval(x).unwrap().value
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let arch = Arch::new(20, &[64, 64, 64], 30.0);
        let a = NetParams::init(1, arch.clone()).unwrap();
        let b = NetParams::init(1, arch.clone()).unwrap();
        let c = NetParams::init(2, arch.clone()).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert_ne!(a.as_slice(), c.as_slice());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let l = rng.gen_range(0..arch.depth());
            let w = a.weights(l);
            let (i, j) = (rng.gen_range(0..w.nrows()), rng.gen_range(0..w.ncols()));
            assert!(w[[i, j]].abs() <= NetParams::weight_bound(&arch, l));
        }
        assert!(NetParams::init(1, Arch::new(3, &[0, 4], 30.0)).is_err());
    }

    #[test]
    fn zero_weights_give_the_output_bias() {
        let arch = Arch::new(4, &[8, 8], 30.0);
        let mut data = vec![0.0; arch.param_count()];
        *data.last_mut().unwrap() = 0.75;
        let p = NetParams::from_parts(arch, data).unwrap();
        let r = p.eval(&[0.3, -0.2, 0.9, 0.1]).unwrap();
        assert_eq!(r.value, 0.75);
        assert!(r.input_gradient.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_unit_network_matches_closed_form() {
        let (w1, b1, w2, b2, om) = (0.4, -0.1, 1.7, 0.2, 30.0);
        let p = NetParams::from_parts(Arch::new(1, &[1], om), vec![w1, b1, w2, b2]).unwrap();
        let x = 0.37;
        let r = p.eval(&[x]).unwrap();
        let arg = om * (w1 * x + b1);
        assert!((r.value - (w2 * arg.sin() + b2)).abs() < 1e-14);
        assert!((r.input_gradient[0] - w2 * om * w1 * arg.cos()).abs() < 1e-12);

        // Loss = value: d/dw1 = w2 cos(arg) om x, d/db1 = w2 cos(arg) om,
        // d/dw2 = sin(arg), d/db2 = 1.
        let xs = Array2::from_elem((1, 1), x);
        let (loss, grad) = p
            .loss_param_gradient(xs.view(), |_, v, g| SampleLoss {
                loss: v,
                d_value: 1.0,
                d_input_grad: vec![0.0; g.len()],
            })
            .unwrap();
        assert!((loss - r.value).abs() < 1e-14);
        let expected = [w2 * arg.cos() * om * x, w2 * arg.cos() * om, arg.sin(), 1.0];
        for (g, e) in grad.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let p = NetParams::init(4, Arch::new(6, &[32, 32, 32], 30.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-4;
        for _ in 0..100 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g = p.eval(&x).unwrap().input_gradient;
            for k in 0..6 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (value_at(&p, &xp) - value_at(&p, &xm)) / (2.0 * h);
                assert!(rel_err(g[k], fd) <= 1e-4, "component {k}: {} vs {fd}", g[k]);
            }
        }
    }

    /// Loss touching both the value and the input gradient.
    fn mixed_loss(_: usize, v: f64, g: &[f64]) -> SampleLoss {
        let weights: Vec<f64> = (0..g.len()).map(|k| 0.3 + 0.1 * k as f64).collect();
        let loss = (v - 0.2).powi(2) + g.iter().zip(&weights).map(|(gi, w)| w * gi * gi).sum::<f64>()
            + (g[0] - 0.5 * g[1]).abs();
        let s = (g[0] - 0.5 * g[1]).signum();
        let mut d = g.iter().zip(&weights).map(|(gi, w)| 2.0 * w * gi).collect::<Vec<_>>();
        d[0] += s;
        d[1] -= 0.5 * s;
        SampleLoss {
            loss,
            d_value: 2.0 * (v - 0.2),
            d_input_grad: d,
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let arch = Arch::new(4, &[16, 16, 16], 30.0);
        let p = NetParams::init(8, arch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batch = Array2::from_shape_fn((300, 4), |_| rng.gen_range(-1.0..1.0));
        let (_, grad) = p.loss_param_gradient(batch.view(), mixed_loss).unwrap();
        let loss_at = |q: &NetParams| q.loss_param_gradient(batch.view(), mixed_loss).unwrap().0;
        let h = 1e-6;
        for _ in 0..20 {
            let k = rng.gen_range(0..p.len());
            let mut qp = p.clone();
            let mut qm = p.clone();
            qp.as_mut_slice()[k] += h;
            qm.as_mut_slice()[k] -= h;
            let fd = (loss_at(&qp) - loss_at(&qm)) / (2.0 * h);
            assert!(rel_err(grad[k], fd) <= 1e-3, "param {k}: {} vs {fd}", grad[k]);
        }
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        let p = NetParams::init(3, Arch::new(3, &[8, 8], 30.0)).unwrap();
        let x = Array2::from_elem((5, 3), 0.1);
        let (l, g) = p
            .loss_param_gradient(x.view(), |_, _, gi| SampleLoss {
                loss: 0.0,
                d_value: 0.0,
                d_input_grad: vec![0.0; gi.len()],
            })
            .unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_adjoint_reports_batch_index() {
        let p = NetParams::init(3, Arch::new(2, &[4], 30.0)).unwrap();
        let x = Array2::from_elem((10, 2), 0.1);
        let err = p
            .loss_param_gradient(x.view(), |i, _, gi| SampleLoss {
                loss: if i == 7 { f64::NAN } else { 0.0 },
                d_value: 0.0,
                d_input_grad: vec![0.0; gi.len()],
            })
            .unwrap_err();
        assert!(err.to_string().contains("batch index 7"), "{err}");
    }

    #[test]
    fn gradient_is_independent_of_shard_boundaries() {
        // Same samples in one batch vs. split across shard boundaries.
        let p = NetParams::init(5, Arch::new(3, &[8, 8], 30.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((SHARD_SIZE + 7, 3), |_| rng.gen_range(-1.0..1.0));
        let (l1, g1) = p.loss_param_gradient(x.view(), mixed_loss).unwrap();
        let (l2, g2) = p.loss_param_gradient(x.view(), mixed_loss).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
        let single = ArrayView2::from_shape((1, 3), x.row(0).to_slice().unwrap()).unwrap();
        assert!(p.loss_param_gradient(single, mixed_loss).is_ok());
    }
}
