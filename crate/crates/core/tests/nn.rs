mod common;

use common::{fd_max_rel_err, gaussian};
use ndarray::{Array2, ArrayView2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simknot::nn::{
    adam_step, agc_clip, load_mlp, save_mlp, AdamState, GradClipConfig, Gradients, Mlp, Trainable, ADAM_BETA1,
    ADAM_BETA2, ADAM_EPSILON,
};

/// Straight-line forward pass: explicit loops over rows and units.
fn loop_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let last = net.layers().len() - 1;
    for (l, layer) in net.layers().iter().enumerate() {
        let mut out = vec![0.0; layer.output_dim()];
        for (o, v) in out.iter_mut().enumerate() {
            let mut acc = layer.bias[o];
            for (i, hi) in h.iter().enumerate() {
                acc += layer.weight[[o, i]] * hi;
            }
            *v = if l < last { acc.max(0.0) } else { acc };
        }
        h = out;
    }
    h
}

fn jittered(dims: &[usize], seed: u64) -> Mlp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::new(dims, &mut rng).unwrap();
    let p: Vec<f64> = net.params_flat().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
    net.set_params_flat(&p).unwrap();
    net
}

/// `Σ c ⊙ out²` with fixed coefficients, and its gradient.
fn quadratic_loss(out: ArrayView2<f64>, c: &Array2<f64>) -> (f64, Array2<f64>) {
    ((&out * &out * c).sum(), &out * c * 2.0)
}

#[test]
fn backward_matches_finite_differences_on_random_nets() {
    for seed in 0..5 {
        let net = jittered(&[3, 7, 5, 2], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = gaussian(&mut rng, 6, 3);
        let c = gaussian(&mut rng, 6, 2);
        let trace = net.forward_traced(x.view()).unwrap();
        let (_, d) = quadratic_loss(trace.output().view(), &c);
        let mut g = net.zero_gradients();
        net.backward(&trace, d.view(), &mut g).unwrap();
        let err = fd_max_rel_err(&net, &g.flat(), |p| quadratic_loss(p.forward_batch(x.view()).unwrap().view(), &c).0);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let net = jittered(&[2, 6, 3], 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = gaussian(&mut rng, 4, 2);
    let c = gaussian(&mut rng, 4, 3);
    let trace = net.forward_traced(x.view()).unwrap();
    let (_, d) = quadratic_loss(trace.output().view(), &c);
    let dx = net.backward(&trace, d.view(), &mut net.zero_gradients()).unwrap();
    let h = 1e-5;
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let mut up = x.clone();
            up[[i, j]] += h;
            let mut down = x.clone();
            down[[i, j]] -= h;
            let f = |z: &Array2<f64>| quadratic_loss(net.forward_batch(z.view()).unwrap().view(), &c).0;
            let numeric = (f(&up) - f(&down)) / (2.0 * h);
            assert!(common::rel_err(dx[[i, j]], numeric) < 1e-4);
        }
    }
}

#[test]
fn scalar_adam_follows_the_textbook_recursion() {
    let (lr, grads) = (0.05, [0.3, -1.2, 0.7, 0.0, 2.5]);
    let mut p = [0.4];
    let mut state = AdamState::new(1);
    let (mut m, mut v, mut x) = (0.0, 0.0, 0.4);
    for (t, g) in grads.iter().enumerate() {
        adam_step(&mut p, &[*g], &mut state, lr).unwrap();
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
        let k = (t + 1) as i32;
        let m_hat = m / (1.0 - ADAM_BETA1.powi(k));
        let v_hat = v / (1.0 - ADAM_BETA2.powi(k));
        x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        assert!((p[0] - x).abs() < 1e-12, "step {}: {} vs {x}", t + 1, p[0]);
        assert_eq!(state.step_count, t as u64 + 1);
    }
}

/// `steps` clipped Adam updates on a fixed regression batch.
fn train(seed: u64, steps: usize) -> Mlp {
    let mut t = Trainable::new(jittered(&[2, 8, 1], seed));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let x = gaussian(&mut rng, 16, 2);
    let y = x.column(0).mapv(|v| v * v).insert_axis(ndarray::Axis(1));
    for _ in 0..steps {
        let trace = t.net.forward_traced(x.view()).unwrap();
        let d = (trace.output() - &y) * (2.0 / 16.0);
        let mut g = t.net.zero_gradients();
        t.net.backward(&trace, d.view(), &mut g).unwrap();
        t.apply(g, 0.01, Some(&GradClipConfig::default())).unwrap();
    }
    t.net
}

#[test]
fn training_is_bit_identical_under_a_seed() {
    let (a, b) = (train(3, 50), train(3, 50));
    assert_eq!(a.params_flat(), b.params_flat());
    assert_ne!(a.params_flat(), train(4, 50).params_flat());
}

#[test]
fn checkpoints_round_trip_after_training() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    let net = train(5, 20);
    save_mlp(&net, &path).unwrap();
    assert_eq!(load_mlp(&path).unwrap(), net);
}

fn unit_norms(g: &Gradients) -> Vec<f64> {
    let norm = |v: ndarray::ArrayView1<f64>| v.dot(&v).sqrt();
    g.layers
        .iter()
        .flat_map(|l| {
            l.weight.rows().into_iter().map(norm).chain(std::iter::once(norm(l.bias.view()))).collect::<Vec<_>>()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_matches_loop_oracle(seed in 0u64..10_000, rows in 1usize..6) {
        let net = jittered(&[2, 4, 1], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let x = gaussian(&mut rng, rows, 2);
        let batch = net.forward_batch(x.view()).unwrap();
        for (i, row) in x.rows().into_iter().enumerate() {
            let oracle = loop_forward(&net, row.as_slice().unwrap());
            prop_assert!((batch[[i, 0]] - oracle[0]).abs() < 1e-12);
            prop_assert_eq!(net.forward(row.as_slice().unwrap()).unwrap(), batch.row(i).to_vec());
        }
    }

    #[test]
    fn agc_never_increases_a_unit_norm(seed in 0u64..10_000, scale in 1e-4f64..1e3, factor in 1e-3f64..1.0) {
        let net = jittered(&[3, 5, 2], seed);
        let mut g = net.zero_gradients();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<f64> = (0..net.num_params()).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        for (dst, src) in g.param_slices_mut().into_iter().flat_map(|s| s.iter_mut()).zip(&noise) {
            *dst = *src;
        }
        let before = unit_norms(&g);
        agc_clip(&mut g, &net, &GradClipConfig { factor, zero_norm_guard: 1e-3 }).unwrap();
        for (a, b) in unit_norms(&g).iter().zip(&before) {
            prop_assert!(*a <= *b * (1.0 + 1e-12));
        }
    }
}
