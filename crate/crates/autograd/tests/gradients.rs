use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapegrad::check::probe_gradients;
use tapegrad::{ConvGeom, Tape, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn all_coords(inputs: &[Tensor<f64>]) -> Vec<(usize, usize)> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect()
}

fn assert_probes<F>(inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Var<f64>,
{
    let coords = all_coords(inputs);
    for p in probe_gradients(inputs, &coords, 1e-6, f) {
        assert!(
            p.rel_error(1e-6) < 1e-6,
            "input {} index {}: analytic {} numeric {}",
            p.input,
            p.index,
            p.analytic,
            p.numeric
        );
    }
}

#[test]
fn elementwise_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[2, 3], &mut rng).map(|v| v.abs() + 0.5);
    assert_probes(&[a, b], |_, v| {
        let (a, b) = (&v[0], &v[1]);
        let t = a.mul(b).tanh().add(&a.div(b)).sub(&b.square().scale(0.3));
        t.add(&b.sqrt()).add(&a.abs().add_scalar(0.1).recip()).sum()
    });
}

#[test]
fn activations_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[3, 4], &mut rng).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    assert_probes(&[x], |_, v| {
        v[0].relu().square().sum().add(&v[0].leaky_relu(0.01).tanh().sum())
    });
}

#[test]
fn broadcasting_and_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 2, 2], &mut rng);
    let gamma = random(&[1, 3, 1, 1], &mut rng);
    let m = random(&[2, 1, 2, 2], &mut rng);
    assert_probes(&[x, gamma, m], |_, v| {
        let y = v[0].mul_b(&v[1]).mul_b(&v[2]);
        let per = y.square().mean_per_sample();
        per.sqrt().sum().add(&y.narrow(1, 1, 2).unnarrow(1, 0, 4).tanh().mean())
    });
}

#[test]
fn conv_family_first_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = ConvGeom::new(2, 1);
    let x = random(&[2, 2, 6, 6], &mut rng);
    let w = random(&[3, 2, 4, 4], &mut rng);
    let wt = random(&[3, 2, 4, 4], &mut rng);
    assert_probes(&[x, w, wt], move |_, v| {
        let y = v[0].conv2d(&v[1], g).tanh();
        let z = y.conv_transpose2d(&v[2], g, (6, 6));
        let k = v[0].conv2d_weight_grad(&y, 4, g);
        z.square().sum().add(&k.mul(&v[2]).sum())
    });
}

/// Penalty on the input-gradient norm of a two-layer strided critic; the
/// analytic parameter gradient passes through a recorded backward pass.
#[test]
fn second_order_through_strided_critic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = ConvGeom::new(2, 1);
    let x = random(&[2, 1, 8, 8], &mut rng);
    let w1 = random(&[3, 1, 4, 4], &mut rng);
    let b1 = random(&[1, 3, 1, 1], &mut rng);
    let w2 = random(&[2, 3, 4, 4], &mut rng);
    let w3 = random(&[1, 2, 3, 3], &mut rng);
    let critic = move |x: &Var<f64>, w: &[Var<f64>]| {
        x.conv2d(&w[0], g)
            .add_b(&w[1])
            .leaky_relu(0.2)
            .conv2d(&w[2], g)
            .tanh()
            .conv2d(&w[3], ConvGeom::new(1, 1))
    };
    let xs = x.clone();
    let inputs = vec![w1, b1, w2, w3];
    let coords = all_coords(&inputs);
    let probes = probe_gradients(&inputs, &coords, 1e-6, move |tape, w| {
        let xv = tape.var(xs.clone());
        let score = critic(&xv, w).sum();
        let gx = tape.grad(&score, &[&xv], true).unwrap()[0].clone().unwrap();
        let norm = gx.square().sum_to(&[2, 1, 1, 1]).sqrt();
        norm.add_scalar(-1.0).square().mean()
    });
    for p in probes {
        assert!(
            p.rel_error(1e-6) < 1e-6,
            "input {} index {}: analytic {} numeric {}",
            p.input,
            p.index,
            p.analytic,
            p.numeric
        );
    }
}

#[test]
fn disconnected_variables_get_no_gradient() {
    let tape = Tape::<f64>::new();
    let a = tape.var(Tensor::ones(&[2]));
    let b = tape.var(Tensor::ones(&[2]));
    let out = a.square().sum();
    let grads = tape.grad(&out, &[&a, &b], false).unwrap();
    assert!(grads[0].is_some());
    assert!(grads[1].is_none());
    let c = tape.constant(Tensor::ones(&[2]));
    assert!(tape.grad(&c.sum(), &[&a], false).unwrap()[0].is_none());
}

#[test]
fn no_grad_and_detach_record_nothing() {
    let tape = Tape::<f64>::new();
    let a = tape.var(Tensor::ones(&[3]));
    let before = tape.len();
    let y = tape.no_grad(|| a.square().sum());
    assert!(!y.is_tracked());
    assert!(!a.detach().mul(&a.detach()).is_tracked());
    assert_eq!(tape.len(), before);
}

#[test]
fn sqrt_gradient_is_zero_at_origin() {
    let tape = Tape::<f64>::new();
    let a = tape.var(Tensor::zeros(&[2]));
    let g = tape.grad(&a.sqrt().sum(), &[&a], false).unwrap()[0].clone().unwrap();
    assert_eq!(g.value().data(), &[0.0, 0.0]);
}

#[test]
fn repeated_use_accumulates() {
    let tape = Tape::<f64>::new();
    let a = tape.var(Tensor::full(&[1], 3.0));
    let out = a.mul(&a).add(&a).sum(); // a^2 + a
    let g = tape.grad(&out, &[&a], false).unwrap()[0].clone().unwrap();
    assert_eq!(g.item(), 7.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sum_to_is_adjoint_of_broadcast(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let small = random(&[1, 3, 1, 2], &mut rng);
        let big = random(&[2, 3, 4, 2], &mut rng);
        let lhs: f64 = small.broadcast_to(big.shape()).unwrap().data().iter()
            .zip(big.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = big.sum_to(small.shape()).unwrap().data().iter()
            .zip(small.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }
}
