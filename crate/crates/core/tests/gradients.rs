mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svrc::numerics::primitive_set;
use svrc::quantizer::{stanh_gradients, StanhLayer};
use svrc::numerics::finite_difference_gradient;
use svrc::Tensor;

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &p in primitive_set() {
        for case in 0..20 {
            let (inputs, build) = primitive_case(p, &mut rng);
            check_gradients(&inputs, build).unwrap_or_else(|e| panic!("{p:?} case {case}: {e}"));
        }
    }
}

#[test]
fn relaxed_quantizer_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..20 {
        let (inputs, build) = stanh_case(&mut rng, 10.0);
        check_gradients(&inputs, build).unwrap_or_else(|e| panic!("case {case}: {e}"));
    }
}

#[test]
fn analytic_form_matches_differences_in_y() {
    let layer = StanhLayer::new(vec![0.7, 1.1, 0.4], vec![-0.9, 0.3, 1.0]).unwrap();
    let y = Tensor::from_vec(vec![-1.3, -0.2, 0.35, 0.8, 2.0]);
    let beta = 3.0;
    let grads = stanh_gradients(y.data(), layer.weights(), layer.boundaries(), beta, &[1.0; 5]);
    for (j, &v) in y.data().iter().enumerate() {
        let fd = finite_difference_gradient(|t| layer.soft(t.item(), beta), &Tensor::scalar(v), 1e-5).unwrap();
        assert!((fd.item() - grads.y[j]).abs() < 1e-4);
    }
}

#[test]
fn gaussian_rate_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..20 {
        let (inputs, build) = gaussian_rate_case(&mut rng);
        check_gradients(&inputs, build).unwrap_or_else(|e| panic!("case {case}: {e}"));
    }
}

#[test]
fn factorized_rate_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..20 {
        let (inputs, build) = factorized_rate_case(&mut rng);
        check_gradients(&inputs, build).unwrap_or_else(|e| panic!("case {case}: {e}"));
    }
}

#[test]
fn gradient_linearity() {
    // d(f + g) = df + dg on a shared input
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&mut rng, &[4], -1.0, 1.0);
    let run = |which: u8| {
        let mut g = svrc::Graph::new();
        let v = g.param(x.clone());
        let a = g.tanh(v);
        let a = g.sum(a);
        let b = g.square(v);
        let b = g.mean(b);
        let loss = match which {
            0 => a,
            1 => b,
            _ => g.add(a, b).unwrap(),
        };
        g.backward(loss).unwrap();
        g.grad(v).unwrap().to_vec()
    };
    let (ga, gb, gs) = (run(0), run(1), run(2));
    for i in 0..4 {
        assert!((ga[i] + gb[i] - gs[i]).abs() < 1e-15);
    }
}
