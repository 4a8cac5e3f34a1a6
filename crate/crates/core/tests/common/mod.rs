#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use svrc::numerics::{finite_difference_gradient, gradients_agree};
use svrc::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-3;

/// Compares graph gradients of `build(inputs)` against central differences
/// for every input. Returns the worst violation as an error message.
pub fn check_gradients<F>(inputs: &[Tensor], build: F) -> Result<(), String>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).map_err(|e| e.to_string())?;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).unwrap().to_vec();
        let numeric = finite_difference_gradient(
            |t| {
                let mut g2 = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| g2.constant(if j == i { t.clone() } else { x.clone() }))
                    .collect();
                let l = build(&mut g2, &vs);
                g2.value(l).item()
            },
            &inputs[i],
            FD_STEP,
        )
        .map_err(|e| e.to_string())?;
        for (k, (a, n)) in analytic.iter().zip(numeric.data()).enumerate() {
            if !gradients_agree(*a, *n, REL_TOL, ABS_TOL) {
                return Err(format!("input {i} coord {k}: analytic {a} vs numeric {n}"));
            }
        }
    }
    Ok(())
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in `[lo, hi]` kept at least `gap` away from zero.
pub fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], hi: f64, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..hi);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

/// `sum(c * v)` with a fixed coefficient tensor, so every output coordinate
/// contributes a distinct weight to the scalar loss.
pub fn weighted_sum(g: &mut Graph, v: Var, c: &Tensor) -> Var {
    let cv = g.constant(c.clone());
    let p = g.mul(v, cv).unwrap();
    g.sum(p)
}

fn coeffs_for(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random_tensor(rng, shape, -1.0, 1.0)
}

/// A random instance of one primitive: its inputs and a scalar loss built on
/// top of it.
pub fn primitive_case(p: svrc::numerics::Primitive, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Builder) {
    use svrc::numerics::Primitive::*;
    let shape = [2usize, 3];
    let c = coeffs_for(rng, &shape);
    let unary = |f: fn(&mut Graph, Var) -> Var, c: Tensor| -> Builder {
        Box::new(move |g, v| {
            let y = f(g, v[0]);
            weighted_sum(g, y, &c)
        })
    };
    match p {
        Add | Sub | Mul => {
            let a = random_tensor(rng, &shape, -2.0, 2.0);
            let b = random_tensor(rng, &shape, -2.0, 2.0);
            let build: Builder = Box::new(move |g, v| {
                let y = match p {
                    Add => g.add(v[0], v[1]),
                    Sub => g.sub(v[0], v[1]),
                    _ => g.mul(v[0], v[1]),
                }
                .unwrap();
                weighted_sum(g, y, &c)
            });
            (vec![a, b], build)
        }
        Scale => {
            let s = rng.gen_range(-3.0..3.0);
            let build: Builder = Box::new(move |g, v| {
                let y = g.scale(v[0], s);
                weighted_sum(g, y, &c)
            });
            (vec![random_tensor(rng, &shape, -2.0, 2.0)], build)
        }
        Tanh => (vec![random_tensor(rng, &shape, -2.0, 2.0)], unary(Graph::tanh, c)),
        Exp => (vec![random_tensor(rng, &shape, -2.0, 2.0)], unary(Graph::exp, c)),
        Ln => (vec![random_tensor(rng, &shape, 0.5, 3.0)], unary(Graph::ln, c)),
        Square => (vec![random_tensor(rng, &shape, -2.0, 2.0)], unary(Graph::square, c)),
        NormalCdf => (vec![random_tensor(rng, &shape, -3.0, 3.0)], unary(Graph::normal_cdf, c)),
        Sum | Mean => {
            let build: Builder = Box::new(move |g, v| {
                let s = if p == Sum { g.sum(v[0]) } else { g.mean(v[0]) };
                let t = g.tanh(s);
                g.square(t)
            });
            (vec![random_tensor(rng, &shape, -1.0, 1.0)], build)
        }
        LeakyRelu => {
            let build: Builder = Box::new(move |g, v| {
                let y = g.leaky_relu(v[0], 0.1);
                weighted_sum(g, y, &c)
            });
            (vec![random_away_from_zero(rng, &shape, 2.0, 1e-2)], build)
        }
        Clamp => {
            // keep samples clear of the clamp edges at +-0.5
            let x = random_away_from_zero(rng, &shape, 1.5, 1e-2)
                .map(|v| if (v.abs() - 0.5).abs() < 1e-2 { v * 1.1 } else { v });
            let build: Builder = Box::new(move |g, v| {
                let y = g.clamp(v[0], -0.5, 0.5);
                weighted_sum(g, y, &c)
            });
            (vec![x], build)
        }
        ChannelSlice => {
            let x = random_tensor(rng, &[2, 4, 2, 2], -1.0, 1.0);
            let c = coeffs_for(rng, &[2, 2, 2, 2]);
            let build: Builder = Box::new(move |g, v| {
                let y = g.channel_slice(v[0], 1, 3).unwrap();
                weighted_sum(g, y, &c)
            });
            (vec![x], build)
        }
        Conv2d => {
            let x = random_tensor(rng, &[2, 2, 5, 5], -1.0, 1.0);
            let w = random_tensor(rng, &[3, 2, 3, 3], -0.5, 0.5);
            let b = random_tensor(rng, &[3], -0.5, 0.5);
            let c = coeffs_for(rng, &[2, 3, 3, 3]);
            let build: Builder = Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
                weighted_sum(g, y, &c)
            });
            (vec![x, w, b], build)
        }
        ConvTranspose2d => {
            let x = random_tensor(rng, &[1, 2, 3, 3], -1.0, 1.0);
            let w = random_tensor(rng, &[2, 3, 3, 3], -0.5, 0.5);
            let b = random_tensor(rng, &[3], -0.5, 0.5);
            let c = coeffs_for(rng, &[1, 3, 6, 6]);
            let build: Builder = Box::new(move |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1).unwrap();
                weighted_sum(g, y, &c)
            });
            (vec![x, w, b], build)
        }
    }
}

/// Random quantizer with `levels` levels: positive steps, sorted boundaries.
pub fn random_layer(rng: &mut ChaCha8Rng, levels: usize) -> svrc::quantizer::StanhLayer {
    let w: Vec<f64> = (0..levels - 1).map(|_| rng.gen_range(0.3..1.5)).collect();
    let recon = svrc::quantizer::reconstruction_levels(&w);
    let b = recon
        .windows(2)
        .map(|p| p[0] + rng.gen_range(0.2..0.8) * (p[1] - p[0]))
        .collect();
    svrc::quantizer::StanhLayer::new(w, b).unwrap()
}

fn layer_vars(v: &[Var], at: usize) -> svrc::quantizer::StanhVars {
    svrc::quantizer::StanhVars {
        raw_weights: None,
        raw_boundaries: None,
        weights: v[at],
        boundaries: v[at + 1],
    }
}

/// Relaxed quantizer with `(y, w, b)` as inputs.
pub fn stanh_case(rng: &mut ChaCha8Rng, beta: f64) -> (Vec<Tensor>, Builder) {
    let levels = rng.gen_range(3..9);
    let layer = random_layer(rng, levels);
    let half = layer.levels()[levels - 1] + 1.0;
    let y = random_tensor(rng, &[6], -half, half);
    let c = random_tensor(rng, &[6], -1.0, 1.0);
    let build: Builder = Box::new(move |g, v| {
        let q = svrc::quantizer::soft_quantize(g, v[0], &layer_vars(v, 1), beta);
        weighted_sum(g, q, &c)
    });
    let w = Tensor::from_vec(layer.weights().to_vec());
    let b = Tensor::from_vec(layer.boundaries().to_vec());
    (vec![y, w, b], build)
}

/// Conditional Gaussian rate with `(y_soft, mu, sigma, w, b)` as inputs.
pub fn gaussian_rate_case(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Builder) {
    let levels = rng.gen_range(3..9);
    let layer = random_layer(rng, levels);
    let n = 8;
    let lo = layer.levels()[0] - 0.5;
    let hi = layer.levels()[levels - 1] + 0.5;
    let y = random_tensor(rng, &[n], lo, hi);
    let indices: Vec<usize> = y.data().iter().map(|&v| layer.index_of(v)).collect();
    let mu = Tensor::from_vec(y.data().iter().map(|v| v + rng.gen_range(-0.6..0.6)).collect());
    let sigma = random_tensor(rng, &[n], 0.3, 2.0);
    let build: Builder = Box::new(move |g, v| {
        svrc::entropy::gaussian_rate_bits(g, v[0], v[1], v[2], &layer_vars(v, 3), indices.clone()).unwrap()
    });
    let w = Tensor::from_vec(layer.weights().to_vec());
    let b = Tensor::from_vec(layer.boundaries().to_vec());
    (vec![y, mu, sigma, w, b], build)
}

/// Factorized rate with `(z_soft, w, b, psi)` as inputs.
pub fn factorized_rate_case(rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Builder) {
    let levels = rng.gen_range(3..9);
    let layer = random_layer(rng, levels);
    let channels = 2;
    let lo = layer.levels()[0] - 0.5;
    let hi = layer.levels()[levels - 1] + 0.5;
    let z = random_tensor(rng, &[1, channels, 2, 2], lo, hi);
    let indices: Vec<usize> = z.data().iter().map(|&v| layer.index_of(v)).collect();
    let model = svrc::entropy::FactorizedModel::new(channels).unwrap();
    let jitter: Vec<f64> = (0..model.params().len()).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let psi = Tensor::new(
        model.params().shape().to_vec(),
        model.params().data().iter().zip(&jitter).map(|(p, j)| p + j).collect(),
    )
    .unwrap();
    let build: Builder = Box::new(move |g, v| {
        svrc::entropy::factorized_rate_bits(g, v[0], v[3], &layer_vars(v, 1), indices.clone()).unwrap()
    });
    let w = Tensor::from_vec(layer.weights().to_vec());
    let b = Tensor::from_vec(layer.boundaries().to_vec());
    (vec![z, w, b, psi], build)
}
