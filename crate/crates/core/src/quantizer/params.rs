//! Unconstrained training parameters for a [`StanhLayer`] and the graph
//! operations that use them.
//!
//! Weights are `exp(raw_w)`. Boundaries are `raw_b[0]` followed by cumulative
//! sums of `exp(raw_b[1..])`, so they stay strictly increasing under any
//! gradient step.

use super::layer::{stanh_gradients, StanhLayer};
use crate::error::Result;
use crate::numerics::{CustomOp, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct StanhParams {
    pub raw_weights: Vec<f64>,
    pub raw_boundaries: Vec<f64>,
}

impl StanhParams {
    pub fn from_layer(layer: &StanhLayer) -> Self {
        let raw_weights = layer.weights().iter().map(|w| w.ln()).collect();
        let b = layer.boundaries();
        let mut raw_boundaries = Vec::with_capacity(b.len());
        raw_boundaries.push(b[0]);
        raw_boundaries.extend(b.windows(2).map(|p| (p[1] - p[0]).ln()));
        Self {
            raw_weights,
            raw_boundaries,
        }
    }

    pub fn to_layer(&self) -> Result<StanhLayer> {
        let weights = self.raw_weights.iter().map(|r| r.exp()).collect();
        StanhLayer::new(weights, cumulative_boundaries(&self.raw_boundaries))
    }

    pub fn len(&self) -> usize {
        self.raw_weights.len() + self.raw_boundaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_weights.is_empty()
    }
}

fn cumulative_boundaries(raw: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    let mut acc = raw[0];
    out.push(acc);
    for r in &raw[1..] {
        acc += r.exp();
        out.push(acc);
    }
    out
}

/// Graph handles for one quantizer layer.
#[derive(Clone, Copy, Debug)]
pub struct StanhVars {
    pub raw_weights: Option<Var>,
    pub raw_boundaries: Option<Var>,
    pub weights: Var,
    pub boundaries: Var,
}

struct BoundaryOp;

impl CustomOp for BoundaryOp {
    fn name(&self) -> &'static str {
        "cumulative_boundaries"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let raw = inputs[0].data();
        let mut grad = vec![0.0; raw.len()];
        let mut suffix = 0.0;
        for i in (0..raw.len()).rev() {
            suffix += grad_out[i];
            grad[i] = if i == 0 { suffix } else { suffix * raw[i].exp() };
        }
        vec![Some(grad)]
    }
}

/// Places trainable raw parameters on the graph and derives `w` and `b`.
pub fn attach_trainable(g: &mut Graph, params: &StanhParams) -> StanhVars {
    let raw_w = g.param(Tensor::from_vec(params.raw_weights.clone()));
    let raw_b = g.param(Tensor::from_vec(params.raw_boundaries.clone()));
    let weights = g.exp(raw_w);
    let value = Tensor::from_vec(cumulative_boundaries(&params.raw_boundaries));
    let boundaries = g.custom(&[raw_b], value, Box::new(BoundaryOp));
    StanhVars {
        raw_weights: Some(raw_w),
        raw_boundaries: Some(raw_b),
        weights,
        boundaries,
    }
}

/// Places a fixed layer on the graph as constants.
pub fn attach_frozen(g: &mut Graph, layer: &StanhLayer) -> StanhVars {
    let weights = g.constant(Tensor::from_vec(layer.weights().to_vec()));
    let boundaries = g.constant(Tensor::from_vec(layer.boundaries().to_vec()));
    StanhVars {
        raw_weights: None,
        raw_boundaries: None,
        weights,
        boundaries,
    }
}

struct StanhOp {
    beta: f64,
}

impl CustomOp for StanhOp {
    fn name(&self) -> &'static str {
        "stanh"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = stanh_gradients(inputs[0].data(), inputs[1].data(), inputs[2].data(), self.beta, grad_out);
        vec![Some(g.y), Some(g.weights), Some(g.boundaries)]
    }
}

/// Relaxed quantization on the graph, differentiable in `y`, `w` and `b`.
pub fn soft_quantize(g: &mut Graph, y: Var, layer: &StanhVars, beta: f64) -> Var {
    let w = g.value(layer.weights).data().to_vec();
    let b = g.value(layer.boundaries).data().to_vec();
    let value = g.value(y).map(|v| {
        w.iter()
            .zip(&b)
            .map(|(&wi, &bi)| 0.5 * wi * (beta * (v - bi)).tanh())
            .sum()
    });
    g.custom(&[y, layer.weights, layer.boundaries], value, Box::new(StanhOp { beta }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_gradient;

    #[test]
    fn raw_round_trip() {
        let layer = StanhLayer::new(vec![0.5, 1.5, 1.0], vec![-2.0, 0.25, 1.0]).unwrap();
        let back = StanhParams::from_layer(&layer).to_layer().unwrap();
        for (a, b) in back.weights().iter().zip(layer.weights()) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in back.boundaries().iter().zip(layer.boundaries()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn boundary_gradient_matches_differences() {
        let params = StanhParams {
            raw_weights: vec![0.1, -0.3, 0.2],
            raw_boundaries: vec![-1.0, 0.2, -0.4],
        };
        let coeffs = [0.3, -1.2, 0.7];
        let mut g = Graph::new();
        let vars = attach_trainable(&mut g, &params);
        let c = g.constant(Tensor::from_vec(coeffs.to_vec()));
        let prod = g.mul(vars.boundaries, c).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        let analytic = g.grad(vars.raw_boundaries.unwrap()).unwrap().to_vec();
        let numeric = finite_difference_gradient(
            |t| {
                cumulative_boundaries(t.data())
                    .iter()
                    .zip(&coeffs)
                    .map(|(b, c)| b * c)
                    .sum()
            },
            &Tensor::from_vec(params.raw_boundaries.clone()),
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(numeric.data()) {
            assert!((a - n).abs() < 1e-8);
        }
    }
}
