//! Per-channel learned CDF for the hyper latent.
//!
//! Each channel composes affine maps with softplus-positive slopes and
//! `x + tanh(a) * tanh(x)` nonlinearities, then a logistic. Positive slopes and
//! `|tanh(a)| < 1` keep every stage increasing, so the CDF is monotone.

use std::f64::consts::LN_2;

use super::bounds::{element_bounds, BoundGradients};
use super::P_MIN;
use crate::error::{Error, Result};
use crate::numerics::special::{logistic, softplus, softplus_inverse};
use crate::numerics::{CustomOp, Graph, Tensor, Var};
use crate::quantizer::{reconstruction_levels, QuantizerGrid, StanhVars};

/// Layer widths of the per-channel network: scalar in, three stages of three
/// hidden units, scalar logit out.
const DIMS: [usize; 5] = [1, 3, 3, 3, 1];
const STAGES: usize = DIMS.len() - 1;

/// Offsets of each parameter group inside one channel's parameter row.
struct Layout {
    matrix: [usize; STAGES],
    bias: [usize; STAGES],
    factor: [usize; STAGES - 1],
    len: usize,
}

const fn layout() -> Layout {
    let mut matrix = [0; STAGES];
    let mut bias = [0; STAGES];
    let mut factor = [0; STAGES - 1];
    let mut at = 0;
    let mut k = 0;
    while k < STAGES {
        matrix[k] = at;
        at += DIMS[k] * DIMS[k + 1];
        k += 1;
    }
    k = 0;
    while k < STAGES {
        bias[k] = at;
        at += DIMS[k + 1];
        k += 1;
    }
    k = 0;
    while k < STAGES - 1 {
        factor[k] = at;
        at += DIMS[k + 1];
        k += 1;
    }
    Layout {
        matrix,
        bias,
        factor,
        len: at,
    }
}

const LAYOUT: Layout = layout();

/// Parameters per channel.
pub const PARAMS_PER_CHANNEL: usize = LAYOUT.len;

const MAX_WIDTH: usize = 3;

/// Forward activations kept for the backward pass.
struct Trace {
    // inputs to each stage (h_k) and pre-activations (a_k)
    h: [[f64; MAX_WIDTH]; STAGES],
    a: [[f64; MAX_WIDTH]; STAGES],
}

fn forward(p: &[f64], x: f64) -> (f64, Trace) {
    let mut trace = Trace {
        h: [[0.0; MAX_WIDTH]; STAGES],
        a: [[0.0; MAX_WIDTH]; STAGES],
    };
    trace.h[0][0] = x;
    for k in 0..STAGES {
        let (din, dout) = (DIMS[k], DIMS[k + 1]);
        for i in 0..dout {
            let mut acc = p[LAYOUT.bias[k] + i];
            for j in 0..din {
                acc += softplus(p[LAYOUT.matrix[k] + i * din + j]) * trace.h[k][j];
            }
            trace.a[k][i] = acc;
        }
        if k + 1 < STAGES {
            for i in 0..dout {
                let a = trace.a[k][i];
                trace.h[k + 1][i] = a + p[LAYOUT.factor[k] + i].tanh() * a.tanh();
            }
        }
    }
    (trace.a[STAGES - 1][0], trace)
}

/// Back-propagates `g` (gradient of the logit) into `grad_p`; returns the
/// gradient with respect to the input.
fn backward(p: &[f64], trace: &Trace, g: f64, grad_p: &mut [f64]) -> f64 {
    let mut ga = [0.0; MAX_WIDTH];
    ga[0] = g;
    for k in (0..STAGES).rev() {
        let (din, dout) = (DIMS[k], DIMS[k + 1]);
        let mut gh = [0.0; MAX_WIDTH];
        for i in 0..dout {
            grad_p[LAYOUT.bias[k] + i] += ga[i];
            for j in 0..din {
                let raw = p[LAYOUT.matrix[k] + i * din + j];
                grad_p[LAYOUT.matrix[k] + i * din + j] += ga[i] * trace.h[k][j] * logistic(raw);
                gh[j] += ga[i] * softplus(raw);
            }
        }
        if k == 0 {
            return gh[0];
        }
        for i in 0..din {
            let a = trace.a[k - 1][i];
            let tf = p[LAYOUT.factor[k - 1] + i].tanh();
            let ta = a.tanh();
            grad_p[LAYOUT.factor[k - 1] + i] += gh[i] * (1.0 - tf * tf) * ta;
            ga[i] = gh[i] * (1.0 + tf * (1.0 - ta * ta));
        }
    }
    unreachable!("loop returns at stage 0")
}

fn logit(p: &[f64], x: f64) -> f64 {
    if x == f64::INFINITY {
        f64::INFINITY
    } else if x == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        forward(p, x).0
    }
}

/// `logistic(hi) - logistic(lo)` evaluated on the side that avoids
/// cancellation.
fn logistic_interval(lo: f64, hi: f64) -> f64 {
    if lo + hi > 0.0 {
        logistic(-lo) - logistic(-hi)
    } else {
        logistic(hi) - logistic(lo)
    }
}

fn logistic_slope(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        logistic(x) * logistic(-x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedModel {
    params: Tensor,
}

impl FactorizedModel {
    /// A model whose every channel starts as the unit logistic CDF. Hidden
    /// biases are spread symmetrically so the units can diverge in training.
    pub fn new(channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("factorized model needs a channel".into()));
        }
        let mut row = vec![0.0; PARAMS_PER_CHANNEL];
        for k in 0..STAGES {
            let (din, dout) = (DIMS[k], DIMS[k + 1]);
            let slope = if k + 1 == STAGES { 1.0 } else { 1.0 / din.max(dout) as f64 };
            let slope = if k == 0 { 1.0 / dout as f64 } else { slope };
            for e in 0..din * dout {
                row[LAYOUT.matrix[k] + e] = softplus_inverse(slope);
            }
            if dout == 3 {
                row[LAYOUT.bias[k]] = -0.5;
                row[LAYOUT.bias[k] + 2] = 0.5;
            }
        }
        let data = (0..channels).flat_map(|_| row.iter().copied()).collect();
        Ok(Self {
            params: Tensor::new(vec![channels, PARAMS_PER_CHANNEL], data)?,
        })
    }

    pub fn from_params(params: Tensor) -> Result<Self> {
        match params.shape() {
            [_, PARAMS_PER_CHANNEL] => Ok(Self { params }),
            s => Err(Error::Shape(format!(
                "factorized parameters {s:?}, expected (C, {PARAMS_PER_CHANNEL})"
            ))),
        }
    }

    pub fn channels(&self) -> usize {
        self.params.shape()[0]
    }

    pub fn params(&self) -> &Tensor {
        &self.params
    }

    fn row(&self, channel: usize) -> &[f64] {
        &self.params.data()[channel * PARAMS_PER_CHANNEL..(channel + 1) * PARAMS_PER_CHANNEL]
    }

    pub fn cdf(&self, channel: usize, x: f64) -> f64 {
        logistic(logit(self.row(channel), x))
    }

    /// Unclamped probability of every level of `grid` for one channel.
    pub fn level_probabilities(&self, channel: usize, grid: &QuantizerGrid) -> Vec<f64> {
        let row = self.row(channel);
        (0..grid.num_levels())
            .map(|k| {
                let (lo, hi) = grid.interval(k);
                logistic_interval(logit(row, lo), logit(row, hi))
            })
            .collect()
    }

    /// `-sum log2 [c(v + r+) - c(v - r-)]` over an `(N, C, H, W)` tensor, with
    /// the radii of each element's level from `grid`.
    pub fn bits(&self, values: &Tensor, indices: &[usize], grid: &QuantizerGrid) -> Result<f64> {
        let (_, c, h, w) = values.dims4()?;
        self.check_channels(c)?;
        let plane = h * w;
        Ok(values
            .data()
            .iter()
            .zip(indices)
            .enumerate()
            .map(|(j, (&v, &k))| {
                let row = self.row((j / plane) % c);
                let p = logistic_interval(logit(row, v - grid.left[k]), logit(row, v + grid.right[k]));
                -p.max(P_MIN).log2()
            })
            .sum())
    }

    fn check_channels(&self, c: usize) -> Result<()> {
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "latent has {c} channels, factorized model has {}",
                self.channels()
            )));
        }
        Ok(())
    }
}

struct FactorizedRateOp {
    indices: Vec<usize>,
    channels: usize,
    plane: usize,
}

impl CustomOp for FactorizedRateOp {
    fn name(&self) -> &'static str {
        "factorized_rate_bits"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (z, w, b, psi) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let levels = reconstruction_levels(w.data());
        let mut gz = vec![0.0; z.len()];
        let mut gpsi = vec![0.0; psi.len()];
        let mut bounds = BoundGradients::new(levels.len());
        for (j, &v) in z.data().iter().enumerate() {
            let c = (j / self.plane) % self.channels;
            let row = &psi.data()[c * PARAMS_PER_CHANNEL..(c + 1) * PARAMS_PER_CHANNEL];
            let grow = &mut gpsi[c * PARAMS_PER_CHANNEL..(c + 1) * PARAMS_PER_CHANNEL];
            let k = self.indices[j];
            let (lower, upper) = element_bounds(v, k, &levels, b.data());
            let lo = lower.is_finite().then(|| forward(row, lower));
            let hi = upper.is_finite().then(|| forward(row, upper));
            let l_lo = lo.as_ref().map_or(f64::NEG_INFINITY, |t| t.0);
            let l_hi = hi.as_ref().map_or(f64::INFINITY, |t| t.0);
            let p = logistic_interval(l_lo, l_hi);
            if p <= P_MIN {
                continue;
            }
            let dbits_dp = -grad_out[0] / (p * LN_2);
            let mut d_lower = 0.0;
            let mut d_upper = 0.0;
            if let Some((_, trace)) = &hi {
                d_upper = backward(row, trace, dbits_dp * logistic_slope(l_hi), grow);
            }
            if let Some((_, trace)) = &lo {
                d_lower = backward(row, trace, -dbits_dp * logistic_slope(l_lo), grow);
            }
            gz[j] = d_lower + d_upper;
            bounds.add(k, d_lower, d_upper);
        }
        let (gw, gb) = bounds.finish();
        vec![Some(gz), Some(gw), Some(gb), Some(gpsi)]
    }
}

/// Total bits of the soft hyper latent under the factorized model held in
/// `psi` (shape `(C, PARAMS_PER_CHANNEL)`), differentiable in the soft values,
/// the quantizer parameters and `psi`.
pub fn factorized_rate_bits(
    g: &mut Graph,
    z_soft: Var,
    psi: Var,
    layer: &StanhVars,
    indices: Vec<usize>,
) -> Result<Var> {
    let (_, c, h, w) = g.value(z_soft).dims4()?;
    let channels = g.value(psi).shape()[0];
    if c != channels || g.value(psi).len() != channels * PARAMS_PER_CHANNEL {
        return Err(Error::Shape(format!(
            "latent has {c} channels, factorized model has {channels}"
        )));
    }
    if indices.len() != g.value(z_soft).len() {
        return Err(Error::Shape("one level index per element required".into()));
    }
    let plane = h * w;
    let levels = reconstruction_levels(g.value(layer.weights).data());
    let b = g.value(layer.boundaries).data();
    let psi_data = g.value(psi).data();
    let mut bits = 0.0;
    for (j, &v) in g.value(z_soft).data().iter().enumerate() {
        let ch = (j / plane) % c;
        let row = &psi_data[ch * PARAMS_PER_CHANNEL..(ch + 1) * PARAMS_PER_CHANNEL];
        let (lower, upper) = element_bounds(v, indices[j], &levels, b);
        let p = logistic_interval(logit(row, lower), logit(row, upper));
        bits -= p.max(P_MIN).log2();
    }
    let op = FactorizedRateOp {
        indices,
        channels: c,
        plane,
    };
    Ok(g.custom(&[z_soft, layer.weights, layer.boundaries, psi], Tensor::scalar(bits), Box::new(op)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::StanhLayer;

    #[test]
    fn layout_size() {
        assert_eq!(PARAMS_PER_CHANNEL, 3 + 9 + 9 + 3 + 10 + 9);
    }

    #[test]
    fn initial_model_is_unit_logistic() {
        let m = FactorizedModel::new(2).unwrap();
        for &x in &[-3.0, -0.5, 0.0, 0.25, 4.0] {
            assert!((m.cdf(1, x) - logistic(x)).abs() < 1e-12, "x = {x}");
        }
        let grid = StanhLayer::new(vec![1.0; 4], vec![-1.5, -0.5, 0.5, 1.5]).unwrap().grid();
        let p = m.level_probabilities(0, &grid);
        assert!((p[2] - (logistic(0.5) - logistic(-0.5))).abs() < 1e-12);
        assert!((p[2] - 0.2449).abs() < 1e-4);
    }

    #[test]
    fn monotone_with_limits() {
        let mut m = FactorizedModel::new(1).unwrap();
        // arbitrary nonzero factors and slopes
        m.params
            .data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v += ((i * 37 % 11) as f64 - 5.0) * 0.3);
        let mut prev = 0.0;
        for i in -400..=400 {
            let c = m.cdf(0, i as f64 * 0.05);
            assert!(c >= prev);
            prev = c;
        }
        assert!(m.cdf(0, -1e6) < 1e-12);
        assert!(m.cdf(0, 1e6) > 1.0 - 1e-12);
    }

    #[test]
    fn whole_line_level_costs_nothing() {
        let grid = QuantizerGrid {
            levels: vec![0.0],
            boundaries: vec![],
            left: vec![f64::INFINITY],
            right: vec![f64::INFINITY],
        };
        let m = FactorizedModel::new(1).unwrap();
        let z = Tensor::new(vec![1, 1, 2, 2], vec![0.1, -3.0, 2.0, 7.0]).unwrap();
        assert_eq!(m.bits(&z, &[0; 4], &grid).unwrap(), 0.0);
    }

    #[test]
    fn bits_match_hand_sum() {
        let layer = StanhLayer::new(vec![1.0; 4], vec![-1.5, -0.5, 0.5, 1.5]).unwrap();
        let grid = layer.grid();
        let m = FactorizedModel::new(1).unwrap();
        let z = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, -2.0, 2.0]).unwrap();
        let idx = [2, 3, 0, 4];
        let p = |lo: f64, hi: f64| logistic(hi) - logistic(lo);
        let expect = -(p(-0.5, 0.5).log2() + p(0.5, 1.5).log2() + logistic(-1.5).log2() + (1.0 - logistic(1.5)).log2());
        assert!((m.bits(&z, &idx, &grid).unwrap() - expect).abs() < 1e-12);
        let wrong = Tensor::new(vec![1, 2, 1, 2], vec![0.0; 4]).unwrap();
        assert!(m.bits(&wrong, &idx, &grid).is_err());
    }
}
