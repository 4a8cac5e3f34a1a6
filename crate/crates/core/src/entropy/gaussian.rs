use std::f64::consts::LN_2;

use super::bounds::{element_bounds, BoundGradients};
use super::P_MIN;
use crate::error::{Error, Result};
use crate::numerics::special::{normal_cdf, normal_pdf};
use crate::numerics::{CustomOp, Graph, Tensor, Var};
use crate::quantizer::{reconstruction_levels, QuantizerGrid, StanhVars};

/// `Phi(hi) - Phi(lo)` for standardized edges, evaluated on the side of the
/// mean where the subtraction keeps precision.
pub fn normal_interval(lo: f64, hi: f64) -> f64 {
    if lo > 0.0 {
        normal_cdf(-lo) - normal_cdf(-hi)
    } else {
        normal_cdf(hi) - normal_cdf(lo)
    }
}

/// Probability mass of `N(mu, sigma^2)` on `[y - r_minus, y + r_plus]`,
/// floored at [`P_MIN`]. Infinite radii integrate to the corresponding tail.
pub fn gaussian_interval_rate(y: f64, mu: f64, sigma: f64, r_minus: f64, r_plus: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} must be positive")));
    }
    let lo = (y - r_minus - mu) / sigma;
    let hi = (y + r_plus - mu) / sigma;
    Ok(normal_interval(lo, hi).max(P_MIN))
}

/// Unclamped probability of every level of `grid` under `N(mu, sigma^2)`.
pub fn level_probabilities(mu: f64, sigma: f64, grid: &QuantizerGrid) -> Vec<f64> {
    (0..grid.num_levels())
        .map(|k| {
            let (lo, hi) = grid.interval(k);
            normal_interval((lo - mu) / sigma, (hi - mu) / sigma)
        })
        .collect()
}

/// Mean and scale of the conditional Gaussian over the main latent.
#[derive(Clone, Debug)]
pub struct GaussianConditional {
    pub mu: Tensor,
    pub sigma: Tensor,
    pub sigma_lower_bound: f64,
}

impl GaussianConditional {
    pub fn new(mu: Tensor, sigma: Tensor, sigma_lower_bound: f64) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::Shape(format!("mu {:?} vs sigma {:?}", mu.shape(), sigma.shape())));
        }
        if let Some(s) = sigma.data().iter().find(|&&s| !(s >= sigma_lower_bound)) {
            return Err(Error::InvalidArgument(format!(
                "sigma {s} below the lower bound {sigma_lower_bound}"
            )));
        }
        Ok(Self {
            mu,
            sigma,
            sigma_lower_bound,
        })
    }

    /// Total bits of quantized values with the given level indices.
    pub fn bits(&self, values: &Tensor, indices: &[usize], grid: &QuantizerGrid) -> f64 {
        values
            .data()
            .iter()
            .zip(indices)
            .zip(self.mu.data().iter().zip(self.sigma.data()))
            .map(|((&v, &k), (&m, &s))| {
                -gaussian_interval_rate(v, m, s, grid.left[k], grid.right[k])
                    .expect("sigma validated")
                    .log2()
            })
            .sum()
    }
}

struct GaussianRateOp {
    indices: Vec<usize>,
}

/// Per-element forward quantities shared by the value and the gradient.
struct Eval {
    p: f64,
    lo: f64,
    hi: f64,
}

fn evaluate(lower: f64, upper: f64, mu: f64, sigma: f64) -> Eval {
    let lo = (lower - mu) / sigma;
    let hi = (upper - mu) / sigma;
    Eval {
        p: normal_interval(lo, hi),
        lo,
        hi,
    }
}

impl CustomOp for GaussianRateOp {
    fn name(&self) -> &'static str {
        "gaussian_rate_bits"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (y, mu, sigma, w, b) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
        let levels = reconstruction_levels(w.data());
        let n = y.len();
        let mut gy = vec![0.0; n];
        let mut gmu = vec![0.0; n];
        let mut gsigma = vec![0.0; n];
        let mut bounds = BoundGradients::new(levels.len());
        for j in 0..n {
            let k = self.indices[j];
            let (lower, upper) = element_bounds(y.data()[j], k, &levels, b.data());
            let (m, s) = (mu.data()[j], sigma.data()[j]);
            let e = evaluate(lower, upper, m, s);
            if e.p <= P_MIN {
                continue;
            }
            let dbits_dp = -grad_out[0] / (e.p * LN_2);
            let (pdf_hi, pdf_lo) = (normal_pdf(e.hi), normal_pdf(e.lo));
            // pdf(+-inf) = 0, so infinite edges contribute nothing.
            let g_upper = dbits_dp * pdf_hi / s;
            let g_lower = -dbits_dp * pdf_lo / s;
            gy[j] = g_upper + g_lower;
            gmu[j] = -(g_upper + g_lower);
            let hi_term = if e.hi.is_finite() { e.hi * pdf_hi } else { 0.0 };
            let lo_term = if e.lo.is_finite() { e.lo * pdf_lo } else { 0.0 };
            gsigma[j] = dbits_dp * (lo_term - hi_term) / s;
            bounds.add(k, g_lower, g_upper);
        }
        let (gw, gb) = bounds.finish();
        vec![Some(gy), Some(gmu), Some(gsigma), Some(gw), Some(gb)]
    }
}

/// Total bits of the soft main latent under the conditional Gaussian, with
/// integration bounds taken from the quantizer interval each element falls
/// in (`indices`). Differentiable in the soft values, `mu`, `sigma` and the
/// quantizer parameters.
pub fn gaussian_rate_bits(
    g: &mut Graph,
    y_soft: Var,
    mu: Var,
    sigma: Var,
    layer: &StanhVars,
    indices: Vec<usize>,
) -> Result<Var> {
    let (yv, mv, sv) = (g.value(y_soft), g.value(mu), g.value(sigma));
    if yv.shape() != mv.shape() || yv.shape() != sv.shape() || indices.len() != yv.len() {
        return Err(Error::Shape(format!(
            "rate inputs {:?}, {:?}, {:?} with {} indices",
            yv.shape(),
            mv.shape(),
            sv.shape(),
            indices.len()
        )));
    }
    let levels = reconstruction_levels(g.value(layer.weights).data());
    let b = g.value(layer.boundaries).data();
    let mut bits = 0.0;
    for j in 0..yv.len() {
        let s = sv.data()[j];
        if !(s > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma {s} must be positive")));
        }
        let (lower, upper) = element_bounds(yv.data()[j], indices[j], &levels, b);
        let e = evaluate(lower, upper, mv.data()[j], s);
        bits -= e.p.max(P_MIN).log2();
    }
    let inputs = [y_soft, mu, sigma, layer.weights, layer.boundaries];
    Ok(g.custom(&inputs, Tensor::scalar(bits), Box::new(GaussianRateOp { indices })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::StanhLayer;

    #[test]
    fn central_interval() {
        let p = gaussian_interval_rate(0.0, 0.0, 1.0, 0.5, 0.5).unwrap();
        // Simpson quadrature of the density over [-0.5, 0.5].
        let n = 10_000;
        let h = 1.0 / n as f64;
        let mut s = normal_pdf(-0.5) + normal_pdf(0.5);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * normal_pdf(-0.5 + i as f64 * h);
        }
        let quad = s * h / 3.0;
        assert!((p - quad).abs() < 1e-12);
        assert!((p - 0.382925).abs() < 1e-6);
    }

    #[test]
    fn full_line_and_degenerate() {
        let inf = f64::INFINITY;
        assert_eq!(gaussian_interval_rate(0.3, 0.0, 2.0, inf, inf).unwrap(), 1.0);
        assert_eq!(gaussian_interval_rate(0.3, 0.0, 2.0, 0.0, 0.0).unwrap(), P_MIN);
        assert!(gaussian_interval_rate(0.0, 0.0, 0.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn pmf_sums_to_one() {
        let grid = StanhLayer::new(vec![0.4, 1.3, 0.9, 2.0], vec![-1.2, -0.1, 0.6, 2.2])
            .unwrap()
            .grid();
        for &(m, s) in &[(0.0, 0.11), (0.7, 1.0), (-3.0, 5.0), (10.0, 0.5)] {
            let total: f64 = level_probabilities(m, s, &grid).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn upper_tail_keeps_precision() {
        let p = normal_interval(8.0, 8.5);
        assert!(p > 0.0 && p < 1e-14);
    }
}
