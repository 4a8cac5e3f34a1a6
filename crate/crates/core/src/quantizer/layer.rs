use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Sum-of-tanh scalar quantizer with `L` levels.
///
/// `weights[i]` is the step between reconstruction levels `i` and `i + 1`;
/// `boundaries[i]` is the decision threshold between them. The relaxed form is
/// `sum_i (w_i / 2) tanh(beta (y - b_i))`, which tends to the step function
/// with the levels below as `beta` grows.
#[derive(Clone, Debug, PartialEq)]
pub struct StanhLayer {
    weights: Vec<f64>,
    boundaries: Vec<f64>,
    levels: Vec<f64>,
}

/// Reconstruction levels for a set of step weights: the first level is
/// `-sum(w) / 2` and each following level adds the previous step.
pub fn reconstruction_levels(weights: &[f64]) -> Vec<f64> {
    let mut levels = Vec::with_capacity(weights.len() + 1);
    let mut level = -0.5 * weights.iter().sum::<f64>();
    levels.push(level);
    for &w in weights {
        level += w;
        levels.push(level);
    }
    levels
}

impl StanhLayer {
    pub fn new(weights: Vec<f64>, boundaries: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("a quantizer needs at least two levels".into()));
        }
        if weights.len() != boundaries.len() {
            return Err(Error::Shape(format!(
                "{} weights vs {} boundaries",
                weights.len(),
                boundaries.len()
            )));
        }
        if weights.len() + 1 > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("{} levels", weights.len() + 1)));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidArgument(format!("step weight {w} is not positive")));
        }
        if boundaries.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("quantizer boundary".into()));
        }
        if let Some(pair) = boundaries.windows(2).find(|p| p[0] >= p[1]) {
            return Err(Error::InvalidArgument(format!(
                "boundaries not strictly increasing: {} then {}",
                pair[0], pair[1]
            )));
        }
        let levels = reconstruction_levels(&weights);
        Ok(Self {
            weights,
            boundaries,
            levels,
        })
    }

    /// Uniform quantizer whose `levels` reconstruction values span exactly
    /// `[lo, hi]`, with decision boundaries at the midpoints. Levels are
    /// always centred on zero, so the range must be symmetric.
    pub fn init_uniform(levels: usize, lo: f64, hi: f64) -> Result<Self> {
        if levels < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 levels, got {levels}")));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!("empty range [{lo}, {hi}]")));
        }
        if (lo + hi).abs() > 1e-12 * (hi - lo) {
            return Err(Error::InvalidArgument(format!(
                "range [{lo}, {hi}] is not symmetric about zero"
            )));
        }
        let step = (hi - lo) / (levels - 1) as f64;
        let weights = vec![step; levels - 1];
        let recon = reconstruction_levels(&weights);
        let boundaries = recon.windows(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        Self::new(weights, boundaries)
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Number of trainable scalars: one weight and one boundary per step.
    pub fn parameter_count(&self) -> usize {
        2 * self.weights.len()
    }

    /// True when every reconstruction level lies inside its own decision
    /// interval, which makes hard quantization idempotent.
    pub fn is_consistent(&self) -> bool {
        let last = self.levels.len() - 1;
        self.levels.iter().enumerate().all(|(k, &l)| {
            (k == 0 || l >= self.boundaries[k - 1]) && (k == last || l < self.boundaries[k])
        })
    }

    /// Index of the interval containing `y`. A value exactly on a boundary
    /// belongs to the upper interval.
    pub fn index_of(&self, y: f64) -> usize {
        self.boundaries.partition_point(|&b| b <= y)
    }

    /// Relaxed quantizer value at inverse temperature `beta`.
    pub fn soft(&self, y: f64, beta: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.boundaries)
            .map(|(&w, &b)| 0.5 * w * (beta * (y - b)).tanh())
            .sum()
    }

    pub fn grid(&self) -> QuantizerGrid {
        let last = self.levels.len() - 1;
        let left = (0..=last)
            .map(|k| {
                if k == 0 {
                    f64::INFINITY
                } else {
                    self.levels[k] - self.boundaries[k - 1]
                }
            })
            .collect();
        let right = (0..=last)
            .map(|k| {
                if k == last {
                    f64::INFINITY
                } else {
                    self.boundaries[k] - self.levels[k]
                }
            })
            .collect();
        QuantizerGrid {
            levels: self.levels.clone(),
            boundaries: self.boundaries.clone(),
            left,
            right,
        }
    }

    /// Little-endian record: `STNH`, version, `L` as u16, then `L-1` weights
    /// and `L-1` boundaries as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 16 * self.weights.len());
        out.extend_from_slice(STANH_MAGIC);
        out.push(STANH_VERSION);
        out.extend_from_slice(&(self.num_levels() as u16).to_le_bytes());
        for v in self.weights.iter().chain(&self.boundaries) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses one record from the front of `bytes`, returning the layer and
    /// the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 7 {
            return Err(Error::Truncated("quantizer record header".into()));
        }
        if &bytes[..4] != STANH_MAGIC {
            return Err(Error::BadMagic { expected: "STNH" });
        }
        if bytes[4] != STANH_VERSION {
            return Err(Error::Version {
                found: bytes[4],
                expected: STANH_VERSION,
            });
        }
        let levels = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
        if levels < 2 {
            return Err(Error::Corrupted(format!("quantizer with {levels} levels")));
        }
        let steps = levels - 1;
        let total = 7 + 16 * steps;
        if bytes.len() < total {
            return Err(Error::Truncated(format!(
                "quantizer record needs {total} bytes, have {}",
                bytes.len()
            )));
        }
        let read = |i: usize| {
            let at = 7 + 8 * i;
            f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"))
        };
        let weights = (0..steps).map(read).collect();
        let boundaries = (steps..2 * steps).map(read).collect();
        Ok((Self::new(weights, boundaries)?, total))
    }

    /// Size in bytes of [`to_bytes`](Self::to_bytes) for `levels` levels.
    pub fn encoded_len(levels: usize) -> usize {
        7 + 16 * (levels - 1)
    }
}

const STANH_MAGIC: &[u8; 4] = b"STNH";
const STANH_VERSION: u8 = 1;

/// Reconstruction levels with the distances to their interval edges.
///
/// `left[k]` and `right[k]` are `r-` and `r+` of level `k`; the outermost
/// intervals extend to infinity.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerGrid {
    pub levels: Vec<f64>,
    pub boundaries: Vec<f64>,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl QuantizerGrid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Lower and upper edge of interval `k` (infinite at the extremes).
    pub fn interval(&self, k: usize) -> (f64, f64) {
        let lo = if k == 0 { f64::NEG_INFINITY } else { self.boundaries[k - 1] };
        let hi = if k + 1 == self.levels.len() {
            f64::INFINITY
        } else {
            self.boundaries[k]
        };
        (lo, hi)
    }

    /// Width `r- + r+` of interval `k`.
    pub fn width(&self, k: usize) -> f64 {
        self.left[k] + self.right[k]
    }
}

/// Exact inference-time quantization: values and level indices.
pub fn hard_quantize(y: &Tensor, layer: &StanhLayer) -> (Tensor, Vec<usize>) {
    let indices: Vec<usize> = y.data().iter().map(|&v| layer.index_of(v)).collect();
    let values = indices.iter().map(|&k| layer.levels[k]).collect();
    let values = Tensor::new(y.shape().to_vec(), values).expect("same element count");
    (values, indices)
}

/// Relaxed quantization of plain values (no graph).
pub fn soft_quantize_values(y: &Tensor, layer: &StanhLayer, beta: f64) -> Tensor {
    y.map(|v| layer.soft(v, beta))
}

/// Convex combination of two layers' weights and boundaries.
pub fn interpolate(first: &StanhLayer, second: &StanhLayer, rho: f64) -> Result<StanhLayer> {
    if first.num_levels() != second.num_levels() {
        return Err(Error::Shape(format!(
            "cannot interpolate {} and {} levels",
            first.num_levels(),
            second.num_levels()
        )));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("rho {rho} outside [0, 1]")));
    }
    let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| (1.0 - rho) * x + rho * y).collect()
    };
    StanhLayer::new(
        mix(&first.weights, &second.weights),
        mix(&first.boundaries, &second.boundaries),
    )
}

/// Plain uniform quantizer `delta * round(y / delta)`, ties away from zero.
pub fn uniform_step_quantize(y: &Tensor, delta: f64) -> Result<Tensor> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("step {delta} must be positive")));
    }
    Ok(y.map(|v| delta * (v / delta).round()))
}

/// Analytic partial derivatives of the relaxed quantizer, each contracted
/// with `upstream` and summed over elements for the layer parameters.
pub struct StanhGradients {
    pub y: Vec<f64>,
    pub weights: Vec<f64>,
    pub boundaries: Vec<f64>,
}

pub fn stanh_gradients(
    y: &[f64],
    weights: &[f64],
    boundaries: &[f64],
    beta: f64,
    upstream: &[f64],
) -> StanhGradients {
    let mut gy = vec![0.0; y.len()];
    let mut gw = vec![0.0; weights.len()];
    let mut gb = vec![0.0; boundaries.len()];
    for ((&v, &u), gyj) in y.iter().zip(upstream).zip(gy.iter_mut()) {
        if u == 0.0 {
            continue;
        }
        let mut dy = 0.0;
        for (i, (&w, &b)) in weights.iter().zip(boundaries).enumerate() {
            let t = (beta * (v - b)).tanh();
            let slope = 0.5 * w * beta * (1.0 - t * t);
            dy += slope;
            gw[i] += 0.5 * t * u;
            gb[i] -= slope * u;
        }
        *gyj = dy * u;
    }
    StanhGradients {
        y: gy,
        weights: gw,
        boundaries: gb,
    }
}
