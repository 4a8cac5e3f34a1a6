//! Integration bounds of a soft latent value and how their gradients flow
//! back into the quantizer weights and boundaries.

/// `(y - r-, y + r+)` for an element in interval `k`, where `r- = l_k -
/// b_{k-1}` and `r+ = b_k - l_k`. The outermost intervals are unbounded.
pub(crate) fn element_bounds(y: f64, k: usize, levels: &[f64], boundaries: &[f64]) -> (f64, f64) {
    let lower = if k == 0 {
        f64::NEG_INFINITY
    } else {
        y - (levels[k] - boundaries[k - 1])
    };
    let upper = if k + 1 == levels.len() {
        f64::INFINITY
    } else {
        y + (boundaries[k] - levels[k])
    };
    (lower, upper)
}

/// Accumulates `d/d lower` and `d/d upper` per element into gradients with
/// respect to the step weights and boundaries.
pub(crate) struct BoundGradients {
    level: Vec<f64>,
    boundary: Vec<f64>,
}

impl BoundGradients {
    pub fn new(levels: usize) -> Self {
        Self {
            level: vec![0.0; levels],
            boundary: vec![0.0; levels - 1],
        }
    }

    pub fn add(&mut self, k: usize, d_lower: f64, d_upper: f64) {
        if k > 0 {
            self.boundary[k - 1] += d_lower;
            self.level[k] -= d_lower;
        }
        if k < self.boundary.len() {
            self.boundary[k] += d_upper;
            self.level[k] -= d_upper;
        }
    }

    /// Weight gradients from `dl_k/dw_j = -1/2 + [j < k]`.
    pub fn finish(self) -> (Vec<f64>, Vec<f64>) {
        let total: f64 = self.level.iter().sum();
        let steps = self.boundary.len();
        let mut gw = vec![0.0; steps];
        let mut suffix = 0.0;
        for j in (0..steps).rev() {
            suffix += self.level[j + 1];
            gw[j] = -0.5 * total + suffix;
        }
        (gw, self.boundary)
    }
}
