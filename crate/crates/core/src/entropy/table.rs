use super::gaussian::level_probabilities;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::quantizer::QuantizerGrid;

/// Default coder precision in bits.
pub const DEFAULT_PRECISION: u32 = 16;

/// Integer-normalized PMF over level indices. Counts sum to `2^precision`
/// and every count is at least one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodingTable {
    precision: u32,
    counts: Vec<u32>,
    cumulative: Vec<u32>,
}

impl CodingTable {
    pub fn from_counts(counts: Vec<u32>, precision: u32) -> Result<Self> {
        check_precision(precision)?;
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::InvalidArgument("counts must be non-empty and positive".into()));
        }
        let mut cumulative = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0u64;
        cumulative.push(0);
        for &c in &counts {
            acc += c as u64;
            if acc > 1 << precision {
                break;
            }
            cumulative.push(acc as u32);
        }
        if acc != 1 << precision {
            return Err(Error::InvalidArgument(format!(
                "counts sum to {acc}, expected {}",
                1u64 << precision
            )));
        }
        Ok(Self {
            precision,
            counts,
            cumulative,
        })
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Cumulative counts, starting at 0 and ending at `2^precision`.
    pub fn cumulative(&self) -> &[u32] {
        &self.cumulative
    }

    pub fn num_levels(&self) -> usize {
        self.counts.len()
    }

    /// Ideal code length of `symbol` in bits.
    pub fn cost(&self, symbol: usize) -> f64 {
        self.precision as f64 - (self.counts[symbol] as f64).log2()
    }

    /// Symbol whose cumulative range contains `target`.
    pub fn lookup(&self, target: u32) -> usize {
        self.cumulative.partition_point(|&c| c <= target) - 1
    }
}

fn check_precision(precision: u32) -> Result<()> {
    if !(8..=16).contains(&precision) {
        return Err(Error::InvalidArgument(format!("precision {precision} outside [8, 16]")));
    }
    Ok(())
}

/// Quantizes a PMF to integer counts summing to `2^precision`.
///
/// Counts are floored (at least one), the shortfall goes to the largest
/// fractional remainders and any excess is taken from the largest counts.
/// Ties resolve to the lowest index, so the result is deterministic.
pub fn build_coding_table(probabilities: &[f64], precision: u32) -> Result<CodingTable> {
    check_precision(precision)?;
    let total = 1u64 << precision;
    if probabilities.is_empty() || probabilities.len() as u64 > total {
        return Err(Error::InvalidArgument(format!(
            "{} levels do not fit precision {precision}",
            probabilities.len()
        )));
    }
    if probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidArgument("probabilities must be finite and >= 0".into()));
    }
    let mass: f64 = probabilities.iter().sum();
    if mass <= 0.0 {
        return Err(Error::InvalidArgument("all-zero probability vector".into()));
    }
    let scaled: Vec<f64> = probabilities.iter().map(|p| p / mass * total as f64).collect();
    let mut counts: Vec<u64> = scaled.iter().map(|s| (s.floor() as u64).max(1)).collect();
    let mut sum: u64 = counts.iter().sum();
    if sum < total {
        let mut order: Vec<usize> = (0..counts.len()).collect();
        let rem = |i: usize| scaled[i] - counts[i] as f64;
        order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
        for &i in order.iter().cycle() {
            if sum == total {
                break;
            }
            counts[i] += 1;
            sum += 1;
        }
    }
    while sum > total {
        let (i, _) = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 1)
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("total >= number of levels");
        counts[i] -= 1;
        sum -= 1;
    }
    CodingTable::from_counts(counts.into_iter().map(|c| c as u32).collect(), precision)
}

/// Geometric ladder of Gaussian scales shared by encoder and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleTable {
    scales: Vec<f64>,
}

impl ScaleTable {
    pub const DEFAULT_MIN: f64 = 0.11;
    pub const DEFAULT_MAX: f64 = 64.0;
    pub const DEFAULT_COUNT: usize = 64;

    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::InvalidArgument("empty scale table".into()));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) || scales.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidArgument("scales must be positive and strictly increasing".into()));
        }
        Ok(Self { scales })
    }

    pub fn geometric(min: f64, max: f64, count: usize) -> Result<Self> {
        if count < 2 || !(min > 0.0 && min < max) {
            return Err(Error::InvalidArgument(format!("scale ladder {min}..{max} x {count}")));
        }
        let ratio = (max / min).ln() / (count - 1) as f64;
        let mut scales: Vec<f64> = (0..count).map(|i| min * (ratio * i as f64).exp()).collect();
        scales[count - 1] = max;
        Self::new(scales)
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Index of the entry nearest to `sigma` in log scale, clamped to the
    /// ends of the ladder.
    pub fn snap(&self, sigma: f64) -> usize {
        let i = self.scales.partition_point(|&s| s < sigma);
        if i == 0 {
            return 0;
        }
        if i == self.scales.len() {
            return i - 1;
        }
        let (lo, hi) = (self.scales[i - 1], self.scales[i]);
        if sigma * sigma < lo * hi {
            i - 1
        } else {
            i
        }
    }
}

impl Default for ScaleTable {
    fn default() -> Self {
        Self::geometric(Self::DEFAULT_MIN, Self::DEFAULT_MAX, Self::DEFAULT_COUNT)
            .expect("valid default ladder")
    }
}

/// Coding table of one element with mean `mu` and snapped scale.
pub fn conditional_table(
    mu: f64,
    sigma: f64,
    grid: &QuantizerGrid,
    scales: &ScaleTable,
    precision: u32,
) -> Result<CodingTable> {
    let s = scales.scales()[scales.snap(sigma)];
    build_coding_table(&level_probabilities(mu, s, grid), precision)
}

/// One table per element of `mu` / `sigma`.
pub fn conditional_tables(
    mu: &Tensor,
    sigma: &Tensor,
    grid: &QuantizerGrid,
    scales: &ScaleTable,
    precision: u32,
) -> Result<Vec<CodingTable>> {
    if mu.shape() != sigma.shape() {
        return Err(Error::Shape(format!("mu {:?} vs sigma {:?}", mu.shape(), sigma.shape())));
    }
    mu.data()
        .iter()
        .zip(sigma.data())
        .map(|(&m, &s)| conditional_table(m, s, grid, scales, precision))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::StanhLayer;

    #[test]
    fn uniform_four() {
        let t = build_coding_table(&[0.25; 4], 8).unwrap();
        assert_eq!(t.counts(), &[64, 64, 64, 64]);
        assert_eq!(t.cumulative(), &[0, 64, 128, 192, 256]);
    }

    #[test]
    fn zero_entry_is_floored() {
        let t = build_coding_table(&[0.5, 0.5, 0.0], 8).unwrap();
        assert_eq!(t.counts()[2], 1);
        assert_eq!(t.counts().iter().sum::<u32>(), 256);
        assert_eq!(t.counts(), &[127, 128, 1]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_coding_table(&[0.0, 0.0], 8).is_err());
        assert!(build_coding_table(&[1.0, f64::NAN], 8).is_err());
        assert!(build_coding_table(&[1.0], 7).is_err());
        assert!(build_coding_table(&vec![1.0; 300], 8).is_err());
        assert!(ScaleTable::new(vec![]).is_err());
    }

    #[test]
    fn lookup_inverts_cumulative() {
        let t = build_coding_table(&[0.1, 0.6, 0.05, 0.25], 12).unwrap();
        for s in 0..4 {
            let (lo, hi) = (t.cumulative()[s], t.cumulative()[s + 1]);
            assert_eq!(t.lookup(lo), s);
            assert_eq!(t.lookup(hi - 1), s);
        }
    }

    #[test]
    fn table_cross_entropy_is_tight() {
        let grid = StanhLayer::init_uniform(40, -10.0, 10.0).unwrap().grid();
        let p = level_probabilities(0.3, 1.7, &grid);
        let t = build_coding_table(&p, 16).unwrap();
        let entropy: f64 = p.iter().filter(|&&q| q > 0.0).map(|q| -q * q.log2()).sum();
        let cross: f64 = p.iter().enumerate().map(|(k, q)| q * t.cost(k)).sum();
        assert!(cross - entropy < 0.01, "{cross} vs {entropy}");
        assert!(cross >= entropy - 1e-12);
    }

    #[test]
    fn scale_snapping() {
        let s = ScaleTable::default();
        assert_eq!(s.scales().len(), 64);
        assert_eq!(s.scales()[0], 0.11);
        assert_eq!(s.scales()[63], 64.0);
        assert_eq!(s.snap(0.01), 0);
        assert_eq!(s.snap(1e9), 63);
        let mid = (s.scales()[10] * s.scales()[11]).sqrt();
        assert_eq!(s.snap(mid * 0.999), 10);
        assert_eq!(s.snap(mid * 1.001), 11);
    }

    #[test]
    fn identical_parameters_identical_tables() {
        let grid = StanhLayer::init_uniform(20, -5.0, 5.0).unwrap().grid();
        let s = ScaleTable::default();
        let mu = Tensor::from_vec(vec![0.4, 0.4, -1.0]);
        let sigma = Tensor::from_vec(vec![0.9, 0.91, 0.9]);
        let tables = conditional_tables(&mu, &sigma, &grid, &s, 16).unwrap();
        assert_eq!(tables[0], tables[1]);
        assert_ne!(tables[0], tables[2]);
    }
}
