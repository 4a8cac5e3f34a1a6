//! Rate-distortion evaluation: PSNR, Bjøntegaard deltas, sweeps over
//! anchors, derivations and interpolations, quantization-interval reports
//! and a uniform-step baseline.

use std::path::Path;

use crate::codec::{
    crop_clamp, decode_with_layers, encode_image, image_latents, interpolate_pair, quantize_rho, rho_value, AnchorModel, Derivation,
    LayerPair, LayerSource,
};
use crate::entropy::{gaussian_interval_rate, P_MIN};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::quantizer::{uniform_step_quantize, StanhLayer};

/// PSNR reported for identical images.
pub const PSNR_LOSSLESS: f64 = 100.0;

/// `10 log10(1 / MSE)` for images in `[0, 1]`.
pub fn psnr(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    let mse = x.squared_distance(x_hat)? / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_LOSSLESS);
    }
    Ok(-10.0 * mse.log10())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RdPoint {
    pub label: String,
    pub bpp: f64,
    pub psnr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BdMetrics {
    /// Average rate difference of `b` against `a`, in percent.
    pub rate_percent: f64,
    /// Average PSNR difference of `b` against `a`, in dB.
    pub psnr_db: f64,
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch–Carlson slopes).
#[derive(Clone, Debug)]
pub struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl Pchip {
    /// `xs` must be strictly increasing with at least two knots.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        let n = xs.len();
        if n < 2 || ys.len() != n {
            return Err(Error::InvalidArgument("interpolation needs >= 2 matching knots".into()));
        }
        if xs.windows(2).any(|p| !(p[1] > p[0])) || xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("knots must be finite and strictly increasing".into()));
        }
        let h: Vec<f64> = xs.windows(2).map(|p| p[1] - p[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (ys[k + 1] - ys[k]) / h[k]).collect();
        let mut slopes = vec![0.0; n];
        if n == 2 {
            slopes.fill(delta[0]);
        } else {
            for k in 1..n - 1 {
                if delta[k - 1] * delta[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    slopes[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
                }
            }
            slopes[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            slopes[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(Self { xs, ys, slopes })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let k = self.xs.partition_point(|&v| v <= x).clamp(1, n - 1) - 1;
        let h = self.xs[k + 1] - self.xs[k];
        let t = (x - self.xs[k]) / h;
        let (t2, t3) = (t * t, t * t * t);
        (2.0 * t3 - 3.0 * t2 + 1.0) * self.ys[k]
            + (t3 - 2.0 * t2 + t) * h * self.slopes[k]
            + (-2.0 * t3 + 3.0 * t2) * self.ys[k + 1]
            + (t3 - t2) * h * self.slopes[k + 1]
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

const BD_SAMPLES: usize = 1000;

/// Mean of `f_b - f_a` over the overlap of the two knot ranges, by a
/// 1000-point trapezoid rule.
fn mean_gap(a: &Pchip, b: &Pchip) -> Result<f64> {
    let lo = a.xs[0].max(b.xs[0]);
    let hi = a.xs[a.xs.len() - 1].min(b.xs[b.xs.len() - 1]);
    if !(hi > lo) {
        return Err(Error::InvalidArgument("curves do not overlap".into()));
    }
    let step = (hi - lo) / (BD_SAMPLES - 1) as f64;
    let mut sum = 0.0;
    for i in 0..BD_SAMPLES {
        let x = if i == BD_SAMPLES - 1 { hi } else { lo + step * i as f64 };
        let weight = if i == 0 || i == BD_SAMPLES - 1 { 0.5 } else { 1.0 };
        sum += weight * (b.eval(x) - a.eval(x));
    }
    Ok(sum * step / (hi - lo))
}

/// `(log10 rate, psnr)` knots sorted by rate; both must increase strictly.
fn curve(points: &[RdPoint]) -> Result<(Vec<f64>, Vec<f64>)> {
    if points.len() < 4 {
        return Err(Error::InvalidArgument(format!("{} RD points, need >= 4", points.len())));
    }
    let mut sorted: Vec<&RdPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    if sorted.iter().any(|p| !(p.bpp > 0.0) || !p.psnr.is_finite()) {
        return Err(Error::InvalidArgument("RD points need positive rate and finite PSNR".into()));
    }
    if sorted.windows(2).any(|p| !(p[1].bpp > p[0].bpp && p[1].psnr > p[0].psnr)) {
        return Err(Error::InvalidArgument("RD curve must be strictly monotone".into()));
    }
    Ok((sorted.iter().map(|p| p.bpp.log10()).collect(), sorted.iter().map(|p| p.psnr).collect()))
}

/// Bjøntegaard deltas of `b` relative to `a`. A negative rate delta means
/// `b` needs fewer bits for the same quality.
pub fn bd_metrics(a: &[RdPoint], b: &[RdPoint]) -> Result<BdMetrics> {
    let (ra, qa) = curve(a)?;
    let (rb, qb) = curve(b)?;
    let rate = mean_gap(&Pchip::new(qa.clone(), ra.clone())?, &Pchip::new(qb.clone(), rb.clone())?)?;
    let quality = mean_gap(&Pchip::new(ra, qa)?, &Pchip::new(rb, qb)?)?;
    Ok(BdMetrics {
        rate_percent: (10f64.powf(rate) - 1.0) * 100.0,
        psnr_db: quality,
    })
}

/// A quantizer configuration of one anchor to evaluate.
#[derive(Clone, Debug)]
pub struct OperatingPoint<'a> {
    pub label: String,
    pub anchor: &'a AnchorModel,
    pub anchor_id: u16,
    pub source: LayerSource,
    pub layers: LayerPair,
}

/// Encodes and decodes every image; returns mean measured bpp and mean PSNR.
pub fn evaluate_point(op: &OperatingPoint<'_>, images: &[Tensor]) -> Result<RdPoint> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no evaluation images".into()));
    }
    let (mut bpp, mut quality) = (0.0, 0.0);
    for x in images {
        let stream = encode_image(x, op.anchor, op.anchor_id, op.source, &op.layers)?;
        let x_hat = decode_with_layers(&stream, op.anchor, &op.layers)?;
        bpp += stream.bpp();
        quality += psnr(x, &x_hat)?;
    }
    let n = images.len() as f64;
    Ok(RdPoint {
        label: op.label.clone(),
        bpp: bpp / n,
        psnr: quality / n,
    })
}

/// An anchor with the derivations that share it.
#[derive(Clone, Debug)]
pub struct AnchorSet<'a> {
    pub id: u16,
    pub model: &'a AnchorModel,
    pub derivations: Vec<Derivation>,
}

/// Evaluates every anchor, every derivation and, for each `rho` of the
/// grid, the interpolation between consecutive members of the chain
/// anchor → derivations by decreasing λ. Sorted by bpp, then label.
pub fn rd_sweep(sets: &[AnchorSet<'_>], rho_grid: &[f64], images: &[Tensor]) -> Result<Vec<RdPoint>> {
    let mut points = Vec::new();
    for set in sets {
        let mut chain: Vec<(u16, f64, &LayerPair)> = vec![(0, set.model.lambda, &set.model.layers)];
        let mut ds: Vec<&Derivation> = set.derivations.iter().collect();
        ds.sort_by(|a, b| b.lambda.total_cmp(&a.lambda).then(a.id.cmp(&b.id)));
        for d in &ds {
            if d.anchor_id != set.id {
                return Err(Error::InvalidArgument(format!("D{} belongs to A{}, not A{}", d.id, d.anchor_id, set.id)));
            }
            chain.push((d.id, d.lambda, &d.layers));
        }
        for &(id, _, layers) in &chain {
            let (label, source) = if id == 0 {
                (format!("A{}", set.id), LayerSource::Anchor)
            } else {
                (format!("A{}/D{id}", set.id), LayerSource::Derivation(id))
            };
            let op = OperatingPoint {
                label,
                anchor: set.model,
                anchor_id: set.id,
                source,
                layers: layers.clone(),
            };
            points.push(evaluate_point(&op, images)?);
        }
        for pair in chain.windows(2) {
            let ((from, _, la), (to, _, lb)) = (pair[0], pair[1]);
            for &rho in rho_grid {
                let q = quantize_rho(rho)?;
                let op = OperatingPoint {
                    label: format!("A{}/D{from}~D{to}@{:.4}", set.id, rho_value(q)),
                    anchor: set.model,
                    anchor_id: set.id,
                    source: LayerSource::Interpolation { from, to, rho: q },
                    layers: interpolate_pair(la, lb, q)?,
                };
                points.push(evaluate_point(&op, images)?);
            }
        }
    }
    points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp).then_with(|| a.label.cmp(&b.label)));
    Ok(points)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntervalRow {
    pub label: String,
    /// Level index in `0..L`.
    pub index: usize,
    /// Signed distance in levels from the level whose interval holds 0.
    pub offset: i64,
    pub value: f64,
    /// `r- + r+`; the outermost levels report only their finite side.
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntervalReport {
    pub rows: Vec<IntervalRow>,
}

impl IntervalReport {
    /// Width of the interval containing 0 for `label`.
    pub fn central_width(&self, label: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.label == label && r.offset == 0).map(|r| r.width)
    }
}

/// Finite width of level `k`.
pub fn level_width(layer: &StanhLayer, k: usize) -> f64 {
    let grid = layer.grid();
    let finite = |r: f64| if r.is_finite() { r } else { 0.0 };
    finite(grid.left[k]) + finite(grid.right[k])
}

/// Widths of the `center_count` levels around the level containing 0, per
/// labeled layer.
pub fn interval_report(layers: &[(String, StanhLayer)], center_count: usize) -> Result<IntervalReport> {
    let Some((_, first)) = layers.first() else {
        return Err(Error::InvalidArgument("no layers to report".into()));
    };
    let l = first.num_levels();
    if layers.iter().any(|(_, x)| x.num_levels() != l) {
        return Err(Error::InvalidArgument("layers have different level counts".into()));
    }
    if center_count == 0 || center_count > l {
        return Err(Error::InvalidArgument(format!("center_count {center_count} outside 1..={l}")));
    }
    let mut rows = Vec::new();
    for (label, layer) in layers {
        let center = layer.index_of(0.0);
        let start = center.saturating_sub((center_count - 1) / 2).min(l - center_count);
        for k in start..start + center_count {
            rows.push(IntervalRow {
                label: label.clone(),
                index: k,
                offset: k as i64 - center as i64,
                value: layer.levels()[k],
                width: level_width(layer, k),
            });
        }
    }
    Ok(IntervalReport { rows })
}

/// Replaces both quantizers by `delta * round(v / delta)` and reports the
/// estimated rate (interval `±delta/2`) and PSNR, averaged over the images.
pub fn uniform_baseline_sweep(anchor: &AnchorModel, deltas: &[f64], images: &[Tensor]) -> Result<Vec<RdPoint>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no evaluation images".into()));
    }
    let latents = images
        .iter()
        .map(|x| image_latents(x, anchor))
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let (mut bpp, mut quality) = (0.0, 0.0);
        for (x, (y, z)) in images.iter().zip(&latents) {
            let z_hat = uniform_step_quantize(z, delta)?;
            let y_hat = uniform_step_quantize(y, delta)?;
            let (mu, sigma) = anchor.hyper_synthesis(&z_hat)?;
            let (_, c, zh, zw) = z_hat.dims4()?;
            let mut bits = 0.0;
            for (j, &v) in z_hat.data().iter().enumerate() {
                let ch = (j / (zh * zw)) % c;
                let p = anchor.prior.cdf(ch, v + delta / 2.0) - anchor.prior.cdf(ch, v - delta / 2.0);
                bits -= p.max(P_MIN).log2();
            }
            for ((&v, &m), &s) in y_hat.data().iter().zip(mu.data()).zip(sigma.data()) {
                bits -= gaussian_interval_rate(v, m, s, delta / 2.0, delta / 2.0)?.log2();
            }
            let x_hat = anchor.synthesize(&y_hat)?;
            let (_, _, h, w) = x.dims4()?;
            bpp += bits / (h * w) as f64;
            quality += psnr(x, &crop_clamp(&x_hat, h, w)?)?;
        }
        let n = images.len() as f64;
        points.push(RdPoint {
            label: format!("uniform@{delta}"),
            bpp: bpp / n,
            psnr: quality / n,
        });
    }
    Ok(points)
}

pub fn write_rd_points(path: &Path, points: &[RdPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "bpp", "psnr"])?;
    for p in points {
        w.write_record([p.label.clone(), p.bpp.to_string(), p.psnr.to_string()])?;
    }
    finish(path, w)
}

pub fn read_rd_points(path: &Path) -> Result<Vec<RdPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::InvalidArgument(format!("short CSV row {rec:?}")));
        let num = |i: usize| -> Result<f64> {
            field(i)?
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad number in CSV row {rec:?}")))
        };
        out.push(RdPoint {
            label: field(0)?.to_string(),
            bpp: num(1)?,
            psnr: num(2)?,
        });
    }
    Ok(out)
}

pub fn write_bd(path: &Path, rows: &[(String, String, BdMetrics)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["curve_a", "curve_b", "bd_rate_percent", "bd_psnr_db"])?;
    for (a, b, m) in rows {
        w.write_record([a.clone(), b.clone(), m.rate_percent.to_string(), m.psnr_db.to_string()])?;
    }
    finish(path, w)
}

pub fn write_intervals(path: &Path, report: &IntervalReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["level", "value", "width", "label"])?;
    for r in &report.rows {
        w.write_record([r.offset.to_string(), r.value.to_string(), r.width.to_string(), r.label.clone()])?;
    }
    finish(path, w)
}

fn finish(path: &Path, w: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    crate::codec::write_atomic(path, &bytes)
}
