use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::entropy::{factorized_rate_bits, gaussian_rate_bits, FactorizedModel, GaussianConditional, ScaleTable};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::quantizer::{
    attach_frozen, attach_trainable, hard_quantize, soft_quantize, StanhLayer, StanhParams, StanhVars,
};

/// Kernel size of every transform layer.
pub const KERNEL: usize = 5;
/// Spatial reduction from the image to the hyper latent (six stride-2 stages).
pub const DOWNSAMPLING: usize = 64;
/// Factor between configured λ values and the multiplier of the `[0, 1]`-scale
/// MSE inside [`rd_loss`].
pub const DISTORTION_SCALE: f64 = 255.0 * 255.0;
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Main latent channels.
    pub m: usize,
    /// Hyper latent channels.
    pub n: usize,
    pub levels_main: usize,
    pub levels_hyper: usize,
    pub init_lo: f64,
    pub init_hi: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            m: 32,
            n: 16,
            levels_main: 60,
            levels_hyper: 60,
            init_lo: -30.0,
            init_hi: 30.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.m > 4096 || self.n > 4096 {
            return Err(Error::InvalidArgument(format!("channels M={} N={}", self.m, self.n)));
        }
        for l in [self.levels_main, self.levels_hyper] {
            if !(2..=u16::MAX as usize).contains(&l) {
                return Err(Error::InvalidArgument(format!("{l} quantization levels")));
            }
        }
        let (lo, hi) = (self.init_lo, self.init_hi);
        if !(lo < hi) || (lo + hi).abs() > 1e-12 * (hi - lo) {
            return Err(Error::InvalidArgument(format!(
                "init range [{lo}, {hi}] must be non-empty and symmetric about zero"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

/// One transform stage: kernel `KERNEL`, stride 2, padding 2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    fn new(name: String, kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        Self {
            name,
            kind,
            in_channels,
            out_channels,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv => vec![self.out_channels, self.in_channels, KERNEL, KERNEL],
            LayerKind::ConvTranspose => vec![self.in_channels, self.out_channels, KERNEL, KERNEL],
        }
    }
}

/// Stages of `f_a`, `h_a`, `h_s` and `f_s`, in that order.
pub fn layer_specs(cfg: &ModelConfig) -> Vec<LayerSpec> {
    use LayerKind::*;
    let (m, n) = (cfg.m, cfg.n);
    let mut specs = Vec::new();
    for (i, (ci, co)) in [(3, m), (m, m), (m, m), (m, m)].into_iter().enumerate() {
        specs.push(LayerSpec::new(format!("f_a.{i}"), Conv, ci, co));
    }
    for (i, (ci, co)) in [(m, n), (n, n)].into_iter().enumerate() {
        specs.push(LayerSpec::new(format!("h_a.{i}"), Conv, ci, co));
    }
    for (i, (ci, co)) in [(n, n), (n, 2 * m)].into_iter().enumerate() {
        specs.push(LayerSpec::new(format!("h_s.{i}"), ConvTranspose, ci, co));
    }
    for (i, (ci, co)) in [(m, m), (m, m), (m, m), (m, 3)].into_iter().enumerate() {
        specs.push(LayerSpec::new(format!("f_s.{i}"), ConvTranspose, ci, co));
    }
    specs
}

/// Number of scalar parameters of the transforms.
pub fn transform_parameter_count(cfg: &ModelConfig) -> usize {
    layer_specs(cfg)
        .iter()
        .map(|s| s.in_channels * s.out_channels * KERNEL * KERNEL + s.out_channels)
        .sum()
}

/// Training record stored next to the weights.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainingMeta {
    pub seed: u64,
    pub steps: u64,
    pub velocity: f64,
    pub beta_max_main: f64,
    pub beta_max_hyper: f64,
}

/// Quantizers for the main and hyper latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPair {
    pub main: StanhLayer,
    pub hyper: StanhLayer,
}

/// A complete codec trained for one λ.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorModel {
    pub config: ModelConfig,
    pub lambda: f64,
    /// Weight and bias of every stage of [`layer_specs`], interleaved.
    pub transforms: Vec<Tensor>,
    pub prior: FactorizedModel,
    pub layers: LayerPair,
    pub meta: TrainingMeta,
}

impl AnchorModel {
    /// Fresh model: uniform fan-in scaled weights, zero biases, uniform
    /// quantizers over the configured range.
    pub fn init(config: ModelConfig, lambda: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut transforms = Vec::new();
        for spec in layer_specs(&config) {
            let fan_in = match spec.kind {
                LayerKind::Conv => spec.in_channels * KERNEL * KERNEL,
                // each output of a stride-2 transposed conv sees about a quarter of the taps
                LayerKind::ConvTranspose => spec.in_channels * KERNEL * KERNEL / 4,
            };
            let bound = (3.0 / fan_in as f64).sqrt();
            let shape = spec.weight_shape();
            let len = shape.iter().product();
            let w = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
            transforms.push(Tensor::new(shape, w)?);
            transforms.push(Tensor::zeros(&[spec.out_channels]));
        }
        Ok(Self {
            config,
            lambda,
            transforms,
            prior: FactorizedModel::new(config.n)?,
            layers: LayerPair {
                main: StanhLayer::init_uniform(config.levels_main, config.init_lo, config.init_hi)?,
                hyper: StanhLayer::init_uniform(config.levels_hyper, config.init_lo, config.init_hi)?,
            },
            meta: TrainingMeta {
                seed,
                ..TrainingMeta::default()
            },
        })
    }

    /// Serialized transform and prior weights, the part a derivation never
    /// touches.
    pub fn frozen_weight_bytes(&self) -> Vec<u8> {
        self.transforms
            .iter()
            .chain(std::iter::once(self.prior.params()))
            .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub fn check_layers(&self, layers: &LayerPair) -> Result<()> {
        let want = (self.config.levels_main, self.config.levels_hyper);
        let got = (layers.main.num_levels(), layers.hyper.num_levels());
        if want != got {
            return Err(Error::InvalidArgument(format!(
                "quantizers with {got:?} levels, anchor expects {want:?}"
            )));
        }
        Ok(())
    }

    /// Hard inference path on a padded `(B, 3, H, W)` batch.
    pub fn hard_forward(&self, x: &Tensor, layers: &LayerPair) -> Result<HardForward> {
        self.check_layers(layers)?;
        check_aligned(x)?;
        let mut g = Graph::new();
        let w = self.attach_constants(&mut g);
        let xv = g.constant(x.clone());
        let y = analysis(&mut g, &w, xv)?;
        let z = hyper_analysis(&mut g, &w, y)?;
        let (z_hat, z_idx) = hard_quantize(g.value(z), &layers.hyper);
        let (y_hat, y_idx) = hard_quantize(g.value(y), &layers.main);
        let (mu, sigma) = self.hyper_synthesis(&z_hat)?;
        let x_hat = self.synthesize(&y_hat)?;
        Ok(HardForward {
            y: g.value(y).clone(),
            z: g.value(z).clone(),
            y_hat,
            y_idx,
            z_hat,
            z_idx,
            mu,
            sigma,
            x_hat,
        })
    }

    /// Unquantized `(y, z)` of a padded batch.
    pub fn latents(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        check_aligned(x)?;
        let mut g = Graph::new();
        let w = self.attach_constants(&mut g);
        let xv = g.constant(x.clone());
        let y = analysis(&mut g, &w, xv)?;
        let z = hyper_analysis(&mut g, &w, y)?;
        Ok((g.value(y).clone(), g.value(z).clone()))
    }

    /// `(mu, sigma)` from a dequantized hyper latent.
    pub fn hyper_synthesis(&self, z_hat: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let w = self.attach_constants(&mut g);
        let z = g.constant(z_hat.clone());
        let (mu, sigma) = gaussian_parameters(&mut g, &w, z, self.config.m)?;
        Ok((g.value(mu).clone(), g.value(sigma).clone()))
    }

    /// `f_s` applied to a dequantized main latent.
    pub fn synthesize(&self, y_hat: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let w = self.attach_constants(&mut g);
        let y = g.constant(y_hat.clone());
        let x = synthesis(&mut g, &w, y)?;
        Ok(g.value(x).clone())
    }

    /// Estimated bits `(hyper, main)` of the hard latents, from the same
    /// densities the training loss uses.
    pub fn estimate_bits(&self, hard: &HardForward, layers: &LayerPair) -> Result<(f64, f64)> {
        let z_bits = self.prior.bits(&hard.z_hat, &hard.z_idx, &layers.hyper.grid())?;
        let cond = GaussianConditional::new(hard.mu.clone(), hard.sigma.clone(), ScaleTable::DEFAULT_MIN)?;
        let y_bits = cond.bits(&hard.y_hat, &hard.y_idx, &layers.main.grid());
        Ok((z_bits, y_bits))
    }

    fn attach_constants(&self, g: &mut Graph) -> TransformVars {
        TransformVars(self.transforms.iter().map(|t| g.constant(t.clone())).collect())
    }

    /// Places the transforms and prior on `g`, trainable or not.
    pub fn attach(&self, g: &mut Graph, trainable: bool) -> NetVars {
        let w = self.transforms.iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        NetVars {
            transforms: TransformVars(w),
            psi: g.leaf(self.prior.params().clone(), trainable),
            m: self.config.m,
        }
    }
}

/// Graph handles of the transform weights, in [`AnchorModel::transforms`]
/// order.
#[derive(Clone, Debug)]
pub struct TransformVars(pub Vec<Var>);

impl TransformVars {
    fn stage(&self, index: usize) -> (Var, Var) {
        (self.0[2 * index], self.0[2 * index + 1])
    }
}

const F_A: usize = 0;
const H_A: usize = 4;
const H_S: usize = 6;
const F_S: usize = 8;

fn conv_chain(g: &mut Graph, w: &TransformVars, first: usize, count: usize, mut x: Var, transpose: bool) -> Result<Var> {
    for i in 0..count {
        let (k, b) = w.stage(first + i);
        x = if transpose {
            g.conv_transpose2d(x, k, Some(b), 2, 2, 1)?
        } else {
            g.conv2d(x, k, Some(b), 2, 2)?
        };
        if i + 1 < count {
            x = g.leaky_relu(x, LEAKY_SLOPE);
        }
    }
    Ok(x)
}

pub fn analysis(g: &mut Graph, w: &TransformVars, x: Var) -> Result<Var> {
    conv_chain(g, w, F_A, 4, x, false)
}

pub fn hyper_analysis(g: &mut Graph, w: &TransformVars, y: Var) -> Result<Var> {
    conv_chain(g, w, H_A, 2, y, false)
}

pub fn synthesis(g: &mut Graph, w: &TransformVars, y: Var) -> Result<Var> {
    conv_chain(g, w, F_S, 4, y, true)
}

/// `h_s` split into the mean and a positive scale in
/// `[ScaleTable::DEFAULT_MIN, ScaleTable::DEFAULT_MAX]`.
pub fn gaussian_parameters(g: &mut Graph, w: &TransformVars, z: Var, m: usize) -> Result<(Var, Var)> {
    let out = conv_chain(g, w, H_S, 2, z, true)?;
    let mu = g.channel_slice(out, 0, m)?;
    let pre = g.channel_slice(out, m, 2 * m)?;
    let log_sigma = g.clamp(pre, ScaleTable::DEFAULT_MIN.ln(), ScaleTable::DEFAULT_MAX.ln());
    Ok((mu, g.exp(log_sigma)))
}

pub fn check_aligned(x: &Tensor) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    if c != 3 || h % DOWNSAMPLING != 0 || w % DOWNSAMPLING != 0 {
        return Err(Error::Shape(format!(
            "input {:?} must be (B, 3, H, W) with H, W multiples of {DOWNSAMPLING}",
            x.shape()
        )));
    }
    Ok(())
}

/// Tensors of the inference path.
#[derive(Clone, Debug)]
pub struct HardForward {
    pub y: Tensor,
    pub z: Tensor,
    pub y_hat: Tensor,
    pub y_idx: Vec<usize>,
    pub z_hat: Tensor,
    pub z_idx: Vec<usize>,
    pub mu: Tensor,
    pub sigma: Tensor,
    pub x_hat: Tensor,
}

/// Graph handles of every non-quantizer weight.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub transforms: TransformVars,
    pub psi: Var,
    pub m: usize,
}

/// Quantizers on a graph: trainable raw parameters or fixed layers.
pub enum QuantizerInput<'a> {
    Trainable(&'a StanhParams, &'a StanhParams),
    Frozen(&'a LayerPair),
}

/// Graph nodes of one relaxed forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrain {
    pub x_hat: Var,
    pub y: Var,
    pub y_soft: Var,
    pub y_hard: Tensor,
    pub z: Var,
    pub z_soft: Var,
    pub z_hard: Tensor,
    pub mu: Var,
    pub sigma: Var,
    pub bits_z: Var,
    pub bits_y: Var,
    pub main: StanhVars,
    pub hyper: StanhVars,
}

/// Relaxed forward pass of `x` with the given inverse temperatures. Rates are
/// integrated over the interval of each element's hard level.
pub fn forward_train(
    g: &mut Graph,
    net: &NetVars,
    quantizers: QuantizerInput<'_>,
    x: Var,
    beta_main: f64,
    beta_hyper: f64,
) -> Result<ForwardTrain> {
    check_aligned(g.value(x))?;
    let (w, psi) = (&net.transforms, net.psi);
    let (main, hyper) = match quantizers {
        QuantizerInput::Trainable(pm, ph) => (attach_trainable(g, pm), attach_trainable(g, ph)),
        QuantizerInput::Frozen(pair) => (attach_frozen(g, &pair.main), attach_frozen(g, &pair.hyper)),
    };
    let layer_of = |g: &Graph, v: &StanhVars| {
        StanhLayer::new(g.value(v.weights).data().to_vec(), g.value(v.boundaries).data().to_vec())
    };
    let (main_layer, hyper_layer) = (layer_of(g, &main)?, layer_of(g, &hyper)?);

    let y = analysis(g, w, x)?;
    let z = hyper_analysis(g, w, y)?;
    let (z_hard, z_idx) = hard_quantize(g.value(z), &hyper_layer);
    let z_soft = soft_quantize(g, z, &hyper, beta_hyper);
    let (mu, sigma) = gaussian_parameters(g, w, z_soft, net.m)?;
    let (y_hard, y_idx) = hard_quantize(g.value(y), &main_layer);
    let y_soft = soft_quantize(g, y, &main, beta_main);
    let x_hat = synthesis(g, w, y_soft)?;
    let bits_z = factorized_rate_bits(g, z_soft, psi, &hyper, z_idx)?;
    let bits_y = gaussian_rate_bits(g, y_soft, mu, sigma, &main, y_idx)?;
    Ok(ForwardTrain {
        x_hat,
        y,
        y_soft,
        y_hard,
        z,
        z_soft,
        z_hard,
        mu,
        sigma,
        bits_z,
        bits_y,
        main,
        hyper,
    })
}

/// `lambda * MSE(x, x_hat) + (rate_z + rate_y) / pixels`, with rates in bits
/// and pixels counted over the batch.
pub fn rd_loss(g: &mut Graph, x: Var, x_hat: Var, rate_z: Var, rate_y: Var, lambda: f64) -> Result<Var> {
    let (n, _, h, w) = g.value(x).dims4()?;
    let diff = g.sub(x, x_hat)?;
    let sq = g.square(diff);
    let mse = g.mean(sq);
    let distortion = g.scale(mse, lambda);
    let bits = g.add(rate_z, rate_y)?;
    let bpp = g.scale(bits, 1.0 / (n * h * w) as f64);
    g.add(distortion, bpp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            m: 4,
            n: 3,
            levels_main: 9,
            levels_hyper: 7,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn spec_order_and_count() {
        let cfg = ModelConfig::default();
        let specs = layer_specs(&cfg);
        assert_eq!(specs.len(), 12);
        assert_eq!(specs[0].weight_shape(), vec![32, 3, 5, 5]);
        assert_eq!(specs[7].weight_shape(), vec![16, 64, 5, 5]);
        assert_eq!(specs[11].weight_shape(), vec![32, 3, 5, 5]);
        let model = AnchorModel::init(cfg, 0.01, 1).unwrap();
        let stored: usize = model.transforms.iter().map(Tensor::len).sum();
        assert_eq!(stored, transform_parameter_count(&cfg));
    }

    #[test]
    fn zero_image_is_finite_and_shape_preserving() {
        let model = AnchorModel::init(small(), 0.01, 3).unwrap();
        let mut g = Graph::new();
        let net = model.attach(&mut g, true);
        let x = g.constant(Tensor::zeros(&[1, 3, 64, 64]));
        let f = forward_train(&mut g, &net, QuantizerInput::Frozen(&model.layers), x, 1.0, 1.0).unwrap();
        assert_eq!(g.value(f.x_hat).shape(), &[1, 3, 64, 64]);
        let loss = rd_loss(&mut g, x, f.x_hat, f.bits_z, f.bits_y, 650.0).unwrap();
        assert!(g.value(loss).item().is_finite());
        g.backward(loss).unwrap();
    }

    #[test]
    fn unaligned_input_rejected() {
        let model = AnchorModel::init(small(), 0.01, 3).unwrap();
        assert!(model.hard_forward(&Tensor::zeros(&[1, 3, 64, 48]), &model.layers).is_err());
    }

    #[test]
    fn rd_loss_arithmetic() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let rz = g.constant(Tensor::scalar(2.0));
        let ry = g.constant(Tensor::scalar(6.0));
        let l = rd_loss(&mut g, x, x, rz, ry, 0.37).unwrap();
        assert_eq!(g.value(l).item(), 2.0);

        let x_hat = g.constant(Tensor::full(&[1, 1, 2, 2], 0.1));
        let bits = g.constant(Tensor::scalar(1.0));
        let l = rd_loss(&mut g, x, x_hat, bits, bits, 100.0).unwrap();
        assert!((g.value(l).item() - 1.5).abs() < 1e-12);
    }
}
