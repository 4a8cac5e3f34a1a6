use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{
    forward_train, rd_loss, AnchorModel, ForwardTrain, LayerPair, ModelConfig, QuantizerInput, TrainingMeta,
    DISTORTION_SCALE,
};
use crate::annealing::{quantization_gap, AnnealingState, DEFAULT_VELOCITY};
use crate::error::{Error, Result};
use crate::image::PatchSource;
use crate::numerics::{Graph, Tensor, Var};
use crate::quantizer::StanhParams;

/// Hyperparameters of one training or refinement run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// RD multiplier in 8-bit-MSE units; [`rd_loss`] receives
    /// `lambda * DISTORTION_SCALE`.
    pub lambda: f64,
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub patch: usize,
    pub learning_rate: f64,
    /// Learning rate of the raw quantizer parameters.
    pub quantizer_learning_rate: f64,
    pub steps_per_epoch: usize,
    /// Epochs without relative improvement before the learning rate halves.
    pub patience: usize,
    pub plateau_threshold: f64,
    pub velocity: f64,
}

impl TrainConfig {
    pub fn anchor() -> Self {
        Self {
            model: ModelConfig::default(),
            lambda: 0.01,
            seed: 0,
            steps: 2000,
            batch: 8,
            patch: 64,
            learning_rate: 1e-3,
            quantizer_learning_rate: 1e-3,
            steps_per_epoch: 10,
            patience: 50,
            plateau_threshold: 1e-4,
            velocity: DEFAULT_VELOCITY,
        }
    }

    pub fn derivation() -> Self {
        Self {
            steps: 300,
            patience: 10,
            quantizer_learning_rate: 1e-2,
            ..Self::anchor()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = [
            ("lambda", self.lambda),
            ("learning_rate", self.learning_rate),
            ("quantizer_learning_rate", self.quantizer_learning_rate),
            ("velocity", self.velocity),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be positive")));
            }
        }
        if self.steps == 0 || self.batch == 0 || self.steps_per_epoch == 0 || self.patience == 0 {
            return Err(Error::InvalidArgument("steps, batch, steps_per_epoch and patience must be >= 1".into()));
        }
        if self.patch == 0 || !self.patch.is_multiple_of(super::DOWNSAMPLING) {
            return Err(Error::InvalidArgument(format!(
                "patch {} must be a positive multiple of {}",
                self.patch,
                super::DOWNSAMPLING
            )));
        }
        if !(0.0..1.0).contains(&self.plateau_threshold) {
            return Err(Error::InvalidArgument("plateau_threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer over a list of flat parameter slices.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: sizes.iter().map(|&n| (vec![0.0; n], vec![0.0; n])).collect(),
        }
    }

    /// Starts a new step; call once before the per-slot updates.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64], lr: f64) {
        let (m, v) = &mut self.moments[slot];
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..param.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            param[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Tracks the best epoch loss and reports plateaus.
#[derive(Clone, Debug)]
pub struct Plateau {
    patience: usize,
    threshold: f64,
    best: f64,
    stale: usize,
    count: usize,
}

impl Plateau {
    pub fn new(patience: usize, threshold: f64) -> Self {
        Self {
            patience,
            threshold,
            best: f64::INFINITY,
            stale: 0,
            count: 0,
        }
    }

    /// Feeds one epoch loss; true when `patience` epochs passed without a
    /// relative improvement above the threshold.
    pub fn observe(&mut self, loss: f64) -> bool {
        if !self.best.is_finite() || loss < self.best - self.threshold * self.best.abs() {
            self.best = loss;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            self.count += 1;
            return true;
        }
        false
    }

    pub fn plateaus(&self) -> usize {
        self.count
    }
}

/// Progress of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub mse: f64,
    pub bpp: f64,
    pub beta_main: f64,
    pub beta_hyper: f64,
    pub learning_rate: f64,
}

/// Per-element quantization gap fed to the annealing schedule.
fn mean_gap(g: &Graph, f: &ForwardTrain) -> Result<(f64, f64)> {
    let per_elem = |y: &Tensor, soft: &Tensor, hard: &Tensor| -> Result<f64> {
        Ok(quantization_gap(y, soft, hard)? / y.len() as f64)
    };
    Ok((
        per_elem(g.value(f.y), g.value(f.y_soft), &f.y_hard)?,
        per_elem(g.value(f.z), g.value(f.z_soft), &f.z_hard)?,
    ))
}

struct Evaluated {
    loss: f64,
    mse: f64,
    bpp: f64,
}

fn evaluate(g: &mut Graph, x: Var, f: &ForwardTrain, lambda: f64, step: usize) -> Result<(Evaluated, Var)> {
    let loss = rd_loss(g, x, f.x_hat, f.bits_z, f.bits_y, lambda * DISTORTION_SCALE)?;
    let (n, _, h, w) = g.value(x).dims4()?;
    let mse = g.value(x).squared_distance(g.value(f.x_hat))? / g.value(x).len() as f64;
    let (bz, by) = (g.value(f.bits_z).item(), g.value(f.bits_y).item());
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("loss {value}, mse {mse}, hyper bits {bz}, main bits {by}"),
        });
    }
    let bpp = (bz + by) / (n * h * w) as f64;
    Ok((Evaluated { loss: value, mse, bpp }, loss))
}

fn grad_of(g: &Graph, v: Var, step: usize, what: &str) -> Result<Vec<f64>> {
    let grad = g.grad(v).map(<[f64]>::to_vec).unwrap_or_default();
    if grad.iter().any(|x| !x.is_finite()) {
        let norm = grad.iter().filter(|x| x.is_finite()).map(|x| x * x).sum::<f64>().sqrt();
        return Err(Error::Diverged {
            step,
            detail: format!("non-finite gradient of {what} (finite part norm {norm:.3e})"),
        });
    }
    Ok(grad)
}

pub fn train_anchor(data: &PatchSource, cfg: &TrainConfig) -> Result<AnchorModel> {
    train_anchor_logged(data, cfg, &mut |_| {})
}

/// [`train_anchor`] reporting every step to `observer`.
pub fn train_anchor_logged(
    data: &PatchSource,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepReport),
) -> Result<AnchorModel> {
    cfg.validate()?;
    let mut model = AnchorModel::init(cfg.model, cfg.lambda, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut ann_main = AnnealingState::new(cfg.velocity, cfg.seed.wrapping_add(1));
    let mut ann_hyper = AnnealingState::new(cfg.velocity, cfg.seed.wrapping_add(2));
    let mut main = StanhParams::from_layer(&model.layers.main);
    let mut hyper = StanhParams::from_layer(&model.layers.hyper);

    let mut sizes: Vec<usize> = model.transforms.iter().map(Tensor::len).collect();
    sizes.push(model.prior.params().len());
    let q = sizes.len();
    sizes.extend([main.raw_weights.len(), main.raw_boundaries.len(), hyper.raw_weights.len(), hyper.raw_boundaries.len()]);
    let mut adam = Adam::new(&sizes);
    let mut plateau = Plateau::new(cfg.patience, cfg.plateau_threshold);
    let mut lr_scale = 1.0;
    let (mut gap_main, mut gap_hyper) = (0.0, 0.0);
    let mut epoch_loss = 0.0;

    for step in 1..=cfg.steps {
        let beta_main = ann_main.step(gap_main)?;
        let beta_hyper = ann_hyper.step(gap_hyper)?;
        let batch = data.sample(&mut rng, cfg.batch, cfg.patch)?;
        let mut g = Graph::new();
        let net = model.attach(&mut g, true);
        let x = g.constant(batch);
        let f = forward_train(&mut g, &net, QuantizerInput::Trainable(&main, &hyper), x, beta_main, beta_hyper)?;
        let (ev, loss) = evaluate(&mut g, x, &f, cfg.lambda, step)?;
        g.backward(loss)?;
        (gap_main, gap_hyper) = mean_gap(&g, &f)?;

        adam.tick();
        let lr = cfg.learning_rate * lr_scale;
        let qlr = cfg.quantizer_learning_rate * lr_scale;
        for (i, &v) in net.transforms.0.iter().enumerate() {
            let grad = grad_of(&g, v, step, "transform weights")?;
            adam.update(i, model.transforms[i].data_mut(), &grad, lr);
        }
        let mut psi = model.prior.params().clone();
        adam.update(q - 1, psi.data_mut(), &grad_of(&g, net.psi, step, "factorized prior")?, lr);
        model.prior = crate::entropy::FactorizedModel::from_params(psi)?;
        let raw = [
            (f.main.raw_weights, &mut main.raw_weights),
            (f.main.raw_boundaries, &mut main.raw_boundaries),
            (f.hyper.raw_weights, &mut hyper.raw_weights),
            (f.hyper.raw_boundaries, &mut hyper.raw_boundaries),
        ];
        for (j, (var, param)) in raw.into_iter().enumerate() {
            let var = var.expect("trainable quantizer");
            adam.update(q + j, param, &grad_of(&g, var, step, "quantizer")?, qlr);
        }

        observer(&StepReport {
            step,
            loss: ev.loss,
            mse: ev.mse,
            bpp: ev.bpp,
            beta_main,
            beta_hyper,
            learning_rate: lr,
        });
        epoch_loss += ev.loss;
        if step % cfg.steps_per_epoch == 0 {
            if plateau.observe(epoch_loss / cfg.steps_per_epoch as f64) {
                lr_scale *= 0.5;
                if plateau.plateaus() == 1 {
                    ann_main.double_velocity();
                    ann_hyper.double_velocity();
                }
            }
            epoch_loss = 0.0;
        }
    }

    model.layers = LayerPair {
        main: main.to_layer()?,
        hyper: hyper.to_layer()?,
    };
    model.meta = TrainingMeta {
        seed: cfg.seed,
        steps: cfg.steps as u64,
        velocity: ann_main.velocity(),
        beta_max_main: ann_main.beta_max(),
        beta_max_hyper: ann_hyper.beta_max(),
    };
    Ok(model)
}

/// Quantizer-only overlay of an anchor, refined for another λ.
#[derive(Clone, Debug, PartialEq)]
pub struct Derivation {
    pub anchor_id: u16,
    pub id: u16,
    pub lambda: f64,
    pub layers: LayerPair,
    pub meta: TrainingMeta,
}

/// Starting point of a refinement: quantizers and their annealing ceilings.
#[derive(Clone, Debug)]
pub struct RefineStart {
    pub layers: LayerPair,
    pub beta_max_main: f64,
    pub beta_max_hyper: f64,
}

impl RefineStart {
    pub fn from_anchor(anchor: &AnchorModel) -> Self {
        Self {
            layers: anchor.layers.clone(),
            beta_max_main: anchor.meta.beta_max_main,
            beta_max_hyper: anchor.meta.beta_max_hyper,
        }
    }

    pub fn from_derivation(d: &Derivation) -> Self {
        Self {
            layers: d.layers.clone(),
            beta_max_main: d.meta.beta_max_main,
            beta_max_hyper: d.meta.beta_max_hyper,
        }
    }
}

pub fn refine_derivation(
    anchor: &AnchorModel,
    ids: (u16, u16),
    start: &RefineStart,
    data: &PatchSource,
    cfg: &TrainConfig,
) -> Result<Derivation> {
    refine_derivation_logged(anchor, ids, start, data, cfg, &mut |_| {})
}

/// Trains only the two quantizers of `start` against the loss at
/// `cfg.lambda`; every anchor weight stays fixed. `ids` is
/// `(anchor_id, derivation_id)`.
pub fn refine_derivation_logged(
    anchor: &AnchorModel,
    ids: (u16, u16),
    start: &RefineStart,
    data: &PatchSource,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepReport),
) -> Result<Derivation> {
    cfg.validate()?;
    anchor.check_layers(&start.layers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut ann_main = AnnealingState::resume(cfg.velocity, start.beta_max_main, cfg.seed.wrapping_add(1));
    let mut ann_hyper = AnnealingState::resume(cfg.velocity, start.beta_max_hyper, cfg.seed.wrapping_add(2));
    let mut main = StanhParams::from_layer(&start.layers.main);
    let mut hyper = StanhParams::from_layer(&start.layers.hyper);
    let mut adam = Adam::new(&[
        main.raw_weights.len(),
        main.raw_boundaries.len(),
        hyper.raw_weights.len(),
        hyper.raw_boundaries.len(),
    ]);
    let mut plateau = Plateau::new(cfg.patience, cfg.plateau_threshold);
    let mut lr_scale = 1.0;
    let (mut gap_main, mut gap_hyper) = (0.0, 0.0);
    let mut epoch_loss = 0.0;

    for step in 1..=cfg.steps {
        let beta_main = ann_main.step(gap_main)?;
        let beta_hyper = ann_hyper.step(gap_hyper)?;
        let batch = data.sample(&mut rng, cfg.batch, cfg.patch)?;
        let mut g = Graph::new();
        let net = anchor.attach(&mut g, false);
        let x = g.constant(batch);
        let f = forward_train(&mut g, &net, QuantizerInput::Trainable(&main, &hyper), x, beta_main, beta_hyper)?;
        let (ev, loss) = evaluate(&mut g, x, &f, cfg.lambda, step)?;
        g.backward(loss)?;
        (gap_main, gap_hyper) = mean_gap(&g, &f)?;

        adam.tick();
        let qlr = cfg.quantizer_learning_rate * lr_scale;
        let raw = [
            (f.main.raw_weights, &mut main.raw_weights),
            (f.main.raw_boundaries, &mut main.raw_boundaries),
            (f.hyper.raw_weights, &mut hyper.raw_weights),
            (f.hyper.raw_boundaries, &mut hyper.raw_boundaries),
        ];
        for (j, (var, param)) in raw.into_iter().enumerate() {
            let var = var.expect("trainable quantizer");
            adam.update(j, param, &grad_of(&g, var, step, "quantizer")?, qlr);
        }

        observer(&StepReport {
            step,
            loss: ev.loss,
            mse: ev.mse,
            bpp: ev.bpp,
            beta_main,
            beta_hyper,
            learning_rate: qlr,
        });
        epoch_loss += ev.loss;
        if step % cfg.steps_per_epoch == 0 {
            if plateau.observe(epoch_loss / cfg.steps_per_epoch as f64) {
                lr_scale *= 0.5;
                if plateau.plateaus() == 1 {
                    ann_main.double_velocity();
                    ann_hyper.double_velocity();
                }
            }
            epoch_loss = 0.0;
        }
    }

    Ok(Derivation {
        anchor_id: ids.0,
        id: ids.1,
        lambda: cfg.lambda,
        layers: LayerPair {
            main: main.to_layer()?,
            hyper: hyper.to_layer()?,
        },
        meta: TrainingMeta {
            seed: cfg.seed,
            steps: cfg.steps as u64,
            velocity: ann_main.velocity(),
            beta_max_main: ann_main.beta_max(),
            beta_max_hyper: ann_hyper.beta_max(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(&[2]);
        let mut p = vec![1.0, -1.0];
        adam.tick();
        adam.update(0, &mut p, &[3.0, -0.5], 0.1);
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((p[0] - (1.0 - 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-12);
        assert!((p[1] - (-1.0 + 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn plateau_after_patience() {
        let mut p = Plateau::new(3, 1e-4);
        assert!(!p.observe(1.0));
        assert!(!p.observe(0.99999));
        assert!(!p.observe(1.2));
        assert!(p.observe(1.0));
        assert_eq!(p.plateaus(), 1);
        assert!(!p.observe(0.5));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::anchor().validate().is_ok());
        assert!(TrainConfig { patch: 48, ..TrainConfig::anchor() }.validate().is_err());
        assert!(TrainConfig { lambda: 0.0, ..TrainConfig::anchor() }.validate().is_err());
    }
}
