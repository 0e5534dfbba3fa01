//! SGD training loops wiring the classifier, discriminator, and transfer
//! losses together.
//!
//! Per paired batch the trainer computes the source classification loss, the
//! method's transfer loss, and back-propagates `cls + lambda * transfer`
//! through shared weights. For the adversarial methods the discriminator
//! descends its own binary cross-entropy unscaled while the feature path
//! receives the sign-flipped, lambda-scaled gradient, which realizes the
//! minmax with a single optimizer pass. When the scheduled lambda is zero
//! the whole transfer path (including discriminator updates) is skipped, so
//! every method degenerates bit-exactly to source-only training.
//!
//! Target batches enter training as [`UnlabeledView`] values: the type
//! carries no labels, so the unsupervised contract is enforced by the
//! compiler rather than by convention.

use serde::{Deserialize, Serialize};

use crate::data::{FeatureDataset, UnlabeledView};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss, coral_loss, cross_entropy, entropy, entropy_weight, lambda_value, mmd_linear,
    multilinear_backward, multilinear_map, LambdaSchedule, TransferLossKind,
};
use crate::matrix::Matrix;
use crate::model::{
    reverse_gradient, softmax_backward, ClassifierNet, ClassifierShape, DiscriminatorNet,
    ForwardPass, LayerGrads, ReversalCoefficient,
};

/// Which activations the distance-based transfer losses compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    Bottleneck,
    Logits,
}

impl std::str::FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bottleneck" => Ok(Tap::Bottleneck),
            "logits" => Ok(Tap::Logits),
            other => Err(Error::Config(format!("unknown tap '{other}'"))),
        }
    }
}

/// Learning-rate schedule over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Fixed,
    /// `base / (1 + gamma * epoch)`.
    InverseDecay {
        gamma: f64,
    },
}

/// Evaluate a learning-rate schedule; `epoch` is 0-based so the first epoch
/// trains at exactly the base rate.
pub fn lr_value(schedule: LrSchedule, epoch: usize, base_lr: f64) -> f64 {
    match schedule {
        LrSchedule::Fixed => base_lr,
        LrSchedule::InverseDecay { gamma } => base_lr / (1.0 + gamma * epoch as f64),
    }
}

/// One SGD update with momentum and weight decay:
/// `g = grad + wd * param; v = momentum * v + g; param -= lr * v`.
pub fn sgd_step(
    param: &mut Matrix,
    grad: &Matrix,
    velocity: &mut Matrix,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::dim("sgd_step", param.shape(), grad.shape()));
    }
    if param.shape() != velocity.shape() {
        return Err(Error::dim("sgd_step", param.shape(), velocity.shape()));
    }
    for i in 0..param.rows() {
        for j in 0..param.cols() {
            let g = grad.get(i, j) + weight_decay * param.get(i, j);
            let v = momentum * velocity.get(i, j) + g;
            velocity.set(i, j, v);
            param.set(i, j, param.get(i, j) - lr * v);
        }
    }
    Ok(())
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: TransferLossKind,
    pub epochs: usize,
    pub source_batch: usize,
    pub target_batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: LambdaSchedule,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub tap: Tap,
}

impl TrainConfig {
    /// Per-method defaults mirroring how each objective is trained in the
    /// evaluated benchmarks: CORAL/MMD with batches of 128 and a 1/t lambda
    /// for CORAL, the conditional-adversarial variants with batches of 10.
    /// Everything uses SGD at lr 1e-3, momentum 0.9, weight decay 5e-4.
    pub fn defaults_for(method: TransferLossKind) -> Self {
        let (source_batch, target_batch) = if method.is_adversarial() {
            (10, 10)
        } else {
            (128, 128)
        };
        let lambda = match method {
            TransferLossKind::None => LambdaSchedule::Constant(0.0),
            TransferLossKind::Coral => LambdaSchedule::InverseEpoch(1.0),
            _ => LambdaSchedule::Constant(1.0),
        };
        let tap = match method {
            TransferLossKind::Coral => Tap::Logits,
            _ => Tap::Bottleneck,
        };
        TrainConfig {
            method,
            epochs: 100,
            source_batch,
            target_batch,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda,
            lr_schedule: LrSchedule::Fixed,
            seed: 0,
            tap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if self.lambda.base() < 0.0 {
            return Err(Error::Config("lambda base must be >= 0".into()));
        }
        if self.source_batch == 0 || self.target_batch == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.method == TransferLossKind::Coral
            && (self.source_batch < 2 || self.target_batch < 2)
        {
            return Err(Error::Config(
                "coral needs batch sizes >= 2 for the covariance".into(),
            ));
        }
        Ok(())
    }
}

/// Network widths for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub bottleneck: Option<usize>,
    pub disc_hidden: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden: vec![64],
            bottleneck: Some(32),
            disc_hidden: vec![64],
        }
    }
}

/// Everything logged for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cls_loss: f64,
    pub transfer_loss: f64,
    pub lambda: f64,
    pub src_test_acc: f64,
    pub tgt_test_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub disc_grad_norm: Option<f64>,
}

/// Mutable state owned by one training loop.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub classifier: ClassifierNet,
    pub discriminator: Option<DiscriminatorNet>,
    vel_classifier: Vec<LayerGrads>,
    vel_discriminator: Vec<LayerGrads>,
}

fn zero_velocities(layers: &[crate::model::Layer]) -> Vec<LayerGrads> {
    layers
        .iter()
        .map(|l| LayerGrads {
            weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
            bias: Matrix::zeros(1, l.weight.cols()),
        })
        .collect()
}

impl TrainState {
    /// Deterministic initialization; the discriminator exists only for the
    /// adversarial methods and its input width is `feature_dim * classes`
    /// (the flattened joint variable).
    pub fn init(
        cfg: &TrainConfig,
        arch: &ArchConfig,
        input_dim: usize,
        num_classes: usize,
    ) -> Self {
        let shape = ClassifierShape {
            input_dim,
            hidden: arch.hidden.clone(),
            bottleneck: arch.bottleneck,
            num_classes,
        };
        let classifier = ClassifierNet::init(&shape, cfg.seed);
        let discriminator = if cfg.method.is_adversarial() {
            Some(DiscriminatorNet::init(
                shape.feature_dim() * num_classes,
                &arch.disc_hidden,
                cfg.seed,
            ))
        } else {
            None
        };
        let vel_classifier = zero_velocities(classifier.layers());
        let vel_discriminator = discriminator
            .as_ref()
            .map(|d| zero_velocities(d.layers()))
            .unwrap_or_default();
        TrainState {
            classifier,
            discriminator,
            vel_classifier,
            vel_discriminator,
        }
    }
}

/// Gradients and loss values for one paired batch.
#[derive(Debug)]
pub struct BatchGrads {
    pub cls_loss: f64,
    pub transfer_loss: f64,
    pub classifier: Vec<LayerGrads>,
    pub discriminator: Option<Vec<LayerGrads>>,
}

fn accumulate(into: &mut [LayerGrads], from: &[LayerGrads]) -> Result<()> {
    for (a, b) in into.iter_mut().zip(from) {
        a.weight.add_scaled(&b.weight, 1.0)?;
        a.bias.add_scaled(&b.bias, 1.0)?;
    }
    Ok(())
}

fn tap_of(pass: &ForwardPass, tap: Tap) -> &Matrix {
    match tap {
        Tap::Bottleneck => pass.features(),
        Tap::Logits => pass.logits(),
    }
}

/// Compute the loss values and analytic parameter gradients for one paired
/// batch, exactly as a training step applies them. This is the path the
/// finite-difference oracle checks.
///
/// Gradient semantics per method:
/// - `none`: classifier gets d(cls)/d(theta).
/// - `coral`/`mmd`: classifier gets d(cls + lambda * transfer)/d(theta); the
///   mmd transfer term is the squared distance.
/// - `cdan`/`cdan_e`: classifier gets d(cls - lambda * adv)/d(theta) via
///   gradient reversal, the discriminator gets d(adv)/d(theta_D); entropy
///   weights are constants within the step.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients(
    method: TransferLossKind,
    tap: Tap,
    lambda: f64,
    net: &ClassifierNet,
    disc: Option<&DiscriminatorNet>,
    src_x: &Matrix,
    src_y: &[usize],
    tgt_x: Option<&Matrix>,
) -> Result<BatchGrads> {
    let pass_s = net.forward(src_x)?;
    let ce = cross_entropy(pass_s.predictions(), src_y)?;
    let mut d_logits_s = softmax_backward(pass_s.predictions(), &ce.grads[0]);
    let mut d_feat_s: Option<Matrix> = None;

    let mut transfer_loss = 0.0;
    let mut disc_grads = None;
    // target-side contributions: (pass, d_logits, d_features)
    let mut tgt_contrib: Option<(ForwardPass, Matrix, Option<Matrix>)> = None;

    let transfer_active = method != TransferLossKind::None && lambda != 0.0;
    if transfer_active {
        let tgt_x = tgt_x.ok_or_else(|| {
            Error::Config(format!("method '{}' needs a target batch", method.name()))
        })?;
        let pass_t = net.forward(tgt_x)?;
        match method {
            TransferLossKind::Coral | TransferLossKind::Mmd => {
                let (a_s, a_t) = (tap_of(&pass_s, tap), tap_of(&pass_t, tap));
                let pair = if method == TransferLossKind::Coral {
                    coral_loss(a_s, a_t)?
                } else {
                    mmd_linear(a_s, a_t)?
                };
                // mmd enters the objective squared, so its tap gradient picks
                // up the 2 * value chain factor and is smooth at zero
                let (value, chain) = if method == TransferLossKind::Mmd {
                    (pair.value * pair.value, 2.0 * pair.value)
                } else {
                    (pair.value, 1.0)
                };
                transfer_loss = value;
                let scale = lambda * chain;
                let mut grads = pair.grads.into_iter();
                let g_s = grads.next().expect("source grad").scale(scale);
                let g_t = grads.next().expect("target grad").scale(scale);
                let (mut d_logits_t, mut d_feat_t) = (
                    Matrix::zeros(pass_t.logits().rows(), net.num_classes()),
                    None,
                );
                match tap {
                    Tap::Logits => {
                        d_logits_s.add_scaled(&g_s, 1.0)?;
                        d_logits_t = g_t;
                    }
                    Tap::Bottleneck => {
                        d_feat_s = Some(g_s);
                        d_feat_t = Some(g_t);
                    }
                }
                tgt_contrib = Some((pass_t, d_logits_t, d_feat_t));
            }
            TransferLossKind::Cdan | TransferLossKind::CdanE => {
                let disc = disc.ok_or_else(|| {
                    Error::Config("adversarial method needs a discriminator".into())
                })?;
                let joint_s = multilinear_map(pass_s.features(), pass_s.predictions())?;
                let joint_t = multilinear_map(pass_t.features(), pass_t.predictions())?;
                let dpass_s = disc.forward(&joint_s)?;
                let dpass_t = disc.forward(&joint_t)?;
                let (w_s, w_t) = if method == TransferLossKind::CdanE {
                    let h_s = entropy(pass_s.predictions())?;
                    let h_t = entropy(pass_t.predictions())?;
                    (
                        h_s.iter().map(|&h| entropy_weight(h)).collect::<Vec<_>>(),
                        h_t.iter().map(|&h| entropy_weight(h)).collect::<Vec<_>>(),
                    )
                } else {
                    (vec![1.0; src_x.rows()], vec![1.0; tgt_x.rows()])
                };
                let adv = adversarial_loss(dpass_s.probs(), dpass_t.probs(), &w_s, &w_t)?;
                transfer_loss = adv.value;

                // discriminator descends the adversarial loss directly
                let (dg_s, dh_s) = disc.backward(&dpass_s, &adv.grads[0])?;
                let (dg_t, dh_t) = disc.backward(&dpass_t, &adv.grads[1])?;
                let mut dgrads = dg_s;
                accumulate(&mut dgrads, &dg_t)?;
                disc_grads = Some(dgrads);

                // feature path sees the reversed, lambda-scaled gradient
                let coeff = ReversalCoefficient { lambda };
                let rev_s = reverse_gradient(&dh_s, coeff);
                let rev_t = reverse_gradient(&dh_t, coeff);
                let (df_s, dp_s) =
                    multilinear_backward(pass_s.features(), pass_s.predictions(), &rev_s)?;
                let (df_t, dp_t) =
                    multilinear_backward(pass_t.features(), pass_t.predictions(), &rev_t)?;
                d_logits_s.add_scaled(&softmax_backward(pass_s.predictions(), &dp_s), 1.0)?;
                d_feat_s = Some(df_s);
                let d_logits_t = softmax_backward(pass_t.predictions(), &dp_t);
                tgt_contrib = Some((pass_t, d_logits_t, Some(df_t)));
            }
            TransferLossKind::None => unreachable!(),
        }
    }

    let mut classifier = net.backward(&pass_s, &d_logits_s, d_feat_s.as_ref())?;
    if let Some((pass_t, d_logits_t, d_feat_t)) = tgt_contrib {
        let g_t = net.backward(&pass_t, &d_logits_t, d_feat_t.as_ref())?;
        accumulate(&mut classifier, &g_t)?;
    }

    Ok(BatchGrads {
        cls_loss: ce.value,
        transfer_loss,
        classifier,
        discriminator: disc_grads,
    })
}

fn grads_l2_norm(grads: &[LayerGrads]) -> f64 {
    grads
        .iter()
        .map(|g| g.weight.frobenius_sq() + g.bias.frobenius_sq())
        .sum::<f64>()
        .sqrt()
}

/// Loss means and instrumentation from one epoch.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub cls_loss: f64,
    pub transfer_loss: f64,
    pub lambda: f64,
    pub disc_grad_norm: Option<f64>,
}

/// One pass over the paired source/target batches: truncates to the shorter
/// stream, never reads target labels (the view has none to read), and
/// applies one SGD step per paired batch.
pub fn train_epoch(
    cfg: &TrainConfig,
    state: &mut TrainState,
    source: &FeatureDataset,
    target: UnlabeledView<'_>,
    epoch: usize,
) -> Result<EpochStats> {
    let lambda = lambda_value(&cfg.lambda, epoch)?;
    let lr = lr_value(cfg.lr_schedule, epoch - 1, cfg.lr);
    let transfer_active = cfg.method != TransferLossKind::None && lambda != 0.0;

    let src_batches = source.batches(cfg.source_batch, cfg.seed, epoch);
    let tgt_batches = target.batches(cfg.target_batch, cfg.seed, epoch);
    let pairs = src_batches.len().min(tgt_batches.len());
    if pairs == 0 {
        return Err(Error::Config(format!(
            "epoch {epoch} has no trainable batch pairs (source {}, target {})",
            src_batches.len(),
            tgt_batches.len()
        )));
    }

    let mut cls_sum = 0.0;
    let mut transfer_sum = 0.0;
    let mut disc_norm_sum = 0.0;
    for (src, tgt) in src_batches.into_iter().zip(tgt_batches).take(pairs) {
        let labels = src.labels.as_deref().expect("source batches are labeled");
        let grads = batch_gradients(
            cfg.method,
            cfg.tap,
            if transfer_active { lambda } else { 0.0 },
            &state.classifier,
            state.discriminator.as_ref(),
            &src.features,
            labels,
            if transfer_active { Some(&tgt) } else { None },
        )?;
        cls_sum += grads.cls_loss;
        transfer_sum += grads.transfer_loss;

        for (layer, (g, v)) in state
            .classifier
            .layers_mut()
            .iter_mut()
            .zip(grads.classifier.iter().zip(&mut state.vel_classifier))
        {
            sgd_step(
                &mut layer.weight,
                &g.weight,
                &mut v.weight,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
            sgd_step(
                &mut layer.bias,
                &g.bias,
                &mut v.bias,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
        }
        if let (Some(dgrads), Some(disc)) = (&grads.discriminator, state.discriminator.as_mut()) {
            disc_norm_sum += grads_l2_norm(dgrads);
            for (layer, (g, v)) in disc
                .layers_mut()
                .iter_mut()
                .zip(dgrads.iter().zip(&mut state.vel_discriminator))
            {
                sgd_step(
                    &mut layer.weight,
                    &g.weight,
                    &mut v.weight,
                    lr,
                    cfg.momentum,
                    cfg.weight_decay,
                )?;
                sgd_step(
                    &mut layer.bias,
                    &g.bias,
                    &mut v.bias,
                    lr,
                    cfg.momentum,
                    cfg.weight_decay,
                )?;
            }
        }
    }

    let n = pairs as f64;
    Ok(EpochStats {
        cls_loss: cls_sum / n,
        transfer_loss: transfer_sum / n,
        lambda,
        disc_grad_norm: if transfer_active && cfg.method.is_adversarial() {
            Some(disc_norm_sum / n)
        } else {
            None
        },
    })
}

/// Fraction of examples whose argmax prediction matches the label; ties
/// break toward the lowest class index.
pub fn evaluate(net: &ClassifierNet, dataset: &FeatureDataset) -> Result<f64> {
    let labels = dataset.labels().ok_or_else(|| Error::MissingLabels {
        name: dataset.name().to_string(),
    })?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset {
            name: dataset.name().to_string(),
        });
    }
    let pass = net.forward(dataset.features())?;
    let preds = pass.predictions();
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = preds.row(i);
        let mut best = 0usize;
        for (c, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Datasets for one experiment; the training-side target is label-free by
/// type, labeled targets appear only as held-out evaluation sets.
#[derive(Clone, Copy)]
pub struct RunData<'a> {
    pub source_train: &'a FeatureDataset,
    pub target_train: UnlabeledView<'a>,
    pub source_test: &'a FeatureDataset,
    pub target_test: Option<&'a FeatureDataset>,
}

/// Final state plus the per-epoch log of a finished run.
#[derive(Debug)]
pub struct TrainOutput {
    pub records: Vec<EpochRecord>,
    pub classifier: ClassifierNet,
    pub discriminator: Option<DiscriminatorNet>,
}

/// Train for `cfg.epochs` epochs, evaluating after each one.
pub fn run_training(cfg: &TrainConfig, arch: &ArchConfig, data: &RunData) -> Result<TrainOutput> {
    cfg.validate()?;
    let input_dim = data.source_train.dim();
    if data.target_train.features().cols() != input_dim {
        return Err(Error::dim(
            "run_training",
            data.source_train.features().shape(),
            data.target_train.features().shape(),
        ));
    }
    let num_classes = data.source_train.num_classes();
    let mut state = TrainState::init(cfg, arch, input_dim, num_classes);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let stats = train_epoch(cfg, &mut state, data.source_train, data.target_train, epoch)?;
        let src_test_acc = evaluate(&state.classifier, data.source_test)?;
        let tgt_test_acc = match data.target_test {
            Some(ds) => Some(evaluate(&state.classifier, ds)?),
            None => None,
        };
        records.push(EpochRecord {
            epoch,
            cls_loss: stats.cls_loss,
            transfer_loss: stats.transfer_loss,
            lambda: stats.lambda,
            src_test_acc,
            tgt_test_acc,
            disc_grad_norm: stats.disc_grad_norm,
        });
    }
    Ok(TrainOutput {
        records,
        classifier: state.classifier,
        discriminator: state.discriminator,
    })
}
