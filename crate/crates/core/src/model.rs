//! Feed-forward classifier and domain-discriminator networks with hand-rolled
//! backprop.
//!
//! The classifier is a stack of fully connected layers with rectifier hidden
//! activations and a linear logits head; the layer before the head is the
//! bottleneck whose activations are the features `f` used by the transfer
//! losses. The discriminator is the same stack ending in a single sigmoid
//! unit. The adversarial minmax is realized by a gradient-reversal step
//! between the joint variable and the discriminator rather than alternating
//! optimizer phases, so one SGD pass updates both players deterministically.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LOG_EPS;
use crate::matrix::Matrix;
use crate::rng;

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Standard deviation of the classification-head initializer.
pub const HEAD_INIT_STD: f64 = 0.005;

/// One fully connected layer; `weight` is `(in, out)`, `bias` is `(1, out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Gradients for one layer, same shapes as the layer itself.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Shape of a classifier network: `input -> hidden... -> bottleneck -> classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierShape {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Narrow layer feeding the head; its activations are the features `f`.
    pub bottleneck: Option<usize>,
    pub num_classes: usize,
}

impl ClassifierShape {
    /// Desk-scale default: `input -> 64 -> 32 -> classes`.
    pub fn default_for(input_dim: usize, num_classes: usize) -> Self {
        ClassifierShape {
            input_dim,
            hidden: vec![64],
            bottleneck: Some(32),
            num_classes,
        }
    }

    /// The full chain of layer widths, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        if let Some(b) = self.bottleneck {
            dims.push(b);
        }
        dims.push(self.num_classes);
        dims
    }

    /// Width of the feature tap (bottleneck, or last hidden, or the input
    /// itself for a single-layer net).
    pub fn feature_dim(&self) -> usize {
        let dims = self.dims();
        dims[dims.len() - 2]
    }
}

/// Classifier network `G`: rectifier hidden layers, linear logits head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierNet {
    layers: Vec<Layer>,
    num_classes: usize,
}

/// Domain discriminator `D`: rectifier hidden layers, one sigmoid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorNet {
    layers: Vec<Layer>,
}

/// Scale for the sign-flipped gradients that flow from the adversarial loss
/// back into the feature path. The forward pass is the identity regardless.
#[derive(Debug, Clone, Copy)]
pub struct ReversalCoefficient {
    pub lambda: f64,
}

/// Flip and scale a gradient: `-lambda * grad`. Applying it twice with
/// `lambda = 1` is the identity.
pub fn reverse_gradient(grad: &Matrix, coeff: ReversalCoefficient) -> Matrix {
    grad.scale(-coeff.lambda)
}

/// Initialize a stack of layers for the given dimension chain. The final
/// (head) layer is drawn from N(0, std 0.005) as new heads are in the
/// evaluated methods; earlier layers use fan-in-scaled uniform weights.
/// Biases start at zero. Deterministic per `(seed, tag)`.
fn init_layers(dims: &[usize], seed: u64, tag: &str) -> Vec<Layer> {
    let normal = Normal::new(0.0, HEAD_INIT_STD).expect("valid stddev");
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for i in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[i], dims[i + 1]);
        let mut stream = rng::indexed_stream(seed, tag, i as u64);
        let head = i == dims.len() - 2;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Matrix::from_fn(fan_in, fan_out, |_, _| {
            if head {
                normal.sample(&mut stream)
            } else {
                stream.random_range(-bound..bound)
            }
        });
        layers.push(Layer {
            weight,
            bias: Matrix::zeros(1, fan_out),
        });
    }
    layers
}

/// Activations cached by a forward pass; everything backprop needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `activations[0]` is the input, `activations[L]` the logits.
    activations: Vec<Matrix>,
    /// Pre-activations `z_i` of every layer.
    preacts: Vec<Matrix>,
    predictions: Matrix,
}

impl ForwardPass {
    /// Bottleneck activations (input to the logits head). For a single-layer
    /// net this is the input batch itself.
    pub fn features(&self) -> &Matrix {
        &self.activations[self.activations.len() - 2]
    }

    pub fn logits(&self) -> &Matrix {
        self.activations.last().expect("non-empty net")
    }

    /// Row-wise softmax of the logits.
    pub fn predictions(&self) -> &Matrix {
        &self.predictions
    }

    /// Smallest |pre-activation| over all hidden units; used by the gradient
    /// checker to stay away from rectifier kinks.
    pub fn min_hidden_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for z in &self.preacts[..self.preacts.len() - 1] {
            for &v in z.data() {
                margin = margin.min(v.abs());
            }
        }
        margin
    }
}

fn forward_stack(
    layers: &[Layer],
    x: &Matrix,
    sigmoid_head: bool,
) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let mut activations = Vec::with_capacity(layers.len() + 1);
    let mut preacts = Vec::with_capacity(layers.len());
    activations.push(x.clone());
    for (i, layer) in layers.iter().enumerate() {
        let a = activations.last().expect("at least the input");
        if a.cols() != layer.weight.rows() {
            return Err(Error::dim("forward", a.shape(), layer.weight.shape()));
        }
        let mut z = a.matmul(&layer.weight)?;
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            for (v, &b) in row.iter_mut().zip(layer.bias.row(0)) {
                *v += b;
            }
        }
        let last = i == layers.len() - 1;
        let act = if last {
            if sigmoid_head {
                z.map(sigmoid)
            } else {
                z.clone()
            }
        } else {
            z.map(|v| v.max(0.0))
        };
        preacts.push(z);
        activations.push(act);
    }
    Ok((activations, preacts))
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Back-propagate through a row-wise softmax: given `probs = softmax(z)` and
/// an upstream gradient on `probs`, return the gradient on `z`:
/// `d_z[k] = g[k] * (d_g[k] - sum_c d_g[c] * g[c])` per row.
pub fn softmax_backward(probs: &Matrix, d_probs: &Matrix) -> Matrix {
    debug_assert_eq!(probs.shape(), d_probs.shape());
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let g = probs.row(i);
        let dg = d_probs.row(i);
        let dot: f64 = g.iter().zip(dg).map(|(&a, &b)| a * b).sum();
        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = g[k] * (dg[k] - dot);
        }
    }
    out
}

/// Walk a layer stack backwards. `d_head` is the gradient at the final
/// pre-activation; `inject` optionally adds a gradient at one activation
/// index (the feature tap). Returns per-layer grads and the gradient at the
/// input.
fn backward_stack(
    layers: &[Layer],
    activations: &[Matrix],
    preacts: &[Matrix],
    d_head: &Matrix,
    inject: Option<(usize, &Matrix)>,
) -> Result<(Vec<LayerGrads>, Matrix)> {
    let n_layers = layers.len();
    let mut grads: Vec<Option<LayerGrads>> = vec![None; n_layers];
    let mut d_z = d_head.clone();
    for i in (0..n_layers).rev() {
        let a_in = &activations[i];
        let d_w = a_in.transpose().matmul(&d_z)?;
        let mut d_b = Matrix::zeros(1, d_z.cols());
        for r in 0..d_z.rows() {
            for (acc, &v) in d_b.row_mut(0).iter_mut().zip(d_z.row(r)) {
                *acc += v;
            }
        }
        grads[i] = Some(LayerGrads {
            weight: d_w,
            bias: d_b,
        });
        let mut d_a = d_z.matmul(&layers[i].weight.transpose())?;
        if let Some((idx, extra)) = inject {
            if idx == i {
                d_a.add_scaled(extra, 1.0)?;
            }
        }
        if i == 0 {
            return Ok((grads.into_iter().map(|g| g.unwrap()).collect(), d_a));
        }
        // through the rectifier of the previous layer
        let z_prev = &preacts[i - 1];
        d_z = Matrix::from_fn(d_a.rows(), d_a.cols(), |r, c| {
            if z_prev.get(r, c) > 0.0 {
                d_a.get(r, c)
            } else {
                0.0
            }
        });
    }
    unreachable!("loop returns at i == 0")
}

impl ClassifierNet {
    /// Deterministic initialization from a shape and seed.
    pub fn init(shape: &ClassifierShape, seed: u64) -> Self {
        ClassifierNet {
            layers: init_layers(&shape.dims(), seed, "classifier-layer"),
            num_classes: shape.num_classes,
        }
    }

    pub fn from_layers(layers: Vec<Layer>, num_classes: usize) -> Result<Self> {
        validate_chain(&layers)?;
        let out = layers.last().map(|l| l.weight.cols()).unwrap_or(0);
        if out != num_classes {
            return Err(Error::Config(format!(
                "head width {out} does not match {num_classes} classes"
            )));
        }
        Ok(ClassifierNet {
            layers,
            num_classes,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn feature_dim(&self) -> usize {
        if self.layers.len() >= 2 {
            self.layers[self.layers.len() - 1].weight.rows()
        } else {
            self.input_dim()
        }
    }

    /// Activation index of the feature tap (the head's input).
    fn feature_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Run the batch through the network, caching activations for backprop.
    pub fn forward(&self, x: &Matrix) -> Result<ForwardPass> {
        let (activations, preacts) = forward_stack(&self.layers, x, false)?;
        let predictions = activations.last().expect("head").softmax_rows();
        Ok(ForwardPass {
            activations,
            preacts,
            predictions,
        })
    }

    /// Back-propagate `d_logits` (gradient at the logits) plus an optional
    /// gradient injected at the feature tap.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        d_logits: &Matrix,
        d_features: Option<&Matrix>,
    ) -> Result<Vec<LayerGrads>> {
        let inject = d_features.map(|m| (self.feature_index(), m));
        let (grads, _) = backward_stack(
            &self.layers,
            &pass.activations,
            &pass.preacts,
            d_logits,
            inject,
        )?;
        Ok(grads)
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

/// Forward cache for the discriminator.
#[derive(Debug, Clone)]
pub struct DiscForwardPass {
    activations: Vec<Matrix>,
    preacts: Vec<Matrix>,
    /// Clamped probabilities, strictly inside (0, 1).
    probs: Matrix,
}

impl DiscForwardPass {
    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn min_hidden_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for z in &self.preacts[..self.preacts.len() - 1] {
            for &v in z.data() {
                margin = margin.min(v.abs());
            }
        }
        margin
    }
}

impl DiscriminatorNet {
    /// Deterministic initialization: `input -> hidden... -> 1`, head drawn
    /// from N(0, std 0.005) so initial outputs sit near 0.5.
    pub fn init(input_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut dims = vec![input_dim];
        dims.extend(hidden);
        dims.push(1);
        DiscriminatorNet {
            layers: init_layers(&dims, seed, "discriminator-layer"),
        }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        validate_chain(&layers)?;
        if layers.last().map(|l| l.weight.cols()) != Some(1) {
            return Err(Error::Config("discriminator head must have width 1".into()));
        }
        Ok(DiscriminatorNet { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    /// Probabilities in (0, 1) for each input row, with forward caches.
    pub fn forward(&self, h: &Matrix) -> Result<DiscForwardPass> {
        let (activations, preacts) = forward_stack(&self.layers, h, true)?;
        let probs = activations
            .last()
            .expect("head")
            .map(|p| p.clamp(LOG_EPS, 1.0 - LOG_EPS));
        Ok(DiscForwardPass {
            activations,
            preacts,
            probs,
        })
    }

    /// Back-propagate a gradient with respect to the output probabilities.
    /// Returns the per-layer grads and the gradient at the input rows.
    pub fn backward(
        &self,
        pass: &DiscForwardPass,
        d_probs: &Matrix,
    ) -> Result<(Vec<LayerGrads>, Matrix)> {
        // chain through the sigmoid (zero where the clamp pinned the output)
        let raw = pass.activations.last().expect("head");
        let d_head = Matrix::from_fn(d_probs.rows(), d_probs.cols(), |r, c| {
            let p = raw.get(r, c);
            if p <= LOG_EPS || p >= 1.0 - LOG_EPS {
                0.0
            } else {
                d_probs.get(r, c) * p * (1.0 - p)
            }
        });
        backward_stack(
            &self.layers,
            &pass.activations,
            &pass.preacts,
            &d_head,
            None,
        )
    }
}

fn validate_chain(layers: &[Layer]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Config("network needs at least one layer".into()));
    }
    for w in layers.windows(2) {
        if w[0].weight.cols() != w[1].weight.rows() {
            return Err(Error::dim(
                "layer chain",
                w[0].weight.shape(),
                w[1].weight.shape(),
            ));
        }
    }
    for l in layers {
        if l.bias.shape() != (1, l.weight.cols()) {
            return Err(Error::dim(
                "layer bias",
                l.bias.shape(),
                (1, l.weight.cols()),
            ));
        }
    }
    Ok(())
}

/// Versioned checkpoint: shapes plus row-major values for both networks.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub classifier: ClassifierNet,
    pub discriminator: Option<DiscriminatorNet>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Write a checkpoint as pretty JSON (write-then-rename, so a crash cannot
/// leave a truncated file); values round-trip bit-exactly.
pub fn save_checkpoint(
    path: &std::path::Path,
    classifier: &ClassifierNet,
    discriminator: Option<&DiscriminatorNet>,
) -> Result<()> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        classifier: classifier.clone(),
        discriminator: discriminator.cloned(),
    };
    let json = serde_json::to_string_pretty(&ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, json)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            ckpt.version
        )));
    }
    validate_chain(&ckpt.classifier.layers)?;
    if let Some(d) = &ckpt.discriminator {
        validate_chain(&d.layers)?;
    }
    Ok(ckpt)
}
