//! Central finite-difference gradient oracle and the repository-wide
//! gradient-check suite.
//!
//! Every loss that returns analytic gradients, and the end-to-end parameter
//! gradients the trainer applies, are checked against central differences at
//! `h = 1e-4` in 64-bit arithmetic. Instances for the end-to-end checks are
//! rejection-sampled so that no rectifier pre-activation sits within the
//! finite-difference step of its kink; the checks verify the analytic chain
//! rule where the objective is differentiable.

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss, coral_loss, cross_entropy, entropy, entropy_weight, mmd_linear,
    multilinear_map, TransferLossKind,
};
use crate::matrix::Matrix;
use crate::model::{ClassifierNet, DiscriminatorNet, Layer};
use crate::rng;
use crate::train::{batch_gradients, Tap};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-4;

/// Pass threshold on the scale-normalized maximum error.
pub const GRAD_TOL: f64 = 1e-5;

/// Minimum |pre-activation| demanded of sampled end-to-end instances; keeps
/// every finite-difference probe inside one linear region of the rectifiers.
const KINK_MARGIN: f64 = 1e-3;

/// Central-difference gradient of a scalar function, entry by entry:
/// `(f(x + h e_ij) - f(x - h e_ij)) / (2h)`.
pub fn fd_gradient<F>(f: F, x: &Matrix, h: f64) -> Matrix
where
    F: Fn(&Matrix) -> f64 + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if x.rows() * x.cols() >= 8 {
            return fd_gradient_parallel(&f, x, h);
        }
    }
    fd_gradient_sequential(&f, x, h)
}

fn fd_entry<F: Fn(&Matrix) -> f64>(f: &F, x: &Matrix, h: f64, idx: usize) -> f64 {
    let (r, c) = (idx / x.cols(), idx % x.cols());
    let base = x.get(r, c);
    let mut probe = x.clone();
    probe.set(r, c, base + h);
    let fp = f(&probe);
    probe.set(r, c, base - h);
    let fm = f(&probe);
    (fp - fm) / (2.0 * h)
}

/// Single-threaded finite differences.
pub fn fd_gradient_sequential<F>(f: &F, x: &Matrix, h: f64) -> Matrix
where
    F: Fn(&Matrix) -> f64,
{
    let n = x.rows() * x.cols();
    let data: Vec<f64> = (0..n).map(|idx| fd_entry(f, x, h, idx)).collect();
    Matrix::new(x.rows(), x.cols(), data).expect("shape by construction")
}

/// Entry-parallel finite differences; bit-identical to the sequential path.
#[cfg(feature = "parallel")]
pub fn fd_gradient_parallel<F>(f: &F, x: &Matrix, h: f64) -> Matrix
where
    F: Fn(&Matrix) -> f64 + Sync,
{
    let n = x.rows() * x.cols();
    let data: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|idx| fd_entry(f, x, h, idx))
        .collect();
    Matrix::new(x.rows(), x.cols(), data).expect("shape by construction")
}

/// Worst entry of one analytic/numeric comparison.
#[derive(Debug, Clone)]
pub struct WorstEntry {
    pub input: usize,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of checking one named gradient over all its trials.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub worst: Option<WorstEntry>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

/// Scale-normalized maximum deviation between an analytic and a numeric
/// gradient: `max |a - n| / max(scale, 1e-6)` where `scale` is the larger
/// max-magnitude of the two. Returns the error and the worst entry.
pub fn compare_gradients(analytic: &Matrix, numeric: &Matrix) -> (f64, usize, usize) {
    debug_assert_eq!(analytic.shape(), numeric.shape());
    let scale = analytic.max_abs().max(numeric.max_abs()).max(1e-6);
    let mut worst = (0.0, 0, 0);
    for i in 0..analytic.rows() {
        for j in 0..analytic.cols() {
            let err = (analytic.get(i, j) - numeric.get(i, j)).abs() / scale;
            if err > worst.0 {
                worst = (err, i, j);
            }
        }
    }
    worst
}

/// Check a scalar function of several matrices against its claimed analytic
/// gradients using central differences. Folds the result into `report`.
pub fn check_against_fd<F>(
    report: &mut CheckReport,
    f: F,
    inputs: &[Matrix],
    analytic: &[Matrix],
    h: f64,
) where
    F: Fn(&[Matrix]) -> f64 + Sync,
{
    assert_eq!(inputs.len(), analytic.len());
    for (k, (x, a)) in inputs.iter().zip(analytic).enumerate() {
        let fk = |m: &Matrix| {
            let mut args = inputs.to_vec();
            args[k] = m.clone();
            f(&args)
        };
        let numeric = fd_gradient(fk, x, h);
        let (err, i, j) = compare_gradients(a, &numeric);
        if err > report.max_error {
            report.max_error = err;
            report.worst = Some(WorstEntry {
                input: k,
                row: i,
                col: j,
                analytic: a.get(i, j),
                numeric: numeric.get(i, j),
            });
        }
    }
    report.trials += 1;
}

fn new_report(name: &str) -> CheckReport {
    CheckReport {
        name: name.to_string(),
        trials: 0,
        max_error: 0.0,
        tolerance: GRAD_TOL,
        worst: None,
    }
}

fn random_matrix(stream: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| stream.random_range(lo..hi))
}

/// Probability rows bounded away from 0 (each row sums to 1).
fn random_probs(stream: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let soft = random_matrix(stream, rows, cols, -1.0, 1.0).softmax_rows();
    let mix = 1.0 / cols as f64;
    soft.map(|p| 0.5 * p + 0.5 * mix)
}

fn check_coral(seed: u64, trials: usize) -> CheckReport {
    let mut report = new_report("coral");
    for t in 0..trials {
        let mut s = rng::indexed_stream(seed, "gradcheck-coral", t as u64);
        let a = random_matrix(&mut s, 6, 4, -2.0, 2.0);
        let b = random_matrix(&mut s, 5, 4, -2.0, 2.0);
        let pair = coral_loss(&a, &b).expect("valid shapes");
        check_against_fd(
            &mut report,
            |ms| coral_loss(&ms[0], &ms[1]).expect("valid shapes").value,
            &[a, b],
            &pair.grads,
            FD_STEP,
        );
    }
    report
}

fn check_mmd_squared(seed: u64, trials: usize) -> CheckReport {
    let mut report = new_report("mmd_sq");
    for t in 0..trials {
        let mut s = rng::indexed_stream(seed, "gradcheck-mmd", t as u64);
        let a = random_matrix(&mut s, 6, 4, -2.0, 2.0);
        let b = random_matrix(&mut s, 4, 4, -2.0, 2.0);
        let pair = mmd_linear(&a, &b).expect("valid shapes");
        // the trainer optimizes the squared distance; chain factor 2 * value
        let analytic: Vec<Matrix> = pair
            .grads
            .iter()
            .map(|g| g.scale(2.0 * pair.value))
            .collect();
        check_against_fd(
            &mut report,
            |ms| {
                let v = mmd_linear(&ms[0], &ms[1]).expect("valid shapes").value;
                v * v
            },
            &[a, b],
            &analytic,
            FD_STEP,
        );
    }
    report
}

fn check_cross_entropy(seed: u64, trials: usize) -> CheckReport {
    let mut report = new_report("cross_entropy");
    for t in 0..trials {
        let mut s = rng::indexed_stream(seed, "gradcheck-ce", t as u64);
        let probs = random_probs(&mut s, 6, 4);
        let labels: Vec<usize> = (0..6).map(|_| s.random_range(0..4)).collect();
        let pair = cross_entropy(&probs, &labels).expect("valid labels");
        check_against_fd(
            &mut report,
            |ms| cross_entropy(&ms[0], &labels).expect("valid labels").value,
            &[probs],
            &pair.grads,
            FD_STEP,
        );
    }
    report
}

fn check_adversarial(seed: u64, trials: usize, entropy_weights: bool) -> CheckReport {
    let name = if entropy_weights {
        "adversarial_cdan_e"
    } else {
        "adversarial_cdan"
    };
    let mut report = new_report(name);
    for t in 0..trials {
        let mut s = rng::indexed_stream(seed, name, t as u64);
        let d_src = random_matrix(&mut s, 7, 1, 0.1, 0.9);
        let d_tgt = random_matrix(&mut s, 5, 1, 0.1, 0.9);
        let (w_src, w_tgt) = if entropy_weights {
            let g_s = random_probs(&mut s, 7, 3);
            let g_t = random_probs(&mut s, 5, 3);
            let to_w = |g: &Matrix| -> Vec<f64> {
                entropy(g)
                    .expect("valid rows")
                    .into_iter()
                    .map(entropy_weight)
                    .collect()
            };
            (to_w(&g_s), to_w(&g_t))
        } else {
            (vec![1.0; 7], vec![1.0; 5])
        };
        let pair = adversarial_loss(&d_src, &d_tgt, &w_src, &w_tgt).expect("valid");
        check_against_fd(
            &mut report,
            |ms| {
                adversarial_loss(&ms[0], &ms[1], &w_src, &w_tgt)
                    .expect("valid")
                    .value
            },
            &[d_src, d_tgt],
            &pair.grads,
            FD_STEP,
        );
    }
    report
}

/// A sampled end-to-end problem: nets, one paired batch, and the lambda in
/// effect.
struct Instance {
    net: ClassifierNet,
    disc: Option<DiscriminatorNet>,
    src_x: Matrix,
    src_y: Vec<usize>,
    tgt_x: Matrix,
    lambda: f64,
    tap: Tap,
}

fn random_layers(stream: &mut impl Rng, dims: &[usize]) -> Vec<Layer> {
    dims.windows(2)
        .map(|w| {
            let bound = 1.5 / (w[0] as f64).sqrt();
            Layer {
                weight: Matrix::from_fn(w[0], w[1], |_, _| stream.random_range(-bound..bound)),
                bias: Matrix::from_fn(1, w[1], |_, _| stream.random_range(-0.1..0.1)),
            }
        })
        .collect()
}

fn sample_instance(method: TransferLossKind, seed: u64, trial: usize) -> Result<Instance> {
    let tag = format!("gradcheck-model-{}", method.name());
    let (input_dim, feat_dim, classes, batch) = (5, 6, 3, 6);
    for attempt in 0..64u64 {
        let mut s = rng::indexed_stream(seed, &tag, trial as u64 * 64 + attempt);
        let net = ClassifierNet::from_layers(
            random_layers(&mut s, &[input_dim, 8, feat_dim, classes]),
            classes,
        )?;
        let disc = if method.is_adversarial() {
            Some(DiscriminatorNet::from_layers(random_layers(
                &mut s,
                &[feat_dim * classes, 8, 1],
            ))?)
        } else {
            None
        };
        let src_x = random_matrix(&mut s, batch, input_dim, -1.0, 1.0);
        let tgt_x = random_matrix(&mut s, batch, input_dim, -1.0, 1.0);
        let src_y: Vec<usize> = (0..batch).map(|_| s.random_range(0..classes)).collect();
        let lambda = s.random_range(0.3..1.5);
        let tap = if trial.is_multiple_of(2) {
            Tap::Logits
        } else {
            Tap::Bottleneck
        };

        // keep every rectifier pre-activation clear of its kink by more than
        // any finite-difference probe can move it
        let pass_s = net.forward(&src_x)?;
        let pass_t = net.forward(&tgt_x)?;
        let mut margin = pass_s.min_hidden_margin().min(pass_t.min_hidden_margin());
        if let Some(d) = &disc {
            let joint_s = multilinear_map(pass_s.features(), pass_s.predictions())?;
            let joint_t = multilinear_map(pass_t.features(), pass_t.predictions())?;
            margin = margin
                .min(d.forward(&joint_s)?.min_hidden_margin())
                .min(d.forward(&joint_t)?.min_hidden_margin());
        }
        if margin > KINK_MARGIN {
            return Ok(Instance {
                net,
                disc,
                src_x,
                src_y,
                tgt_x,
                lambda,
                tap,
            });
        }
    }
    Err(Error::Config(format!(
        "no kink-free gradcheck instance for {} after 64 attempts",
        method.name()
    )))
}

/// Entropy weights at the base point; the trainer treats them as constants
/// within a step, so the objective freezes them for the probe evaluations.
fn frozen_weights(inst: &Instance) -> Result<(Vec<f64>, Vec<f64>)> {
    let to_w = |x: &Matrix| -> Result<Vec<f64>> {
        let pass = inst.net.forward(x)?;
        Ok(entropy(pass.predictions())?
            .into_iter()
            .map(entropy_weight)
            .collect())
    };
    Ok((to_w(&inst.src_x)?, to_w(&inst.tgt_x)?))
}

fn adversarial_value(
    net: &ClassifierNet,
    disc: &DiscriminatorNet,
    src_x: &Matrix,
    tgt_x: &Matrix,
    weights: &(Vec<f64>, Vec<f64>),
) -> Result<f64> {
    let pass_s = net.forward(src_x)?;
    let pass_t = net.forward(tgt_x)?;
    let joint_s = multilinear_map(pass_s.features(), pass_s.predictions())?;
    let joint_t = multilinear_map(pass_t.features(), pass_t.predictions())?;
    let d_s = disc.forward(&joint_s)?;
    let d_t = disc.forward(&joint_t)?;
    Ok(adversarial_loss(d_s.probs(), d_t.probs(), &weights.0, &weights.1)?.value)
}

/// The scalar the classifier parameters descend: `cls + lambda * transfer`
/// for the distance losses, `cls - lambda * adversarial` under gradient
/// reversal.
fn classifier_objective(
    method: TransferLossKind,
    inst: &Instance,
    net: &ClassifierNet,
    weights: &(Vec<f64>, Vec<f64>),
) -> f64 {
    let eval = || -> Result<f64> {
        let pass_s = net.forward(&inst.src_x)?;
        let cls = cross_entropy(pass_s.predictions(), &inst.src_y)?.value;
        let transfer = match method {
            TransferLossKind::None => 0.0,
            TransferLossKind::Coral | TransferLossKind::Mmd => {
                let pass_t = net.forward(&inst.tgt_x)?;
                let pick = |p: &crate::model::ForwardPass| match inst.tap {
                    Tap::Bottleneck => p.features().clone(),
                    Tap::Logits => p.logits().clone(),
                };
                let (a_s, a_t) = (pick(&pass_s), pick(&pass_t));
                if method == TransferLossKind::Coral {
                    inst.lambda * coral_loss(&a_s, &a_t)?.value
                } else {
                    let v = mmd_linear(&a_s, &a_t)?.value;
                    inst.lambda * v * v
                }
            }
            TransferLossKind::Cdan | TransferLossKind::CdanE => {
                let disc = inst.disc.as_ref().expect("adversarial instance");
                -inst.lambda * adversarial_value(net, disc, &inst.src_x, &inst.tgt_x, weights)?
            }
        };
        Ok(cls + transfer)
    };
    eval().expect("objective evaluates on sampled instance")
}

fn check_model(method: TransferLossKind, seed: u64, trials: usize) -> Result<CheckReport> {
    let mut report = new_report(&format!("model_{}", method.name()));
    for trial in 0..trials {
        let inst = sample_instance(method, seed, trial)?;
        let weights = if method == TransferLossKind::CdanE {
            frozen_weights(&inst)?
        } else {
            (vec![1.0; inst.src_x.rows()], vec![1.0; inst.tgt_x.rows()])
        };
        let grads = batch_gradients(
            method,
            inst.tap,
            inst.lambda,
            &inst.net,
            inst.disc.as_ref(),
            &inst.src_x,
            &inst.src_y,
            Some(&inst.tgt_x),
        )?;

        // classifier parameters against the reversal-aware objective
        for (li, lg) in grads.classifier.iter().enumerate() {
            for (is_weight, analytic) in [(true, &lg.weight), (false, &lg.bias)] {
                let base = if is_weight {
                    inst.net.layers()[li].weight.clone()
                } else {
                    inst.net.layers()[li].bias.clone()
                };
                let f = |m: &Matrix| {
                    let mut net = inst.net.clone();
                    if is_weight {
                        net.layers_mut()[li].weight = m.clone();
                    } else {
                        net.layers_mut()[li].bias = m.clone();
                    }
                    classifier_objective(method, &inst, &net, &weights)
                };
                let numeric = fd_gradient(f, &base, FD_STEP);
                let (err, i, j) = compare_gradients(analytic, &numeric);
                if err > report.max_error {
                    report.max_error = err;
                    report.worst = Some(WorstEntry {
                        input: li,
                        row: i,
                        col: j,
                        analytic: analytic.get(i, j),
                        numeric: numeric.get(i, j),
                    });
                }
            }
        }

        // discriminator parameters descend the adversarial loss itself
        if let (Some(dgrads), Some(disc)) = (&grads.discriminator, &inst.disc) {
            for (li, lg) in dgrads.iter().enumerate() {
                for (is_weight, analytic) in [(true, &lg.weight), (false, &lg.bias)] {
                    let base = if is_weight {
                        disc.layers()[li].weight.clone()
                    } else {
                        disc.layers()[li].bias.clone()
                    };
                    let f = |m: &Matrix| {
                        let mut d = disc.clone();
                        if is_weight {
                            d.layers_mut()[li].weight = m.clone();
                        } else {
                            d.layers_mut()[li].bias = m.clone();
                        }
                        adversarial_value(&inst.net, &d, &inst.src_x, &inst.tgt_x, &weights)
                            .expect("objective evaluates")
                    };
                    let numeric = fd_gradient(f, &base, FD_STEP);
                    let (err, i, j) = compare_gradients(analytic, &numeric);
                    if err > report.max_error {
                        report.max_error = err;
                        report.worst = Some(WorstEntry {
                            input: li,
                            row: i,
                            col: j,
                            analytic: analytic.get(i, j),
                            numeric: numeric.get(i, j),
                        });
                    }
                }
            }
        }
        report.trials += 1;
    }
    Ok(report)
}

/// Result of the whole gradient-check suite.
#[derive(Debug)]
pub struct SuiteReport {
    pub checks: Vec<CheckReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed())
    }

    pub fn failed_names(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed())
            .map(|c| c.name.as_str())
            .collect()
    }
}

/// Run every gradient check: each loss with analytic gradients, and the
/// end-to-end parameter gradients for every method.
pub fn run_suite(seed: u64, trials: usize) -> Result<SuiteReport> {
    if trials == 0 {
        return Err(Error::Config("gradcheck needs trials >= 1".into()));
    }
    let mut checks = vec![
        check_coral(seed, trials),
        check_mmd_squared(seed, trials),
        check_cross_entropy(seed, trials),
        check_adversarial(seed, trials, false),
        check_adversarial(seed, trials, true),
    ];
    for method in [
        TransferLossKind::None,
        TransferLossKind::Coral,
        TransferLossKind::Mmd,
        TransferLossKind::Cdan,
        TransferLossKind::CdanE,
    ] {
        checks.push(check_model(method, seed, trials)?);
    }
    Ok(SuiteReport { checks })
}
