//! White-box evasion attacks under an L-infinity budget.
//!
//! All attacks perturb an input within an epsilon ball around the original
//! point, intersected with the valid input range when one is given. The
//! gradient-based attacks here come in two flavors:
//!
//! * [`fgsm`] and [`pgd`] attack the base network directly. Points they
//!   produce can also be replayed against the refinement defense to measure
//!   transfer.
//! * [`adaptive_pgd`] attacks the defended pipeline end to end. The
//!   refinement step is not an expression, so its backward pass is taken as
//!   the identity (a straight-through estimator) while forward values stay
//!   exact.
//!
//! [`hsja`](crate::attack::hsja) is the decision-only attack: it sees nothing
//! but top-label answers.

pub mod hsja;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{batch_input_gradients, batch_logits, cross_entropy_of_logits, ModelParams};
use crate::pnml::{end_to_end_forward, EndToEndModel};
use crate::rng::{derive_seed, rng, uniform_in};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// How many samples advance through one shared tape at a time. Bounds peak
/// memory for convolutional inputs while keeping the matrix products wide.
pub(crate) const GRAD_CHUNK: usize = 64;

/// What the attack tries to make the model say.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AttackMode {
    /// Push the input away from its true label.
    #[default]
    Untargeted,
    /// Pull the input toward the given label.
    Targeted(usize),
}

/// Shared knobs for the gradient attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// L-infinity budget around the original input.
    pub epsilon: f64,
    /// Per-iteration step length.
    pub step_size: f64,
    /// Gradient steps per restart.
    pub iterations: usize,
    /// Independent restarts; the final iterate with the best objective wins.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// Start each restart from a uniform point in the ball instead of the
    /// original input.
    #[serde(default = "default_random_start")]
    pub random_start: bool,
    /// Untargeted or targeted.
    #[serde(default)]
    pub mode: AttackMode,
    /// Base seed; sample `i` draws from stream `i`, restart `r` of a sample
    /// from stream `r` of that sample's seed.
    #[serde(default)]
    pub seed: u64,
}

fn default_restarts() -> usize {
    1
}

fn default_random_start() -> bool {
    true
}

impl AttackConfig {
    pub fn new(epsilon: f64, step_size: f64, iterations: usize, seed: u64) -> Self {
        AttackConfig {
            epsilon,
            step_size,
            iterations,
            restarts: 1,
            random_start: true,
            mode: AttackMode::Untargeted,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::InvalidArgument(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if !self.step_size.is_finite() || self.step_size <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "step size {} must be > 0",
                self.step_size
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("attack needs at least one iteration".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidArgument("attack needs at least one restart".into()));
        }
        Ok(())
    }
}

/// Outcome of one attacked sample.
#[derive(Debug, Clone)]
pub struct AttackResult<T> {
    /// The chosen perturbed input.
    pub adversarial: Tensor<T>,
    /// Attack objective at that point (cross-entropy of the true label, or
    /// its negation toward a target). Restart selection maximizes this.
    pub objective: f64,
    /// Whether the base model now mispredicts (untargeted) or predicts the
    /// target (targeted).
    pub success: bool,
}

/// Label whose loss gradient drives the attack, and the sign of the ascent.
fn grad_label_and_dir<T: Scalar>(mode: AttackMode, y: usize) -> (usize, T) {
    match mode {
        AttackMode::Untargeted => (y, T::one()),
        AttackMode::Targeted(t) => (t, -T::one()),
    }
}

fn objective_of_logits<T: Scalar>(logits: &Tensor<T>, mode: AttackMode, y: usize) -> Result<f64> {
    let v = match mode {
        AttackMode::Untargeted => cross_entropy_of_logits(logits, y)?,
        AttackMode::Targeted(t) => -cross_entropy_of_logits(logits, t)?,
    };
    let v = v.to_f64();
    // NaN never wins a restart comparison; map it below every real value.
    Ok(if v.is_nan() { f64::NEG_INFINITY } else { v })
}

fn success_of_logits<T: Scalar>(logits: &Tensor<T>, mode: AttackMode, y: usize) -> bool {
    match mode {
        AttackMode::Untargeted => logits.argmax() != y,
        AttackMode::Targeted(t) => logits.argmax() == t,
    }
}

/// One-shot fast gradient sign attack.
///
/// Takes a single signed gradient step of length `epsilon` and projects into
/// the valid range. Equivalent to [`pgd`] with one iteration, a step of
/// `epsilon`, and no random start.
pub fn fgsm<T: Scalar>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    y: usize,
    epsilon: f64,
    mode: AttackMode,
    range: Option<(T, T)>,
) -> Result<AttackResult<T>> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be >= 0")));
    }
    let (label, dir) = grad_label_and_dir::<T>(mode, y);
    let g = crate::model::input_gradient(params, x, label)?;
    let eps = T::from_f64(epsilon);
    let adv = x.add_scaled(dir * eps, &g.sign())?.clamp_project(x, eps, range)?;
    let logits = batch_logits(params, std::slice::from_ref(&adv))?.pop().expect("one row");
    Ok(AttackResult {
        objective: objective_of_logits(&logits, mode, y)?,
        success: success_of_logits(&logits, mode, y),
        adversarial: adv,
    })
}

/// Projected gradient descent against the base model, one sample.
///
/// Identical to [`pgd_batch`] on a single-element slice; the batch version is
/// the primitive so both paths share every arithmetic step.
pub fn pgd<T: Scalar>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    y: usize,
    cfg: &AttackConfig,
    range: Option<(T, T)>,
) -> Result<AttackResult<T>> {
    let mut out = pgd_batch(params, std::slice::from_ref(x), &[y], cfg, range)?;
    Ok(out.pop().expect("one result per input"))
}

/// Projected gradient descent over a batch of samples.
///
/// Every restart starts a sample from `x + u`, `u` uniform in the epsilon
/// ball (when `random_start` is set), ascends the objective by signed
/// gradient steps, and projects into ball and range after every step. Across
/// restarts the final iterate with the strictly largest objective is kept,
/// earliest restart winning ties.
///
/// Sample `i` derives its randomness from stream `i` of `cfg.seed`: a
/// sample's result depends on its position in the batch but never on the
/// other samples' contents, so truncating or extending a batch leaves
/// earlier results untouched.
pub fn pgd_batch<T: Scalar>(
    params: &ModelParams<T>,
    xs: &[Tensor<T>],
    ys: &[usize],
    cfg: &AttackConfig,
    range: Option<(T, T)>,
) -> Result<Vec<AttackResult<T>>> {
    cfg.validate()?;
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!("{} inputs vs {} labels", xs.len(), ys.len())));
    }
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let n = xs.len();
    let eps = T::from_f64(cfg.epsilon);
    let alpha = T::from_f64(cfg.step_size);
    let mut grad_labels = Vec::with_capacity(n);
    let mut dirs = Vec::with_capacity(n);
    for &y in ys {
        let (label, dir) = grad_label_and_dir::<T>(cfg.mode, y);
        grad_labels.push(label);
        dirs.push(dir);
    }

    let mut best: Vec<Option<(f64, Tensor<T>)>> = vec![None; n];
    for r in 0..cfg.restarts {
        let mut cur: Vec<Tensor<T>> = Vec::with_capacity(n);
        for (i, x) in xs.iter().enumerate() {
            if cfg.random_start {
                let sample_seed = derive_seed(cfg.seed, i as u64);
                let mut rr = rng(derive_seed(sample_seed, r as u64));
                let noise: Vec<f64> =
                    (0..x.len()).map(|_| uniform_in(&mut rr, -cfg.epsilon, cfg.epsilon)).collect();
                let start = x.add(&Tensor::from_f64_slice(x.shape().to_vec(), &noise)?)?;
                cur.push(start.clamp_project(x, eps, range)?);
            } else {
                cur.push(x.clone());
            }
        }

        for _ in 0..cfg.iterations {
            for lo in (0..n).step_by(GRAD_CHUNK) {
                let hi = (lo + GRAD_CHUNK).min(n);
                let grads = batch_input_gradients(params, &cur[lo..hi], &grad_labels[lo..hi])?;
                for (off, g) in grads.into_iter().enumerate() {
                    let i = lo + off;
                    let stepped = cur[i].add_scaled(dirs[i] * alpha, &g.sign())?;
                    cur[i] = stepped.clamp_project(&xs[i], eps, range)?;
                }
            }
        }

        for lo in (0..n).step_by(GRAD_CHUNK) {
            let hi = (lo + GRAD_CHUNK).min(n);
            let logits = batch_logits(params, &cur[lo..hi])?;
            for (off, lg) in logits.into_iter().enumerate() {
                let i = lo + off;
                let obj = objective_of_logits(&lg, cfg.mode, ys[i])?;
                let better = match &best[i] {
                    Some((cur_best, _)) => obj > *cur_best,
                    None => true,
                };
                if better {
                    best[i] = Some((obj, std::mem::replace(&mut cur[i], Tensor::scalar(T::zero()))));
                }
            }
        }
    }

    let chosen: Vec<(f64, Tensor<T>)> =
        best.into_iter().map(|b| b.expect("every restart records an objective")).collect();
    let mut results = Vec::with_capacity(n);
    for lo in (0..n).step_by(GRAD_CHUNK) {
        let hi = (lo + GRAD_CHUNK).min(n);
        let advs: Vec<Tensor<T>> = chosen[lo..hi].iter().map(|(_, a)| a.clone()).collect();
        let logits = batch_logits(params, &advs)?;
        for (off, lg) in logits.into_iter().enumerate() {
            let i = lo + off;
            results.push(AttackResult {
                adversarial: chosen[i].1.clone(),
                objective: chosen[i].0,
                success: success_of_logits(&lg, cfg.mode, ys[i]),
            });
        }
    }
    Ok(results)
}

/// Projected gradient descent against the defended pipeline.
///
/// The loss being ascended is the negative log of the normalized assignment
/// the defense gives the true label, computed in log-sum-exp form:
/// `-ln q_y = ce(logits_y, y) + ln sum_j p_j`, where `logits_y` is the
/// network output at the input refined toward `y`. Gradients flow through
/// the refinement via straight-through nodes, so each step differentiates
/// the exact forward values the defense itself produces.
///
/// Requires the refinement config to hypothesize every label (the true label
/// must own a branch) and only supports untargeted mode.
pub fn adaptive_pgd<T: Scalar>(
    model: &EndToEndModel<'_, T>,
    x: &Tensor<T>,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult<T>> {
    cfg.validate()?;
    let n_classes = model.params.spec().n_classes();
    if model.cfg.n_candidates(n_classes) < n_classes {
        return Err(Error::InvalidArgument(
            "adaptive attack needs a hypothesis for every label; \
             configure the defense with all candidates"
                .into(),
        ));
    }
    if y >= n_classes {
        return Err(Error::InvalidArgument(format!("label {y} for {n_classes} classes")));
    }
    if cfg.mode != AttackMode::Untargeted {
        return Err(Error::InvalidArgument("adaptive attack is untargeted only".into()));
    }
    let eps = T::from_f64(cfg.epsilon);
    let alpha = T::from_f64(cfg.step_size);
    let range = model.input_range;

    // Loss of the defended pipeline at a point, with its input gradient.
    let eval = |pt: &Tensor<T>, want_grad: bool| -> Result<(f64, Option<Tensor<T>>)> {
        let mut tape = Tape::new();
        let xv = if want_grad { tape.leaf(pt.clone()) } else { tape.constant(pt.clone()) };
        let out = end_to_end_forward(model, xv, &mut tape)?;
        let branch = tape.col(out.logit_cols, y)?;
        let ce = tape.softmax_cross_entropy(branch, y)?;
        let total = tape.sum(out.probs)?;
        let ln_total = tape.ln(total)?;
        let loss = tape.add(ce, ln_total)?;
        let value = tape.value(loss).data()[0].to_f64();
        let value = if value.is_nan() { f64::NEG_INFINITY } else { value };
        let grad = if want_grad { Some(tape.backward(loss)?.of(xv).clone()) } else { None };
        Ok((value, grad))
    };

    let mut best: Option<(f64, Tensor<T>)> = None;
    for r in 0..cfg.restarts {
        let mut cur = if cfg.random_start {
            let sample_seed = derive_seed(cfg.seed, 0);
            let mut rr = rng(derive_seed(sample_seed, r as u64));
            let noise: Vec<f64> =
                (0..x.len()).map(|_| uniform_in(&mut rr, -cfg.epsilon, cfg.epsilon)).collect();
            x.add(&Tensor::from_f64_slice(x.shape().to_vec(), &noise)?)?
                .clamp_project(x, eps, range)?
        } else {
            x.clone()
        };

        for _ in 0..cfg.iterations {
            let (_, grad) = eval(&cur, true)?;
            let g = grad.expect("gradient requested");
            let stepped = cur.add_scaled(alpha, &g.sign())?;
            cur = stepped.clamp_project(x, eps, range)?;
        }

        let (obj, _) = eval(&cur, false)?;
        let better = match &best {
            Some((cur_best, _)) => obj > *cur_best,
            None => true,
        };
        if better {
            best = Some((obj, cur));
        }
    }

    let (objective, adversarial) = best.expect("at least one restart");
    let verdict = crate::pnml::pnml_predict(model.params, &adversarial, model.cfg, range)?;
    Ok(AttackResult { adversarial, objective, success: verdict.label != y })
}
