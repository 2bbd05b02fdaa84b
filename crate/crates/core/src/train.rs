//! Minibatch SGD with optional adversarial example generation.
//!
//! Training walks shuffled minibatches, optionally replaces each batch with
//! adversarial copies crafted against the current parameters, and applies
//! momentum SGD with weight decay. Every random choice derives from the
//! config seed through fixed streams, so a training run replays bit for bit.

use serde::{Deserialize, Serialize};

use crate::attack::{adaptive_pgd, pgd_batch, AttackConfig, AttackMode};
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::model::{batch_logits, batch_loss_and_param_grads, ModelParams};
use crate::pnml::{EndToEndModel, RefineConfig};
use crate::rng::{derive_seed, rng, shuffle};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Budget of the attack run against each training batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainAttack {
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    #[serde(default = "default_true")]
    pub random_start: bool,
}

fn default_true() -> bool {
    true
}

impl TrainAttack {
    pub fn new(epsilon: f64, step_size: f64, iterations: usize) -> Self {
        TrainAttack { epsilon, step_size, iterations, random_start: true }
    }

    fn to_attack_config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            step_size: self.step_size,
            iterations: self.iterations,
            restarts: 1,
            random_start: self.random_start,
            mode: AttackMode::Untargeted,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.to_attack_config(0).validate()
    }
}

/// What the training batches are made of.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainAdversary {
    /// Plain empirical risk minimization. An empty struct variant: unit
    /// variants of internally tagged enums bypass `deny_unknown_fields`,
    /// and configs must reject typos.
    Clean {},
    /// Replace every batch with projected-gradient adversarial copies.
    /// The first `warmup_epochs` epochs ramp the attack in (see
    /// [`warmup_attack`]); robust training from random parameters stalls in
    /// a uniform-logits saddle when the very first batches already carry a
    /// full-strength attack.
    Pgd {
        attack: TrainAttack,
        #[serde(default)]
        warmup_epochs: usize,
    },
    /// Projected-gradient batches first, then from `switch_epoch` on craft
    /// the batches against the refinement defense itself, so the network
    /// learns to resist attacks that see through the defense.
    AdaptiveFinetune { attack: TrainAttack, refine: RefineConfig, switch_epoch: usize },
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `(epoch, lr)` overrides; from each listed epoch on, that rate applies.
    /// Must be sorted by epoch.
    #[serde(default)]
    pub schedule: Vec<(usize, f64)>,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub adversary: TrainAdversary,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be > 0",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "weight decay {} must be >= 0",
                self.weight_decay
            )));
        }
        for w in self.schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidArgument(
                    "schedule epochs must be strictly increasing".into(),
                ));
            }
        }
        if let Some((_, lr)) = self.schedule.iter().find(|(_, lr)| !lr.is_finite() || *lr <= 0.0) {
            return Err(Error::InvalidArgument(format!("scheduled rate {lr} must be > 0")));
        }
        match &self.adversary {
            TrainAdversary::Clean {} => Ok(()),
            TrainAdversary::Pgd { attack, .. } => attack.validate(),
            TrainAdversary::AdaptiveFinetune { attack, refine, .. } => {
                attack.validate()?;
                // Hypothesis count is checked against the model at train time.
                if !(refine.strength.is_finite() && refine.strength >= 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "refinement strength {} must be >= 0",
                        refine.strength
                    )));
                }
                Ok(())
            }
        }
    }

    /// The learning rate in force at a given epoch.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        let mut lr = self.learning_rate;
        for &(e, r) in &self.schedule {
            if e <= epoch {
                lr = r;
            }
        }
        lr
    }
}

/// Per-epoch aggregates. Loss and accuracy are measured on the batches the
/// optimizer actually saw: adversarial copies when an adversary is active,
/// evaluated against the pre-update parameters. That makes the accuracy
/// column a running robustness proxy, not a held-out measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

/// One momentum-SGD update: `v <- m v + g + wd p`, `p <- p - lr v`.
pub fn sgd_step<T: Scalar>(
    params: &mut [Tensor<T>],
    velocity: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    lr: T,
    momentum: T,
    weight_decay: T,
) -> Result<()> {
    if params.len() != velocity.len() || params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} params vs {} velocity vs {} grads",
            params.len(),
            velocity.len(),
            grads.len()
        )));
    }
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = v.scale(momentum).add(g)?.add_scaled(weight_decay, p)?;
        *p = p.add_scaled(-lr, v)?;
    }
    Ok(())
}

/// Shuffle `0..n` and cut it into batches of `batch_size` (last one may be
/// short). The shuffle consumes `rng` in a fixed order.
pub fn index_batches(
    n: usize,
    batch_size: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(rng, &mut idx);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// The projected-gradient budget in force at `epoch` when the first
/// `warmup` epochs ramp the attack in. Epoch `e < warmup` scales the radius
/// and step size by `(e + 1) / (warmup + 1)` and prunes the step count
/// proportionally (always at least one); every later epoch attacks at full
/// strength. The ramp is a pure function of the epoch index, so it changes
/// nothing about replayability.
pub fn warmup_attack(attack: &TrainAttack, warmup: usize, epoch: usize) -> TrainAttack {
    if epoch >= warmup {
        return attack.clone();
    }
    let s = (epoch + 1) as f64 / (warmup + 1) as f64;
    TrainAttack {
        epsilon: attack.epsilon * s,
        step_size: attack.step_size * s,
        iterations: ((attack.iterations as f64 * s).ceil() as usize).max(1),
        random_start: attack.random_start,
    }
}

enum ActiveAdversary<'a> {
    Clean,
    Pgd(TrainAttack),
    Adaptive(&'a TrainAttack, &'a RefineConfig),
}

fn adversary_at<'a>(adv: &'a TrainAdversary, epoch: usize) -> ActiveAdversary<'a> {
    match adv {
        TrainAdversary::Clean {} => ActiveAdversary::Clean,
        TrainAdversary::Pgd { attack, warmup_epochs } => {
            ActiveAdversary::Pgd(warmup_attack(attack, *warmup_epochs, epoch))
        }
        TrainAdversary::AdaptiveFinetune { attack, refine, switch_epoch } => {
            if epoch < *switch_epoch {
                ActiveAdversary::Pgd(attack.clone())
            } else {
                ActiveAdversary::Adaptive(attack, refine)
            }
        }
    }
}

/// Train in place. `range` is the valid input range adversarial batches are
/// projected into; pass the data's natural bounds.
///
/// Seed streams: epoch `e` shuffles with stream `1000 + e`; the attack on
/// batch `b` of that epoch seeds from stream `b` of the epoch seed, and
/// inside a batch sample `i` uses stream `i` (see
/// [`pgd_batch`](crate::attack::pgd_batch)).
pub fn train<T: Scalar>(
    params: &mut ModelParams<T>,
    data: &LabeledSet<T>,
    cfg: &TrainConfig,
    range: Option<(T, T)>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.n_classes() != params.spec().n_classes() {
        return Err(Error::InvalidArgument(format!(
            "data has {} classes, model {}",
            data.n_classes(),
            params.spec().n_classes()
        )));
    }
    let mut velocity: Vec<Tensor<T>> =
        params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let lr = T::from_f64(cfg.rate_at(epoch));
        let momentum = T::from_f64(cfg.momentum);
        let weight_decay = T::from_f64(cfg.weight_decay);
        let epoch_seed = derive_seed(cfg.seed, 1000 + epoch as u64);
        let mut shuffle_rng = rng(epoch_seed);
        let batches = index_batches(data.len(), cfg.batch_size, &mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let mut xs: Vec<Tensor<T>> = batch.iter().map(|&i| data.input(i).clone()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
            let batch_seed = derive_seed(epoch_seed, bi as u64);

            match adversary_at(&cfg.adversary, epoch) {
                ActiveAdversary::Clean => {
                    let logits = batch_logits(params, &xs)?;
                    correct +=
                        logits.iter().zip(&ys).filter(|(lg, &y)| lg.argmax() == y).count();
                }
                ActiveAdversary::Pgd(attack) => {
                    let acfg = attack.to_attack_config(batch_seed);
                    let outcomes = pgd_batch(params, &xs, &ys, &acfg, range)?;
                    correct += outcomes.iter().filter(|o| !o.success).count();
                    xs = outcomes.into_iter().map(|o| o.adversarial).collect();
                }
                ActiveAdversary::Adaptive(attack, refine) => {
                    let model = EndToEndModel { params, cfg: refine, input_range: range };
                    for (i, x) in xs.iter_mut().enumerate() {
                        let acfg = attack.to_attack_config(derive_seed(batch_seed, i as u64));
                        let out = adaptive_pgd(&model, x, ys[i], &acfg)?;
                        if !out.success {
                            correct += 1;
                        }
                        *x = out.adversarial;
                    }
                }
            }

            let (loss, grads) = batch_loss_and_param_grads(params, &xs, &ys)?;
            let loss = loss.to_f64();
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("non-finite batch loss {loss}"),
                });
            }
            loss_sum += loss * xs.len() as f64;
            sgd_step(params.tensors_mut(), &mut velocity, &grads, lr, momentum, weight_decay)?;
        }

        log.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(log)
}
