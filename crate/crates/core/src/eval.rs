//! Accuracy measurement under a battery of attacks.
//!
//! One evaluation scores a model, optionally wrapped in the refinement
//! defense, against a list of attack rows. Each row crafts its own
//! perturbed copy of the test set and reports accuracy on those points:
//!
//! * `Natural` leaves the data alone.
//! * `Fgsm` and `Pgd` craft against the base network; scoring the defense on
//!   those same points measures transfer.
//! * `Adaptive` crafts against the defended pipeline itself (straight-through
//!   gradients) and requires a defense.
//! * `Hsja` sees only decisions of the evaluated pipeline (defended when a
//!   defense is configured). A sample counts as broken when the search finds
//!   a misclassified point within the row's L-infinity threshold.
//!
//! Every row derives its randomness from stream `2000 + row` of the
//! evaluation seed; reruns with the same seed reproduce every number except
//! wall-clock times exactly.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::hsja::{hsja, HsjaConfig};
use crate::attack::{adaptive_pgd, pgd_batch, AttackConfig, AttackMode, GRAD_CHUNK};
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::model::{batch_input_gradients, batch_logits, predict, ModelParams};
use crate::pnml::{pnml_predict, EndToEndModel, RefineConfig};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One attack row of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalAttack {
    /// Row label carried into reports.
    pub name: String,
    pub kind: EvalAttackKind,
    /// Cap this row to the first n samples. Expensive rows (the decision
    /// attack in particular) can run on a subset while cheap rows cover the
    /// full set; the row's accuracy denominator shrinks accordingly.
    #[serde(default)]
    pub samples: Option<usize>,
}

/// The attack a row runs. Seeds inside attack configs are ignored here;
/// evaluation replaces them with its own per-row streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "attack", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalAttackKind {
    /// No perturbation. An empty struct variant: unit variants of
    /// internally tagged enums bypass `deny_unknown_fields`, and configs
    /// must reject typos.
    Natural {},
    Fgsm { epsilon: f64 },
    Pgd { config: AttackConfig },
    Adaptive { config: AttackConfig },
    Hsja { config: HsjaConfig, epsilon: f64 },
}

impl EvalAttackKind {
    /// The L-infinity budget the row reports.
    pub fn epsilon(&self) -> f64 {
        match self {
            EvalAttackKind::Natural {} => 0.0,
            EvalAttackKind::Fgsm { epsilon } => *epsilon,
            EvalAttackKind::Pgd { config } | EvalAttackKind::Adaptive { config } => config.epsilon,
            EvalAttackKind::Hsja { epsilon, .. } => *epsilon,
        }
    }
}

/// Per-sample record of one row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    /// Index into the evaluated set.
    pub index: usize,
    pub label: usize,
    /// Base-network prediction at this row's point.
    pub base_pred: usize,
    /// Defended prediction at this row's point, when a defense is set.
    pub defended_pred: Option<usize>,
    /// Defense regret (log normalizer) at this row's point.
    pub regret: Option<f64>,
    /// Full normalized assignment at this row's point.
    pub q: Option<Vec<f64>>,
    /// Distance of the decision attack's best point, when the row is one.
    pub l2: Option<f64>,
}

/// Aggregates for one attack row.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub name: String,
    pub epsilon: f64,
    /// Accuracy of the evaluated pipeline (defended when a defense is set)
    /// on this row's points.
    pub accuracy: f64,
    /// Accuracy of the bare network on the same points.
    pub base_accuracy: f64,
    pub mean_regret: Option<f64>,
    /// Median distance over samples where the decision attack found a point.
    pub median_l2: Option<f64>,
    /// Informational only; excluded from reproducibility comparisons.
    pub wall_seconds: f64,
    pub samples: Vec<SampleOutcome>,
}

/// Everything one evaluation produced.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Echo of the defense settings the evaluation ran with.
    pub defense: Option<RefineConfig>,
    pub rows: Vec<AttackOutcome>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Craft this row's points. Returns the per-sample points plus, for the
/// decision attack, the distance at which each sample broke (infinite when
/// the search found nothing).
fn row_points<T: Scalar>(
    params: &ModelParams<T>,
    data: &LabeledSet<T>,
    kind: &EvalAttackKind,
    defense: Option<&RefineConfig>,
    range: Option<(T, T)>,
    row_seed: u64,
) -> Result<(Vec<Tensor<T>>, Option<Vec<f64>>)> {
    let n = data.len();
    match kind {
        EvalAttackKind::Natural {} => {
            Ok(((0..n).map(|i| data.input(i).clone()).collect(), None))
        }
        EvalAttackKind::Fgsm { epsilon } => {
            if !epsilon.is_finite() || *epsilon < 0.0 {
                return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be >= 0")));
            }
            let eps = T::from_f64(*epsilon);
            let mut points = Vec::with_capacity(n);
            for lo in (0..n).step_by(GRAD_CHUNK) {
                let hi = (lo + GRAD_CHUNK).min(n);
                let xs: Vec<Tensor<T>> = (lo..hi).map(|i| data.input(i).clone()).collect();
                let ys: Vec<usize> = (lo..hi).map(|i| data.label(i)).collect();
                let grads = batch_input_gradients(params, &xs, &ys)?;
                for (x, g) in xs.iter().zip(grads) {
                    points.push(x.add_scaled(eps, &g.sign())?.clamp_project(x, eps, range)?);
                }
            }
            Ok((points, None))
        }
        EvalAttackKind::Pgd { config } => {
            let mut cfg = config.clone();
            cfg.seed = row_seed;
            cfg.mode = AttackMode::Untargeted;
            let xs: Vec<Tensor<T>> = (0..n).map(|i| data.input(i).clone()).collect();
            let outcomes = pgd_batch(params, &xs, data.labels(), &cfg, range)?;
            Ok((outcomes.into_iter().map(|o| o.adversarial).collect(), None))
        }
        EvalAttackKind::Adaptive { config } => {
            let refine = defense.ok_or_else(|| {
                Error::InvalidArgument(
                    "the adaptive row attacks the defense; configure one".into(),
                )
            })?;
            let model = EndToEndModel { params, cfg: refine, input_range: range };
            let mut cfg = config.clone();
            cfg.mode = AttackMode::Untargeted;
            let mut points = Vec::with_capacity(n);
            for i in 0..n {
                cfg.seed = derive_seed(row_seed, i as u64);
                let out = adaptive_pgd(&model, data.input(i), data.label(i), &cfg)?;
                points.push(out.adversarial);
            }
            Ok((points, None))
        }
        EvalAttackKind::Hsja { config, .. } => {
            let mut points = Vec::with_capacity(n);
            let mut dists = Vec::with_capacity(n);
            for i in 0..n {
                let x = data.input(i);
                let y = data.label(i);
                let mut oracle = |p: &Tensor<T>| -> Result<bool> {
                    match defense {
                        Some(refine) => Ok(pnml_predict(params, p, refine, range)?.label != y),
                        None => Ok(predict(params, p)? != y),
                    }
                };
                let mut cfg = config.clone();
                cfg.seed = derive_seed(row_seed, i as u64);
                let out = hsja(x, &mut oracle, &cfg, range, None)?;
                dists.push(out.l2);
                points.push(out.adversarial.unwrap_or_else(|| x.clone()));
            }
            Ok((points, Some(dists)))
        }
    }
}

/// Score a model, and optionally the defense wrapped around it, under each
/// attack row. `range` is the valid input range, used both for projecting
/// attacks and for the defense's own refinement clamp.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    data: &LabeledSet<T>,
    attacks: &[EvalAttack],
    defense: Option<&RefineConfig>,
    range: Option<(T, T)>,
    seed: u64,
) -> Result<EvalReport> {
    if data.n_classes() != params.spec().n_classes() {
        return Err(Error::InvalidArgument(format!(
            "data has {} classes, model {}",
            data.n_classes(),
            params.spec().n_classes()
        )));
    }
    let mut rows = Vec::with_capacity(attacks.len());
    for (row, attack) in attacks.iter().enumerate() {
        let started = Instant::now();
        let row_seed = derive_seed(seed, 2000 + row as u64);
        let capped;
        let data = match attack.samples {
            Some(cap) => {
                capped = data.first_n(cap)?;
                &capped
            }
            None => data,
        };
        let n = data.len();
        let (points, hsja_dists) =
            row_points(params, data, &attack.kind, defense, range, row_seed)?;

        let mut base_preds = Vec::with_capacity(n);
        for lo in (0..n).step_by(GRAD_CHUNK) {
            let hi = (lo + GRAD_CHUNK).min(n);
            for lg in batch_logits(params, &points[lo..hi])? {
                base_preds.push(lg.argmax());
            }
        }

        let mut samples = Vec::with_capacity(n);
        let mut base_correct = 0usize;
        let mut pipeline_correct = 0usize;
        let mut regret_sum = 0.0;
        for i in 0..n {
            let y = data.label(i);
            let base_pred = base_preds[i];
            if base_pred == y {
                base_correct += 1;
            }
            let (defended_pred, regret, q) = match defense {
                Some(refine) => {
                    let p = pnml_predict(params, &points[i], refine, range)?;
                    regret_sum += p.regret.to_f64();
                    (
                        Some(p.label),
                        Some(p.regret.to_f64()),
                        Some(p.q.iter().map(|&v| v.to_f64()).collect::<Vec<f64>>()),
                    )
                }
                None => (None, None, None),
            };
            let pipeline_pred = defended_pred.unwrap_or(base_pred);
            let correct = match (&attack.kind, &hsja_dists) {
                // The decision attack breaks a sample only when its point is
                // both found and within the row's budget.
                (EvalAttackKind::Hsja { epsilon, .. }, Some(dists)) => {
                    !(dists[i].is_finite()
                        && points[i].linf_dist(data.input(i))?.to_f64() <= *epsilon + 1e-12)
                }
                _ => pipeline_pred == y,
            };
            if correct {
                pipeline_correct += 1;
            }
            samples.push(SampleOutcome {
                index: i,
                label: y,
                base_pred,
                defended_pred,
                regret,
                q,
                l2: hsja_dists.as_ref().map(|d| d[i]),
            });
        }

        let median_l2 = hsja_dists.as_ref().and_then(|d| {
            let mut found: Vec<f64> = d.iter().copied().filter(|v| v.is_finite()).collect();
            if found.is_empty() {
                None
            } else {
                found.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
                Some(median(&found))
            }
        });
        rows.push(AttackOutcome {
            name: attack.name.clone(),
            epsilon: attack.kind.epsilon(),
            accuracy: pipeline_correct as f64 / n as f64,
            base_accuracy: base_correct as f64 / n as f64,
            mean_regret: defense.map(|_| regret_sum / n as f64),
            median_l2,
            wall_seconds: started.elapsed().as_secs_f64(),
            samples,
        });
    }
    Ok(EvalReport { defense: defense.cloned(), rows })
}
