//! Prediction-time defense: refine the input once per candidate label, score
//! each refined copy under that label, and normalize the scores into a
//! probability assignment plus a confidence measure.
//!
//! For each candidate label `y_i`, the input moves a bounded L-infinity step
//! against the loss of `y_i` (a targeted "make this label fit better" nudge).
//! The defended probability of `y_i` is the model's probability of `y_i` at
//! its own refined point, renormalized across candidates:
//!
//! ```text
//! p_i = softmax(f(refine(x, y_i)))[y_i]      q_i = p_i / sum_j p_j
//! ```
//!
//! The log normalizer `ln sum_j p_j` is reported as the *regret*: it is zero
//! when one hypothesis takes all the mass and grows when several labels can
//! each be made to fit, which is exactly the ambiguity an adversarial
//! perturbation creates.
//!
//! [`end_to_end_forward`] records the same computation on a caller's tape
//! with the refinement wrapped in a straight-through node, giving white-box
//! attackers an honest differentiable view of the full defended pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    batch_input_gradients, bind_constants, class_probs, forward_columns, ModelParams,
};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Settings for per-label refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    /// Total L-infinity budget of the refinement move.
    pub strength: f64,
    /// Number of sign-gradient steps splitting the budget; 1 is a single
    /// full-strength step.
    #[serde(default = "default_refine_iterations")]
    pub iterations: usize,
    /// How many of the model's most probable labels get a hypothesis;
    /// `None` hypothesizes every class.
    #[serde(default)]
    pub candidates: Option<usize>,
}

fn default_refine_iterations() -> usize {
    1
}

impl RefineConfig {
    pub fn new(strength: f64) -> Self {
        Self { strength, iterations: 1, candidates: None }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if !self.strength.is_finite() || self.strength < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "refinement strength {} must be finite and non-negative",
                self.strength
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("refinement needs at least one iteration".into()));
        }
        if let Some(k) = self.candidates {
            if k == 0 || k > n_classes {
                return Err(Error::InvalidArgument(format!(
                    "{k} candidate labels with {n_classes} classes"
                )));
            }
        }
        Ok(())
    }

    /// Candidate count resolved against the class count.
    pub fn n_candidates(&self, n_classes: usize) -> usize {
        self.candidates.unwrap_or(n_classes).min(n_classes)
    }
}

/// The candidate labels refinement will hypothesize for an input with the
/// given base class probabilities: the `k` most probable labels, returned in
/// ascending label order (ties prefer the lower label).
pub fn select_candidates<T: Scalar>(base_probs: &[T], k: usize) -> Vec<usize> {
    let n = base_probs.len();
    if k >= n {
        return (0..n).collect();
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort by descending probability keeps lower labels first on ties.
    order.sort_by(|&a, &b| base_probs[b].partial_cmp(&base_probs[a]).expect("finite probs"));
    let mut chosen: Vec<usize> = order[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Move `x` to better fit `target`: `iterations` sign-gradient descent steps
/// of `strength / iterations` each, so the total move never exceeds
/// `strength` in L-infinity. With `range` given, every step is clamped back
/// into it (the budget constraint still holds since `x` itself is in range).
pub fn refine<T: Scalar>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    target: usize,
    cfg: &RefineConfig,
    range: Option<(T, T)>,
) -> Result<Tensor<T>> {
    let mut refined = refine_per_label(params, x, &[target], cfg, range)?;
    Ok(refined.pop().expect("one refinement per label"))
}

/// Refine one input toward each label in `labels`, advancing all copies in
/// lock step so every iteration is a single batched gradient call.
pub fn refine_per_label<T: Scalar>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &RefineConfig,
    range: Option<(T, T)>,
) -> Result<Vec<Tensor<T>>> {
    let n_classes = params.spec().n_classes();
    cfg.validate(n_classes)?;
    if labels.iter().any(|&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "refinement label out of range for {n_classes} classes"
        )));
    }
    let step = T::from_f64(cfg.strength / cfg.iterations as f64);
    let eps = T::from_f64(cfg.strength);
    let mut refined: Vec<Tensor<T>> = labels.iter().map(|_| x.clone()).collect();
    for _ in 0..cfg.iterations {
        let grads = batch_input_gradients(params, &refined, labels)?;
        for (r, g) in refined.iter_mut().zip(&grads) {
            let moved = r.add_scaled(-step, &g.sign())?;
            *r = moved.clamp_project(x, eps, range)?;
        }
    }
    Ok(refined)
}

/// Model probability of each label at its own refined input, batched through
/// one tape. `refined[i]` is scored under `labels[i]`.
pub fn hypothesis_probs<T: Scalar>(
    params: &ModelParams<T>,
    refined: &[Tensor<T>],
    labels: &[usize],
) -> Result<Vec<T>> {
    if refined.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} refined inputs vs {} labels",
            refined.len(),
            labels.len()
        )));
    }
    let mut tape = Tape::new();
    let bound = bind_constants(&mut tape, params);
    let vars: Vec<Var> = refined.iter().map(|r| tape.constant(r.clone())).collect();
    let cols = forward_columns(&mut tape, params.spec(), &bound, &vars)?;
    let mut out = Vec::with_capacity(labels.len());
    for (j, &y) in labels.iter().enumerate() {
        let lg = tape.col(cols, j)?;
        let probs = tape.softmax(lg)?;
        out.push(tape.value(probs).data()[y]);
    }
    Ok(out)
}

/// Normalize per-hypothesis probabilities: `q_i = p_i / sum p`, and the log
/// normalizer as the regret. Every `p_i` must be a positive finite value.
pub fn pnml_assign<T: Scalar>(probs: &[T]) -> Result<(Vec<T>, T)> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("no hypothesis probabilities".into()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p <= T::zero()) {
        return Err(Error::Domain("hypothesis probability outside (0, 1]".into()));
    }
    let sum = probs.iter().fold(T::zero(), |a, &b| a + b);
    let q = probs.iter().map(|&p| p / sum).collect();
    Ok((q, sum.ln()))
}

/// A defended prediction: the label, its evidence, and the refined inputs
/// behind it.
#[derive(Debug, Clone)]
pub struct PnmlPrediction<T> {
    /// Argmax of `q` (lowest label on ties).
    pub label: usize,
    /// Log normalizer of the hypothesis probabilities; near zero when the
    /// prediction is unambiguous.
    pub regret: T,
    /// Hypothesized labels, ascending.
    pub candidates: Vec<usize>,
    /// `p_i` for each candidate, in candidate order.
    pub probs: Vec<T>,
    /// Normalized assignment over all classes; labels outside the candidate
    /// set get exactly zero.
    pub q: Vec<T>,
    /// The refined input that scored each candidate, in candidate order.
    pub refined: Vec<Tensor<T>>,
}

/// The defended pipeline as a single object: parameters, refinement
/// settings, and the valid input range.
pub struct EndToEndModel<'a, T> {
    pub params: &'a ModelParams<T>,
    pub cfg: &'a RefineConfig,
    pub input_range: Option<(T, T)>,
}

/// The defended pipeline recorded on a tape.
pub struct EndToEndOutput<T> {
    /// Normalized assignment over the candidates, shape `[k]`; entry `i`
    /// scores `candidates[i]`.
    pub q: Var,
    /// Per-hypothesis probabilities `[k]`, before normalization.
    pub probs: Var,
    /// Raw logit columns `[n_classes, k]`; column `i` is the network output
    /// at the input refined toward `candidates[i]`. Attack losses that need
    /// log-probabilities should start here rather than take `ln` of `q`,
    /// which underflows first.
    pub logit_cols: Var,
    /// Hypothesized labels, ascending.
    pub candidates: Vec<usize>,
    /// The refined input behind each candidate's branch, in candidate order.
    /// These are the exact tensors the branches score.
    pub refined: Vec<Tensor<T>>,
}

/// Record the defended forward pass on `tape`, rooted at the input var `x`.
///
/// The refinement itself runs outside the tape (it is an iterative argmin,
/// not an expression); each refined copy re-enters through a
/// straight-through node, so the backward pass treats refinement as the
/// identity. That is the standard differentiable approximation for attacking
/// through preprocessing, and it makes a white-box attack on the defended
/// model honest: the forward values are exact.
pub fn end_to_end_forward<T: Scalar>(
    model: &EndToEndModel<'_, T>,
    x: Var,
    tape: &mut Tape<T>,
) -> Result<EndToEndOutput<T>> {
    let params = model.params;
    let n_classes = params.spec().n_classes();
    model.cfg.validate(n_classes)?;
    let x_now = tape.value(x).clone();

    let k = model.cfg.n_candidates(n_classes);
    let candidates: Vec<usize> = if k >= n_classes {
        (0..n_classes).collect()
    } else {
        let base = class_probs(params, &x_now)?;
        select_candidates(base.data(), k)
    };

    let refined = refine_per_label(params, &x_now, &candidates, model.cfg, model.input_range)?;

    let bound = bind_constants(tape, params);
    let branches: Vec<Var> = refined
        .iter()
        .map(|r| tape.straight_through(x, r.clone()))
        .collect::<Result<_>>()?;
    let cols = forward_columns(tape, params.spec(), &bound, &branches)?;
    let mut picks = Vec::with_capacity(candidates.len());
    for (j, &y) in candidates.iter().enumerate() {
        let lg = tape.col(cols, j)?;
        let probs = tape.softmax(lg)?;
        picks.push(tape.pick(probs, y)?);
    }
    let probs = tape.stack_scalars(&picks)?;
    let total = tape.sum(probs)?;
    let q = tape.div_scalar(probs, total)?;
    Ok(EndToEndOutput { q, probs, logit_cols: cols, candidates, refined })
}

/// Defended prediction for one input. The numbers are read off the same
/// graph [`end_to_end_forward`] records, so a prediction and an attack see
/// bit-identical values.
pub fn pnml_predict<T: Scalar>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    cfg: &RefineConfig,
    input_range: Option<(T, T)>,
) -> Result<PnmlPrediction<T>> {
    let model = EndToEndModel { params, cfg, input_range };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = end_to_end_forward(&model, xv, &mut tape)?;

    let probs = tape.value(out.probs).data().to_vec();
    let q_cand = tape.value(out.q).data().to_vec();
    if probs.iter().any(|p| !p.is_finite() || *p <= T::zero()) {
        return Err(Error::Domain("hypothesis probability outside (0, 1]".into()));
    }
    let sum = probs.iter().fold(T::zero(), |a, &b| a + b);
    let regret = sum.ln();

    let n_classes = params.spec().n_classes();
    let mut q = vec![T::zero(); n_classes];
    for (&label, &qi) in out.candidates.iter().zip(&q_cand) {
        q[label] = qi;
    }
    let label = Tensor::new(vec![n_classes], q.clone())?.argmax();
    Ok(PnmlPrediction { label, regret, candidates: out.candidates, probs, q, refined: out.refined })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bind_constants, forward_single, input_gradient, logits, sample_loss, ModelSpec};
    use crate::rng::{rng, uniform_in};
    use proptest::prelude::*;

    fn mlp_params(seed: u64) -> ModelParams<f64> {
        ModelParams::init(ModelSpec::Mlp { widths: vec![3, 16, 16, 4] }, seed).unwrap()
    }

    fn random_x(seed: u64) -> Tensor<f64> {
        let mut r = rng(seed);
        Tensor::new(vec![3], (0..3).map(|_| uniform_in(&mut r, -1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_strength_defense_is_the_base_classifier() {
        let params = mlp_params(4);
        let cfg = RefineConfig::new(0.0);
        for s in 0..40 {
            let x = random_x(1000 + s);
            let pred = pnml_predict(&params, &x, &cfg, None).unwrap();
            let base = class_probs(&params, &x).unwrap();
            assert_eq!(pred.label, base.argmax(), "sample {s}");
            for (qi, bi) in pred.q.iter().zip(base.data()) {
                assert!((qi - bi).abs() <= 1e-6 * bi.abs().max(1.0), "sample {s}");
            }
            assert!(pred.regret.abs() < 1e-9, "regret {} at zero strength", pred.regret);
            for r in &pred.refined {
                assert_eq!(r, &x);
            }
        }
    }

    #[test]
    fn refinement_decreases_the_target_loss_at_small_strength() {
        let params = mlp_params(9);
        let cfg = RefineConfig { strength: 0.005, iterations: 1, candidates: None };
        let mut improved = 0;
        for s in 0..30 {
            let x = random_x(2000 + s);
            for y in 0..4 {
                let before = sample_loss(&params, &x, y).unwrap();
                let r = refine(&params, &x, y, &cfg, None).unwrap();
                let after = sample_loss(&params, &r, y).unwrap();
                if after < before {
                    improved += 1;
                }
            }
        }
        // A full-strength sign step is first-order optimal; at this scale it
        // should win essentially always.
        assert!(improved >= 115, "only {improved}/120 refinements reduced the loss");
    }

    #[test]
    fn multi_iteration_refinement_spends_the_same_budget() {
        let params = mlp_params(12);
        let x = random_x(5);
        for iters in [1, 2, 4] {
            let cfg = RefineConfig { strength: 0.2, iterations: iters, candidates: None };
            let r = refine(&params, &x, 2, &cfg, None).unwrap();
            assert!(r.linf_dist(&x).unwrap() <= 0.2 + 1e-12, "iters {iters}");
        }
    }

    #[test]
    fn assign_known_values() {
        let (q, regret) = pnml_assign(&[0.5f64, 0.5]).unwrap();
        assert_eq!(q, vec![0.5, 0.5]);
        assert!(regret.abs() < 1e-15);

        let (q, regret) = pnml_assign(&[1.0f64]).unwrap();
        assert_eq!(q, vec![1.0]);
        assert_eq!(regret, 0.0);

        // Two labels both fully claimable: maximal ambiguity for k=2.
        let (q, regret) = pnml_assign(&[1.0f64, 1.0]).unwrap();
        assert_eq!(q, vec![0.5, 0.5]);
        assert!((regret - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn assign_rejects_non_probabilities() {
        assert!(matches!(pnml_assign(&[0.4f64, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(pnml_assign(&[0.4f64, -0.1]), Err(Error::Domain(_))));
        assert!(matches!(pnml_assign(&[f64::NAN, 0.1]), Err(Error::Domain(_))));
        assert!(matches!(pnml_assign::<f64>(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn candidate_selection_takes_top_k_in_label_order() {
        assert_eq!(select_candidates(&[0.1f64, 0.5, 0.4], 2), vec![1, 2]);
        assert_eq!(select_candidates(&[0.3f64, 0.3, 0.2, 0.2], 2), vec![0, 1]);
        assert_eq!(select_candidates(&[0.1f64, 0.9], 5), vec![0, 1]);
        assert_eq!(select_candidates(&[0.25f64; 4], 3), vec![0, 1, 2]);
    }

    #[test]
    fn prediction_and_attack_graph_agree_bitwise() {
        let params = mlp_params(30);
        let cfg = RefineConfig { strength: 0.15, iterations: 2, candidates: None };
        for s in 0..10 {
            let x = random_x(3000 + s);
            let pred = pnml_predict(&params, &x, &cfg, None).unwrap();
            let model = EndToEndModel { params: &params, cfg: &cfg, input_range: None };
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let out = end_to_end_forward(&model, xv, &mut tape).unwrap();
            assert_eq!(out.candidates, pred.candidates);
            for (i, &label) in out.candidates.iter().enumerate() {
                assert_eq!(
                    tape.value(out.q).data()[i].to_bits(),
                    pred.q[label].to_bits(),
                    "sample {s} candidate {label}"
                );
            }
        }
    }

    #[test]
    fn graph_probs_match_independent_hypothesis_scoring() {
        let params = mlp_params(31);
        let cfg = RefineConfig { strength: 0.1, iterations: 1, candidates: None };
        let x = random_x(77);
        let pred = pnml_predict(&params, &x, &cfg, None).unwrap();
        let p2 = hypothesis_probs(&params, &pred.refined, &pred.candidates).unwrap();
        for (a, b) in pred.probs.iter().zip(&p2) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
        // And against fully independent single-sample forwards.
        for (r, (&y, &p)) in pred.refined.iter().zip(pred.candidates.iter().zip(&pred.probs)) {
            let lg = logits(&params, r).unwrap();
            let sm = crate::tensor::softmax_slice(lg.data());
            assert!((sm[y] - p).abs() <= 1e-9 * p.max(1.0));
        }
    }

    #[test]
    fn straight_through_gradient_matches_add_constant_construction() {
        // Oracle: rebuild the defended graph with branch_i = x + (r_i - x) as
        // an add-of-constant, whose backward is the identity by first
        // principles. The straight-through version must produce the same
        // input gradient.
        let params = mlp_params(41);
        let cfg = RefineConfig { strength: 0.2, iterations: 1, candidates: None };
        let x = random_x(55);
        let y = 1usize;

        let model = EndToEndModel { params: &params, cfg: &cfg, input_range: None };
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = end_to_end_forward(&model, xv, &mut tape).unwrap();
        let pos = out.candidates.iter().position(|&c| c == y).unwrap();
        let qy = tape.pick(out.q, pos).unwrap();
        let lq = tape.ln(qy).unwrap();
        let loss = tape.neg(lq);
        let g_st = tape.backward(loss).unwrap().of(xv).clone();

        let refined = refine_per_label(&params, &x, &out.candidates, &cfg, None).unwrap();
        let mut tape2 = Tape::new();
        let xv2 = tape2.leaf(x.clone());
        let bound = bind_constants(&mut tape2, &params);
        let mut picks = Vec::new();
        for (r, &cand) in refined.iter().zip(&out.candidates) {
            let delta = tape2.constant(r.sub(&x).unwrap());
            let branch = tape2.add(xv2, delta).unwrap();
            let lg = forward_single(&mut tape2, params.spec(), &bound, branch).unwrap();
            let probs = tape2.softmax(lg).unwrap();
            picks.push(tape2.pick(probs, cand).unwrap());
        }
        let pv = tape2.stack_scalars(&picks).unwrap();
        let total = tape2.sum(pv).unwrap();
        let q2 = tape2.div_scalar(pv, total).unwrap();
        let qy2 = tape2.pick(q2, pos).unwrap();
        let lq2 = tape2.ln(qy2).unwrap();
        let loss2 = tape2.neg(lq2);
        let g_add = tape2.backward(loss2).unwrap().of(xv2).clone();

        for (a, b) in g_st.data().iter().zip(g_add.data()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn top_k_equal_to_class_count_matches_all_hypotheses() {
        let params = mlp_params(60);
        let x = random_x(60);
        let all = RefineConfig { strength: 0.1, iterations: 1, candidates: None };
        let four = RefineConfig { strength: 0.1, iterations: 1, candidates: Some(4) };
        let a = pnml_predict(&params, &x, &all, None).unwrap();
        let b = pnml_predict(&params, &x, &four, None).unwrap();
        assert_eq!(a.label, b.label);
        assert_eq!(a.candidates, b.candidates);
        for (x, y) in a.q.iter().zip(&b.q) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn refinement_respects_an_input_range() {
        let params = mlp_params(70);
        let mut x = random_x(70);
        // Put a coordinate right at the boundary.
        x.data_mut()[0] = 1.0;
        let cfg = RefineConfig { strength: 0.3, iterations: 2, candidates: None };
        let r = refine(&params, &x, 0, &cfg, Some((-1.0, 1.0))).unwrap();
        assert!(r.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(r.linf_dist(&x).unwrap() <= 0.3 + 1e-12);
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        assert!(RefineConfig { strength: -0.1, iterations: 1, candidates: None }
            .validate(4)
            .is_err());
        assert!(RefineConfig { strength: f64::NAN, iterations: 1, candidates: None }
            .validate(4)
            .is_err());
        assert!(RefineConfig { strength: 0.1, iterations: 0, candidates: None }
            .validate(4)
            .is_err());
        assert!(RefineConfig { strength: 0.1, iterations: 1, candidates: Some(0) }
            .validate(4)
            .is_err());
        assert!(RefineConfig { strength: 0.1, iterations: 1, candidates: Some(5) }
            .validate(4)
            .is_err());
        assert!(RefineConfig::new(0.1).validate(4).is_ok());
    }

    #[test]
    fn gradient_sign_refinement_matches_manual_single_step() {
        // One-iteration refinement is literally x - strength * sign(grad).
        let params = mlp_params(81);
        let x = random_x(81);
        let cfg = RefineConfig::new(0.07);
        let r = refine(&params, &x, 3, &cfg, None).unwrap();
        let g = input_gradient(&params, &x, 3).unwrap();
        let manual = x.add_scaled(-0.07, &g.sign()).unwrap();
        assert_eq!(r, manual);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn assign_is_scale_invariant_in_q_and_shifts_regret(
            probs in proptest::collection::vec(1e-6f64..1.0, 1..8),
            scale in 0.01f64..10.0,
        ) {
            let (q, regret) = pnml_assign(&probs).unwrap();
            let scaled: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            let (q2, regret2) = pnml_assign(&scaled).unwrap();
            let qs: f64 = q.iter().sum();
            prop_assert!((qs - 1.0).abs() < 1e-12);
            for (a, b) in q.iter().zip(&q2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert!((regret2 - regret - scale.ln()).abs() < 1e-9);
        }

        #[test]
        fn assign_permutation_equivariant(
            probs in proptest::collection::vec(1e-6f64..1.0, 2..8),
        ) {
            let (q, regret) = pnml_assign(&probs).unwrap();
            let mut rev = probs.clone();
            rev.reverse();
            let (q_rev, regret_rev) = pnml_assign(&rev).unwrap();
            // Reversal reorders the sum, so equality only holds to rounding.
            prop_assert!((regret - regret_rev).abs() <= 1e-12 * regret.abs().max(1.0));
            for (i, qi) in q.iter().enumerate() {
                prop_assert!((qi - q_rev[rev.len() - 1 - i]).abs() < 1e-14);
            }
        }

        #[test]
        fn refinement_never_leaves_the_budget_ball(
            strength in 0.0f64..0.5,
            iterations in 1usize..4,
            seed in 0u64..50,
        ) {
            let params = mlp_params(7);
            let x = random_x(seed);
            let cfg = RefineConfig { strength, iterations, candidates: None };
            for y in 0..4 {
                let r = refine(&params, &x, y, &cfg, None).unwrap();
                prop_assert!(r.linf_dist(&x).unwrap() <= strength + 1e-12);
            }
        }
    }
}
