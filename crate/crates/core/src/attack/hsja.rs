//! Decision-only attack: find a nearby misclassified point given nothing
//! but top-label answers.
//!
//! The attacker holds a clean input and an oracle that says whether a point
//! is misclassified. It walks the decision boundary toward the clean input:
//! binary-search to the boundary, estimate the boundary normal from random
//! probes, step along it, repeat. Every oracle call is counted against a
//! hard budget, and the best (smallest L2) misclassified point ever queried
//! is what comes back, so the answer only improves with more budget.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng, standard_normal, uniform_in};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Knobs for the boundary walk.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HsjaConfig {
    /// Hard cap on oracle calls. The attack stops mid-phase when it runs out.
    pub query_budget: usize,
    /// L-infinity width at which the boundary binary search stops.
    #[serde(default = "default_boundary_tol")]
    pub boundary_tol: f64,
    /// Probe count baseline; round `t` uses `grad_samples * sqrt(t)` probes.
    #[serde(default = "default_grad_samples")]
    pub grad_samples: usize,
    /// Upper bound on boundary-walk rounds; the budget usually binds first.
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_boundary_tol() -> f64 {
    1e-3
}

fn default_grad_samples() -> usize {
    100
}

fn default_max_rounds() -> usize {
    10_000
}

impl HsjaConfig {
    pub fn new(query_budget: usize, seed: u64) -> Self {
        HsjaConfig {
            query_budget,
            boundary_tol: 1e-3,
            grad_samples: 100,
            max_rounds: 10_000,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_budget == 0 {
            return Err(Error::InvalidArgument("query budget must be positive".into()));
        }
        if !self.boundary_tol.is_finite() || self.boundary_tol <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "boundary tolerance {} must be > 0",
                self.boundary_tol
            )));
        }
        if self.grad_samples == 0 {
            return Err(Error::InvalidArgument("need at least one probe per round".into()));
        }
        if self.max_rounds == 0 {
            return Err(Error::InvalidArgument("need at least one round".into()));
        }
        Ok(())
    }
}

/// What the walk found.
#[derive(Debug, Clone)]
pub struct HsjaResult<T> {
    /// Smallest-L2 misclassified point among everything queried, if any
    /// query at all came back misclassified.
    pub adversarial: Option<Tensor<T>>,
    /// Its L2 distance from the clean input; infinity when none was found.
    pub l2: f64,
    /// Oracle calls actually spent.
    pub queries: usize,
    /// Boundary-walk rounds completed.
    pub rounds: usize,
}

/// Budget-enforcing wrapper that remembers the best adversarial point seen.
struct CountingOracle<'a, T, F> {
    f: &'a mut F,
    clean: &'a Tensor<T>,
    queries: usize,
    budget: usize,
    best: Option<(f64, Tensor<T>)>,
}

impl<'a, T: Scalar, F: FnMut(&Tensor<T>) -> Result<bool>> CountingOracle<'a, T, F> {
    /// `Ok(None)` means the budget is spent; the caller must wind down.
    fn ask(&mut self, p: &Tensor<T>) -> Result<Option<bool>> {
        if self.queries >= self.budget {
            return Ok(None);
        }
        self.queries += 1;
        let adversarial = (self.f)(p)?;
        if adversarial {
            let d = p.l2_dist(self.clean)?.to_f64();
            if self.best.as_ref().is_none_or(|(b, _)| d < *b) {
                self.best = Some((d, p.clone()));
            }
        }
        Ok(Some(adversarial))
    }
}

fn clamp_into_range<T: Scalar>(t: Tensor<T>, range: Option<(T, T)>) -> Tensor<T> {
    match range {
        Some((lo, hi)) => t.map(|v| v.max(lo).min(hi)),
        None => t,
    }
}

/// Binary-search the segment from the clean input to an adversarial point
/// down to the decision boundary. Returns the adversarial-side endpoint.
fn boundary_search<T: Scalar, F: FnMut(&Tensor<T>) -> Result<bool>>(
    o: &mut CountingOracle<'_, T, F>,
    clean: &Tensor<T>,
    adv: Tensor<T>,
    tol: f64,
) -> Result<Tensor<T>> {
    let mut lo = clean.clone();
    let mut hi = adv;
    while hi.linf_dist(&lo)?.to_f64() > tol {
        let mid = lo.add(&hi)?.scale(T::from_f64(0.5));
        match o.ask(&mid)? {
            None => break,
            Some(true) => hi = mid,
            Some(false) => lo = mid,
        }
    }
    Ok(hi)
}

/// Run the boundary walk for one input.
///
/// `oracle` answers "is this point misclassified" and is the only window the
/// attack has into the model. `init` optionally supplies a starting
/// misclassified point; otherwise the attack samples uniformly in `range`
/// (which is then required). All randomness derives from `cfg.seed` and is
/// consumed in a fixed order, so a fixed config replays exactly.
pub fn hsja<T: Scalar, F: FnMut(&Tensor<T>) -> Result<bool>>(
    x: &Tensor<T>,
    mut oracle: F,
    cfg: &HsjaConfig,
    range: Option<(T, T)>,
    init: Option<&Tensor<T>>,
) -> Result<HsjaResult<T>> {
    cfg.validate()?;
    let dim = x.len();
    let mut o = CountingOracle {
        f: &mut oracle,
        clean: x,
        queries: 0,
        budget: cfg.query_budget,
        best: None,
    };
    let mut r = rng(derive_seed(cfg.seed, 0));
    let finish = |o: CountingOracle<'_, T, F>, rounds: usize| {
        let (l2, adversarial) = match o.best {
            Some((d, p)) => (d, Some(p)),
            None => (f64::INFINITY, None),
        };
        HsjaResult { adversarial, l2, queries: o.queries, rounds }
    };

    // Already misclassified: nothing to do.
    if o.ask(x)? == Some(true) {
        return Ok(finish(o, 0));
    }

    // Find any misclassified point to start from.
    let mut start = None;
    if let Some(p) = init {
        if p.shape() != x.shape() {
            return Err(Error::Shape(format!(
                "init point shape {:?} vs input shape {:?}",
                p.shape(),
                x.shape()
            )));
        }
        if o.ask(p)? == Some(true) {
            start = Some(p.clone());
        }
    }
    if start.is_none() {
        let (lo, hi) = range.ok_or_else(|| {
            Error::InvalidArgument(
                "random initialization needs an input range; pass one or supply init".into(),
            )
        })?;
        let (lo, hi) = (lo.to_f64(), hi.to_f64());
        loop {
            let draw: Vec<f64> = (0..dim).map(|_| uniform_in(&mut r, lo, hi)).collect();
            let p = Tensor::from_f64_slice(x.shape().to_vec(), &draw)?;
            match o.ask(&p)? {
                None => return Ok(finish(o, 0)),
                Some(true) => {
                    start = Some(p);
                    break;
                }
                Some(false) => {}
            }
        }
    }

    let mut cur = boundary_search(&mut o, x, start.expect("set above"), cfg.boundary_tol)?;
    let mut rounds = 0;
    'walk: for t in 1..=cfg.max_rounds {
        if o.queries >= o.budget {
            break;
        }
        let dist = cur.l2_dist(x)?.to_f64();
        if dist <= cfg.boundary_tol {
            break;
        }

        // Estimate the boundary normal from +/-1 probe answers around cur.
        let delta = dist / dim as f64;
        let n_probes = ((cfg.grad_samples as f64) * (t as f64).sqrt()) as usize;
        let n_probes = n_probes.max(1).min(o.budget - o.queries);
        let mut dirs: Vec<Tensor<T>> = Vec::with_capacity(n_probes);
        let mut signs: Vec<f64> = Vec::with_capacity(n_probes);
        for _ in 0..n_probes {
            let raw: Vec<f64> = (0..dim).map(|_| standard_normal(&mut r)).collect();
            let u = Tensor::from_f64_slice(x.shape().to_vec(), &raw)?;
            let norm = u.l2_norm();
            if norm <= T::zero() {
                continue;
            }
            let u = u.scale(T::one() / norm);
            let probe =
                clamp_into_range(cur.add_scaled(T::from_f64(delta), &u)?, range);
            match o.ask(&probe)? {
                None => break 'walk,
                Some(a) => {
                    signs.push(if a { 1.0 } else { -1.0 });
                    dirs.push(u);
                }
            }
        }
        if dirs.is_empty() {
            break;
        }
        let mean = signs.iter().sum::<f64>() / signs.len() as f64;
        let mut v = Tensor::<T>::zeros(x.shape().to_vec());
        if mean >= 1.0 || mean <= -1.0 {
            // Every probe agreed; the mean-centered estimate would vanish.
            for u in &dirs {
                v = v.add_scaled(T::from_f64(mean / dirs.len() as f64), u)?;
            }
        } else {
            for (u, s) in dirs.iter().zip(&signs) {
                v = v.add_scaled(T::from_f64((s - mean) / dirs.len() as f64), u)?;
            }
        }
        let vnorm = v.l2_norm();
        if vnorm <= T::zero() {
            continue;
        }
        let dir = v.scale(T::one() / vnorm);

        // Step along the estimated normal, halving until misclassified again.
        let mut step = dist / (t as f64).sqrt();
        let mut landed = None;
        while step * step > f64::EPSILON * dist.max(1.0) {
            let cand = clamp_into_range(cur.add_scaled(T::from_f64(step), &dir)?, range);
            match o.ask(&cand)? {
                None => break 'walk,
                Some(true) => {
                    landed = Some(cand);
                    break;
                }
                Some(false) => step *= 0.5,
            }
        }
        if let Some(cand) = landed {
            cur = boundary_search(&mut o, x, cand, cfg.boundary_tol)?;
        }
        rounds = t;
    }

    Ok(finish(o, rounds))
}
