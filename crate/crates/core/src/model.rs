//! Classifier definitions: an MLP for low-dimensional point tasks and a
//! two-block convolutional network for 28x28 grayscale images, plus the
//! forward/backward plumbing shared by training, attacks, and the defense.
//!
//! Batching on a single core goes through the *column* layout: a batch is a
//! `[features, B]` matrix built with `stack_cols`, so every fully connected
//! layer is one gemm for the whole batch instead of B matrix-vector
//! products. Convolution trunks run per sample and feed their flattened
//! features into the same column path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng, uniform_in};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{softmax_slice, Tensor};

/// Architecture description; serializable so checkpoints and configs can
/// name the network they expect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Fully connected ReLU stack; `widths` runs input..output.
    Mlp { widths: Vec<usize> },
    /// conv5x5(1->32), pool, conv5x5(32->64), pool, fc 3136->1024, fc 1024->10.
    ///
    /// An empty struct variant: unit variants of internally tagged enums
    /// bypass `deny_unknown_fields`, and configs must reject typos.
    MnistConvNet {},
}

impl ModelSpec {
    /// Stock three-hidden-layer MLP for the two-feature synthetic task.
    pub fn synthetic_default() -> Self {
        ModelSpec::Mlp { widths: vec![2, 64, 64, 64, 2] }
    }

    pub fn mnist_default() -> Self {
        ModelSpec::MnistConvNet {}
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Mlp { widths } => {
                if widths.len() < 2 {
                    return Err(Error::InvalidArgument(
                        "mlp needs at least input and output widths".into(),
                    ));
                }
                if widths.iter().any(|&w| w == 0) {
                    return Err(Error::InvalidArgument("mlp widths must be positive".into()));
                }
                Ok(())
            }
            ModelSpec::MnistConvNet {} => Ok(()),
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ModelSpec::Mlp { widths } => vec![widths[0]],
            ModelSpec::MnistConvNet {} => vec![1, 28, 28],
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            ModelSpec::Mlp { widths } => *widths.last().expect("validated"),
            ModelSpec::MnistConvNet {} => 10,
        }
    }

    /// Parameter tensors in storage order: `(name, shape, fan_in)`.
    /// Weights precede their bias; fan-in drives the init range.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        match self {
            ModelSpec::Mlp { widths } => {
                let mut out = Vec::new();
                for l in 0..widths.len() - 1 {
                    let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                    out.push((format!("fc{l}.w"), vec![fan_out, fan_in], fan_in));
                    out.push((format!("fc{l}.b"), vec![fan_out], fan_in));
                }
                out
            }
            ModelSpec::MnistConvNet {} => vec![
                ("conv1.w".into(), vec![32, 1, 5, 5], 25),
                ("conv1.b".into(), vec![32], 25),
                ("conv2.w".into(), vec![64, 32, 5, 5], 800),
                ("conv2.b".into(), vec![64], 800),
                ("fc1.w".into(), vec![1024, 3136], 3136),
                ("fc1.b".into(), vec![1024], 3136),
                ("fc2.w".into(), vec![10, 1024], 1024),
                ("fc2.b".into(), vec![10], 1024),
            ],
        }
    }
}

/// A model's parameter tensors, in the order fixed by its spec.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    spec: ModelSpec,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Weights drawn from `U[-sqrt(6/fan_in), sqrt(6/fan_in)]`, biases zero.
    /// Parameter tensor `i` uses stream `i` of `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut tensors = Vec::new();
        for (i, (name, shape, fan_in)) in spec.param_layout().into_iter().enumerate() {
            if name.ends_with(".b") {
                tensors.push(Tensor::zeros(shape));
            } else {
                let a = (6.0 / fan_in as f64).sqrt();
                let mut r = rng(derive_seed(seed, i as u64));
                let n: usize = shape.iter().product();
                let data: Vec<T> =
                    (0..n).map(|_| T::from_f64(uniform_in(&mut r, -a, a))).collect();
                tensors.push(Tensor::new(shape, data)?);
            }
        }
        Ok(Self { spec, tensors })
    }

    /// Wrap existing tensors, checking count and shapes against the spec.
    pub fn from_tensors(spec: ModelSpec, tensors: Vec<Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.param_layout();
        if layout.len() != tensors.len() {
            return Err(Error::Consistency(format!(
                "{} tensors for a spec with {} parameters",
                tensors.len(),
                layout.len()
            )));
        }
        for ((name, shape, _), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Consistency(format!(
                    "{name}: shape {:?}, spec wants {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { spec, tensors })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.spec
            .param_layout()
            .iter()
            .position(|(n, _, _)| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            spec: self.spec.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Parameter tensors registered on a tape, in spec order.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Register parameters as differentiable leaves (training).
pub fn bind_leaves<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> BoundParams {
    BoundParams { vars: params.tensors.iter().map(|t| tape.leaf(t.clone())).collect() }
}

/// Register parameters as constants (attacks and inference): backward skips
/// every weight gradient, which roughly halves attack cost.
pub fn bind_constants<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> BoundParams {
    BoundParams { vars: params.tensors.iter().map(|t| tape.constant(t.clone())).collect() }
}

/// Forward a batch of input-shaped vars to a `[n_classes, B]` logit matrix.
pub fn forward_columns<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &ModelSpec,
    bound: &BoundParams,
    xs: &[Var],
) -> Result<Var> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("forward of zero samples".into()));
    }
    let want = spec.input_shape();
    for &x in xs {
        if tape.value(x).shape() != want.as_slice() {
            return Err(Error::Shape(format!(
                "input {:?}, model wants {want:?}",
                tape.value(x).shape()
            )));
        }
    }
    match spec {
        ModelSpec::Mlp { widths } => {
            let mut h = tape.stack_cols(xs)?;
            let layers = widths.len() - 1;
            for l in 0..layers {
                let w = bound.vars[2 * l];
                let b = bound.vars[2 * l + 1];
                h = tape.matmul(w, h)?;
                h = tape.add_col_bias(h, b)?;
                if l + 1 < layers {
                    h = tape.relu(h);
                }
            }
            Ok(h)
        }
        ModelSpec::MnistConvNet {} => {
            let [c1w, c1b, c2w, c2b, f1w, f1b, f2w, f2b] = bound.vars[..] else {
                return Err(Error::Consistency("bound parameter count".into()));
            };
            let mut feats = Vec::with_capacity(xs.len());
            for &x in xs {
                let c1 = tape.conv2d(x, c1w, c1b, 2)?;
                let r1 = tape.relu(c1);
                let p1 = tape.maxpool2d(r1)?;
                let c2 = tape.conv2d(p1, c2w, c2b, 2)?;
                let r2 = tape.relu(c2);
                let p2 = tape.maxpool2d(r2)?;
                feats.push(tape.reshape(p2, vec![64 * 7 * 7])?);
            }
            let mut h = tape.stack_cols(&feats)?;
            h = tape.matmul(f1w, h)?;
            h = tape.add_col_bias(h, f1b)?;
            h = tape.relu(h);
            h = tape.matmul(f2w, h)?;
            h = tape.add_col_bias(h, f2b)?;
            Ok(h)
        }
    }
}

/// Forward one sample to a `[n_classes]` logit vector.
pub fn forward_single<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &ModelSpec,
    bound: &BoundParams,
    x: Var,
) -> Result<Var> {
    let cols = forward_columns(tape, spec, bound, &[x])?;
    tape.col(cols, 0)
}

/// Logits without keeping a tape around.
pub fn logits<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = bind_constants(&mut tape, params);
    let xv = tape.constant(x.clone());
    let out = forward_single(&mut tape, &params.spec, &bound, xv)?;
    Ok(tape.value(out).clone())
}

/// Logits for many samples through one column-batched tape.
pub fn batch_logits<T: Scalar>(
    params: &ModelParams<T>,
    xs: &[Tensor<T>],
) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::new();
    let bound = bind_constants(&mut tape, params);
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let cols = forward_columns(&mut tape, &params.spec, &bound, &vars)?;
    let m = tape.value(cols);
    let n = params.spec.n_classes();
    (0..xs.len())
        .map(|j| {
            let data: Vec<T> = (0..n).map(|i| m.data()[i * xs.len() + j]).collect();
            Tensor::new(vec![n], data)
        })
        .collect()
}

pub fn predict<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>) -> Result<usize> {
    Ok(logits(params, x)?.argmax())
}

/// Softmax class probabilities for one sample.
pub fn class_probs<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let l = logits(params, x)?;
    Tensor::new(vec![l.len()], softmax_slice(l.data()))
}

/// Cross-entropy from an already computed logit vector, in log-sum-exp form.
pub fn cross_entropy_of_logits<T: Scalar>(logits: &Tensor<T>, y: usize) -> Result<T> {
    if logits.shape().len() != 1 || y >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {y} for logits of shape {:?}",
            logits.shape()
        )));
    }
    let data = logits.data();
    let m = data.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
    let sum_exp = data.iter().fold(T::zero(), |acc, &v| acc + (v - m).exp());
    Ok(m + sum_exp.ln() - data[y])
}

/// Cross-entropy loss of one sample.
pub fn sample_loss<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>, y: usize) -> Result<T> {
    let mut tape = Tape::new();
    let bound = bind_constants(&mut tape, params);
    let xv = tape.constant(x.clone());
    let lg = forward_single(&mut tape, &params.spec, &bound, xv)?;
    let loss = tape.softmax_cross_entropy(lg, y)?;
    Ok(tape.value(loss).data()[0])
}

/// Gradient of the cross-entropy loss with respect to the input.
pub fn input_gradient<T: Scalar>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    y: usize,
) -> Result<Tensor<T>> {
    let mut grads = batch_input_gradients(params, std::slice::from_ref(x), &[y])?;
    Ok(grads.pop().expect("one gradient per input"))
}

/// Per-sample input gradients, all through one tape. Sample `i`'s gradient is
/// that of its own loss: the samples are independent, so differentiating the
/// summed loss gives every per-sample gradient at once.
pub fn batch_input_gradients<T: Scalar>(
    params: &ModelParams<T>,
    xs: &[Tensor<T>],
    ys: &[usize],
) -> Result<Vec<Tensor<T>>> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "{} inputs vs {} labels",
            xs.len(),
            ys.len()
        )));
    }
    let mut tape = Tape::new();
    let bound = bind_constants(&mut tape, params);
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
    let cols = forward_columns(&mut tape, &params.spec, &bound, &vars)?;
    let mut losses = Vec::with_capacity(xs.len());
    for (j, &y) in ys.iter().enumerate() {
        let lg = tape.col(cols, j)?;
        losses.push(tape.softmax_cross_entropy(lg, y)?);
    }
    let all = tape.stack_scalars(&losses)?;
    let total = tape.sum(all)?;
    let mut grads = tape.backward(total)?;
    Ok(vars.iter().map(|&v| grads.take(v).expect("leaf gradient")).collect())
}

/// Mean cross-entropy over the batch and its gradient for every parameter
/// tensor, in spec order.
pub fn batch_loss_and_param_grads<T: Scalar>(
    params: &ModelParams<T>,
    xs: &[Tensor<T>],
    ys: &[usize],
) -> Result<(T, Vec<Tensor<T>>)> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "{} inputs vs {} labels",
            xs.len(),
            ys.len()
        )));
    }
    let mut tape = Tape::new();
    let bound = bind_leaves(&mut tape, params);
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let cols = forward_columns(&mut tape, &params.spec, &bound, &vars)?;
    let mut losses = Vec::with_capacity(xs.len());
    for (j, &y) in ys.iter().enumerate() {
        let lg = tape.col(cols, j)?;
        losses.push(tape.softmax_cross_entropy(lg, y)?);
    }
    let all = tape.stack_scalars(&losses)?;
    let total = tape.sum(all)?;
    let mean = tape.scale(total, T::from_f64(1.0 / xs.len() as f64));
    let mut grads = tape.backward(mean)?;
    let out = bound.vars.iter().map(|&v| grads.take(v).expect("leaf gradient")).collect();
    Ok((tape.value(mean).data()[0], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng as mkrng;

    #[test]
    fn param_layout_counts() {
        let conv = ModelSpec::mnist_default();
        let sizes: Vec<usize> = conv
            .param_layout()
            .iter()
            .map(|(_, s, _)| s.iter().product())
            .collect();
        assert_eq!(sizes, vec![800, 32, 51_200, 64, 3_211_264, 1024, 10_240, 10]);
        let p = ModelParams::<f32>::init(conv, 0).unwrap();
        assert_eq!(p.n_params(), 3_274_634);

        let mlp = ModelSpec::synthetic_default();
        let p = ModelParams::<f32>::init(mlp, 0).unwrap();
        assert_eq!(p.n_params(), 192 + 4160 + 4160 + 130);
    }

    #[test]
    fn init_is_deterministic_with_uniform_spread_and_zero_biases() {
        let spec = ModelSpec::Mlp { widths: vec![50, 80, 10] };
        let a = ModelParams::<f64>::init(spec.clone(), 9).unwrap();
        let b = ModelParams::<f64>::init(spec.clone(), 9).unwrap();
        let c = ModelParams::<f64>::init(spec, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);

        for (i, (name, _, fan_in)) in a.spec().param_layout().iter().enumerate() {
            let t = &a.tensors()[i];
            if name.ends_with(".b") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                // var of U[-a,a] is a^2/3 = 2/fan_in
                let n = t.len() as f64;
                let mean: f64 = t.data().iter().sum::<f64>() / n;
                let var: f64 = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let want = 2.0 / *fan_in as f64;
                assert!(
                    (var - want).abs() < 0.2 * want,
                    "{name}: var {var} vs {want}"
                );
                let bound = (6.0 / *fan_in as f64).sqrt();
                assert!(t.data().iter().all(|&v| v.abs() <= bound));
            }
        }
    }

    #[test]
    fn zero_params_give_uniform_probabilities_and_ln_n_loss() {
        let spec = ModelSpec::Mlp { widths: vec![3, 8, 5] };
        let zeros: Vec<Tensor<f64>> = spec
            .param_layout()
            .iter()
            .map(|(_, s, _)| Tensor::zeros(s.clone()))
            .collect();
        let p = ModelParams::from_tensors(spec, zeros).unwrap();
        let x = Tensor::new(vec![3], vec![0.4, -1.0, 2.0]).unwrap();
        let probs = class_probs(&p, &x).unwrap();
        for &q in probs.data() {
            assert!((q - 0.2).abs() < 1e-12);
        }
        let l = sample_loss(&p, &x, 3).unwrap();
        assert!((l - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn from_tensors_rejects_wrong_shapes() {
        let spec = ModelSpec::Mlp { widths: vec![2, 3] };
        assert!(ModelParams::<f32>::from_tensors(spec.clone(), vec![]).is_err());
        let bad = vec![Tensor::<f32>::zeros(vec![3, 3]), Tensor::zeros(vec![3])];
        assert!(ModelParams::from_tensors(spec.clone(), bad).is_err());
        let ok = vec![Tensor::<f32>::zeros(vec![3, 2]), Tensor::zeros(vec![3])];
        assert!(ModelParams::from_tensors(spec, ok).is_ok());
    }

    #[test]
    fn spec_serde_roundtrip_and_validation() {
        let spec = ModelSpec::Mlp { widths: vec![2, 64, 2] };
        let s = serde_json::to_string(&spec).unwrap();
        assert_eq!(s, r#"{"kind":"mlp","widths":[2,64,2]}"#);
        assert_eq!(serde_json::from_str::<ModelSpec>(&s).unwrap(), spec);
        let conv: ModelSpec = serde_json::from_str(r#"{"kind":"mnist_conv_net"}"#).unwrap();
        assert_eq!(conv, ModelSpec::MnistConvNet {});
        assert!(serde_json::from_str::<ModelSpec>(r#"{"kind":"mlp","widths":[2],"extra":1}"#)
            .is_err());
        assert!(ModelSpec::Mlp { widths: vec![2] }.validate().is_err());
        assert!(ModelSpec::Mlp { widths: vec![2, 0, 2] }.validate().is_err());
    }

    fn random_inputs<TFn: Fn(&mut rand_chacha::ChaCha8Rng) -> f64>(
        shape: &[usize],
        n: usize,
        seed: u64,
        gen: TFn,
    ) -> Vec<Tensor<f64>> {
        let mut r = mkrng(seed);
        (0..n)
            .map(|_| {
                let len: usize = shape.iter().product();
                let data: Vec<f64> = (0..len).map(|_| gen(&mut r)).collect();
                Tensor::new(shape.to_vec(), data).unwrap()
            })
            .collect()
    }

    #[test]
    fn batched_forward_matches_single_forward() {
        for spec in [ModelSpec::Mlp { widths: vec![6, 16, 4] }, ModelSpec::MnistConvNet {}] {
            let params = ModelParams::<f32>::init(spec.clone(), 3).unwrap();
            let n = if matches!(spec, ModelSpec::MnistConvNet {}) { 3 } else { 9 };
            let xs: Vec<Tensor<f32>> =
                random_inputs(&spec.input_shape(), n, 50, |r| uniform_in(r, 0.0, 1.0))
                    .into_iter()
                    .map(|t| t.cast())
                    .collect();
            let batched = batch_logits(&params, &xs).unwrap();
            for (x, cols) in xs.iter().zip(&batched) {
                let single = logits(&params, x).unwrap();
                for (a, b) in single.data().iter().zip(cols.data()) {
                    let denom = a.abs().max(b.abs()).max(1.0);
                    assert!(
                        (a - b).abs() <= 1e-6 * denom,
                        "{spec:?}: batched {b} vs single {a}"
                    );
                }
            }
        }
    }

    #[test]
    fn batch_input_gradients_match_one_at_a_time() {
        let spec = ModelSpec::Mlp { widths: vec![4, 12, 3] };
        let params = ModelParams::<f64>::init(spec.clone(), 21).unwrap();
        let xs = random_inputs(&[4], 6, 77, |r| uniform_in(r, -1.0, 1.0));
        let ys = [0, 1, 2, 0, 1, 2];
        let batched = batch_input_gradients(&params, &xs, &ys).unwrap();
        for i in 0..xs.len() {
            let single = input_gradient(&params, &xs[i], ys[i]).unwrap();
            for (a, b) in single.data().iter().zip(batched[i].data()) {
                let denom = a.abs().max(b.abs()).max(1.0);
                assert!((a - b).abs() <= 1e-10 * denom);
            }
        }
    }

    #[test]
    fn mean_loss_param_gradients_are_the_average_of_per_sample_gradients() {
        let spec = ModelSpec::Mlp { widths: vec![3, 7, 2] };
        let params = ModelParams::<f64>::init(spec, 5).unwrap();
        let xs = random_inputs(&[3], 2, 99, |r| uniform_in(r, -1.0, 1.0));
        let (loss01, g01) = batch_loss_and_param_grads(&params, &xs, &[0, 1]).unwrap();
        let (l0, g0) = batch_loss_and_param_grads(&params, &xs[..1], &[0]).unwrap();
        let (l1, g1) = batch_loss_and_param_grads(&params, &xs[1..], &[1]).unwrap();
        assert!((loss01 - 0.5 * (l0 + l1)).abs() < 1e-12);
        for ((m, a), b) in g01.iter().zip(&g0).zip(&g1) {
            for i in 0..m.len() {
                let want = 0.5 * (a.data()[i] + b.data()[i]);
                assert!((m.data()[i] - want).abs() < 1e-12);
            }
        }
    }

    /// Central-difference check of parameter and input gradients through the
    /// full model forward; the oracle only runs forward passes.
    fn fd_check_model(spec: ModelSpec, coords_per_tensor: usize, seed: u64, tol: f64) {
        let params = ModelParams::<f64>::init(spec.clone(), seed).unwrap();
        let x = random_inputs(&spec.input_shape(), 1, seed ^ 1, |r| uniform_in(r, 0.05, 0.95))
            .pop()
            .unwrap();
        let y = 1usize;
        let h = 1e-5;

        let (_, param_grads) = batch_loss_and_param_grads(&params, &[x.clone()], &[y]).unwrap();
        let mut r = mkrng(seed ^ 2);
        for ti in 0..params.tensors().len() {
            let len = params.tensors()[ti].len();
            for _ in 0..coords_per_tensor.min(len) {
                let j = (uniform_in(&mut r, 0.0, 1.0) * len as f64) as usize;
                let j = j.min(len - 1);
                let mut plus = params.clone();
                plus.tensors_mut()[ti].data_mut()[j] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].data_mut()[j] -= h;
                let numeric = (sample_loss(&plus, &x, y).unwrap()
                    - sample_loss(&minus, &x, y).unwrap())
                    / (2.0 * h);
                let analytic = param_grads[ti].data()[j];
                let denom = analytic.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (analytic - numeric).abs() <= tol * denom,
                    "{spec:?} tensor {ti} coord {j}: {analytic} vs {numeric}"
                );
            }
        }

        let xgrad = input_gradient(&params, &x, y).unwrap();
        for _ in 0..coords_per_tensor {
            let j = (uniform_in(&mut r, 0.0, 1.0) * x.len() as f64) as usize;
            let j = j.min(x.len() - 1);
            let mut plus = x.clone();
            plus.data_mut()[j] += h;
            let mut minus = x.clone();
            minus.data_mut()[j] -= h;
            let numeric = (sample_loss(&params, &plus, y).unwrap()
                - sample_loss(&params, &minus, y).unwrap())
                / (2.0 * h);
            let analytic = xgrad.data()[j];
            let denom = analytic.abs().max(numeric.abs()).max(1.0);
            assert!(
                (analytic - numeric).abs() <= tol * denom,
                "{spec:?} input coord {j}: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        fd_check_model(ModelSpec::Mlp { widths: vec![3, 10, 6, 2] }, 40, 11, 1e-6);
    }

    #[test]
    fn convnet_gradients_match_finite_differences() {
        // Sampled coordinates: the full net has 3.27M parameters.
        fd_check_model(ModelSpec::MnistConvNet {}, 6, 13, 1e-4);
    }

    #[test]
    fn predict_is_argmax_of_logits() {
        let spec = ModelSpec::Mlp { widths: vec![2, 10, 4] };
        let params = ModelParams::<f32>::init(spec, 1).unwrap();
        let x = Tensor::new(vec![2], vec![0.3f32, -0.8]).unwrap();
        let l = logits(&params, &x).unwrap();
        assert_eq!(predict(&params, &x).unwrap(), l.argmax());
    }
}
