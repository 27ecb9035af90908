//! Minimal dense network with explicit forward and backward passes.
//!
//! The encoder is a stack of dense layers with rectified hidden activations
//! and a linear final layer; the head is a single dense layer followed by a
//! row-wise softmax. All math is double precision and deterministic, and
//! parameter updates return new values instead of mutating in place.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::RealMatrix;

/// Probabilities are clamped to at least this value before taking logs.
pub const PROB_EPSILON: f64 = 1e-12;

/// One dense layer: `output = input * weight + bias`, weight is `in_dim x out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: RealMatrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn zeros_like(&self) -> DenseLayer {
        DenseLayer {
            weight: RealMatrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// Encoder parameters: a layer stack whose final output width is the feature
/// dimension. Hidden layers are rectified, the final layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<DenseLayer>,
}

impl EncoderParams {
    /// Feature dimension produced by the final layer. Zero-layer encoders act
    /// as the identity, so the caller's input width is the feature width.
    pub fn feature_dim(&self) -> Option<usize> {
        self.layers.last().map(DenseLayer::out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.values().len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    fn zeros_like(&self) -> EncoderParams {
        EncoderParams {
            layers: self.layers.iter().map(DenseLayer::zeros_like).collect(),
        }
    }
}

/// Classifier head: `D x num_classes` weights plus one bias per class.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub weight: RealMatrix,
    pub bias: Vec<f64>,
}

impl HeadParams {
    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.values().len() + self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }

    fn zeros_like(&self) -> HeadParams {
        HeadParams {
            weight: RealMatrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// Gradient of a scalar loss with respect to every encoder and head
/// parameter; each field mirrors the shape of the parameter it differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGradient {
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

impl NetworkGradient {
    pub fn zeros_like(theta: &EncoderParams, omega: &HeadParams) -> NetworkGradient {
        NetworkGradient {
            encoder: theta.zeros_like(),
            head: omega.zeros_like(),
        }
    }
}

/// Layer widths of a network, used to build seeded initializations.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl NetSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, feature_dim: usize) -> NetSpec {
        NetSpec {
            input_dim,
            hidden,
            feature_dim,
        }
    }

    /// Seeded encoder init: weights uniform in `+-sqrt(6 / (fan_in + fan_out))`,
    /// biases zero.
    pub fn init_encoder(&self, seed: u64) -> EncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.init_encoder_with(&mut rng)
    }

    pub fn init_encoder_with(&self, rng: &mut ChaCha8Rng) -> EncoderParams {
        let mut widths = vec![self.input_dim];
        widths.extend_from_slice(&self.hidden);
        widths.push(self.feature_dim);
        let layers = widths
            .windows(2)
            .map(|w| init_layer(w[0], w[1], rng))
            .collect();
        EncoderParams { layers }
    }

    /// Seeded head init over `num_classes` outputs.
    pub fn init_head(&self, num_classes: usize, seed: u64) -> Result<HeadParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.init_head_with(num_classes, &mut rng)
    }

    pub fn init_head_with(&self, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<HeadParams> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "head needs at least 2 classes, got {num_classes}"
            )));
        }
        let layer = init_layer(self.feature_dim, num_classes, rng);
        Ok(HeadParams {
            weight: layer.weight,
            bias: layer.bias,
        })
    }
}

fn init_layer(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> DenseLayer {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let values = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
    DenseLayer {
        weight: RealMatrix::new(in_dim, out_dim, values).expect("allocated length matches"),
        bias: vec![0.0; out_dim],
    }
}

/// `input * weight + bias` for a row-major batch.
fn affine(input: &RealMatrix, layer: &DenseLayer) -> Result<RealMatrix> {
    if input.cols() != layer.in_dim() {
        return Err(Error::Shape(format!(
            "layer expects {} inputs, batch has {} columns",
            layer.in_dim(),
            input.cols()
        )));
    }
    let (rows, inner, cols) = (input.rows(), layer.in_dim(), layer.out_dim());
    let mut out = RealMatrix::zeros(rows, cols);
    for r in 0..rows {
        let x = input.row(r);
        for c in 0..cols {
            let mut sum = layer.bias[c];
            for (k, &xk) in x.iter().enumerate().take(inner) {
                sum += xk * layer.weight.get(k, c);
            }
            out.set(r, c, sum);
        }
    }
    Ok(out)
}

/// Activations after every encoder layer, starting with the input batch.
/// Hidden layers are rectified; the final layer stays linear.
fn encoder_trace(theta: &EncoderParams, batch: &RealMatrix) -> Result<Vec<RealMatrix>> {
    let mut acts = Vec::with_capacity(theta.layers.len() + 1);
    acts.push(batch.clone());
    for (i, layer) in theta.layers.iter().enumerate() {
        let mut z = affine(acts.last().expect("nonempty"), layer)?;
        if i + 1 < theta.layers.len() {
            for v in z.values_mut() {
                *v = v.max(0.0);
            }
        }
        acts.push(z);
    }
    Ok(acts)
}

/// Maps a batch (`batch_size x input_dim`) to features (`batch_size x D`).
pub fn forward_features(theta: &EncoderParams, batch: &RealMatrix) -> Result<RealMatrix> {
    Ok(encoder_trace(theta, batch)?.pop().expect("nonempty trace"))
}

/// Raw class scores before the softmax.
pub fn forward_logits(omega: &HeadParams, features: &RealMatrix) -> Result<RealMatrix> {
    let layer = DenseLayer {
        weight: omega.weight.clone(),
        bias: omega.bias.clone(),
    };
    affine(features, &layer)
}

/// Class probabilities: row-wise softmax of the head output. Each row is
/// nonnegative and sums to 1 within 1e-12.
pub fn forward_head(omega: &HeadParams, features: &RealMatrix) -> Result<RealMatrix> {
    let mut logits = forward_logits(omega, features)?;
    let cols = logits.cols();
    for r in 0..logits.rows() {
        let row_max = logits
            .row(r)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..cols {
            let e = (logits.get(r, c) - row_max).exp();
            logits.set(r, c, e);
            sum += e;
        }
        for c in 0..cols {
            logits.set(r, c, logits.get(r, c) / sum);
        }
    }
    Ok(logits)
}

/// Mean negative log-probability of the true class, plus the gradient of that
/// mean with respect to the logits: `(probs - labels) / batch_size`.
/// Probabilities below [`PROB_EPSILON`] are clamped before the log.
pub fn cross_entropy(probs: &RealMatrix, labels: &RealMatrix) -> Result<(f64, RealMatrix)> {
    if probs.rows() != labels.rows() || probs.cols() != labels.cols() {
        return Err(Error::Shape(format!(
            "probs {}x{} vs labels {}x{}",
            probs.rows(),
            probs.cols(),
            labels.rows(),
            labels.cols()
        )));
    }
    if probs.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let batch = probs.rows() as f64;
    let mut loss = 0.0;
    let mut grad = RealMatrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        for c in 0..probs.cols() {
            let y = labels.get(r, c);
            if y != 0.0 {
                loss += -probs.get(r, c).max(PROB_EPSILON).ln() * y;
            }
            grad.set(r, c, (probs.get(r, c) - y) / batch);
        }
    }
    Ok((loss / batch, grad))
}

/// Mean squared error over all entries, with its gradient
/// `2 (output - target) / entry_count`.
pub fn reconstruction_loss(output: &RealMatrix, target: &RealMatrix) -> Result<(f64, RealMatrix)> {
    if output.rows() != target.rows() || output.cols() != target.cols() {
        return Err(Error::Shape(format!(
            "output {}x{} vs target {}x{}",
            output.rows(),
            output.cols(),
            target.rows(),
            target.cols()
        )));
    }
    let count = output.values().len();
    if count == 0 {
        return Err(Error::InvalidArgument("empty matrices".into()));
    }
    let n = count as f64;
    let mut loss = 0.0;
    let mut grad = RealMatrix::zeros(output.rows(), output.cols());
    for (i, (&o, &t)) in output.values().iter().zip(target.values()).enumerate() {
        let d = o - t;
        loss += d * d;
        grad.values_mut()[i] = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// Backpropagates `grad_wrt_output` through the encoder alone, returning
/// gradient layers shaped like `theta`.
pub fn backward_features(
    theta: &EncoderParams,
    batch: &RealMatrix,
    grad_wrt_output: &RealMatrix,
) -> Result<EncoderParams> {
    let acts = encoder_trace(theta, batch)?;
    encoder_backward(theta, &acts, grad_wrt_output.clone())
}

fn encoder_backward(
    theta: &EncoderParams,
    acts: &[RealMatrix],
    grad_out: RealMatrix,
) -> Result<EncoderParams> {
    let n_layers = theta.layers.len();
    let mut grads: Vec<DenseLayer> = theta.layers.iter().map(DenseLayer::zeros_like).collect();
    let mut upstream = grad_out;
    for l in (0..n_layers).rev() {
        let layer = &theta.layers[l];
        let post = &acts[l + 1];
        if upstream.rows() != post.rows() || upstream.cols() != post.cols() {
            return Err(Error::Shape(format!(
                "upstream gradient {}x{} vs activation {}x{}",
                upstream.rows(),
                upstream.cols(),
                post.rows(),
                post.cols()
            )));
        }
        // Hidden layers were rectified; gate the gradient on the kept units.
        let mut grad_z = upstream;
        if l + 1 < n_layers {
            for r in 0..grad_z.rows() {
                for c in 0..grad_z.cols() {
                    if post.get(r, c) <= 0.0 {
                        grad_z.set(r, c, 0.0);
                    }
                }
            }
        }
        let input = &acts[l];
        let g = &mut grads[l];
        for r in 0..grad_z.rows() {
            let x = input.row(r);
            let gz = grad_z.row(r);
            for (c, &gzc) in gz.iter().enumerate() {
                g.bias[c] += gzc;
                for (k, &xk) in x.iter().enumerate() {
                    let cur = g.weight.get(k, c);
                    g.weight.set(k, c, cur + xk * gzc);
                }
            }
        }
        let mut grad_in = RealMatrix::zeros(grad_z.rows(), layer.in_dim());
        for r in 0..grad_z.rows() {
            let gz = grad_z.row(r);
            for k in 0..layer.in_dim() {
                let mut sum = 0.0;
                for (c, &gzc) in gz.iter().enumerate() {
                    sum += gzc * layer.weight.get(k, c);
                }
                grad_in.set(r, k, sum);
            }
        }
        upstream = grad_in;
    }
    Ok(EncoderParams { layers: grads })
}

/// Exact reverse-mode gradient of a scalar loss with respect to every
/// parameter, given the loss gradient at the head logits.
pub fn backward(
    theta: &EncoderParams,
    omega: &HeadParams,
    batch: &RealMatrix,
    grad_wrt_logits: &RealMatrix,
) -> Result<NetworkGradient> {
    let acts = encoder_trace(theta, batch)?;
    let features = acts.last().expect("nonempty trace");
    if grad_wrt_logits.rows() != features.rows()
        || grad_wrt_logits.cols() != omega.num_classes()
        || features.cols() != omega.feature_dim()
    {
        return Err(Error::Shape(format!(
            "logit gradient {}x{} does not match head {}x{} on {} features",
            grad_wrt_logits.rows(),
            grad_wrt_logits.cols(),
            omega.feature_dim(),
            omega.num_classes(),
            features.cols()
        )));
    }

    let mut head_grad = omega.zeros_like();
    for r in 0..features.rows() {
        let f = features.row(r);
        let g = grad_wrt_logits.row(r);
        for (c, &gc) in g.iter().enumerate() {
            head_grad.bias[c] += gc;
            for (k, &fk) in f.iter().enumerate() {
                let cur = head_grad.weight.get(k, c);
                head_grad.weight.set(k, c, cur + fk * gc);
            }
        }
    }

    let mut grad_features = RealMatrix::zeros(features.rows(), omega.feature_dim());
    for r in 0..features.rows() {
        let g = grad_wrt_logits.row(r);
        for k in 0..omega.feature_dim() {
            let mut sum = 0.0;
            for (c, &gc) in g.iter().enumerate() {
                sum += gc * omega.weight.get(k, c);
            }
            grad_features.set(r, k, sum);
        }
    }

    let encoder = encoder_backward(theta, &acts, grad_features)?;
    Ok(NetworkGradient {
        encoder,
        head: head_grad,
    })
}

/// One plain gradient-descent step: `params' = params - lr * grad`.
pub fn sgd_step(
    theta: &EncoderParams,
    omega: &HeadParams,
    grad: &NetworkGradient,
    lr: f64,
) -> (EncoderParams, HeadParams) {
    (
        sgd_step_encoder(theta, &grad.encoder, lr),
        HeadParams {
            weight: step_matrix(&omega.weight, &grad.head.weight, lr),
            bias: step_vector(&omega.bias, &grad.head.bias, lr),
        },
    )
}

/// Encoder-only variant of [`sgd_step`].
pub fn sgd_step_encoder(theta: &EncoderParams, grad: &EncoderParams, lr: f64) -> EncoderParams {
    let layers = theta
        .layers
        .iter()
        .zip(&grad.layers)
        .map(|(p, g)| DenseLayer {
            weight: step_matrix(&p.weight, &g.weight, lr),
            bias: step_vector(&p.bias, &g.bias, lr),
        })
        .collect();
    EncoderParams { layers }
}

fn step_matrix(param: &RealMatrix, grad: &RealMatrix, lr: f64) -> RealMatrix {
    let values = param
        .values()
        .iter()
        .zip(grad.values())
        .map(|(p, g)| p - lr * g)
        .collect();
    RealMatrix::new(param.rows(), param.cols(), values).expect("congruent shapes")
}

fn step_vector(param: &[f64], grad: &[f64], lr: f64) -> Vec<f64> {
    param.iter().zip(grad).map(|(p, g)| p - lr * g).collect()
}

/// Loss used by [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckLoss {
    /// Softmax head + mean cross-entropy against one-hot labels.
    CrossEntropy,
    /// Linear head + mean squared error against real targets.
    SquaredError,
}

fn check_loss_and_grad(
    theta: &EncoderParams,
    omega: &HeadParams,
    batch: &RealMatrix,
    targets: &RealMatrix,
    loss: CheckLoss,
) -> Result<(f64, RealMatrix)> {
    let features = forward_features(theta, batch)?;
    match loss {
        CheckLoss::CrossEntropy => {
            let probs = forward_head(omega, &features)?;
            cross_entropy(&probs, targets)
        }
        CheckLoss::SquaredError => {
            let out = forward_logits(omega, &features)?;
            reconstruction_loss(&out, targets)
        }
    }
}

/// Compares the analytic gradient of every parameter against a central finite
/// difference with the given step, returning the worst relative error
/// (`|a - n| / max(|a|, |n|, 1)`). Returns 0 when there is nothing to
/// differentiate.
pub fn gradient_check(
    theta: &EncoderParams,
    omega: &HeadParams,
    batch: &RealMatrix,
    targets: &RealMatrix,
    loss: CheckLoss,
    step: f64,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let total = theta.param_count() + omega.param_count();
    if total == 0 {
        return Ok(0.0);
    }

    let (_, grad_logits) = check_loss_and_grad(theta, omega, batch, targets, loss)?;
    let analytic = flatten_gradient(&backward(theta, omega, batch, &grad_logits)?);

    let base = flatten_params(theta, omega);
    let mut worst: f64 = 0.0;
    for i in 0..total {
        let mut plus = base.clone();
        plus[i] += step;
        let (tp, op) = unflatten_like(theta, omega, &plus);
        let loss_plus = check_loss_and_grad(&tp, &op, batch, targets, loss)?.0;

        let mut minus = base.clone();
        minus[i] -= step;
        let (tm, om) = unflatten_like(theta, omega, &minus);
        let loss_minus = check_loss_and_grad(&tm, &om, batch, targets, loss)?.0;

        let numeric = (loss_plus - loss_minus) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Flattens encoder then head parameters into one vector, layer by layer,
/// weights before biases.
pub fn flatten_params(theta: &EncoderParams, omega: &HeadParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(theta.param_count() + omega.param_count());
    for layer in &theta.layers {
        out.extend_from_slice(layer.weight.values());
        out.extend_from_slice(&layer.bias);
    }
    out.extend_from_slice(omega.weight.values());
    out.extend_from_slice(&omega.bias);
    out
}

/// Same flattening order as [`flatten_params`].
pub fn flatten_gradient(grad: &NetworkGradient) -> Vec<f64> {
    flatten_params(&grad.encoder, &grad.head)
}

/// Rebuilds `(theta, omega)` shaped like the templates from a flat vector.
///
/// Panics if `flat` has the wrong length; flat vectors only come from
/// [`flatten_params`] over the same templates.
pub fn unflatten_like(
    theta: &EncoderParams,
    omega: &HeadParams,
    flat: &[f64],
) -> (EncoderParams, HeadParams) {
    assert_eq!(
        flat.len(),
        theta.param_count() + omega.param_count(),
        "flat parameter vector has the wrong length"
    );
    let mut pos = 0;
    let mut take = |n: usize| {
        let slice = &flat[pos..pos + n];
        pos += n;
        slice.to_vec()
    };
    let layers = theta
        .layers
        .iter()
        .map(|l| DenseLayer {
            weight: RealMatrix::new(l.weight.rows(), l.weight.cols(), take(l.weight.values().len()))
                .expect("template shape"),
            bias: take(l.bias.len()),
        })
        .collect();
    let head = HeadParams {
        weight: RealMatrix::new(
            omega.weight.rows(),
            omega.weight.cols(),
            take(omega.weight.values().len()),
        )
        .expect("template shape"),
        bias: take(omega.bias.len()),
    };
    (EncoderParams { layers }, head)
}

/// One-hot encodes integer class labels.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<RealMatrix> {
    let mut m = RealMatrix::zeros(labels.len(), num_classes);
    for (r, &c) in labels.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label {c} out of range for {num_classes} classes"
            )));
        }
        m.set(r, c, 1.0);
    }
    Ok(m)
}
