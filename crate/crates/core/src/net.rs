//! Fully connected networks with exact derivatives of both the output
//! and the *input gradient* with respect to the parameters.
//!
//! The second capability is what makes generating-function training
//! work: the loss depends on `grad_x S(x)` rather than on `S` itself,
//! so its parameter gradient is a second-order quantity. It is
//! computed here without finite differences by running a forward
//! tangent sweep along a fixed direction `r` and then reverse mode
//! over the augmented graph, which yields `grad_theta (r . grad_x S)`
//! at roughly four times the cost of one forward pass.

use crate::error::{Error, Result};
use crate::parutil::ordered_shard_sum;
use crate::state::TrainingPair;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Hidden-layer activation. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => {
                // Stable for large |x|.
                if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// First derivative, written in terms of the activation value `a`.
    /// Every supported activation admits this form, which lets the
    /// backward passes reuse the cached forward values.
    pub fn deriv_from_value(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
            // a = softplus(z) implies sigmoid(z) = 1 - exp(-a).
            Activation::Softplus => 1.0 - (-a).exp(),
        }
    }

    /// Second derivative in terms of the activation value `a`.
    pub fn second_deriv_from_value(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * a * (1.0 - a * a),
            Activation::Sigmoid => a * (1.0 - a) * (1.0 - 2.0 * a),
            Activation::Softplus => {
                let s = 1.0 - (-a).exp();
                s * (1.0 - s)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "softplus" => Ok(Activation::Softplus),
            other => Err(Error::InvalidConfig(format!(
                "unknown activation {other:?} (expected tanh, sigmoid or softplus)"
            ))),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient of a scalar network with respect to its two input blocks.
/// For `S(q, P)`, `d1` is the gradient in `q` and `d2` in `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrad {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

/// Multilayer perceptron with a linear output layer.
///
/// `dims` lists the width of every layer including input and output,
/// e.g. `[2, 64, 64, 1]`. Weight matrices are stored row-major with
/// shape `dims[k+1] x dims[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamNet {
    dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
}

impl ParamNet {
    /// Xavier-uniform initialization: layer `k` weights are drawn from
    /// `U(-limit, limit)` with `limit = sqrt(6 / (fan_in + fan_out))`,
    /// biases start at zero. Draws proceed layer by layer in row-major
    /// order from a counter-based stream, so a seed fixes the network
    /// exactly.
    pub fn xavier(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        Self::check_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for k in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(ParamNet {
            dims: dims.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    pub fn from_parts(
        dims: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        Self::check_dims(&dims)?;
        let layers = dims.len() - 1;
        if weights.len() != layers {
            return Err(Error::DimensionMismatch {
                context: "weight matrices vs layers",
                expected: layers,
                got: weights.len(),
            });
        }
        if biases.len() != layers {
            return Err(Error::DimensionMismatch {
                context: "bias vectors vs layers",
                expected: layers,
                got: biases.len(),
            });
        }
        for k in 0..layers {
            if weights[k].len() != dims[k] * dims[k + 1] {
                return Err(Error::DimensionMismatch {
                    context: "weight matrix size",
                    expected: dims[k] * dims[k + 1],
                    got: weights[k].len(),
                });
            }
            if biases[k].len() != dims[k + 1] {
                return Err(Error::DimensionMismatch {
                    context: "bias vector size",
                    expected: dims[k + 1],
                    got: biases[k].len(),
                });
            }
        }
        let net = ParamNet {
            dims,
            weights,
            biases,
            activation,
        };
        if !net.params().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(net)
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer widths must list at least input and output and be positive, got {dims:?}"
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn n_params(&self) -> usize {
        (0..self.layers())
            .map(|k| self.dims[k] * self.dims[k + 1] + self.dims[k + 1])
            .sum()
    }

    fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
            .copied()
    }

    /// Flattens all parameters (per layer: weights row-major, then
    /// biases) into one vector. `set_params_flat` inverts this.
    pub fn params_flat(&self) -> Vec<f64> {
        self.params().collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                context: "flat parameter vector",
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        let mut at = 0;
        for k in 0..self.layers() {
            let nw = self.weights[k].len();
            self.weights[k].copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = self.biases[k].len();
            self.biases[k].copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// Activations of every layer: `acts[0]` is the input, `acts[L]`
    /// the (linear) output.
    fn forward_acts(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let ell = self.layers();
        let mut acts = Vec::with_capacity(ell + 1);
        acts.push(x.to_vec());
        for k in 0..ell {
            let mut z = affine(
                &self.weights[k],
                self.dims[k + 1],
                self.dims[k],
                &acts[k],
                &self.biases[k],
            );
            if k < ell - 1 {
                for v in z.iter_mut() {
                    *v = self.activation.value(*v);
                }
            }
            acts.push(z);
        }
        acts
    }

    /// Evaluates the network.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_acts(x).pop().unwrap())
    }

    /// Evaluates a scalar network.
    pub fn forward_scalar(&self, x: &[f64]) -> Result<f64> {
        self.check_scalar_output()?;
        Ok(self.forward(x)?[0])
    }

    /// Gradient of a scalar network with respect to its input.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_scalar_output()?;
        let acts = self.forward_acts(x);
        Ok(self.input_gradient_from_acts(&acts))
    }

    fn input_gradient_from_acts(&self, acts: &[Vec<f64>]) -> Vec<f64> {
        let ell = self.layers();
        let mut bar_a = vec![1.0];
        for k in (0..ell).rev() {
            let bar_z = if k == ell - 1 {
                bar_a
            } else {
                hadamard_deriv(self.activation, &acts[k + 1], &bar_a)
            };
            bar_a = matvec_t(&self.weights[k], self.dims[k + 1], self.dims[k], &bar_z);
        }
        bar_a
    }

    /// Reverse pass for `sum_j out_bar[j] * output_j`. Returns the
    /// parameter gradients and the input gradient of that scalar.
    pub fn backprop(&self, x: &[f64], out_bar: &[f64]) -> Result<(ParamGrads, Vec<f64>)> {
        self.check_input(x)?;
        if out_bar.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "output seed vector",
                expected: self.output_dim(),
                got: out_bar.len(),
            });
        }
        let acts = self.forward_acts(x);
        Ok(self.backprop_from_acts(&acts, out_bar))
    }

    fn backprop_from_acts(&self, acts: &[Vec<f64>], out_bar: &[f64]) -> (ParamGrads, Vec<f64>) {
        let ell = self.layers();
        let mut grads = ParamGrads::zeros_like(self);
        let mut bar_a = out_bar.to_vec();
        for k in (0..ell).rev() {
            let bar_z = if k == ell - 1 {
                bar_a
            } else {
                hadamard_deriv(self.activation, &acts[k + 1], &bar_a)
            };
            outer_acc(&mut grads.weights[k], &bar_z, &acts[k]);
            add_assign(&mut grads.biases[k], &bar_z);
            bar_a = matvec_t(&self.weights[k], self.dims[k + 1], self.dims[k], &bar_z);
        }
        (grads, bar_a)
    }

    /// For a scalar network `y(x)` and a fixed direction `r`, computes
    /// `psi = r . grad_x y` together with `grad_theta psi`.
    ///
    /// A forward pass along the tangent `r` produces `psi` (and the
    /// intermediate tangents); a reverse sweep through that augmented
    /// computation then differentiates `psi` with respect to every
    /// weight and bias. Second derivatives of the activation enter
    /// through the tangent flowing into each nonlinearity.
    pub fn grad_contraction_param_grad(&self, x: &[f64], r: &[f64]) -> Result<(f64, ParamGrads)> {
        self.check_input(x)?;
        self.check_scalar_output()?;
        if r.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "contraction direction vector",
                expected: self.input_dim(),
                got: r.len(),
            });
        }
        let acts = self.forward_acts(x);
        Ok(self.grad_contraction_from_acts(&acts, r))
    }

    fn grad_contraction_from_acts(&self, acts: &[Vec<f64>], r: &[f64]) -> (f64, ParamGrads) {
        let ell = self.layers();
        let act = self.activation;

        // Tangent sweep: s[k] = W_k t[k], t[k+1] = sigma'(z_k) . s[k]
        // on hidden layers, t[L] = s[L-1] on the linear output.
        let mut ts: Vec<Vec<f64>> = Vec::with_capacity(ell + 1);
        let mut ss: Vec<Vec<f64>> = Vec::with_capacity(ell);
        ts.push(r.to_vec());
        for k in 0..ell {
            let s = matvec(&self.weights[k], self.dims[k + 1], self.dims[k], &ts[k]);
            let t_next = if k < ell - 1 {
                hadamard_deriv(act, &acts[k + 1], &s)
            } else {
                s.clone()
            };
            ss.push(s);
            ts.push(t_next);
        }
        let psi = ts[ell][0];

        // Reverse sweep over the augmented graph. bar_t tracks the
        // adjoint of the tangent path, bar_a the adjoint of the primal
        // path (nonzero because sigma'(z_k) depends on z_k).
        let mut grads = ParamGrads::zeros_like(self);
        let mut bar_t = vec![1.0];
        let mut bar_a = vec![0.0];
        for k in (0..ell).rev() {
            let (bar_s, bar_z);
            if k == ell - 1 {
                bar_s = bar_t;
                bar_z = bar_a;
            } else {
                let a_next = &acts[k + 1];
                bar_s = hadamard_deriv(act, a_next, &bar_t);
                let mut v = vec![0.0; a_next.len()];
                for i in 0..a_next.len() {
                    v[i] = act.second_deriv_from_value(a_next[i]) * ss[k][i] * bar_t[i]
                        + act.deriv_from_value(a_next[i]) * bar_a[i];
                }
                bar_z = v;
            }
            outer_acc(&mut grads.weights[k], &bar_s, &ts[k]);
            outer_acc(&mut grads.weights[k], &bar_z, &acts[k]);
            add_assign(&mut grads.biases[k], &bar_z);
            bar_t = matvec_t(&self.weights[k], self.dims[k + 1], self.dims[k], &bar_s);
            bar_a = matvec_t(&self.weights[k], self.dims[k + 1], self.dims[k], &bar_z);
        }
        (psi, grads)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_scalar_output(&self) -> Result<()> {
        if self.output_dim() != 1 {
            return Err(Error::DimensionMismatch {
                context: "scalar network output",
                expected: 1,
                got: self.output_dim(),
            });
        }
        Ok(())
    }

    /// Serializes the network to JSON with round-trip-exact floats.
    pub fn to_json(&self) -> String {
        let mut out = String::new();
        out.push_str("{\n");
        out.push_str(&format!(
            "  \"dims\": [{}],\n",
            self.dims
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ));
        out.push_str(&format!(
            "  \"activation\": \"{}\",\n",
            self.activation.name()
        ));
        out.push_str("  \"weights\": [\n");
        for (k, w) in self.weights.iter().enumerate() {
            out.push_str("    ");
            push_float_array(&mut out, w);
            out.push_str(if k + 1 < self.weights.len() { ",\n" } else { "\n" });
        }
        out.push_str("  ],\n  \"biases\": [\n");
        for (k, b) in self.biases.iter().enumerate() {
            out.push_str("    ");
            push_float_array(&mut out, b);
            out.push_str(if k + 1 < self.biases.len() { ",\n" } else { "\n" });
        }
        out.push_str("  ]\n}");
        out
    }

    pub fn from_json_value(v: &serde_json::Value, path: &std::path::Path) -> Result<Self> {
        let dims = json_usize_array(v.get("dims"), path, "dims")?;
        let activation = Activation::parse(
            v.get("activation")
                .and_then(|a| a.as_str())
                .ok_or_else(|| Error::malformed(path, "missing activation"))?,
        )?;
        let weights = json_nested_float_array(v.get("weights"), path, "weights")?;
        let biases = json_nested_float_array(v.get("biases"), path, "biases")?;
        ParamNet::from_parts(dims, weights, biases, activation)
    }
}

fn push_float_array(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&crate::ioutil::fmt_f64(*x));
    }
    out.push(']');
}

fn json_usize_array(
    v: Option<&serde_json::Value>,
    path: &std::path::Path,
    what: &str,
) -> Result<Vec<usize>> {
    v.and_then(|a| a.as_array())
        .ok_or_else(|| Error::malformed(path, format!("missing array {what}")))?
        .iter()
        .map(|x| {
            x.as_u64()
                .map(|u| u as usize)
                .ok_or_else(|| Error::malformed(path, format!("{what}: not an integer")))
        })
        .collect()
}

fn json_nested_float_array(
    v: Option<&serde_json::Value>,
    path: &std::path::Path,
    what: &str,
) -> Result<Vec<Vec<f64>>> {
    v.and_then(|a| a.as_array())
        .ok_or_else(|| Error::malformed(path, format!("missing array {what}")))?
        .iter()
        .map(|row| {
            row.as_array()
                .ok_or_else(|| Error::malformed(path, format!("{what}: not a nested array")))?
                .iter()
                .map(|x| {
                    x.as_f64()
                        .ok_or_else(|| Error::malformed(path, format!("{what}: not a float")))
                })
                .collect()
        })
        .collect()
}

/// Gradient (or any co-shaped quantity) for every parameter of a
/// `ParamNet`, stored with the same layout as the network itself.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &ParamNet) -> Self {
        ParamGrads {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            add_assign(a, b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            add_assign(a, b);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for w in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v *= c;
            }
        }
    }

    /// Same flattening order as `ParamNet::params_flat`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
            .copied()
            .collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .flat_map(|v| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// Evaluates a generating-function network at `(q, P)`.
///
/// The input layout is `q` followed by `P`; the network must map
/// `2d -> 1`.
pub fn net_forward(net: &ParamNet, q: &[f64], p_next: &[f64]) -> Result<f64> {
    let x = concat_input(net, q, p_next)?;
    net.forward_scalar(&x)
}

/// Both blocks of the input gradient of a generating-function network:
/// `d1 = dS/dq`, `d2 = dS/dP`.
pub fn net_input_grad(net: &ParamNet, q: &[f64], p_next: &[f64]) -> Result<InputGrad> {
    let x = concat_input(net, q, p_next)?;
    let g = net.input_gradient(&x)?;
    let d = q.len();
    Ok(InputGrad {
        d1: g[..d].to_vec(),
        d2: g[d..].to_vec(),
    })
}

fn concat_input(net: &ParamNet, q: &[f64], p_next: &[f64]) -> Result<Vec<f64>> {
    if q.len() != p_next.len() {
        return Err(Error::DimensionMismatch {
            context: "generating function arguments q vs P",
            expected: q.len(),
            got: p_next.len(),
        });
    }
    if net.input_dim() != 2 * q.len() {
        return Err(Error::DimensionMismatch {
            context: "generating function network input",
            expected: net.input_dim(),
            got: 2 * q.len(),
        });
    }
    let mut x = Vec::with_capacity(2 * q.len());
    x.extend_from_slice(q);
    x.extend_from_slice(p_next);
    Ok(x)
}

/// Pairs per parallel shard in `loss_param_grad`. Fixed so that the
/// reduction order, and hence the result bits, do not depend on the
/// thread count.
const GRAD_SHARD: usize = 256;

/// Mean squared increment-matching loss over a batch of pairs and its
/// exact parameter gradient.
///
/// Per pair, with `g1 = dS/dq` and `g2 = dS/dP` evaluated at
/// `(q_i, p_{i+1})`:
///
/// ```text
/// loss_i = |h g2 - dq|^2 + |h g1 - dp|^2
/// ```
///
/// The momentum after the step is observed, so no implicit solve is
/// needed here. The gradient of `mean(loss_i)` follows from the
/// contraction rule: it equals `(2h/n) sum_i grad_theta(r_i . g)` with
/// the residual direction `r_i = (h g1 - dp, h g2 - dq)` held fixed.
pub fn loss_param_grad(
    net: &ParamNet,
    pairs: &[TrainingPair],
    h: f64,
) -> Result<(f64, ParamGrads)> {
    net.check_scalar_output()?;
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("empty training batch".into()));
    }
    let d = pairs[0].dim();
    if net.input_dim() != 2 * d {
        return Err(Error::DimensionMismatch {
            context: "network input vs pair dimension",
            expected: net.input_dim(),
            got: 2 * d,
        });
    }
    if !h.is_finite() || h == 0.0 {
        return Err(Error::InvalidConfig(format!("step size must be nonzero, got {h}")));
    }
    for pair in pairs {
        if pair.dim() != d
            || pair.p_next.len() != d
            || pair.dq.len() != d
            || pair.dp.len() != d
        {
            return Err(Error::DimensionMismatch {
                context: "training pair component",
                expected: d,
                got: pair.p_next.len(),
            });
        }
    }

    let (loss_sum, mut grads) = ordered_shard_sum(
        pairs,
        GRAD_SHARD,
        (0.0, ParamGrads::zeros_like(net)),
        |shard| {
            let mut loss = 0.0;
            let mut acc = ParamGrads::zeros_like(net);
            let mut x = vec![0.0; 2 * d];
            let mut r = vec![0.0; 2 * d];
            for pair in shard {
                x[..d].copy_from_slice(&pair.q);
                x[d..].copy_from_slice(&pair.p_next);
                let acts = net.forward_acts(&x);
                let g = net.input_gradient_from_acts(&acts);
                for i in 0..d {
                    r[i] = h * g[i] - pair.dp[i];
                    r[d + i] = h * g[d + i] - pair.dq[i];
                    loss += r[i] * r[i] + r[d + i] * r[d + i];
                }
                let (_, pair_grads) = net.grad_contraction_from_acts(&acts, &r);
                acc.add_assign(&pair_grads);
            }
            (loss, acc)
        },
        |(la, mut ga), (lb, gb)| {
            ga.add_assign(&gb);
            (la + lb, ga)
        },
    );
    let n = pairs.len() as f64;
    grads.scale(2.0 * h / n);
    Ok((loss_sum / n, grads))
}

fn affine(w: &[f64], rows: usize, cols: usize, x: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for i in 0..rows {
        let row = &w[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for j in 0..cols {
            acc += row[j] * x[j];
        }
        out[i] += acc;
    }
    out
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for i in 0..rows {
        let row = &w[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for j in 0..cols {
            acc += row[j] * x[j];
        }
        out[i] = acc;
    }
    out
}

/// `W^T v` for the same row-major storage.
fn matvec_t(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        let row = &w[i * cols..(i + 1) * cols];
        let vi = v[i];
        for j in 0..cols {
            out[j] += row[j] * vi;
        }
    }
    out
}

/// `sigma'(z) . v` where the derivative is recovered from the cached
/// activation values.
fn hadamard_deriv(act: Activation, a: &[f64], v: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(v)
        .map(|(&ai, &vi)| act.deriv_from_value(ai) * vi)
        .collect()
}

/// Rank-one update `G += u v^T` on row-major storage.
fn outer_acc(g: &mut [f64], u: &[f64], v: &[f64]) {
    let cols = v.len();
    for i in 0..u.len() {
        let ui = u[i];
        let row = &mut g[i * cols..(i + 1) * cols];
        for j in 0..cols {
            row[j] += ui * v[j];
        }
    }
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Independent forward evaluation of a fixed 2-2-1 tanh network,
    /// written out as explicit scalar arithmetic.
    fn tiny_net() -> ParamNet {
        ParamNet::from_parts(
            vec![2, 2, 1],
            vec![vec![0.3, -0.5, 0.8, 0.1], vec![0.7, -0.2]],
            vec![vec![0.05, -0.1], vec![0.2]],
            Activation::Tanh,
        )
        .unwrap()
    }

    fn tiny_net_by_hand(x0: f64, x1: f64) -> f64 {
        let z0 = 0.3 * x0 - 0.5 * x1 + 0.05;
        let z1 = 0.8 * x0 + 0.1 * x1 - 0.1;
        0.7 * z0.tanh() - 0.2 * z1.tanh() + 0.2
    }

    #[test]
    fn forward_matches_hand_rolled_arithmetic() {
        let net = tiny_net();
        for &(x0, x1) in &[(0.0, 0.0), (1.0, -1.0), (0.3, 2.5), (-1.7, 0.4)] {
            let y = net.forward(&[x0, x1]).unwrap()[0];
            assert_relative_eq!(y, tiny_net_by_hand(x0, x1), max_relative = 1e-15);
        }
    }

    fn central_diff(f: impl Fn(f64) -> f64, x: f64, step: f64) -> f64 {
        (f(x + step) - f(x - step)) / (2.0 * step)
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for act in [Activation::Tanh, Activation::Sigmoid, Activation::Softplus] {
            for &x in &[-2.0, -0.3, 0.0, 0.7, 1.9] {
                let a = act.value(x);
                let fd1 = central_diff(|t| act.value(t), x, 1e-6);
                assert_relative_eq!(act.deriv_from_value(a), fd1, epsilon = 1e-9);
                let fd2 = central_diff(
                    |t| act.deriv_from_value(act.value(t)),
                    x,
                    1e-6,
                );
                assert_relative_eq!(act.second_deriv_from_value(a), fd2, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        for (seed, dims) in [(1u64, vec![4, 16, 16, 1]), (2, vec![2, 8, 1])] {
            for act in [Activation::Tanh, Activation::Sigmoid, Activation::Softplus] {
                let net = ParamNet::xavier(&dims, act, seed).unwrap();
                let x: Vec<f64> = (0..dims[0]).map(|i| 0.3 * i as f64 - 0.4).collect();
                let g = net.input_gradient(&x).unwrap();
                for i in 0..x.len() {
                    let fd = central_diff(
                        |v| {
                            let mut xp = x.clone();
                            xp[i] = v;
                            net.forward_scalar(&xp).unwrap()
                        },
                        x[i],
                        1e-6,
                    );
                    assert_relative_eq!(g[i], fd, epsilon = 1e-8, max_relative = 1e-7);
                }
            }
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let net = ParamNet::xavier(&[3, 10, 2], Activation::Tanh, 5).unwrap();
        let x = [0.2, -0.7, 1.1];
        let out_bar = [1.3, -0.4];
        let (grads, input_bar) = net.backprop(&x, &out_bar).unwrap();
        let flat = grads.to_flat();
        let theta = net.params_flat();
        let scalar = |n: &ParamNet| {
            let y = n.forward(&x).unwrap();
            out_bar.iter().zip(&y).map(|(b, v)| b * v).sum::<f64>()
        };
        for i in (0..theta.len()).step_by(7) {
            let fd = central_diff(
                |v| {
                    let mut t = theta.clone();
                    t[i] = v;
                    let mut n = net.clone();
                    n.set_params_flat(&t).unwrap();
                    scalar(&n)
                },
                theta[i],
                1e-5,
            );
            assert_relative_eq!(flat[i], fd, epsilon = 1e-8, max_relative = 1e-6);
        }
        for i in 0..x.len() {
            let fd = central_diff(
                |v| {
                    let mut xp = x;
                    xp[i] = v;
                    let y = net.forward(&xp).unwrap();
                    out_bar.iter().zip(&y).map(|(b, u)| b * u).sum::<f64>()
                },
                x[i],
                1e-6,
            );
            assert_relative_eq!(input_bar[i], fd, epsilon = 1e-8, max_relative = 1e-6);
        }
    }

    #[test]
    fn contraction_value_equals_r_dot_gradient() {
        let net = ParamNet::xavier(&[4, 12, 9, 1], Activation::Softplus, 9).unwrap();
        let x = [0.4, -0.2, 0.9, 0.1];
        let r = [1.0, -2.0, 0.5, 0.3];
        let g = net.input_gradient(&x).unwrap();
        let (psi, _) = net.grad_contraction_param_grad(&x, &r).unwrap();
        let dot: f64 = r.iter().zip(&g).map(|(a, b)| a * b).sum();
        assert_relative_eq!(psi, dot, max_relative = 1e-12);
    }

    #[test]
    fn contraction_param_grad_matches_finite_differences() {
        for act in [Activation::Tanh, Activation::Sigmoid, Activation::Softplus] {
            let net = ParamNet::xavier(&[2, 7, 5, 1], act, 11).unwrap();
            let x = [0.6, -0.3];
            let r = [0.8, -1.1];
            let (_, grads) = net.grad_contraction_param_grad(&x, &r).unwrap();
            let flat = grads.to_flat();
            let theta = net.params_flat();
            for i in (0..theta.len()).step_by(3) {
                let fd = central_diff(
                    |v| {
                        let mut t = theta.clone();
                        t[i] = v;
                        let mut n = net.clone();
                        n.set_params_flat(&t).unwrap();
                        let g = n.input_gradient(&x).unwrap();
                        r.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
                    },
                    theta[i],
                    1e-5,
                );
                assert_relative_eq!(flat[i], fd, epsilon = 1e-9, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn loss_param_grad_matches_finite_differences() {
        let net = ParamNet::xavier(&[2, 6, 6, 1], Activation::Tanh, 3).unwrap();
        let h = 0.1;
        let pairs: Vec<TrainingPair> = (0..5)
            .map(|i| {
                let t = i as f64 * 0.3;
                TrainingPair {
                    q: vec![t.sin()],
                    p_next: vec![t.cos()],
                    dq: vec![0.1 * t.cos()],
                    dp: vec![0.1 * t.sin()],
                }
            })
            .collect();
        let (loss, grads) = loss_param_grad(&net, &pairs, h).unwrap();
        assert!(loss > 0.0);
        let flat = grads.to_flat();
        let theta = net.params_flat();
        for i in (0..theta.len()).step_by(5) {
            let fd = central_diff(
                |v| {
                    let mut t = theta.clone();
                    t[i] = v;
                    let mut n = net.clone();
                    n.set_params_flat(&t).unwrap();
                    loss_param_grad(&n, &pairs, h).unwrap().0
                },
                theta[i],
                1e-5,
            );
            assert_relative_eq!(flat[i], fd, epsilon = 1e-10, max_relative = 1e-5);
        }
    }

    #[test]
    fn loss_is_zero_on_exactly_consistent_pairs() {
        // Build targets from the network's own gradients; the loss
        // must vanish and so must its gradient.
        let net = ParamNet::xavier(&[2, 5, 1], Activation::Tanh, 21).unwrap();
        let h = 0.25;
        let pairs: Vec<TrainingPair> = (0..4)
            .map(|i| {
                let q = vec![0.2 * i as f64];
                let p_next = vec![1.0 - 0.1 * i as f64];
                let g = net_input_grad(&net, &q, &p_next).unwrap();
                TrainingPair {
                    dq: g.d2.iter().map(|v| h * v).collect(),
                    dp: g.d1.iter().map(|v| h * v).collect(),
                    q,
                    p_next,
                }
            })
            .collect();
        let (loss, grads) = loss_param_grad(&net, &pairs, h).unwrap();
        assert!(loss < 1e-28, "loss {loss}");
        assert!(grads.l2_norm() < 1e-13);
    }

    #[test]
    fn xavier_is_reproducible_and_bounded() {
        let a = ParamNet::xavier(&[3, 5, 2], Activation::Tanh, 42).unwrap();
        let b = ParamNet::xavier(&[3, 5, 2], Activation::Tanh, 42).unwrap();
        let c = ParamNet::xavier(&[3, 5, 2], Activation::Tanh, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let limit0 = (6.0 / 8.0f64).sqrt();
        assert!(a.weights[0].iter().all(|w| w.abs() < limit0));
        assert!(a.biases.iter().flatten().all(|&b| b == 0.0));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let net = ParamNet::xavier(&[4, 7, 3, 1], Activation::Sigmoid, 77).unwrap();
        let text = net.to_json();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let back = ParamNet::from_json_value(&value, std::path::Path::new("mem")).unwrap();
        assert_eq!(net, back);
        let bits_a: Vec<u64> = net.params_flat().iter().map(|x| x.to_bits()).collect();
        let bits_b: Vec<u64> = back.params_flat().iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn dimension_errors_are_reported() {
        let net = tiny_net();
        assert!(net.forward(&[1.0]).is_err());
        assert!(net_forward(&net, &[1.0], &[2.0, 3.0]).is_err());
        assert!(ParamNet::xavier(&[3], Activation::Tanh, 0).is_err());
        assert!(ParamNet::xavier(&[3, 0, 1], Activation::Tanh, 0).is_err());
    }
}
