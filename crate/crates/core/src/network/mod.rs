//! Dense feedforward generator `G_θ`.
//!
//! Layer `l` computes `a_l = σ_l(W_l a_{l-1} + b_l)`. The input Jacobian is
//! the chain product `D_H W_H ⋯ D_1 W_1` with `D_l = diag(σ_l'(pre_l))`,
//! evaluated exactly from a cached forward pass. Per-sample entry points are
//! mirrored by batched ones (`*_batch`) that route through GEMM for training
//! and attack workloads.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::linalg::{axpy, gemm, DenseMatrix, Op};
use crate::rng::{stream, Purpose};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    /// Derivative at exactly 0 is taken as 0.
    Relu,
    LeakyRelu(f64),
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
        }
    }

    /// `σ'(pre)` given both the pre-activation and its image `post = σ(pre)`.
    #[inline]
    pub fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => post * (1.0 - post),
            Activation::Tanh => 1.0 - post * post,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if pre > 0.0 {
                    1.0
                } else {
                    a
                }
            }
        }
    }

    pub fn is_smooth(self) -> bool {
        matches!(self, Activation::Identity | Activation::Sigmoid | Activation::Tanh)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Identity => f.write_str("identity"),
            Activation::Sigmoid => f.write_str("sigmoid"),
            Activation::Tanh => f.write_str("tanh"),
            Activation::Relu => f.write_str("relu"),
            Activation::LeakyRelu(a) => write!(f, "leaky_relu({a:e})"),
        }
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" | "linear" => Ok(Activation::Identity),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            _ => {
                let alpha = s
                    .strip_prefix("leaky_relu(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| format!("unknown activation `{s}`"))?;
                alpha
                    .parse::<f64>()
                    .map(Activation::LeakyRelu)
                    .map_err(|e| format!("leaky_relu slope `{alpha}`: {e}"))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `out_dim x in_dim`
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: DenseMatrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        check_len("layer bias", weights.rows(), bias.len())?;
        if weights.rows() == 0 || weights.cols() == 0 {
            return Err(Error::invalid("layer", "dimensions must be at least 1"));
        }
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("layer parameters"));
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    /// Uniform Glorot initialization, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = DenseMatrix::from_fn(out_dim, in_dim, |_, _| rng.random_range(-limit..=limit));
        DenseLayer {
            weights,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
    init_seed: Option<u64>,
}

/// Cached activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().map_or(&self.input, |v| v.as_slice())
    }
}

/// Forward pass over a batch; row `i` of each matrix belongs to sample `i`.
#[derive(Clone, Debug)]
pub struct BatchTrace {
    pub input: DenseMatrix,
    pub pre: Vec<DenseMatrix>,
    pub post: Vec<DenseMatrix>,
}

impl BatchTrace {
    pub fn output(&self) -> &DenseMatrix {
        self.post.last().unwrap_or(&self.input)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

/// Per-layer parameter gradients, shaped like the network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGradients(pub Vec<LayerGradient>);

impl NetGradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        NetGradients(
            net.layers
                .iter()
                .map(|l| LayerGradient {
                    weights: DenseMatrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        )
    }

    pub fn add_scaled(&mut self, s: f64, other: &NetGradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.weights.add_scaled(s, &b.weights);
            axpy(s, &b.bias, &mut a.bias);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            g.weights.scale(s);
            g.bias.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, g| {
            g.bias
                .iter()
                .fold(m.max(g.weights.max_abs()), |m, b| m.max(b.abs()))
        })
    }

    pub fn is_finite(&self) -> bool {
        self.0
            .iter()
            .all(|g| g.weights.is_finite() && g.bias.iter().all(|b| b.is_finite()))
    }
}

impl DenseNet {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network", "needs at least one layer"));
        }
        for w in layers.windows(2) {
            check_len("layer chaining", w[0].out_dim(), w[1].in_dim())?;
        }
        Ok(DenseNet {
            layers,
            init_seed: None,
        })
    }

    /// Glorot-initialized net with layer sizes `dims[0] → … → dims[H]`;
    /// layer `l` draws from the `Init` stream `l` of `seed`.
    pub fn seeded(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("network dims", format!("{dims:?}")));
        }
        check_len("activations per layer", dims.len() - 1, activations.len())?;
        let layers = dims
            .windows(2)
            .zip(activations)
            .enumerate()
            .map(|(l, (w, &act))| {
                DenseLayer::glorot(w[0], w[1], act, &mut stream(seed, Purpose::Init, l as u64))
            })
            .collect();
        let mut net = DenseNet::new(layers)?;
        net.init_seed = Some(seed);
        Ok(net)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim()))
            .collect()
    }

    pub fn init_seed(&self) -> Option<u64> {
        self.init_seed
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.out_dim() * (l.in_dim() + 1)).sum()
    }

    pub fn forward(&self, z: &[f64]) -> Result<ForwardTrace> {
        check_len("generator input", self.input_dim(), z.len())?;
        let mut pre = Vec::with_capacity(self.depth());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.depth());
        for layer in &self.layers {
            let input = post.last().map_or(z, |v| v.as_slice());
            let mut p = layer.weights.matvec(input)?;
            axpy(1.0, &layer.bias, &mut p);
            let a = p.iter().map(|&x| layer.activation.apply(x)).collect();
            pre.push(p);
            post.push(a);
        }
        Ok(ForwardTrace {
            input: z.to_vec(),
            pre,
            post,
        })
    }

    /// `G(z)` without keeping the trace.
    pub fn output(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len("generator input", self.input_dim(), z.len())?;
        let mut a = z.to_vec();
        for layer in &self.layers {
            let mut p = layer.weights.matvec(&a)?;
            axpy(1.0, &layer.bias, &mut p);
            p.iter_mut().for_each(|x| *x = layer.activation.apply(*x));
            a = p;
        }
        Ok(a)
    }

    /// Exact input Jacobian `∂G/∂z` (`n x k`) as the chain product of the
    /// per-layer `D_l W_l` factors.
    pub fn jacobian_at(&self, z: &[f64]) -> Result<DenseMatrix> {
        let trace = self.forward(z)?;
        Ok(self.jacobian_from_trace(&trace))
    }

    pub fn jacobian_from_trace(&self, trace: &ForwardTrace) -> DenseMatrix {
        let mut acc: Option<DenseMatrix> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut m = match &acc {
                None => layer.weights.clone(),
                Some(prev) => gemm(&layer.weights, Op::N, prev, Op::N),
            };
            for i in 0..m.rows() {
                let d = layer.activation.derivative(trace.pre[l][i], trace.post[l][i]);
                m.row_mut(i).iter_mut().for_each(|x| *x *= d);
            }
            acc = Some(m);
        }
        acc.expect("nonempty network")
    }

    /// Central-difference Jacobian, column by column.
    pub fn finite_diff_jacobian(&self, z: &[f64], h: f64) -> Result<DenseMatrix> {
        if !(h > 0.0) {
            return Err(Error::invalid("finite-difference step", format!("{h}")));
        }
        check_len("generator input", self.input_dim(), z.len())?;
        let (n, k) = (self.output_dim(), self.input_dim());
        let mut jac = DenseMatrix::zeros(n, k);
        let mut zp = z.to_vec();
        for j in 0..k {
            zp[j] = z[j] + h;
            let plus = self.output(&zp)?;
            zp[j] = z[j] - h;
            let minus = self.output(&zp)?;
            zp[j] = z[j];
            for i in 0..n {
                jac.set(i, j, (plus[i] - minus[i]) / (2.0 * h));
            }
        }
        Ok(jac)
    }

    /// Gradients of `⟨upstream, G(z)⟩` with respect to every weight and
    /// bias, by reverse accumulation through `trace`.
    pub fn param_gradients(&self, trace: &ForwardTrace, upstream: &[f64]) -> Result<NetGradients> {
        Ok(self.backward(trace, upstream)?.0)
    }

    /// Parameter gradients plus the gradient with respect to the input.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        upstream: &[f64],
    ) -> Result<(NetGradients, Vec<f64>)> {
        check_len("upstream gradient", self.output_dim(), upstream.len())?;
        self.check_trace(trace)?;
        let mut grads = Vec::with_capacity(self.depth());
        let mut delta = upstream.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            for (i, d) in delta.iter_mut().enumerate() {
                *d *= layer.activation.derivative(trace.pre[l][i], trace.post[l][i]);
            }
            let input = if l == 0 { &trace.input } else { &trace.post[l - 1] };
            let weights = DenseMatrix::from_fn(layer.out_dim(), layer.in_dim(), |i, j| {
                delta[i] * input[j]
            });
            let next = layer.weights.matvec_t(&delta)?;
            grads.push(LayerGradient {
                weights,
                bias: std::mem::replace(&mut delta, next),
            });
        }
        grads.reverse();
        Ok((NetGradients(grads), delta))
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        check_len("trace input", self.input_dim(), trace.input.len())?;
        check_len("trace depth", self.depth(), trace.pre.len())?;
        check_len("trace depth", self.depth(), trace.post.len())?;
        for (layer, (p, a)) in self.layers.iter().zip(trace.pre.iter().zip(&trace.post)) {
            check_len("trace layer width", layer.out_dim(), p.len())?;
            check_len("trace layer width", layer.out_dim(), a.len())?;
        }
        Ok(())
    }

    /// Forward pass for a batch of inputs stored as rows of `z` (`B x k`).
    pub fn forward_batch(&self, z: &DenseMatrix) -> Result<BatchTrace> {
        check_len("generator batch input", self.input_dim(), z.cols())?;
        let mut pre = Vec::with_capacity(self.depth());
        let mut post: Vec<DenseMatrix> = Vec::with_capacity(self.depth());
        for layer in &self.layers {
            let input = post.last().unwrap_or(z);
            let (p, a) = layer_forward_batch(layer, input);
            pre.push(p);
            post.push(a);
        }
        Ok(BatchTrace {
            input: z.clone(),
            pre,
            post,
        })
    }

    /// Outputs for a batch (`B x n`) without keeping intermediate layers.
    pub fn output_batch(&self, z: &DenseMatrix) -> Result<DenseMatrix> {
        check_len("generator batch input", self.input_dim(), z.cols())?;
        let mut a = None::<DenseMatrix>;
        for layer in &self.layers {
            let (_, next) = layer_forward_batch(layer, a.as_ref().unwrap_or(z));
            a = Some(next);
        }
        Ok(a.expect("nonempty network"))
    }

    /// Gradients of `Σ_i ⟨upstream_i, G(z_i)⟩` summed over the batch, plus
    /// the per-sample input gradients (`B x k`).
    pub fn backward_batch(
        &self,
        trace: &BatchTrace,
        upstream: &DenseMatrix,
    ) -> Result<(NetGradients, DenseMatrix)> {
        check_len("upstream batch width", self.output_dim(), upstream.cols())?;
        check_len("upstream batch size", trace.input.rows(), upstream.rows())?;
        check_len("trace depth", self.depth(), trace.pre.len())?;
        let mut grads = Vec::with_capacity(self.depth());
        let mut delta = upstream.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (p, a) = (&trace.pre[l], &trace.post[l]);
            check_len("trace layer width", layer.out_dim(), p.cols())?;
            for ((d, &pv), &av) in delta
                .as_mut_slice()
                .iter_mut()
                .zip(p.as_slice())
                .zip(a.as_slice())
            {
                *d *= layer.activation.derivative(pv, av);
            }
            let input = if l == 0 { &trace.input } else { &trace.post[l - 1] };
            let weights = gemm(&delta, Op::T, input, Op::N);
            let mut bias = vec![0.0; layer.out_dim()];
            for r in 0..delta.rows() {
                axpy(1.0, delta.row(r), &mut bias);
            }
            let next = gemm(&delta, Op::N, &layer.weights, Op::N);
            grads.push(LayerGradient { weights, bias });
            delta = next;
        }
        grads.reverse();
        Ok((NetGradients(grads), delta))
    }

    /// `θ ← θ − lr·g`
    pub fn apply_gradients(&mut self, grads: &NetGradients, lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.0) {
            layer.weights.add_scaled(-lr, &g.weights);
            axpy(-lr, &g.bias, &mut layer.bias);
        }
    }

    /// The net followed by a row selection of its output, i.e. `x ↦ ΦG(x)`
    /// when `rows` are the sensed indices.
    pub fn restrict_outputs(&self, rows: &[usize]) -> DenseNet {
        let mut out = self.clone();
        let last = out.layers.last_mut().expect("nonempty network");
        last.weights = last.weights.select_rows(rows);
        last.bias = rows.iter().map(|&i| last.bias[i]).collect();
        out
    }
}

fn layer_forward_batch(layer: &DenseLayer, input: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    let mut p = gemm(input, Op::N, &layer.weights, Op::T);
    for r in 0..p.rows() {
        axpy(1.0, &layer.bias, p.row_mut(r));
    }
    let mut a = p.clone();
    a.as_mut_slice()
        .iter_mut()
        .for_each(|x| *x = layer.activation.apply(*x));
    (p, a)
}
