//! Minimal dense network engine: forward pass with cache, exact
//! backpropagation, Adam, and a central finite-difference oracle used by the
//! gradient test suites.
//!
//! All arithmetic is in f64; acceptance tolerances elsewhere assume this.
//! Weight layout is (out × in) per layer, biases are separate vectors, and the
//! output layer activation is always the identity.

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Hidden-layer activation. The output layer is always identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Swish,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply_in_place(&self, xs: &mut [f64]) {
        match self {
            Activation::Swish => linalg::swish_in_place(xs),
            Activation::Relu => {
                for x in xs.iter_mut() {
                    if *x < 0.0 {
                        *x = 0.0;
                    }
                }
            }
            Activation::Tanh => {
                for x in xs.iter_mut() {
                    *x = x.tanh();
                }
            }
            Activation::Identity => {}
        }
    }

    /// d activation / d pre-activation, evaluated elementwise at `pre`.
    fn derivative(&self, pre: &[f64], out: &mut [f64]) {
        debug_assert_eq!(pre.len(), out.len());
        match self {
            Activation::Swish => {
                // swish'(x) = s(x)·(1 + x·(1 - s(x))) with s = sigmoid
                out.copy_from_slice(pre);
                linalg::sigmoid_in_place(out);
                for (d, &x) in out.iter_mut().zip(pre.iter()) {
                    let s = *d;
                    *d = s * (1.0 + x * (1.0 - s));
                }
            }
            Activation::Relu => {
                for (d, &x) in out.iter_mut().zip(pre.iter()) {
                    *d = if x > 0.0 { 1.0 } else { 0.0 };
                }
            }
            Activation::Tanh => {
                for (d, &x) in out.iter_mut().zip(pre.iter()) {
                    let t = x.tanh();
                    *d = 1.0 - t * t;
                }
            }
            Activation::Identity => out.fill(1.0),
        }
    }
}

/// Network shape: layer sizes from input to output plus the hidden activation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config(format!(
                "network needs at least input and output sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::config(format!(
                "layer sizes must be >= 1, got {layer_sizes:?}"
            )));
        }
        Ok(MlpSpec {
            layer_sizes,
            activation,
        })
    }

    /// Convenience: input dim, hidden widths, output dim.
    pub fn from_hidden(input: usize, hidden: &[usize], output: usize, activation: Activation) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self::new(sizes, activation)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

/// One dense layer: weight (out × in) and bias (out).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Weights and biases for the whole network, plus the hidden activation.
/// Doubles as the gradient container (same shapes).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// Per-layer inputs and pre-activations captured during `forward`, consumed by
/// `backward`.
pub struct ForwardCache {
    /// xs[l] = input to layer l (so xs[0] is the network input).
    xs: Vec<Array2<f64>>,
    /// zs[l] = pre-activation output of layer l.
    zs: Vec<Array2<f64>>,
}

/// Glorot-style uniform init: W ~ U[-√(6/(fan_in+fan_out)), +...], biases 0.
pub fn mlp_init(spec: &MlpSpec, seed: u64) -> MlpParams {
    let mut r = rng::stream(seed, &[rng::tag("mlp-init")]);
    let mut layers = Vec::with_capacity(spec.layer_sizes.len() - 1);
    for win in spec.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (win[0], win[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut data = Vec::with_capacity(fan_out * fan_in);
        for _ in 0..fan_out * fan_in {
            data.push(r.random_range(-bound..bound));
        }
        layers.push(Layer {
            w: Array2::from_shape_vec((fan_out, fan_in), data).unwrap(),
            b: Array1::zeros(fan_out),
        });
    }
    MlpParams {
        layers,
        activation: spec.activation,
    }
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].w.dim().1
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.dim().0
    }

    pub fn spec(&self) -> MlpSpec {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.w.dim().0));
        MlpSpec {
            layer_sizes: sizes,
            activation: self.activation,
        }
    }

    /// Same shapes, all zeros; gradient accumulator.
    pub fn zeros_like(&self) -> MlpParams {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: Array2::zeros(l.w.dim()),
                    b: Array1::zeros(l.b.len()),
                })
                .collect(),
            activation: self.activation,
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Elementwise add; used to accumulate gradients across loss terms.
    pub fn add_assign(&mut self, other: &MlpParams) {
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    /// Elementwise scale; used to average gradients over a batch.
    pub fn scale(&mut self, k: f64) {
        for l in self.layers.iter_mut() {
            l.w *= k;
            l.b *= k;
        }
    }

    pub fn iter_scalars(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()).copied())
    }

    fn check_input(&self, x: &ArrayView2<f64>, context: &'static str) -> Result<()> {
        if x.dim().1 != self.input_dim() {
            return Err(Error::Shape {
                context,
                expected: format!("B x {}", self.input_dim()),
                got: format!("{} x {}", x.dim().0, x.dim().1),
            });
        }
        Ok(())
    }

    /// Forward pass that records the cache needed for `backward`.
    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(x, "mlp_forward")?;
        let n_layers = self.layers.len();
        let mut xs = Vec::with_capacity(n_layers);
        let mut zs = Vec::with_capacity(n_layers);
        let mut cur = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            xs.push(cur.clone());
            let mut z = linalg::matmul_nt(&cur.view(), &layer.w.view());
            z += &layer.b;
            zs.push(z.clone());
            if l + 1 < n_layers {
                self.activation.apply_in_place(z.as_slice_mut().unwrap());
            }
            cur = z;
        }
        Ok((cur, ForwardCache { xs, zs }))
    }

    /// Forward pass without a cache; activations applied in place. This is the
    /// planner's hot path.
    pub fn infer(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x, "mlp_infer")?;
        let n_layers = self.layers.len();
        let mut cur = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = linalg::matmul_nt(&cur.view(), &layer.w.view());
            z += &layer.b;
            if l + 1 < n_layers {
                self.activation.apply_in_place(z.as_slice_mut().unwrap());
            }
            cur = z;
        }
        Ok(cur)
    }

    /// Exact backprop. `output_grad` is ∂loss/∂output (B × out). Returns
    /// (parameter gradients, ∂loss/∂input).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &ArrayView2<f64>,
    ) -> Result<(MlpParams, Array2<f64>)> {
        let n_layers = self.layers.len();
        if cache.xs.len() != n_layers
            || cache.zs.len() != n_layers
            || cache.zs[n_layers - 1].dim() != output_grad.dim()
            || cache.xs[0].dim().1 != self.input_dim()
        {
            return Err(Error::Shape {
                context: "mlp_backward",
                expected: format!(
                    "cache from a matching forward pass with output {} x {}",
                    cache.zs.last().map(|z| z.dim().0).unwrap_or(0),
                    self.output_dim()
                ),
                got: format!("output_grad {} x {}", output_grad.dim().0, output_grad.dim().1),
            });
        }
        let mut grads = self.zeros_like();
        let mut dz = output_grad.to_owned();
        for l in (0..n_layers).rev() {
            grads.layers[l].w = linalg::matmul_tn(&dz.view(), &cache.xs[l].view());
            grads.layers[l].b = linalg::col_sums(&dz.view());
            let dx = linalg::matmul(&dz.view(), &self.layers[l].w.view());
            if l == 0 {
                return Ok((grads, dx));
            }
            // Through the hidden activation of layer l-1.
            let pre = &cache.zs[l - 1];
            let mut deriv = Array2::zeros(pre.dim());
            self.activation
                .derivative(pre.as_slice().unwrap(), deriv.as_slice_mut().unwrap());
            dz = dx * &deriv;
        }
        unreachable!("layer loop always returns at l == 0");
    }
}

/// Central finite differences of an arbitrary scalar function of the
/// parameters: (f(p+eps) - f(p-eps)) / (2 eps), per scalar parameter.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&MlpParams) -> f64,
    params: &MlpParams,
    eps: f64,
) -> MlpParams {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut work = params.clone();
    let mut grads = params.zeros_like();
    // Richardson-extrapolated central differences: combining steps h and h/2
    // cancels the O(h^2) truncation term, so h can be chosen large enough to
    // keep roundoff noise far below the gradients being checked.
    let mut deriv = |work: &mut MlpParams, set: &mut dyn FnMut(&mut MlpParams, f64), orig: f64| {
        set(work, orig + eps);
        let fph = f(work);
        set(work, orig - eps);
        let fmh = f(work);
        set(work, orig + 0.5 * eps);
        let fph2 = f(work);
        set(work, orig - 0.5 * eps);
        let fmh2 = f(work);
        set(work, orig);
        let d_h = (fph - fmh) / (2.0 * eps);
        let d_h2 = (fph2 - fmh2) / eps;
        (4.0 * d_h2 - d_h) / 3.0
    };
    for l in 0..params.layers.len() {
        for idx in 0..params.layers[l].w.len() {
            let orig = params.layers[l].w.as_slice().unwrap()[idx];
            let mut set = |p: &mut MlpParams, v: f64| p.layers[l].w.as_slice_mut().unwrap()[idx] = v;
            grads.layers[l].w.as_slice_mut().unwrap()[idx] = deriv(&mut work, &mut set, orig);
        }
        for idx in 0..params.layers[l].b.len() {
            let orig = params.layers[l].b[idx];
            let mut set = |p: &mut MlpParams, v: f64| p.layers[l].b[idx] = v;
            grads.layers[l].b[idx] = deriv(&mut work, &mut set, orig);
        }
    }
    grads
}

/// Relative error metric used by every gradient check.
pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Result of comparing analytic gradients against the finite-difference
/// oracle.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Human-readable location of the worst offender.
    pub worst: String,
}

pub fn compare_grads(analytic: &MlpParams, numeric: &MlpParams) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::from("none"),
    };
    for (l, (a, n)) in analytic.layers.iter().zip(numeric.layers.iter()).enumerate() {
        for (idx, (&av, &nv)) in a.w.iter().zip(n.w.iter()).enumerate() {
            let e = rel_error(av, nv);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = format!("layer {l} weight #{idx}");
            }
        }
        for (idx, (&av, &nv)) in a.b.iter().zip(n.b.iter()).enumerate() {
            let e = rel_error(av, nv);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = format!("layer {l} bias #{idx}");
            }
        }
    }
    report
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Layer>,
    v: Vec<Layer>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let zeros = || {
            params
                .layers
                .iter()
                .map(|l| Layer {
                    w: Array2::zeros(l.w.dim()),
                    b: Array1::zeros(l.b.len()),
                })
                .collect::<Vec<_>>()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One Adam update with bias correction. Rejects non-finite gradients.
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpParams, lr: f64) -> Result<()> {
        if grads.iter_scalars().any(|g| !g.is_finite()) {
            return Err(Error::Optimizer(
                "non-finite gradient reached the optimizer".into(),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for l in 0..params.layers.len() {
            let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                for i in 0..p.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                }
            };
            update(
                params.layers[l].w.as_slice_mut().unwrap(),
                grads.layers[l].w.as_slice().unwrap(),
                self.m[l].w.as_slice_mut().unwrap(),
                self.v[l].w.as_slice_mut().unwrap(),
            );
            update(
                params.layers[l].b.as_slice_mut().unwrap(),
                grads.layers[l].b.as_slice().unwrap(),
                self.m[l].b.as_slice_mut().unwrap(),
                self.v[l].b.as_slice_mut().unwrap(),
            );
        }
        Ok(())
    }
}
