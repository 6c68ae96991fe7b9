//! Fully connected ReLU network with skip concatenations and exact
//! reverse-mode gradients.
//!
//! Activations are row-major `batch x width` matrices. Layer weights are
//! stored `n_in x n_out` so a forward pass is `Y = X W + b`.

use std::fmt::Debug;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Scalar type the network runs in; `f64` for gradient checks, `f32` for fast training.
pub trait Real: Float + Debug + Default + Send + Sync + 'static {
    /// `C = alpha * A B + beta * C` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).unwrap()
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `out (m x n) = beta * out + a (m x k, row-major) * b (k x n, row-major)`.
fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, out: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices cover the strided ranges asserted above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

/// Layer widths of an MLP. Layer `l` with `l` in `skip_at` receives the
/// network input concatenated after the previous layer's output.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub input_width: usize,
    pub hidden: Vec<usize>,
    pub output_width: usize,
    #[serde(default)]
    pub skip_at: Vec<usize>,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.output_width == 0 || self.hidden.iter().any(|w| *w == 0) {
            return Err(invalid("layer widths must be positive"));
        }
        if let Some(s) = self.skip_at.iter().find(|s| **s == 0 || **s > self.hidden.len()) {
            return Err(invalid(format!(
                "skip connection at layer {s} must target a layer in 1..={}",
                self.hidden.len()
            )));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        let n_in = if l == 0 { self.input_width } else { self.hidden[l - 1] };
        let n_in = n_in + if self.skip_at.contains(&l) { self.input_width } else { 0 };
        let n_out = if l == self.hidden.len() { self.output_width } else { self.hidden[l] };
        (n_in, n_out)
    }

    pub fn n_params(&self) -> usize {
        (0..self.n_layers())
            .map(|l| {
                let (i, o) = self.layer_shape(l);
                i * o + o
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    arch: Architecture,
    layers: Vec<Layer<T>>,
    /// Bumped on every parameter mutation; forward caches remember it.
    version: u64,
}

/// Per-layer gradients (or any other parameter-shaped quantity).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle<T> {
    pub layers: Vec<LayerGrad<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> GradientBundle<T> {
    pub fn zeros(arch: &Architecture) -> Self {
        GradientBundle {
            layers: (0..arch.n_layers())
                .map(|l| {
                    let (i, o) = arch.layer_shape(l);
                    LayerGrad { weight: vec![T::zero(); i * o], bias: vec![T::zero(); o] }
                })
                .collect(),
        }
    }

    pub fn slices(&self) -> impl Iterator<Item = &[T]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn add_assign(&mut self, other: &GradientBundle<T>) {
        for (a, b) in self.slices_mut().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x = *x + *y);
        }
    }

    pub fn scale(&mut self, s: T) {
        self.slices_mut().for_each(|a| a.iter_mut().for_each(|x| *x = *x * s));
    }

    pub fn is_finite(&self) -> bool {
        self.slices().all(|a| a.iter().all(|x| x.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().flat_map(|a| a.iter().map(|x| x.as_f64())).collect()
    }

    pub fn is_congruent(&self, arch: &Architecture) -> bool {
        self.layers.len() == arch.n_layers()
            && self.layers.iter().enumerate().all(|(l, g)| {
                let (i, o) = arch.layer_shape(l);
                g.weight.len() == i * o && g.bias.len() == o
            })
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    batch: usize,
    version: u64,
    /// Input matrix of every layer (including skip concatenations).
    inputs: Vec<Vec<T>>,
    output: Vec<T>,
}

impl<T> ForwardCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// `batch x output_width`, row-major.
    pub fn output(&self) -> &[T] {
        &self.output
    }
}

/// Reusable activation buffers for repeated forward/backward passes.
#[derive(Debug, Default)]
pub struct Workspace<T> {
    grad_a: Vec<T>,
    grad_b: Vec<T>,
}

impl<T: Real> Mlp<T> {
    /// He-uniform weights (fan-in; gain 1 on the input layer, sqrt 2 after ReLUs), zero biases.
    pub fn init<R: Rng>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let n = arch.n_layers();
        let layers = (0..n)
            .map(|l| {
                let (n_in, n_out) = arch.layer_shape(l);
                let gain = if l == 0 { 1.0 } else { 2.0 };
                let bound = (3.0 * gain / n_in as f64).sqrt();
                Layer {
                    n_in,
                    n_out,
                    weight: (0..n_in * n_out).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect(),
                    bias: vec![T::zero(); n_out],
                    activation: if l + 1 == n { Activation::Linear } else { Activation::Relu },
                }
            })
            .collect();
        Ok(Mlp { arch, layers, version: 0 })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let n = arch.n_layers();
        let layers = (0..n)
            .map(|l| {
                let (n_in, n_out) = arch.layer_shape(l);
                Layer {
                    n_in,
                    n_out,
                    weight: vec![T::zero(); n_in * n_out],
                    bias: vec![T::zero(); n_out],
                    activation: if l + 1 == n { Activation::Linear } else { Activation::Relu },
                }
            })
            .collect();
        Ok(Mlp { arch, layers, version: 0 })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mutable access to the layers; invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        self.version += 1;
        &mut self.layers
    }

    pub fn param_slices(&self) -> impl Iterator<Item = &[T]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    /// Weight and bias slices in layer order; invalidates outstanding forward caches.
    pub fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.version += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.param_slices().flat_map(|a| a.iter().map(|x| x.as_f64())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices().all(|a| a.iter().all(|x| x.is_finite()))
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> Mlp<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        Mlp {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    n_in: l.n_in,
                    n_out: l.n_out,
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                    activation: l.activation,
                })
                .collect(),
            version: 0,
        }
    }

    /// Forward pass over `batch` rows of `features`; keeps what backward needs.
    pub fn forward(&self, features: Vec<T>, batch: usize) -> Result<ForwardCache<T>> {
        let width = self.arch.input_width;
        if features.len() != batch * width {
            return Err(Error::Shape(format!(
                "{} feature values for a batch of {batch} rows of width {width}",
                features.len()
            )));
        }
        let n = self.layers.len();
        let mut inputs: Vec<Vec<T>> = Vec::with_capacity(n);
        inputs.push(features);
        let mut output = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(batch * layer.n_out);
            for _ in 0..batch {
                out.extend_from_slice(&layer.bias);
            }
            matmul(batch, layer.n_in, layer.n_out, &inputs[l], &layer.weight, T::one(), &mut out);
            if layer.activation == Activation::Relu {
                out.iter_mut().for_each(|x| *x = x.max(T::zero()));
            }
            if l + 1 == n {
                output = out;
            } else if self.arch.skip_at.contains(&(l + 1)) {
                let enc = &inputs[0];
                let total = layer.n_out + width;
                let mut cat = vec![T::zero(); batch * total];
                for ((dst, h), e) in cat
                    .chunks_exact_mut(total)
                    .zip(out.chunks_exact(layer.n_out))
                    .zip(enc.chunks_exact(width))
                {
                    dst[..layer.n_out].copy_from_slice(h);
                    dst[layer.n_out..].copy_from_slice(e);
                }
                inputs.push(cat);
            } else {
                inputs.push(out);
            }
        }
        Ok(ForwardCache { batch, version: self.version, inputs, output })
    }

    /// Output only, without retaining the cache.
    pub fn predict(&self, features: Vec<T>, batch: usize) -> Result<Vec<T>> {
        Ok(self.forward(features, batch)?.output)
    }

    /// Gradients of `sum(upstream * output)` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache<T>, upstream: &[T]) -> Result<GradientBundle<T>> {
        let mut grads = GradientBundle::zeros(&self.arch);
        self.backward_accumulate(cache, upstream, &mut grads, &mut Workspace::default())?;
        Ok(grads)
    }

    /// Like [`Mlp::backward`] but adds into `grads`.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache<T>,
        upstream: &[T],
        grads: &mut GradientBundle<T>,
        ws: &mut Workspace<T>,
    ) -> Result<()> {
        if cache.version != self.version || cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache(format!(
                "cache from parameter version {}, network is at {}",
                cache.version, self.version
            )));
        }
        if !grads.is_congruent(&self.arch) {
            return Err(Error::Shape("gradient bundle does not match the architecture".into()));
        }
        let batch = cache.batch;
        if upstream.len() != batch * self.arch.output_width {
            return Err(Error::Shape(format!(
                "{} upstream values for a batch of {batch} with {} outputs",
                upstream.len(),
                self.arch.output_width
            )));
        }
        let n = self.layers.len();
        let Workspace { grad_a, grad_b } = ws;
        grad_a.clear();
        grad_a.extend_from_slice(upstream);
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let (n_in, n_out) = (layer.n_in, layer.n_out);
            if layer.activation == Activation::Relu {
                // gradient passes where the unit was active; ties at 0 take derivative 0
                let (act, stride) = if l + 1 == n {
                    (&cache.output[..], n_out)
                } else {
                    (&cache.inputs[l + 1][..], self.layers[l + 1].n_in)
                };
                for (g, a) in grad_a.chunks_exact_mut(n_out).zip(act.chunks_exact(stride)) {
                    for (gi, ai) in g.iter_mut().zip(&a[..n_out]) {
                        *gi = if *ai > T::zero() { *gi } else { T::zero() };
                    }
                }
            }
            let x = &cache.inputs[l];
            let lg = &mut grads.layers[l];
            // dW += X^T dY
            // SAFETY: X is batch x n_in, dY is batch x n_out, dW is n_in x n_out.
            unsafe {
                T::gemm(
                    n_in,
                    batch,
                    n_out,
                    T::one(),
                    x.as_ptr(),
                    1,
                    n_in as isize,
                    grad_a.as_ptr(),
                    n_out as isize,
                    1,
                    T::one(),
                    lg.weight.as_mut_ptr(),
                    n_out as isize,
                    1,
                );
            }
            for row in grad_a.chunks_exact(n_out) {
                for (b, g) in lg.bias.iter_mut().zip(row) {
                    *b = *b + *g;
                }
            }
            if l == 0 {
                break;
            }
            // only the previous layer's part of the input needs a gradient
            let prev = self.layers[l - 1].n_out;
            // beta = 0 below: stale contents are never read
            if grad_b.len() != batch * prev {
                grad_b.resize(batch * prev, T::zero());
            }
            // dH = dY W[:prev, :]^T
            // SAFETY: W is n_in x n_out row-major; its transpose restricted to the first prev rows.
            unsafe {
                T::gemm(
                    batch,
                    n_out,
                    prev,
                    T::one(),
                    grad_a.as_ptr(),
                    n_out as isize,
                    1,
                    layer.weight.as_ptr(),
                    1,
                    n_out as isize,
                    T::zero(),
                    grad_b.as_mut_ptr(),
                    prev as isize,
                    1,
                );
            }
            std::mem::swap(grad_a, grad_b);
        }
        Ok(())
    }
}
