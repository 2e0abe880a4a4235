//! Dense feed-forward networks with hand-written reverse mode and Adam.
//!
//! Batches are row-major `batch × features` slices. Weights are stored
//! `outputs × inputs`, so a layer computes `Y = X Wᵀ + b`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::ops::{AddAssign, MulAssign};

use num_traits::Float;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnetError {
    #[error("input has {got} values, expected a multiple of {expected}")]
    InputDimension { expected: usize, got: usize },
    #[error("layer {layer} expects {expected} inputs but the previous layer produces {got}")]
    LayerMismatch { layer: usize, expected: usize, got: usize },
    #[error("layer {0} has parameters of the wrong length")]
    ParameterShape(usize),
    #[error("layer {0} has non-finite parameters")]
    NonFinite(usize),
    #[error("cache does not match this network or gradient shape")]
    StaleCache,
}

/// Floating-point element type of a network.
pub trait Real:
    Float + Default + Debug + Send + Sync + AddAssign + MulAssign + Serialize + DeserializeOwned + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Raw strided GEMM: `C = alpha·A·B + beta·C`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self, c: *mut Self, rsc: isize, csc: isize,
    );
}

impl Real for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: f32,
        a: *const f32, rsa: isize, csa: isize,
        b: *const f32, rsb: isize, csb: isize,
        beta: f32, c: *mut f32, rsc: isize, csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: f64,
        a: *const f64, rsa: isize, csa: isize,
        b: *const f64, rsb: isize, csb: isize,
        beta: f64, c: *mut f64, rsc: isize, csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `C (m×n) = op(A) · op(B) + beta·C`, all row-major. `a_t` means `a` is
/// stored `k×m`; `b_t` means `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], a_t: bool, b: &[T], b_t: bool, beta: T, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; strides describe those buffers.
    unsafe {
        T::gemm_raw(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply<T: Real>(self, v: T) -> T {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(T::zero()),
            Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
        }
    }

    /// Derivative expressed through the activation's output.
    fn grad_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    /// `outputs × inputs`, row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet<T> {
    layers: Vec<Layer<T>>,
}

/// Activations retained by [`DenseNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    batch: usize,
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<T>>,
}

impl<T> ForwardCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[T] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrad<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// One gradient block per parameter block of a [`DenseNet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSet<T> {
    pub layers: Vec<LayerGrad<T>>,
}

impl<T: Real> GradientSet<T> {
    pub fn zeros_like(net: &DenseNet<T>) -> Self {
        GradientSet {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad { weights: vec![T::zero(); l.weights.len()], bias: vec![T::zero(); l.bias.len()] })
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<T> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
    }

    pub fn scale(&mut self, factor: T) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| *v == T::zero()))
    }

    fn congruent(&self, net: &DenseNet<T>) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len())
    }
}

impl<T: Real> DenseNet<T> {
    /// Builds a network with layer widths `sizes` (input first). Weights are
    /// uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        assert_eq!(sizes.len(), activations.len() + 1, "one activation per layer");
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (inputs, outputs) = (w[0], w[1]);
                let limit = libm::sqrt(6.0 / (inputs + outputs) as f64);
                let weights = (0..inputs * outputs)
                    .map(|_| T::lit(limit * (2.0 * rng.random::<f64>() - 1.0)))
                    .collect();
                Layer { inputs, outputs, activation, weights, bias: vec![T::zero(); outputs] }
            })
            .collect();
        DenseNet { layers }
    }

    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self, NnetError> {
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(NnetError::ParameterShape(i));
            }
            if !l.weights.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(NnetError::NonFinite(i));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(NnetError::LayerMismatch { layer: i, expected: l.inputs, got: layers[i - 1].outputs });
            }
        }
        Ok(DenseNet { layers })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<T> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
    }

    /// Overwrites all parameters from a flat slice in [`Self::params_flat`] order.
    pub fn set_params_flat(&mut self, flat: &[T]) -> Result<(), NnetError> {
        if flat.len() != self.param_count() {
            return Err(NnetError::ParameterShape(0));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = it.next().unwrap_or_else(T::zero);
            }
        }
        Ok(())
    }

    /// Converts parameters to another precision.
    pub fn cast<U: Real>(&self) -> DenseNet<U> {
        DenseNet {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    activation: l.activation,
                    weights: l.weights.iter().map(|v| U::lit(v.as_f64())).collect(),
                    bias: l.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    fn check_input(&self, input: &[T]) -> Result<usize, NnetError> {
        let d = self.input_dim();
        if d == 0 || input.len() % d != 0 {
            return Err(NnetError::InputDimension { expected: d, got: input.len() });
        }
        Ok(input.len() / d)
    }

    fn layer_forward(layer: &Layer<T>, input: &[T], batch: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(batch * layer.outputs);
        for _ in 0..batch {
            out.extend_from_slice(&layer.bias);
        }
        gemm(batch, layer.inputs, layer.outputs, input, false, &layer.weights, true, T::one(), &mut out);
        if layer.activation != Activation::Identity {
            out.iter_mut().for_each(|v| *v = layer.activation.apply(*v));
        }
        out
    }

    /// Runs a batch forward without retaining intermediates.
    /// Appends, for every ReLU unit of a cached pass, whether it was active.
    pub fn relu_pattern(&self, cache: &ForwardCache<T>, out: &mut Vec<bool>) {
        for (layer, act) in self.layers.iter().zip(&cache.activations[1..]) {
            if layer.activation == Activation::Relu {
                out.extend(act.iter().map(|v| *v > T::zero()));
            }
        }
    }

    pub fn predict(&self, input: &[T]) -> Result<Vec<T>, NnetError> {
        let batch = self.check_input(input)?;
        let mut current: Vec<T> = input.to_vec();
        for layer in &self.layers {
            current = Self::layer_forward(layer, &current, batch);
        }
        Ok(current)
    }

    /// Runs a batch forward, returning the output and a cache for [`Self::backward`].
    pub fn forward(&self, input: &[T]) -> Result<(Vec<T>, ForwardCache<T>), NnetError> {
        let batch = self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        for layer in &self.layers {
            let next = Self::layer_forward(layer, activations.last().expect("non-empty"), batch);
            activations.push(next);
        }
        let output = activations.last().cloned().unwrap_or_default();
        Ok((output, ForwardCache { batch, activations }))
    }

    /// Exact reverse-mode gradients of `sum(output ⊙ output_grad)`.
    pub fn backward(&self, cache: &ForwardCache<T>, output_grad: &[T]) -> Result<(GradientSet<T>, Vec<T>), NnetError> {
        let mut grads = GradientSet::zeros_like(self);
        let input_grad = self.backward_into(cache, output_grad, &mut grads, true)?;
        Ok((grads, input_grad.unwrap_or_default()))
    }

    /// Like [`Self::backward`] but accumulates into `grads`. The input
    /// gradient is only computed when `want_input_grad` is set.
    pub fn backward_into(
        &self,
        cache: &ForwardCache<T>,
        output_grad: &[T],
        grads: &mut GradientSet<T>,
        want_input_grad: bool,
    ) -> Result<Option<Vec<T>>, NnetError> {
        let batch = cache.batch;
        if cache.activations.len() != self.layers.len() + 1
            || output_grad.len() != batch * self.output_dim()
            || cache.activations.iter().zip(self.layer_widths()).any(|(a, w)| a.len() != batch * w)
            || !grads.congruent(self)
        {
            return Err(NnetError::StaleCache);
        }
        let mut g = output_grad.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let y = &cache.activations[l + 1];
            if layer.activation != Activation::Identity {
                g.iter_mut().zip(y).for_each(|(gv, &yv)| *gv *= layer.activation.grad_from_output(yv));
            }
            let x = &cache.activations[l];
            let lg = &mut grads.layers[l];
            gemm(layer.outputs, batch, layer.inputs, &g, true, x, false, T::one(), &mut lg.weights);
            for row in g.chunks_exact(layer.outputs) {
                lg.bias.iter_mut().zip(row).for_each(|(b, &v)| *b += v);
            }
            if l > 0 || want_input_grad {
                let mut gx = vec![T::zero(); batch * layer.inputs];
                gemm(batch, layer.outputs, layer.inputs, &g, false, &layer.weights, false, T::zero(), &mut gx);
                g = gx;
            } else {
                return Ok(None);
            }
        }
        Ok(Some(g))
    }

    fn layer_widths(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.first().map(|l| l.inputs).into_iter().chain(self.layers.iter().map(|l| l.outputs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam moments for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: GradientSet<T>,
    second: GradientSet<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(net: &DenseNet<T>, config: AdamConfig) -> Self {
        AdamState { config, step: 0, first: GradientSet::zeros_like(net), second: GradientSet::zeros_like(net) }
    }

    /// One bias-corrected Adam update of `net` along `grads`.
    pub fn apply(&mut self, net: &mut DenseNet<T>, grads: &GradientSet<T>) -> Result<(), NnetError> {
        if !grads.congruent(net) || !self.first.congruent(net) {
            return Err(NnetError::StaleCache);
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let correction1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let correction2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        let step_size = T::lit(c.learning_rate / correction1);
        let inv_sqrt_c2 = T::lit(1.0 / libm::sqrt(correction2));
        let eps = T::lit(c.epsilon);
        for (((layer, g), m), v) in net.layers.iter_mut().zip(&grads.layers).zip(&mut self.first.layers).zip(&mut self.second.layers) {
            let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
            let gs = g.weights.iter().chain(&g.bias);
            let ms = m.weights.iter_mut().chain(m.bias.iter_mut());
            let vs = v.weights.iter_mut().chain(v.bias.iter_mut());
            for (((p, &gv), mv), vv) in params.zip(gs).zip(ms).zip(vs) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *p = *p - step_size * *mv / ((*vv).sqrt() * inv_sqrt_c2 + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates passed over because `x ± h` straddled a kink.
    pub skipped: usize,
}

/// Compares `analytic` against central differences of `loss` on up to
/// `coords` randomly chosen coordinates (all of them if there are fewer).
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, floor)`;
/// `floor` keeps vanishing gradients from dividing by zero.
pub fn grad_check<F, R>(
    params: &[f64],
    analytic: &[f64],
    mut loss: F,
    h: f64,
    coords: usize,
    floor: f64,
    rng: &mut R,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    grad_check_piecewise(params, analytic, |p| (loss(p), Vec::new()), h, coords, floor, rng)
}

/// [`grad_check`] for piecewise-smooth losses. `loss` also returns a region
/// signature (for example which ReLU units are active); a coordinate whose
/// `x + h` and `x - h` evaluations land in different regions has no valid
/// central difference and is replaced by the next random coordinate.
pub fn grad_check_piecewise<F, R>(
    params: &[f64],
    analytic: &[f64],
    mut loss: F,
    h: f64,
    coords: usize,
    floor: f64,
    rng: &mut R,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<bool>),
    R: Rng + ?Sized,
{
    assert_eq!(params.len(), analytic.len());
    let mut order: Vec<usize> = (0..params.len()).collect();
    let take = coords.min(order.len());
    let mut work = params.to_vec();
    let mut report = GradCheckReport { max_relative_error: 0.0, worst_index: 0, checked: 0, skipped: 0 };
    for k in 0..order.len() {
        if report.checked == take {
            break;
        }
        let j = rng.random_range(k..order.len());
        order.swap(k, j);
        let i = order[k];
        let orig = work[i];
        work[i] = orig + h;
        let (up, up_region) = loss(&work);
        work[i] = orig - h;
        let (down, down_region) = loss(&work);
        work[i] = orig;
        if up_region != down_region {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = libm::fabs(a - numeric) / libm::fabs(a).max(libm::fabs(numeric)).max(floor);
        if err > report.max_relative_error || report.max_relative_error.is_nan() {
            report.max_relative_error = err;
            report.worst_index = i;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn identity_layer(n: usize) -> DenseNet<f64> {
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
        }
        DenseNet::from_layers(vec![Layer { inputs: n, outputs: n, activation: Activation::Identity, weights, bias: vec![0.0; n] }])
            .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = identity_layer(3);
        let x = [1.0, -2.0, 0.5, 4.0, 0.0, -1.0];
        assert_eq!(net.predict(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn piecewise_check_skips_coordinates_straddling_a_kink() {
        // sum |x_i|; coordinate 0 sits inside the ±h window around the kink.
        let params = [3e-5, 0.7, -1.2, 0.4];
        let analytic: Vec<f64> = params.iter().map(|x: &f64| x.signum()).collect();
        let loss = |p: &[f64]| (p.iter().map(|x| x.abs()).sum::<f64>(), p.iter().map(|x| *x > 0.0).collect::<Vec<_>>());
        let report = grad_check_piecewise(&params, &analytic, loss, 1e-4, 3, 1e-7, &mut crate::rng::stream(1, &[]));
        assert_eq!((report.checked, report.skipped), (3, 1));
        assert!(report.max_relative_error < 1e-8);
        assert_ne!(report.worst_index, 0);

        let plain = grad_check(&params, &analytic, |p| loss(p).0, 1e-4, 4, 1e-7, &mut crate::rng::stream(1, &[]));
        assert!(plain.max_relative_error > 0.1, "the kink is visible without region tracking");
    }

    #[test]
    fn relu_zeroes_negative_preactivations() {
        let net = DenseNet::from_layers(vec![Layer {
            inputs: 2,
            outputs: 2,
            activation: Activation::Relu,
            weights: vec![1.0, 0.0, 0.0, 1.0],
            bias: vec![-10.0, -10.0],
        }])
        .unwrap();
        assert_eq!(net.predict(&[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn two_layer_matches_hand_arithmetic() {
        // h = relu([[1,2],[-1,1]] x + [0,1]); y = [[2,-1],[0.5,3]] h + [1,0]
        let net = DenseNet::from_layers(vec![
            Layer { inputs: 2, outputs: 2, activation: Activation::Relu, weights: vec![1.0, 2.0, -1.0, 1.0], bias: vec![0.0, 1.0] },
            Layer { inputs: 2, outputs: 2, activation: Activation::Identity, weights: vec![2.0, -1.0, 0.5, 3.0], bias: vec![1.0, 0.0] },
        ])
        .unwrap();
        // x = (1, 3): pre = (7, 3) -> h = (7, 3); y = (14 - 3 + 1, 3.5 + 9) = (12, 12.5)
        // x = (2, -2): pre = (-2, -3) -> h = (0, 0); y = (1, 0)
        assert_eq!(net.predict(&[1.0, 3.0, 2.0, -2.0]).unwrap(), vec![12.0, 12.5, 1.0, 0.0]);
    }

    #[test]
    fn mismatched_input_is_an_error() {
        let net = identity_layer(3);
        assert_eq!(net.predict(&[1.0, 2.0]), Err(NnetError::InputDimension { expected: 3, got: 2 }));
        let bad = Layer { inputs: 2, outputs: 2, activation: Activation::Relu, weights: vec![0.0; 3], bias: vec![0.0; 2] };
        assert_eq!(DenseNet::from_layers(vec![bad]), Err(NnetError::ParameterShape(0)));
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let mut rng = stream(1, &[]);
        let net: DenseNet<f64> = DenseNet::new(&[3, 2], &[Activation::Identity], &mut rng);
        let x = [0.5, -1.0, 2.0];
        let (_, cache) = net.forward(&x).unwrap();
        let (grads, _) = net.backward(&cache, &[1.0, 1.0]).unwrap();
        assert_eq!(grads.layers[0].weights, vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        assert_eq!(grads.layers[0].bias, vec![1.0, 1.0]);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = stream(2, &[]);
        let net: DenseNet<f64> = DenseNet::new(&[4, 5, 3], &[Activation::Relu, Activation::Sigmoid], &mut rng);
        let (_, cache) = net.forward(&[0.1, 0.2, -0.3, 0.4]).unwrap();
        let (grads, gx) = net.backward(&cache, &[0.0; 3]).unwrap();
        assert!(grads.is_zero());
        assert!(gx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = stream(3, &[]);
        let a: DenseNet<f64> = DenseNet::new(&[4, 3], &[Activation::Relu], &mut rng);
        let b: DenseNet<f64> = DenseNet::new(&[5, 3], &[Activation::Relu], &mut rng);
        let (_, cache) = b.forward(&[0.0; 5]).unwrap();
        assert_eq!(a.backward(&cache, &[1.0; 3]).unwrap_err(), NnetError::StaleCache);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = stream(seed, &[]);
            let net: DenseNet<f64> =
                DenseNet::new(&[7, 9, 6, 4], &[Activation::Relu, Activation::Sigmoid, Activation::Identity], &mut rng);
            let batch = 3;
            let x: Vec<f64> = (0..batch * 7).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let w: Vec<f64> = (0..batch * 4).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let (_, cache) = net.forward(&x).unwrap();
            let (grads, gx) = net.backward(&cache, &w).unwrap();
            let loss_of = |n: &DenseNet<f64>, input: &[f64]| -> f64 {
                n.predict(input).unwrap().iter().zip(&w).map(|(o, c)| o * c).sum()
            };
            let report = grad_check(
                &net.params_flat(),
                &grads.flat(),
                |p| {
                    let mut probe = net.clone();
                    probe.set_params_flat(p).unwrap();
                    loss_of(&probe, &x)
                },
                1e-5,
                250,
                1e-7,
                &mut rng,
            );
            assert!(report.max_relative_error <= 1e-4, "seed {seed}: {report:?}");
            let input_report = grad_check(&x, &gx, |xi| loss_of(&net, xi), 1e-5, 250, 1e-7, &mut rng);
            assert!(input_report.max_relative_error <= 1e-4, "seed {seed}: {input_report:?}");
        }
    }

    #[test]
    fn f32_and_f64_forward_agree() {
        let mut rng = stream(4, &[]);
        let net: DenseNet<f64> = DenseNet::new(&[5, 8, 3], &[Activation::Relu, Activation::Sigmoid], &mut rng);
        let x = [0.3, -0.2, 0.9, 0.0, -1.0];
        let y64 = net.predict(&x).unwrap();
        let x32: Vec<f32> = x.iter().map(|v| *v as f32).collect();
        let y32 = net.cast::<f32>().predict(&x32).unwrap();
        for (a, b) in y64.iter().zip(&y32) {
            assert!((a - *b as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut rng = stream(5, &[]);
        let mut net: DenseNet<f64> = DenseNet::new(&[3, 2], &[Activation::Identity], &mut rng);
        let before = net.params_flat();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let zero = GradientSet::zeros_like(&net);
        adam.apply(&mut net, &zero).unwrap();
        assert_eq!(net.params_flat(), before);
    }

    #[test]
    fn adam_first_step_is_sign_times_learning_rate() {
        let mut rng = stream(6, &[]);
        let mut net: DenseNet<f64> = DenseNet::new(&[3, 2], &[Activation::Identity], &mut rng);
        let before = net.params_flat();
        let mut grads = GradientSet::zeros_like(&net);
        let pattern = [0.3, -2.0, 1e-3, -5e-2, 7.0, -0.1];
        grads.layers[0].weights.copy_from_slice(&pattern);
        grads.layers[0].bias.copy_from_slice(&[0.5, -0.5]);
        let mut adam = AdamState::new(&net, AdamConfig { learning_rate: 1e-3, ..Default::default() });
        adam.apply(&mut net, &grads).unwrap();
        for ((after, before), g) in net.params_flat().iter().zip(&before).zip(grads.flat()) {
            let expected = -1e-3 * g.signum();
            assert!((after - before - expected).abs() < 1e-8, "{g}");
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // One identity unit with no input dependence: loss = (b - 3)^2.
        let mut net = DenseNet::from_layers(vec![Layer {
            inputs: 1,
            outputs: 1,
            activation: Activation::Identity,
            weights: vec![0.0],
            bias: vec![0.0],
        }])
        .unwrap();
        let mut adam = AdamState::new(&net, AdamConfig { learning_rate: 1e-3, ..Default::default() });
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let b = net.layers()[0].bias[0];
            let loss = (b - 3.0) * (b - 3.0);
            assert!(loss < last);
            last = loss;
            let mut grads = GradientSet::zeros_like(&net);
            grads.layers[0].bias[0] = 2.0 * (b - 3.0);
            adam.apply(&mut net, &grads).unwrap();
        }
    }
}
