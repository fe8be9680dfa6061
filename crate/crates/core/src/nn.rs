//! From-scratch MLP machinery for the factorized lens transport model.
//!
//! The model for one (lens, path, direction) triple is a pair of small
//! multilayer perceptrons: a *classifier* that decides whether an input ray
//! belongs to the path's valid region, and a *regressor* that maps valid
//! inputs to the exit ray. Both use tanh hidden activations (the transport
//! map is C¹ inside the valid region, and tanh keeps the fit C¹ — piecewise
//! linear activations leave visible kinks) and a linear output layer.
//!
//! Training runs single-threaded and deterministically: 32-bit parameters,
//! 64-bit loss accumulation, Adam, and the exponential step-decay learning
//! rate schedule. Inference has a separate SoA fast path over blocks of
//! [`LANES`] rays that replaces `tanh` with a clamped Padé approximant
//! ([`tanh_rational`]); the batched kernels are what let the neural backend
//! outrun the f64 oracle tracer.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{normalize_input, Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::lens::LensSystem;
use crate::trace::Direction;

/// Layer widths of the valid-region classifier.
pub const CLASSIFIER_LAYERS: [usize; 4] = [4, 32, 32, 1];
/// Layer widths of the exit-ray regressor.
pub const REGRESSOR_LAYERS: [usize; 7] = [4, 32, 32, 32, 32, 32, 5];

/// Magic bytes of the model file (7 ASCII chars + NUL pad).
pub const MODEL_MAGIC: [u8; 8] = *b"PLTM-NN\0";
pub const MODEL_VERSION: u32 = 1;

/// Ray block width of the inference fast path.
pub const LANES: usize = 16;

/// Records per internal chunk during training passes; bounds scratch memory
/// and keeps activations cache-resident.
const CHUNK: usize = 256;

// ---------------------------------------------------------------------------
// Rational tanh
// ---------------------------------------------------------------------------

/// Padé [7/6] approximant of tanh, clamped to ±1 for |x| > 4.
///
/// Coefficients are the Taylor-matched continued-fraction expansion:
/// `x(135135 + 17325x² + 378x⁴ + x⁶) / (135135 + 62370x² + 3150x⁴ + 28x⁶)`.
/// All coefficients are exactly representable in f32. The approximation
/// error on [−4, 4] stays below 2e-5 and the clamp step at |x| = 4 is
/// ≈ 6.6e-4, so the sup-norm error against true tanh is < 1e-3 everywhere.
#[inline(always)]
pub fn tanh_rational(x: f32) -> f32 {
    if x > 4.0 {
        return 1.0;
    }
    if x < -4.0 {
        return -1.0;
    }
    let x2 = x * x;
    let p = x * (135135.0 + x2 * (17325.0 + x2 * (378.0 + x2)));
    let q = 135135.0 + x2 * (62370.0 + x2 * (3150.0 + x2 * 28.0));
    p / q
}

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

/// Hidden-layer activation. Production networks always use tanh; the ReLU
/// variant exists so tests can demonstrate the C¹-vs-kink contrast.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub(crate) enum Activation {
    Tanh,
    #[cfg_attr(not(test), allow(dead_code))]
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out × n_in`.
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    pub(crate) activation: Activation,
}

impl Mlp {
    /// Xavier-uniform initialization, deterministic in `seed`.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "layer dimension chain {dims:?} is not a valid MLP shape"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for win in dims.windows(2) {
            let (n_in, n_out) = (win[0], win[1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt() as f32;
            let w = (0..n_in * n_out)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            layers.push(Layer {
                n_in,
                n_out,
                w,
                b: vec![0.0; n_out],
            });
        }
        Ok(Mlp {
            layers,
            activation: Activation::Tanh,
        })
    }

    /// Build a network from explicit layers (tanh hidden activations, linear
    /// output). Shapes must chain: each layer's `n_out` is the next `n_in`.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension("a network needs at least one layer".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.n_in == 0 || l.n_out == 0 {
                return Err(Error::Dimension(format!("layer {k} has a zero dimension")));
            }
            if l.w.len() != l.n_in * l.n_out || l.b.len() != l.n_out {
                return Err(Error::Dimension(format!(
                    "layer {k} stores {}x{} parameters for shape {}x{}",
                    l.w.len(),
                    l.b.len(),
                    l.n_out,
                    l.n_in
                )));
            }
        }
        if let Some(pair) = layers.windows(2).find(|p| p[0].n_out != p[1].n_in) {
            return Err(Error::Dimension(format!(
                "layer boundary mismatch: {} outputs feed {} inputs",
                pair[0].n_out, pair[1].n_in
            )));
        }
        Ok(Mlp {
            layers,
            activation: Activation::Tanh,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].n_in];
        d.extend(self.layers.iter().map(|l| l.n_out));
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn check_finite(&self) -> Result<()> {
        for l in &self.layers {
            if l.w.iter().chain(&l.b).any(|v| !v.is_finite()) {
                return Err(Error::Model("non-finite parameter".into()));
            }
        }
        Ok(())
    }

    #[inline]
    fn act(&self, v: f32) -> f32 {
        match self.activation {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Exact-tanh forward pass for a single input.
    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.layers[0].n_in {
            return Err(Error::Dimension(format!(
                "input has {} components, network expects {}",
                x.len(),
                self.layers[0].n_in
            )));
        }
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0f32; layer.n_out];
            for (j, o) in out.iter_mut().enumerate() {
                let row = &layer.w[j * layer.n_in..(j + 1) * layer.n_in];
                let mut z = layer.b[j];
                for (wv, av) in row.iter().zip(&a) {
                    z = wv.mul_add(*av, z);
                }
                *o = if l < last { self.act(z) } else { z };
            }
            a = out;
        }
        Ok(a)
    }

    /// Training forward pass over a chunk in neuron-major SoA layout:
    /// `x[i * m + r]` is input component `i` of record `r`. Returns all
    /// post-activation tensors (`acts[0]` is the input).
    fn forward_chunk(&self, x: Vec<f32>, m: usize) -> Tape {
        debug_assert_eq!(x.len(), self.layers[0].n_in * m);
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let prev = acts.last().unwrap();
            let mut out = vec![0.0f32; layer.n_out * m];
            for j in 0..layer.n_out {
                let row = &mut out[j * m..(j + 1) * m];
                row.fill(layer.b[j]);
                for i in 0..layer.n_in {
                    let w = layer.w[j * layer.n_in + i];
                    let a = &prev[i * m..(i + 1) * m];
                    for (o, av) in row.iter_mut().zip(a) {
                        *o = w.mul_add(*av, *o);
                    }
                }
            }
            if l < last {
                match self.activation {
                    Activation::Tanh => out.iter_mut().for_each(|v| *v = v.tanh()),
                    Activation::Relu => out.iter_mut().for_each(|v| *v = v.max(0.0)),
                }
            }
            acts.push(out);
        }
        Tape { m, acts }
    }

    /// Backpropagate `dy` (gradient of the loss wrt the linear outputs, in
    /// the same SoA layout) through the tape, accumulating into `grads`.
    fn backward_chunk(&self, tape: &Tape, mut dy: Vec<f32>, grads: &mut Gradients) {
        let m = tape.m;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let a_in = &tape.acts[l];
            for j in 0..layer.n_out {
                let drow = &dy[j * m..(j + 1) * m];
                let gw = &mut grads.w[l][j * layer.n_in..(j + 1) * layer.n_in];
                for (i, g) in gw.iter_mut().enumerate() {
                    *g += dot_f32(drow, &a_in[i * m..(i + 1) * m]);
                }
                grads.b[l][j] += sum_f32(drow);
            }
            if l == 0 {
                break;
            }
            let mut dprev = vec![0.0f32; layer.n_in * m];
            for j in 0..layer.n_out {
                let drow = &dy[j * m..(j + 1) * m];
                for i in 0..layer.n_in {
                    let w = layer.w[j * layer.n_in + i];
                    let dp = &mut dprev[i * m..(i + 1) * m];
                    for (p, d) in dp.iter_mut().zip(drow) {
                        *p = w.mul_add(*d, *p);
                    }
                }
            }
            // Activation derivative from the stored post-activations.
            let a = &tape.acts[l];
            match self.activation {
                Activation::Tanh => {
                    for (p, av) in dprev.iter_mut().zip(a) {
                        *p *= 1.0 - av * av;
                    }
                }
                Activation::Relu => {
                    for (p, av) in dprev.iter_mut().zip(a) {
                        if *av <= 0.0 {
                            *p = 0.0;
                        }
                    }
                }
            }
            dy = dprev;
        }
    }

    /// Inference fast path: rational-tanh forward over one block of
    /// [`LANES`] rays. `buf_a[0..dims[0]]` holds the inputs on entry and
    /// `buf_a[0..dims.last()]` the outputs on exit; both buffers must be at
    /// least as wide as the widest layer. Lane results are independent of
    /// the other lanes, so padding lanes with arbitrary finite values is
    /// harmless. Output neurons are computed four at a time so the FMA
    /// chains of independent accumulators overlap.
    fn forward_block(&self, buf_a: &mut Vec<[f32; LANES]>, buf_b: &mut Vec<[f32; LANES]>) {
        debug_assert_eq!(self.activation, Activation::Tanh);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let n_in = layer.n_in;
            let hidden = l < last;
            let groups = layer.n_out / 4 * 4;
            let mut j = 0;
            while j < groups {
                let mut a0 = [layer.b[j]; LANES];
                let mut a1 = [layer.b[j + 1]; LANES];
                let mut a2 = [layer.b[j + 2]; LANES];
                let mut a3 = [layer.b[j + 3]; LANES];
                for (i, a) in buf_a[..n_in].iter().enumerate() {
                    let w0 = layer.w[j * n_in + i];
                    let w1 = layer.w[(j + 1) * n_in + i];
                    let w2 = layer.w[(j + 2) * n_in + i];
                    let w3 = layer.w[(j + 3) * n_in + i];
                    for k in 0..LANES {
                        a0[k] = w0.mul_add(a[k], a0[k]);
                        a1[k] = w1.mul_add(a[k], a1[k]);
                        a2[k] = w2.mul_add(a[k], a2[k]);
                        a3[k] = w3.mul_add(a[k], a3[k]);
                    }
                }
                for (g, acc) in [a0, a1, a2, a3].into_iter().enumerate() {
                    let mut acc = acc;
                    if hidden {
                        for v in &mut acc {
                            *v = tanh_rational(*v);
                        }
                    }
                    buf_b[j + g] = acc;
                }
                j += 4;
            }
            while j < layer.n_out {
                let mut acc = [layer.b[j]; LANES];
                for (i, a) in buf_a[..n_in].iter().enumerate() {
                    let w = layer.w[j * n_in + i];
                    for k in 0..LANES {
                        acc[k] = w.mul_add(a[k], acc[k]);
                    }
                }
                if hidden {
                    for v in &mut acc {
                        *v = tanh_rational(*v);
                    }
                }
                buf_b[j] = acc;
                j += 1;
            }
            std::mem::swap(buf_a, buf_b);
        }
    }

    fn max_width(&self) -> usize {
        self.dims().into_iter().max().unwrap()
    }
}

struct Tape {
    m: usize,
    acts: Vec<Vec<f32>>,
}

/// Deterministic vectorizable dot product (16 independent accumulators,
/// fixed tree reduction).
#[inline]
fn dot_f32(x: &[f32], y: &[f32]) -> f32 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f32; 16];
    let chunks = x.len() / 16;
    for c in 0..chunks {
        let xb = &x[c * 16..c * 16 + 16];
        let yb = &y[c * 16..c * 16 + 16];
        for k in 0..16 {
            acc[k] = xb[k].mul_add(yb[k], acc[k]);
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 16..x.len() {
        tail = x[i].mul_add(y[i], tail);
    }
    tree16(&acc) + tail
}

#[inline]
fn sum_f32(x: &[f32]) -> f32 {
    let mut acc = [0.0f32; 16];
    let chunks = x.len() / 16;
    for c in 0..chunks {
        let xb = &x[c * 16..c * 16 + 16];
        for k in 0..16 {
            acc[k] += xb[k];
        }
    }
    let mut tail = 0.0f32;
    for v in &x[chunks * 16..] {
        tail += v;
    }
    tree16(&acc) + tail
}

#[inline]
fn tree16(acc: &[f32; 16]) -> f32 {
    let mut s = [0.0f32; 8];
    for k in 0..8 {
        s[k] = acc[k] + acc[k + 8];
    }
    let q = [s[0] + s[4], s[1] + s[5], s[2] + s[6], s[3] + s[7]];
    (q[0] + q[2]) + (q[1] + q[3])
}

// ---------------------------------------------------------------------------
// Gradients and Adam
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Gradients {
    pub w: Vec<Vec<f32>>,
    pub b: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn zeros_like(m: &Mlp) -> Self {
        Gradients {
            w: m.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            b: m.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    fn reset(&mut self) {
        for v in self.w.iter_mut().chain(self.b.iter_mut()) {
            v.fill(0.0);
        }
    }
}

/// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8 (first/second moments in f32,
/// bias-correction factors in f64).
struct Adam {
    m: Gradients,
    v: Gradients,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(net: &Mlp) -> Self {
        Adam {
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut Mlp, g: &Gradients, lr: f64) {
        self.t += 1;
        let inv_bc1 = (1.0 / (1.0 - Self::BETA1.powi(self.t as i32))) as f32;
        let inv_bc2 = (1.0 / (1.0 - Self::BETA2.powi(self.t as i32))) as f32;
        let lr = lr as f32;
        let (b1, b2) = (Self::BETA1 as f32, Self::BETA2 as f32);
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let params = layer.w.iter_mut().chain(layer.b.iter_mut());
            let grads = g.w[l].iter().chain(g.b[l].iter());
            let moms = self.m.w[l].iter_mut().chain(self.m.b[l].iter_mut());
            let vels = self.v.w[l].iter_mut().chain(self.v.b[l].iter_mut());
            for (((p, &gv), m), v) in params.zip(grads).zip(moms).zip(vels) {
                *m = b1 * *m + (1.0 - b1) * gv;
                *v = b2 * *v + (1.0 - b2) * gv * gv;
                let mhat = *m * inv_bc1;
                let vhat = *v * inv_bc2;
                *p -= lr * mhat / (vhat.sqrt() + Self::EPS);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Per-term breakdown of the regressor objective.
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct RegressorTerms {
    pub position: f64,
    pub intensity: f64,
    pub direction: f64,
}

/// Lift transverse direction components to a unit 3-vector (axial component
/// from the unit constraint, non-negative; callers fix the axial sign).
/// When the transverse part already exceeds unit length the axial component
/// is zero and the vector is normalized.
#[inline]
fn lift_transverse(t: [f32; 2]) -> [f32; 3] {
    let s = t[0] * t[0] + t[1] * t[1];
    if !s.is_finite() {
        return [0.0, 0.0, 1.0];
    }
    if s < 1.0 {
        [t[0], t[1], (1.0 - s).sqrt()]
    } else {
        let n = s.sqrt();
        [t[0] / n, t[1] / n, 0.0]
    }
}

/// `1 − cos` between the lifted predicted and target directions, plus the
/// gradient wrt the predicted transverse components. A degenerate
/// (non-finite) prediction scores the documented worst case 2.0 with zero
/// gradient.
#[inline]
fn direction_term(pred: [f32; 2], target: [f32; 2]) -> (f32, [f32; 2]) {
    let s = pred[0] * pred[0] + pred[1] * pred[1];
    if !s.is_finite() {
        return (2.0, [0.0, 0.0]);
    }
    let u = lift_transverse(target);
    if s < 1.0 {
        let z = (1.0 - s).sqrt();
        let cos = pred[0] * u[0] + pred[1] * u[1] + z * u[2];
        let z_safe = z.max(1e-3);
        let g = [
            -(u[0] - pred[0] * u[2] / z_safe),
            -(u[1] - pred[1] * u[2] / z_safe),
        ];
        (1.0 - cos, g)
    } else {
        let n = s.sqrt();
        let dot = pred[0] * u[0] + pred[1] * u[1];
        let cos = dot / n;
        let n3 = n * n * n;
        let g = [
            -(u[0] / n - pred[0] * dot / n3),
            -(u[1] / n - pred[1] * dot / n3),
        ];
        (1.0 - cos, g)
    }
}

/// Regressor loss for one record: component-mean squared position error +
/// squared intensity error + (1 − cosine) on the lifted directions, with
/// unit term weights. Outputs are ordered `[x, y, ωx, ωy, I]`.
pub fn loss_regressor(pred: &[f32; 5], target: &[f32; 5]) -> (f64, RegressorTerms) {
    let dx = pred[0] - target[0];
    let dy = pred[1] - target[1];
    let di = pred[4] - target[4];
    let pos = 0.5 * (dx as f64 * dx as f64 + dy as f64 * dy as f64);
    let int = di as f64 * di as f64;
    let (dir, _) = direction_term([pred[2], pred[3]], [target[2], target[3]]);
    let terms = RegressorTerms {
        position: pos,
        intensity: int,
        direction: dir as f64,
    };
    (pos + int + dir as f64, terms)
}

/// Numerically stable binary cross-entropy on a logit.
pub fn loss_classifier(logit: f32, label: f32) -> f64 {
    let z = logit as f64;
    let y = label as f64;
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

// ---------------------------------------------------------------------------
// Batched loss/gradient passes
// ---------------------------------------------------------------------------

#[derive(Default)]
struct PassSums {
    loss: f64,
    terms: RegressorTerms,
    correct: u64,
}

/// Forward (and optionally backward) pass of the regressor objective over
/// already-normalized inputs. Gradients are scaled by `inv_n`; the returned
/// sums are unscaled per-record totals.
fn regressor_pass(
    net: &Mlp,
    inputs: &[[f32; 4]],
    targets: &[[f32; 5]],
    inv_n: f32,
    mut grads: Option<&mut Gradients>,
) -> PassSums {
    debug_assert_eq!(inputs.len(), targets.len());
    let mut sums = PassSums::default();
    for (xs, ts) in inputs.chunks(CHUNK).zip(targets.chunks(CHUNK)) {
        let m = xs.len();
        let mut x = vec![0.0f32; 4 * m];
        for (r, rec) in xs.iter().enumerate() {
            for i in 0..4 {
                x[i * m + r] = rec[i];
            }
        }
        let tape = net.forward_chunk(x, m);
        let out = tape.acts.last().unwrap();
        let mut dy = vec![0.0f32; 5 * m];
        for (r, t) in ts.iter().enumerate() {
            let p = [out[r], out[m + r], out[2 * m + r], out[3 * m + r], out[4 * m + r]];
            let dx = p[0] - t[0];
            let dyp = p[1] - t[1];
            let di = p[4] - t[4];
            let (dir, gdir) = direction_term([p[2], p[3]], [t[2], t[3]]);
            sums.terms.position += 0.5 * (dx as f64 * dx as f64 + dyp as f64 * dyp as f64);
            sums.terms.intensity += di as f64 * di as f64;
            sums.terms.direction += dir as f64;
            sums.loss +=
                0.5 * (dx as f64 * dx as f64 + dyp as f64 * dyp as f64) + di as f64 * di as f64
                    + dir as f64;
            if grads.is_some() {
                dy[r] = dx * inv_n;
                dy[m + r] = dyp * inv_n;
                dy[2 * m + r] = gdir[0] * inv_n;
                dy[3 * m + r] = gdir[1] * inv_n;
                dy[4 * m + r] = 2.0 * di * inv_n;
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            net.backward_chunk(&tape, dy, g);
        }
    }
    sums
}

/// Forward (and optionally backward) pass of the classifier objective.
/// `correct` counts records on the right side of a zero-logit threshold.
fn classifier_pass(
    net: &Mlp,
    inputs: &[[f32; 4]],
    labels: &[f32],
    inv_n: f32,
    mut grads: Option<&mut Gradients>,
) -> PassSums {
    debug_assert_eq!(inputs.len(), labels.len());
    let mut sums = PassSums::default();
    for (xs, ys) in inputs.chunks(CHUNK).zip(labels.chunks(CHUNK)) {
        let m = xs.len();
        let mut x = vec![0.0f32; 4 * m];
        for (r, rec) in xs.iter().enumerate() {
            for i in 0..4 {
                x[i * m + r] = rec[i];
            }
        }
        let tape = net.forward_chunk(x, m);
        let out = tape.acts.last().unwrap();
        let mut dy = vec![0.0f32; m];
        for (r, &y) in ys.iter().enumerate() {
            let z = out[r];
            sums.loss += loss_classifier(z, y);
            if (z > 0.0) == (y > 0.5) {
                sums.correct += 1;
            }
            if grads.is_some() {
                dy[r] = (sigmoid(z) - y) * inv_n;
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            net.backward_chunk(&tape, dy, g);
        }
    }
    sums
}

/// Mean regressor loss, per-term breakdown, and parameter gradients over a
/// batch. The network must end in 5 outputs.
pub fn regressor_loss_and_grads(
    net: &Mlp,
    inputs: &[[f32; 4]],
    targets: &[[f32; 5]],
) -> Result<(f64, RegressorTerms, Gradients)> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::Dimension("empty or mismatched batch".into()));
    }
    if *net.dims().last().unwrap() != 5 {
        return Err(Error::Dimension("regressor loss needs 5 outputs".into()));
    }
    let inv_n = 1.0 / inputs.len() as f32;
    let mut grads = Gradients::zeros_like(net);
    let sums = regressor_pass(net, inputs, targets, inv_n, Some(&mut grads));
    let n = inputs.len() as f64;
    let terms = RegressorTerms {
        position: sums.terms.position / n,
        intensity: sums.terms.intensity / n,
        direction: sums.terms.direction / n,
    };
    Ok((sums.loss / n, terms, grads))
}

/// Mean classifier loss and parameter gradients over a batch. The network
/// must end in 1 output (the logit).
pub fn classifier_loss_and_grads(
    net: &Mlp,
    inputs: &[[f32; 4]],
    labels: &[f32],
) -> Result<(f64, Gradients)> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(Error::Dimension("empty or mismatched batch".into()));
    }
    if *net.dims().last().unwrap() != 1 {
        return Err(Error::Dimension("classifier loss needs 1 output".into()));
    }
    let inv_n = 1.0 / inputs.len() as f32;
    let mut grads = Gradients::zeros_like(net);
    let sums = classifier_pass(net, inputs, labels, inv_n, Some(&mut grads));
    Ok((sums.loss / inputs.len() as f64, grads))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Classifier,
    Regressor,
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Multiplicative step decay applied every `lr_decay_every_batches`.
    pub lr_decay: f64,
    pub lr_decay_every_batches: u64,
    pub seed: u64,
    /// Held-out fraction for the validation split (no early stopping).
    pub val_fraction: f64,
    pub fine_tune: Option<FineTuneConfig>,
}

impl TrainConfig {
    fn base(seed: u64) -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8192,
            initial_lr: 1e-4,
            lr_decay: 0.95,
            lr_decay_every_batches: 10_000,
            seed,
            val_fraction: 0.05,
            fine_tune: None,
        }
    }

    /// Per-path regressor schedule: 40 epochs at batch 8192.
    pub fn per_path_regressor(seed: u64) -> Self {
        Self::base(seed)
    }

    /// Full-transmittance regressor schedule: 200 epochs at batch 32768,
    /// then a 50-epoch fine-tune at batch 8192 starting from lr 1e-6.
    pub fn full_transmit_regressor(seed: u64) -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32_768,
            fine_tune: Some(FineTuneConfig {
                epochs: 50,
                batch_size: 8192,
                initial_lr: 1e-6,
            }),
            ..Self::base(seed)
        }
    }

    /// Valid-region classifier schedule: 50 epochs at batch 8192.
    pub fn classifier(seed: u64) -> Self {
        TrainConfig {
            epochs: 50,
            ..Self::base(seed)
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.initial_lr.is_finite()
            && self.initial_lr > 0.0
            && self.lr_decay > 0.0
            && self.lr_decay <= 1.0
            && self.lr_decay_every_batches > 0
            && (0.0..0.5).contains(&self.val_fraction)
            && self.fine_tune.map_or(true, |ft| {
                ft.epochs > 0 && ft.batch_size > 0 && ft.initial_lr > 0.0
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Training("invalid training configuration".into()))
        }
    }
}

/// Per-epoch training log; renders to CSV with one row per (epoch, split).
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub columns: Vec<String>,
    pub rows: Vec<(u32, String, Vec<f64>)>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,");
        s.push_str(&self.columns.join(","));
        s.push('\n');
        for (epoch, split, vals) in &self.rows {
            s.push_str(&format!("{epoch},{split}"));
            for v in vals {
                s.push_str(&format!(",{v:.8e}"));
            }
            s.push('\n');
        }
        s
    }

    #[cfg(test)]
    fn val_losses(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|(_, s, _)| s == "val")
            .map(|(_, _, v)| v[0])
            .collect()
    }
}

/// Train a network of the given kind on a dataset. The classifier trains on
/// every record (label = validity); the regressor trains on valid records
/// only. Inputs are normalized with the dataset header bounds; targets are
/// regressed at raw scale. Deterministic in `cfg.seed`; aborts with a
/// diagnostic if the loss leaves the finite range.
pub fn train(kind: ModelKind, ds: &Dataset, cfg: &TrainConfig) -> Result<(Mlp, TrainLog)> {
    cfg.validate()?;
    let expected = match kind {
        ModelKind::Classifier => DatasetKind::Classifier,
        ModelKind::Regressor => DatasetKind::Regressor,
    };
    if ds.header.kind != expected {
        return Err(Error::Training(format!(
            "dataset kind {:?} does not match model kind {:?}",
            ds.header.kind, kind
        )));
    }

    let lo = &ds.header.norm_min;
    let hi = &ds.header.norm_max;
    let selected: Vec<&crate::dataset::Record> = match kind {
        ModelKind::Classifier => ds.records.iter().collect(),
        ModelKind::Regressor => ds.records.iter().filter(|r| r.is_valid()).collect(),
    };
    if selected.is_empty() {
        return Err(Error::Training("no usable records in dataset".into()));
    }
    let inputs: Vec<[f32; 4]> = selected
        .iter()
        .map(|r| normalize_input(r.input, lo, hi))
        .collect();
    let targets5: Vec<[f32; 5]> = selected.iter().map(|r| r.output).collect();
    let labels: Vec<f32> = selected
        .iter()
        .map(|r| if r.is_valid() { 1.0 } else { 0.0 })
        .collect();

    // Deterministic 95/5 split.
    let n = selected.len();
    let mut order: Vec<u32> = (0..n as u32).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5113_7A11);
        order.shuffle(&mut rng);
    }
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).min(n - 1);
    let (train_idx, val_idx) = order.split_at(n - n_val);
    let mut train_idx = train_idx.to_vec();

    let dims: &[usize] = match kind {
        ModelKind::Classifier => &CLASSIFIER_LAYERS,
        ModelKind::Regressor => &REGRESSOR_LAYERS,
    };
    let mut net = Mlp::new(dims, cfg.seed ^ 0x1717_C0DE)?;

    let mut log = TrainLog {
        columns: match kind {
            ModelKind::Regressor => ["loss", "position", "intensity", "direction"]
                .map(String::from)
                .to_vec(),
            ModelKind::Classifier => ["loss", "accuracy"].map(String::from).to_vec(),
        },
        rows: Vec::new(),
    };

    let phases: Vec<(usize, usize, f64)> = {
        let mut p = vec![(cfg.epochs, cfg.batch_size, cfg.initial_lr)];
        if let Some(ft) = cfg.fine_tune {
            p.push((ft.epochs, ft.batch_size, ft.initial_lr));
        }
        p
    };

    let mut epoch_no = 0u32;
    let mut gather_x: Vec<[f32; 4]> = Vec::new();
    let mut gather_t5: Vec<[f32; 5]> = Vec::new();
    let mut gather_y: Vec<f32> = Vec::new();
    for (phase, &(epochs, batch_size, initial_lr)) in phases.iter().enumerate() {
        let mut adam = Adam::new(&net);
        let mut grads = Gradients::zeros_like(&net);
        let mut batches = 0u64;
        for e in 0..epochs {
            epoch_no += 1;
            {
                use rand::seq::SliceRandom;
                let mix = (cfg.seed ^ ((phase as u64) << 48) ^ e as u64)
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let mut rng = ChaCha8Rng::seed_from_u64(mix);
                train_idx.shuffle(&mut rng);
            }
            let mut epoch_loss = 0.0f64;
            let mut epoch_terms = RegressorTerms::default();
            let mut epoch_correct = 0u64;
            for batch in train_idx.chunks(batch_size) {
                let lr = initial_lr
                    * cfg
                        .lr_decay
                        .powi((batches / cfg.lr_decay_every_batches) as i32);
                gather_x.clear();
                gather_x.extend(batch.iter().map(|&i| inputs[i as usize]));
                grads.reset();
                let inv_n = 1.0 / batch.len() as f32;
                let sums = match kind {
                    ModelKind::Regressor => {
                        gather_t5.clear();
                        gather_t5.extend(batch.iter().map(|&i| targets5[i as usize]));
                        regressor_pass(&net, &gather_x, &gather_t5, inv_n, Some(&mut grads))
                    }
                    ModelKind::Classifier => {
                        gather_y.clear();
                        gather_y.extend(batch.iter().map(|&i| labels[i as usize]));
                        classifier_pass(&net, &gather_x, &gather_y, inv_n, Some(&mut grads))
                    }
                };
                if !sums.loss.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at epoch {epoch_no}, batch {batches}"
                    )));
                }
                epoch_loss += sums.loss;
                epoch_terms.position += sums.terms.position;
                epoch_terms.intensity += sums.terms.intensity;
                epoch_terms.direction += sums.terms.direction;
                epoch_correct += sums.correct;
                adam.step(&mut net, &grads, lr);
                batches += 1;
            }
            let nt = train_idx.len() as f64;
            match kind {
                ModelKind::Regressor => log.rows.push((
                    epoch_no,
                    "train".into(),
                    vec![
                        epoch_loss / nt,
                        epoch_terms.position / nt,
                        epoch_terms.intensity / nt,
                        epoch_terms.direction / nt,
                    ],
                )),
                ModelKind::Classifier => log.rows.push((
                    epoch_no,
                    "train".into(),
                    vec![epoch_loss / nt, epoch_correct as f64 / nt],
                )),
            }
            if !val_idx.is_empty() {
                gather_x.clear();
                gather_x.extend(val_idx.iter().map(|&i| inputs[i as usize]));
                let nv = val_idx.len() as f64;
                let row = match kind {
                    ModelKind::Regressor => {
                        gather_t5.clear();
                        gather_t5.extend(val_idx.iter().map(|&i| targets5[i as usize]));
                        let s = regressor_pass(&net, &gather_x, &gather_t5, 0.0, None);
                        vec![
                            s.loss / nv,
                            s.terms.position / nv,
                            s.terms.intensity / nv,
                            s.terms.direction / nv,
                        ]
                    }
                    ModelKind::Classifier => {
                        gather_y.clear();
                        gather_y.extend(val_idx.iter().map(|&i| labels[i as usize]));
                        let s = classifier_pass(&net, &gather_x, &gather_y, 0.0, None);
                        vec![s.loss / nv, s.correct as f64 / nv]
                    }
                };
                if !row[0].is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite validation loss at epoch {epoch_no}"
                    )));
                }
                log.rows.push((epoch_no, "val".into(), row));
            }
        }
    }
    net.check_finite()
        .map_err(|_| Error::Training("non-finite parameters after training".into()))?;
    Ok((net, log))
}

// ---------------------------------------------------------------------------
// Factorized predictor
// ---------------------------------------------------------------------------

/// Input normalization bounds, carried from the dataset that trained a net.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct NormBounds {
    pub min: [f32; 4],
    pub max: [f32; 4],
}

impl NormBounds {
    pub fn from_dataset(ds: &Dataset) -> Self {
        NormBounds {
            min: ds.header.norm_min,
            max: ds.header.norm_max,
        }
    }

    fn validate(&self) -> Result<()> {
        for d in 0..4 {
            if !(self.min[d].is_finite() && self.max[d].is_finite() && self.min[d] < self.max[d]) {
                return Err(Error::Model("invalid normalization bounds".into()));
            }
        }
        Ok(())
    }
}

/// Exit ray predicted by the neural transport map (canonical frame).
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Prediction {
    pub position: [f32; 2],
    /// Unit direction; the axial sign matches the model's trace direction.
    pub direction: [f32; 3],
    pub intensity: f32,
}

/// Classifier-gated regressor for one (lens, path, direction) triple.
///
/// `predict` returns either nothing (the classifier rejects the input) or
/// exactly the regressor's value — never a blend. Inference uses the
/// rational-tanh SoA fast path; inputs outside the stored normalization
/// bounds are clamped and counted.
#[derive(Debug)]
pub struct FactorizedModel {
    pub classifier: Mlp,
    pub regressor: Mlp,
    pub classifier_norm: NormBounds,
    pub regressor_norm: NormBounds,
    pub lens_hash: u64,
    pub path_id: u64,
    pub direction: Direction,
    clamp_count: AtomicU64,
}

impl Clone for FactorizedModel {
    fn clone(&self) -> Self {
        FactorizedModel {
            classifier: self.classifier.clone(),
            regressor: self.regressor.clone(),
            classifier_norm: self.classifier_norm,
            regressor_norm: self.regressor_norm,
            lens_hash: self.lens_hash,
            path_id: self.path_id,
            direction: self.direction,
            clamp_count: AtomicU64::new(self.clamp_count.load(Ordering::Relaxed)),
        }
    }
}

impl FactorizedModel {
    pub fn new(
        classifier: Mlp,
        regressor: Mlp,
        classifier_norm: NormBounds,
        regressor_norm: NormBounds,
        lens_hash: u64,
        path_id: u64,
        direction: Direction,
    ) -> Result<Self> {
        let cd = classifier.dims();
        let rd = regressor.dims();
        if cd.first() != Some(&4) || cd.last() != Some(&1) {
            return Err(Error::Dimension(format!(
                "classifier dims {cd:?} must run 4 → … → 1"
            )));
        }
        if rd.first() != Some(&4) || rd.last() != Some(&5) {
            return Err(Error::Dimension(format!(
                "regressor dims {rd:?} must run 4 → … → 5"
            )));
        }
        classifier.check_finite()?;
        regressor.check_finite()?;
        classifier_norm.validate()?;
        regressor_norm.validate()?;
        Ok(FactorizedModel {
            classifier,
            regressor,
            classifier_norm,
            regressor_norm,
            lens_hash,
            path_id,
            direction,
            clamp_count: AtomicU64::new(0),
        })
    }

    /// How many queries so far arrived outside the normalization bounds.
    pub fn clamp_count(&self) -> u64 {
        self.clamp_count.load(Ordering::Relaxed)
    }

    pub fn ensure_lens(&self, lens: &LensSystem) -> Result<()> {
        if self.lens_hash != lens.hash() {
            return Err(Error::Model(format!(
                "model was trained for lens {:016x}, not {:016x}",
                self.lens_hash,
                lens.hash()
            )));
        }
        Ok(())
    }

    /// Valid-region probability for a raw canonical input.
    pub fn classify(&self, input: [f32; 4]) -> f32 {
        let mut buf_a = vec![[0.0f32; LANES]; self.classifier.max_width()];
        let mut buf_b = buf_a.clone();
        let (x, clamped) = clamp_norm(input, &self.classifier_norm);
        if clamped {
            self.clamp_count.fetch_add(1, Ordering::Relaxed);
        }
        for d in 0..4 {
            buf_a[d] = [x[d]; LANES];
        }
        self.classifier.forward_block(&mut buf_a, &mut buf_b);
        sigmoid(buf_a[0][0])
    }

    pub fn predict(&self, input: [f32; 4], threshold: f32) -> Option<Prediction> {
        self.predict_batch(std::slice::from_ref(&input), threshold)
            .pop()
            .unwrap()
    }

    /// Batched prediction over raw canonical inputs `[r, ωx, ωy, λ]`.
    /// `threshold ≤ 0` disables the classifier gate (ablation mode).
    pub fn predict_batch(&self, inputs: &[[f32; 4]], threshold: f32) -> Vec<Option<Prediction>> {
        let width = self.classifier.max_width().max(self.regressor.max_width());
        let mut buf_a = vec![[0.0f32; LANES]; width];
        let mut buf_b = vec![[0.0f32; LANES]; width];
        let mut reg_in = [[0.0f32; LANES]; 4];
        let gate_all = threshold <= 0.0;
        let logit_th = if gate_all {
            f32::NEG_INFINITY
        } else if threshold >= 1.0 {
            f32::INFINITY
        } else {
            (threshold / (1.0 - threshold)).ln()
        };
        let axial_sign = match self.direction {
            Direction::Forward => 1.0f32,
            Direction::Backward => -1.0f32,
        };

        let mut out = Vec::with_capacity(inputs.len());
        let mut clamped_total = 0u64;
        for chunk in inputs.chunks(LANES) {
            let c = chunk.len();
            for (k, raw) in chunk.iter().enumerate() {
                let (xc, cl_c) = clamp_norm(*raw, &self.classifier_norm);
                let (xr, cl_r) = clamp_norm(*raw, &self.regressor_norm);
                if cl_c || cl_r {
                    clamped_total += 1;
                }
                for d in 0..4 {
                    buf_a[d][k] = xc[d];
                    reg_in[d][k] = xr[d];
                }
            }
            // Pad unused lanes with the first entry so every lane is finite.
            for k in c..LANES {
                for d in 0..4 {
                    buf_a[d][k] = buf_a[d][0];
                    reg_in[d][k] = reg_in[d][0];
                }
            }
            let mut pass = [false; LANES];
            if gate_all {
                pass = [true; LANES];
            } else {
                self.classifier.forward_block(&mut buf_a, &mut buf_b);
                for k in 0..LANES {
                    pass[k] = buf_a[0][k] >= logit_th;
                }
            }
            if pass[..c].iter().any(|&p| p) {
                for d in 0..4 {
                    buf_a[d] = reg_in[d];
                }
                self.regressor.forward_block(&mut buf_a, &mut buf_b);
                for k in 0..c {
                    if pass[k] {
                        let dir = lift_transverse([buf_a[2][k], buf_a[3][k]]);
                        let i = buf_a[4][k];
                        out.push(Some(Prediction {
                            position: [buf_a[0][k], buf_a[1][k]],
                            direction: [dir[0], dir[1], axial_sign * dir[2]],
                            intensity: if i.is_finite() { i.clamp(0.0, 1.0) } else { 0.0 },
                        }));
                    } else {
                        out.push(None);
                    }
                }
            } else {
                out.extend(std::iter::repeat(None).take(c));
            }
        }
        if clamped_total > 0 {
            self.clamp_count.fetch_add(clamped_total, Ordering::Relaxed);
        }
        out
    }
}

/// Clamp a raw input into the normalization box and map to [−1, 1].
#[inline]
fn clamp_norm(raw: [f32; 4], nb: &NormBounds) -> ([f32; 4], bool) {
    let mut clamped = false;
    let mut v = raw;
    for d in 0..4 {
        if v[d] < nb.min[d] {
            v[d] = nb.min[d];
            clamped = true;
        } else if v[d] > nb.max[d] {
            v[d] = nb.max[d];
            clamped = true;
        }
    }
    (normalize_input(v, &nb.min, &nb.max), clamped)
}

/// Balanced accuracy (mean of per-class recalls) of the model's classifier
/// gate over labeled records, or `None` if a class is absent.
pub fn balanced_accuracy(
    model: &FactorizedModel,
    records: &[crate::dataset::Record],
    threshold: f32,
) -> Option<f64> {
    let (mut tp, mut pos, mut tn, mut neg) = (0u64, 0u64, 0u64, 0u64);
    for chunk in records.chunks(4096) {
        let inputs: Vec<[f32; 4]> = chunk.iter().map(|r| r.input).collect();
        let preds = model.predict_batch(&inputs, threshold);
        for (r, p) in chunk.iter().zip(&preds) {
            if r.is_valid() {
                pos += 1;
                tp += p.is_some() as u64;
            } else {
                neg += 1;
                tn += p.is_none() as u64;
            }
        }
    }
    if pos == 0 || neg == 0 {
        return None;
    }
    Some(0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64))
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f32s(buf: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_net(buf: &mut Vec<u8>, net: &Mlp, nb: &NormBounds) {
    let dims = net.dims();
    push_u32(buf, dims.len() as u32);
    for d in &dims {
        push_u32(buf, *d as u32);
    }
    push_f32s(buf, &nb.min);
    push_f32s(buf, &nb.max);
    for l in net.layers() {
        push_f32s(buf, &l.w);
        push_f32s(buf, &l.b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Model("model file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn read_net(r: &mut Reader) -> Result<(Mlp, NormBounds)> {
    let nd = r.u32()? as usize;
    if !(2..=16).contains(&nd) {
        return Err(Error::Model(format!("implausible layer count {nd}")));
    }
    let mut dims = Vec::with_capacity(nd);
    for _ in 0..nd {
        let d = r.u32()? as usize;
        if d == 0 || d > 4096 {
            return Err(Error::Model(format!("implausible layer width {d}")));
        }
        dims.push(d);
    }
    let mins = r.f32s(4)?;
    let maxs = r.f32s(4)?;
    let nb = NormBounds {
        min: mins.try_into().unwrap(),
        max: maxs.try_into().unwrap(),
    };
    nb.validate()?;
    let mut layers = Vec::with_capacity(nd - 1);
    for win in dims.windows(2) {
        let (n_in, n_out) = (win[0], win[1]);
        let w = r.f32s(n_in * n_out)?;
        let b = r.f32s(n_out)?;
        layers.push(Layer { n_in, n_out, w, b });
    }
    let net = Mlp {
        layers,
        activation: Activation::Tanh,
    };
    net.check_finite()?;
    Ok((net, nb))
}

/// Serialize a factorized model to the documented byte-exact layout.
pub fn model_to_bytes(fm: &FactorizedModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MODEL_MAGIC);
    push_u32(&mut buf, MODEL_VERSION);
    push_u32(
        &mut buf,
        crate::dataset::direction_to_u32(fm.direction),
    );
    push_u64(&mut buf, fm.lens_hash);
    push_u64(&mut buf, fm.path_id);
    write_net(&mut buf, &fm.classifier, &fm.classifier_norm);
    write_net(&mut buf, &fm.regressor, &fm.regressor_norm);
    buf
}

pub fn model_from_bytes(buf: &[u8]) -> Result<FactorizedModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MODEL_MAGIC {
        return Err(Error::Model("bad magic; not a model file".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Model(format!(
            "unsupported model version {version} (expected {MODEL_VERSION})"
        )));
    }
    let direction = crate::dataset::direction_from_u32(r.u32()?)
        .map_err(|_| Error::Model("bad direction field".into()))?;
    let lens_hash = r.u64()?;
    let path_id = r.u64()?;
    let (classifier, classifier_norm) = read_net(&mut r)?;
    let (regressor, regressor_norm) = read_net(&mut r)?;
    if r.pos != buf.len() {
        return Err(Error::Model("trailing bytes after model payload".into()));
    }
    FactorizedModel::new(
        classifier,
        regressor,
        classifier_norm,
        regressor_norm,
        lens_hash,
        path_id,
        direction,
    )
}

pub fn save_model(fm: &FactorizedModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_bytes(fm))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<FactorizedModel> {
    model_from_bytes(&fs::read(path)?)
}

/// Load a model and refuse it unless it was trained for this lens.
pub fn load_model_for_lens(path: &Path, lens: &LensSystem) -> Result<FactorizedModel> {
    let fm = load_model(path)?;
    fm.ensure_lens(lens)?;
    Ok(fm)
}



#[cfg(test)]
mod perf_probe {
    use super::*;
    use crate::dataset::{DatasetHeader, Record};
    use crate::trace::Direction;
    use rand_chacha::ChaCha8Rng;

    #[test]
    #[ignore]
    fn training_throughput() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let recs: Vec<Record> = (0..n)
            .map(|_| {
                let x: [f32; 4] = std::array::from_fn(|_| rng.gen_range(-1.0f32..1.0));
                Record {
                    input: x,
                    valid: f32::from(x[0] > 0.0),
                    output: std::array::from_fn(|_| rng.gen_range(-0.5f32..0.5)),
                }
            })
            .collect();
        for (kind, dsk) in [
            (ModelKind::Classifier, DatasetKind::Classifier),
            (ModelKind::Regressor, DatasetKind::Regressor),
        ] {
            let ds = Dataset {
                header: DatasetHeader {
                    kind: dsk,
                    direction: Direction::Forward,
                    lens_hash: 1,
                    path_id: 0,
                    norm_min: [-1.0; 4],
                    norm_max: [1.0; 4],
                },
                records: recs.clone(),
            };
            let cfg = TrainConfig {
                epochs: 3,
                batch_size: 8192,
                ..TrainConfig::per_path_regressor(1)
            };
            let t0 = std::time::Instant::now();
            let _ = train(kind, &ds, &cfg).unwrap();
            let dt = t0.elapsed().as_secs_f64();
            println!(
                "{kind:?}: {:.1} s for 3 epochs x {n} → {:.2} Mrec/s",
                dt,
                3.0 * n as f64 / dt / 1e6
            );
        }
    }

    #[test]
    #[ignore]
    fn inference_throughput() {
        let cls = Mlp::new(&CLASSIFIER_LAYERS, 2).unwrap();
        let reg = Mlp::new(&REGRESSOR_LAYERS, 3).unwrap();
        let nb = NormBounds { min: [-1.0; 4], max: [1.0; 4] };
        let fm = FactorizedModel::new(cls, reg, nb, nb, 1, 0, Direction::Forward).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs: Vec<[f32; 4]> = (0..1_000_000)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-0.9f32..0.9)))
            .collect();
        let t0 = std::time::Instant::now();
        let out = fm.predict_batch(&inputs, 0.5);
        let dt = t0.elapsed().as_secs_f64();
        let some = out.iter().filter(|p| p.is_some()).count();
        println!(
            "predict_batch: {:.3} s for 1M → {:.0} ns/ray ({some} accepted)",
            dt,
            dt * 1e3
        );
    }
}
