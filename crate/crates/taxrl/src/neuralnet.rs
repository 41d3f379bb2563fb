//! Minimal feed-forward network engine: a ReLU trunk feeding two parallel
//! linear heads, exact reverse-mode gradients, and a bias-corrected Adam
//! optimizer. Everything is double precision and single-threaded; batched
//! forward/backward passes run over preallocated buffers with fixed
//! reduction orders, so results are bit-reproducible.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("unsupported checkpoint format version {0}")]
    BadFormatVersion(u32),
    #[error("checkpoint shape inconsistency: {0}")]
    BadShapes(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Specification and parameters
// ---------------------------------------------------------------------------

/// Network shape: `input -> trunk (ReLU between layers) -> two linear heads`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    /// Hidden widths of the shared trunk.
    pub trunk: Vec<usize>,
    /// Output widths of the two parallel heads.
    pub head_widths: [usize; 2],
}

impl NetworkSpec {
    /// The production policy-network shape: three 256-wide trunk layers and
    /// heads sized for the 101 evasion levels and the binary closure choice.
    pub fn full(input_dim: usize) -> NetworkSpec {
        NetworkSpec {
            input_dim,
            trunk: vec![256, 256, 256],
            head_widths: [101, 2],
        }
    }

    /// Desk-scale shape used by the fast profile.
    pub fn desk(input_dim: usize) -> NetworkSpec {
        NetworkSpec {
            input_dim,
            trunk: vec![64, 64, 64],
            head_widths: [101, 2],
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_dim == 0 || self.trunk.is_empty() || self.trunk.contains(&0) {
            return Err(NetError::BadShapes(format!("{self:?}")));
        }
        if self.head_widths.contains(&0) {
            return Err(NetError::BadShapes(format!("{self:?}")));
        }
        Ok(())
    }

    fn trunk_output(&self) -> usize {
        *self.trunk.last().expect("trunk is non-empty")
    }
}

/// One affine layer, `out x in` row-major weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    in_dim: usize,
    out_dim: usize,
    /// Weights, `out x in` row-major; the canonical storage.
    w: Vec<f64>,
    b: Vec<f64>,
    /// Transposed copy (`in x out`) kept in lockstep with `w`; the forward
    /// pass streams over it without per-output reductions. Rebuilt after
    /// deserialization, never persisted.
    #[serde(skip)]
    w_t: Vec<f64>,
}

impl PartialEq for Dense {
    fn eq(&self, other: &Self) -> bool {
        self.in_dim == other.in_dim
            && self.out_dim == other.out_dim
            && self.w == other.w
            && self.b == other.b
    }
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Dense {
        Dense {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
            w_t: vec![0.0; in_dim * out_dim],
        }
    }

    fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Dense {
        // Uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut layer = Dense::zeros(in_dim, out_dim);
        for w in layer.w.iter_mut() {
            *w = rng.gen_range(-limit..limit);
        }
        layer.rebuild_transposed();
        layer
    }

    fn rebuild_transposed(&mut self) {
        self.w_t.resize(self.w.len(), 0.0);
        for o in 0..self.out_dim {
            for i in 0..self.in_dim {
                self.w_t[i * self.out_dim + o] = self.w[o * self.in_dim + i];
            }
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self, o: usize, i: usize) -> f64 {
        self.w[o * self.in_dim + i]
    }

    pub fn set_weight(&mut self, o: usize, i: usize, value: f64) {
        self.w[o * self.in_dim + i] = value;
        self.w_t[i * self.out_dim + o] = value;
    }

    pub fn bias(&self, o: usize) -> f64 {
        self.b[o]
    }

    pub fn set_bias(&mut self, o: usize, value: f64) {
        self.b[o] = value;
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn biases(&self) -> &[f64] {
        &self.b
    }

    fn row(&self, o: usize) -> &[f64] {
        &self.w[o * self.in_dim..(o + 1) * self.in_dim]
    }

    fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.b).all(|v| v.is_finite())
    }
}

/// Trunk-plus-two-heads network parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetworkSpec,
    pub trunk: Vec<Dense>,
    pub heads: [Dense; 2],
}

impl Network {
    pub fn init(spec: NetworkSpec, rng: &mut impl Rng) -> Result<Network, NetError> {
        spec.validate()?;
        let mut trunk = Vec::with_capacity(spec.trunk.len());
        let mut in_dim = spec.input_dim;
        for &width in &spec.trunk {
            trunk.push(Dense::init(in_dim, width, rng));
            in_dim = width;
        }
        let heads = [
            Dense::init(in_dim, spec.head_widths[0], rng),
            Dense::init(in_dim, spec.head_widths[1], rng),
        ];
        Ok(Network { spec, trunk, heads })
    }

    pub fn zeros(spec: NetworkSpec) -> Result<Network, NetError> {
        spec.validate()?;
        let mut trunk = Vec::with_capacity(spec.trunk.len());
        let mut in_dim = spec.input_dim;
        for &width in &spec.trunk {
            trunk.push(Dense::zeros(in_dim, width));
            in_dim = width;
        }
        let heads = [
            Dense::zeros(in_dim, spec.head_widths[0]),
            Dense::zeros(in_dim, spec.head_widths[1]),
        ];
        Ok(Network { spec, trunk, heads })
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain(self.heads.iter())
    }

    pub fn is_finite(&self) -> bool {
        self.layers().all(Dense::is_finite)
    }

    fn rebuild_transposed(&mut self) {
        for layer in self.trunk.iter_mut().chain(self.heads.iter_mut()) {
            layer.rebuild_transposed();
        }
    }

    fn shapes_match_spec(&self) -> Result<(), NetError> {
        let mut in_dim = self.spec.input_dim;
        if self.trunk.len() != self.spec.trunk.len() {
            return Err(NetError::BadShapes("trunk depth".to_string()));
        }
        for (layer, &width) in self.trunk.iter().zip(&self.spec.trunk) {
            if layer.in_dim != in_dim
                || layer.out_dim != width
                || layer.w.len() != in_dim * width
                || layer.b.len() != width
            {
                return Err(NetError::BadShapes(format!(
                    "trunk layer expected {in_dim}x{width}"
                )));
            }
            in_dim = width;
        }
        for (head, &width) in self.heads.iter().zip(&self.spec.head_widths) {
            if head.in_dim != in_dim
                || head.out_dim != width
                || head.w.len() != in_dim * width
                || head.b.len() != width
            {
                return Err(NetError::BadShapes(format!(
                    "head layer expected {in_dim}x{width}"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// Dot product with eight independent accumulator lanes; fixed summation
/// order, vectorizes well.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] = xa[l].mul_add(xb[l], acc[l]);
        }
    }
    let mut sum = 0.0;
    for l in 0..8 {
        sum += acc[l];
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        sum = x.mul_add(*y, sum);
    }
    sum
}

/// `y += a * x`.
#[inline]
fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    debug_assert_eq!(y.len(), x.len());
    for (y, x) in y.iter_mut().zip(x) {
        *y = a.mul_add(*x, *y);
    }
}

/// `y[s] = W x[s] + b` per sample row, optionally ReLU-ed in place.
///
/// Streams over the transposed weights four input elements at a time, so
/// the inner loop is a reduction-free run of fused multiply-adds across the
/// output row.
fn linear_forward(layer: &Dense, x: &[f64], y: &mut [f64], batch: usize, relu: bool) {
    let (in_dim, out_dim) = (layer.in_dim, layer.out_dim);
    debug_assert_eq!(layer.w_t.len(), in_dim * out_dim, "transpose out of date");
    for s in 0..batch {
        let xr = &x[s * in_dim..(s + 1) * in_dim];
        let yr = &mut y[s * out_dim..(s + 1) * out_dim];
        yr.copy_from_slice(&layer.b);
        let mut i = 0;
        while i + 4 <= in_dim {
            let x0 = xr[i];
            let x1 = xr[i + 1];
            let x2 = xr[i + 2];
            let x3 = xr[i + 3];
            let (w0, rest) = layer.w_t[i * out_dim..].split_at(out_dim);
            let (w1, rest) = rest.split_at(out_dim);
            let (w2, rest) = rest.split_at(out_dim);
            let w3 = &rest[..out_dim];
            for ((((y, &a), &b), &c), &d) in
                yr.iter_mut().zip(w0).zip(w1).zip(w2).zip(w3)
            {
                *y = x3.mul_add(d, x2.mul_add(c, x1.mul_add(b, x0.mul_add(a, *y))));
            }
            i += 4;
        }
        while i < in_dim {
            axpy(yr, &layer.w_t[i * out_dim..(i + 1) * out_dim], xr[i]);
            i += 1;
        }
        if relu {
            for v in yr.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Accumulate `dW += dy^T x`, `db += sum_s dy[s]`, and optionally write
/// `dx[s] = W^T dy[s]`, for dense output gradients (trunk layers). Both
/// inner kernels stream four fused multiply-add chains at a time.
fn linear_backward_dense(
    layer: &Dense,
    x: &[f64],
    dy: &[f64],
    grad: &mut DenseGrad,
    mut dx: Option<&mut [f64]>,
    batch: usize,
) {
    let (in_dim, out_dim) = (layer.in_dim, layer.out_dim);

    // dW[o] += sum_s dy[s][o] x[s], blocked over four samples.
    for o in 0..out_dim {
        let wrow = &mut grad.w[o * in_dim..(o + 1) * in_dim];
        let mut bsum = 0.0;
        let mut s = 0;
        while s + 4 <= batch {
            let g0 = dy[s * out_dim + o];
            let g1 = dy[(s + 1) * out_dim + o];
            let g2 = dy[(s + 2) * out_dim + o];
            let g3 = dy[(s + 3) * out_dim + o];
            bsum += g0 + g1 + g2 + g3;
            if g0 != 0.0 || g1 != 0.0 || g2 != 0.0 || g3 != 0.0 {
                let (x0, rest) = x[s * in_dim..(s + 4) * in_dim].split_at(in_dim);
                let (x1, rest) = rest.split_at(in_dim);
                let (x2, x3) = rest.split_at(in_dim);
                for ((((w, &a), &b), &c), &d) in
                    wrow.iter_mut().zip(x0).zip(x1).zip(x2).zip(x3)
                {
                    *w = g3.mul_add(d, g2.mul_add(c, g1.mul_add(b, g0.mul_add(a, *w))));
                }
            }
            s += 4;
        }
        while s < batch {
            let g = dy[s * out_dim + o];
            bsum += g;
            if g != 0.0 {
                axpy(wrow, &x[s * in_dim..(s + 1) * in_dim], g);
            }
            s += 1;
        }
        grad.b[o] += bsum;
    }

    // dx[s] = W^T dy[s], blocked over four output rows.
    if let Some(dx) = dx.as_deref_mut() {
        dx[..batch * in_dim].fill(0.0);
        for s in 0..batch {
            let dyr = &dy[s * out_dim..(s + 1) * out_dim];
            let dxr = &mut dx[s * in_dim..(s + 1) * in_dim];
            let mut o = 0;
            while o + 4 <= out_dim {
                let g0 = dyr[o];
                let g1 = dyr[o + 1];
                let g2 = dyr[o + 2];
                let g3 = dyr[o + 3];
                if g0 != 0.0 || g1 != 0.0 || g2 != 0.0 || g3 != 0.0 {
                    let (w0, rest) = layer.w[o * in_dim..(o + 4) * in_dim].split_at(in_dim);
                    let (w1, rest) = rest.split_at(in_dim);
                    let (w2, w3) = rest.split_at(in_dim);
                    for ((((y, &a), &b), &c), &d) in
                        dxr.iter_mut().zip(w0).zip(w1).zip(w2).zip(w3)
                    {
                        *y = g3.mul_add(d, g2.mul_add(c, g1.mul_add(b, g0.mul_add(a, *y))));
                    }
                }
                o += 4;
            }
            while o < out_dim {
                let g = dyr[o];
                if g != 0.0 {
                    axpy(dxr, layer.row(o), g);
                }
                o += 1;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Preallocated activations for batched passes; retains what backward needs.
#[derive(Debug, Clone)]
pub struct BatchCache {
    capacity: usize,
    batch: usize,
    h1_width: usize,
    h2_width: usize,
    input: Vec<f64>,
    /// Post-ReLU trunk activations, one buffer per trunk layer.
    trunk_acts: Vec<Vec<f64>>,
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
}

impl BatchCache {
    pub fn new(spec: &NetworkSpec, capacity: usize) -> BatchCache {
        BatchCache {
            capacity,
            batch: 0,
            h1_width: spec.head_widths[0],
            h2_width: spec.head_widths[1],
            input: vec![0.0; capacity * spec.input_dim],
            trunk_acts: spec.trunk.iter().map(|&w| vec![0.0; capacity * w]).collect(),
            q1: vec![0.0; capacity * spec.head_widths[0]],
            q2: vec![0.0; capacity * spec.head_widths[1]],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Head-1 outputs of sample `s`.
    pub fn q1_row(&self, s: usize) -> &[f64] {
        &self.q1[s * self.h1_width..(s + 1) * self.h1_width]
    }

    /// Head-2 outputs of sample `s`.
    pub fn q2_row(&self, s: usize) -> &[f64] {
        &self.q2[s * self.h2_width..(s + 1) * self.h2_width]
    }
}

impl Network {
    /// Batched forward pass over `batch` rows of `input_dim`; the cache
    /// retains activations for a matching `backward` call.
    pub fn forward(&self, x: &[f64], batch: usize, cache: &mut BatchCache) -> Result<(), NetError> {
        self.forward_trunk(x, batch, cache)?;
        let last = cache.trunk_acts.last().expect("trunk non-empty");
        linear_forward(&self.heads[0], last, &mut cache.q1, batch, false);
        linear_forward(&self.heads[1], last, &mut cache.q2, batch, false);
        Ok(())
    }

    /// Forward pass through the trunk only. Head outputs can then be read
    /// selectively with [`Network::head_value`], which is much cheaper when
    /// only the taken action's Q-value is needed.
    pub fn forward_trunk(
        &self,
        x: &[f64],
        batch: usize,
        cache: &mut BatchCache,
    ) -> Result<(), NetError> {
        if x.len() != batch * self.spec.input_dim {
            return Err(NetError::DimensionMismatch {
                context: "forward input",
                expected: batch * self.spec.input_dim,
                got: x.len(),
            });
        }
        if batch > cache.capacity {
            return Err(NetError::DimensionMismatch {
                context: "forward batch capacity",
                expected: cache.capacity,
                got: batch,
            });
        }
        cache.batch = batch;
        cache.input[..x.len()].copy_from_slice(x);
        for (k, layer) in self.trunk.iter().enumerate() {
            let (before, rest) = cache.trunk_acts.split_at_mut(k);
            let input: &[f64] = if k == 0 {
                &cache.input
            } else {
                &before[k - 1]
            };
            linear_forward(layer, input, &mut rest[0], batch, true);
        }
        Ok(())
    }

    /// One head output for one sample of a trunk-forwarded cache.
    pub fn head_value(&self, head: usize, cache: &BatchCache, sample: usize, output: usize) -> f64 {
        let trunk_out = self.spec.trunk_output();
        let last = cache.trunk_acts.last().expect("trunk non-empty");
        let act = &last[sample * trunk_out..(sample + 1) * trunk_out];
        dot(act, self.heads[head].row(output)) + self.heads[head].b[output]
    }

    /// Single-observation forward.
    pub fn forward_single(&self, x: &[f64], cache: &mut BatchCache) -> Result<(), NetError> {
        self.forward(x, 1, cache)
    }

    /// Exact reverse-mode gradients of a scalar loss whose per-head output
    /// gradients are `gq1`/`gq2` (both `batch` rows). The ReLU subgradient
    /// at 0 is 0. `grads` is overwritten.
    pub fn backward(
        &self,
        cache: &BatchCache,
        gq1: &[f64],
        gq2: &[f64],
        grads: &mut Gradients,
        scratch: &mut BackwardScratch,
    ) -> Result<(), NetError> {
        let batch = cache.batch;
        let h1 = self.spec.head_widths[0];
        let h2 = self.spec.head_widths[1];
        if gq1.len() != batch * h1 {
            return Err(NetError::DimensionMismatch {
                context: "backward gq1",
                expected: batch * h1,
                got: gq1.len(),
            });
        }
        if gq2.len() != batch * h2 {
            return Err(NetError::DimensionMismatch {
                context: "backward gq2",
                expected: batch * h2,
                got: gq2.len(),
            });
        }
        grads.zero();

        let trunk_out = self.spec.trunk_output();
        let last_act = cache.trunk_acts.last().expect("trunk non-empty");
        let last_idx = self.trunk.len() - 1;

        // Heads: parameter gradients, plus the summed gradient flowing back
        // into the trunk output.
        {
            let d_last = &mut scratch.d_acts[last_idx];
            d_last[..batch * trunk_out].fill(0.0);
            for s in 0..batch {
                let xr = &last_act[s * trunk_out..(s + 1) * trunk_out];
                let dxr = &mut d_last[s * trunk_out..(s + 1) * trunk_out];
                for (head_idx, (ghead, hw)) in [(gq1, h1), (gq2, h2)].into_iter().enumerate() {
                    let head = &self.heads[head_idx];
                    let hgrad = &mut grads.heads[head_idx];
                    let gr = &ghead[s * hw..(s + 1) * hw];
                    for (o, &g) in gr.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        hgrad.b[o] += g;
                        axpy(&mut hgrad.w[o * trunk_out..(o + 1) * trunk_out], xr, g);
                        axpy(dxr, head.row(o), g);
                    }
                }
            }
        }

        // Trunk, last layer to first, gating each activation gradient
        // through the ReLU before descending.
        for k in (0..self.trunk.len()).rev() {
            let width = self.trunk[k].out_dim;
            {
                let act = &cache.trunk_acts[k];
                let d_act = &mut scratch.d_acts[k];
                for (d, &a) in d_act[..batch * width].iter_mut().zip(&act[..batch * width]) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let (d_prev, d_here) = scratch.d_acts.split_at_mut(k);
            let input: &[f64] = if k == 0 {
                &cache.input
            } else {
                &cache.trunk_acts[k - 1]
            };
            let dx = if k == 0 {
                None
            } else {
                Some(&mut d_prev[k - 1][..])
            };
            linear_backward_dense(&self.trunk[k], input, &d_here[0], &mut grads.trunk[k], dx, batch);
        }
        Ok(())
    }
}

/// Gradient buffers mirroring a network's parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub trunk: Vec<DenseGrad>,
    pub heads: [DenseGrad; 2],
}

#[derive(Debug, Clone)]
pub struct DenseGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl DenseGrad {
    fn zeros_like(layer: &Dense) -> DenseGrad {
        DenseGrad {
            w: vec![0.0; layer.w.len()],
            b: vec![0.0; layer.b.len()],
        }
    }
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Gradients {
        Gradients {
            trunk: net.trunk.iter().map(DenseGrad::zeros_like).collect(),
            heads: [
                DenseGrad::zeros_like(&net.heads[0]),
                DenseGrad::zeros_like(&net.heads[1]),
            ],
        }
    }

    pub fn zero(&mut self) {
        for g in self.blocks_mut() {
            g.w.fill(0.0);
            g.b.fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .all(|g| g.w.iter().chain(&g.b).all(|v| v.is_finite()))
    }

    fn blocks(&self) -> impl Iterator<Item = &DenseGrad> {
        self.trunk.iter().chain(self.heads.iter())
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut DenseGrad> {
        self.trunk.iter_mut().chain(self.heads.iter_mut())
    }
}

/// Scratch buffers for backward passes: the gradient with respect to each
/// trunk layer's post-ReLU activation.
#[derive(Debug, Clone)]
pub struct BackwardScratch {
    d_acts: Vec<Vec<f64>>,
}

impl BackwardScratch {
    pub fn new(spec: &NetworkSpec, capacity: usize) -> BackwardScratch {
        BackwardScratch {
            d_acts: spec.trunk.iter().map(|&w| vec![0.0; capacity * w]).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Bias-corrected Adam; moment buffers mirror the parameter shapes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Vec<MomentBlock>,
    v: Vec<MomentBlock>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MomentBlock {
    w: Vec<f64>,
    b: Vec<f64>,
}

impl AdamState {
    pub fn new(net: &Network, learning_rate: f64) -> AdamState {
        let zeros = || -> Vec<MomentBlock> {
            net.trunk
                .iter()
                .chain(net.heads.iter())
                .map(|l| MomentBlock {
                    w: vec![0.0; l.w.len()],
                    b: vec![0.0; l.b.len()],
                })
                .collect()
        };
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One optimizer step. Errors on non-finite gradients so training halts
    /// before poisoning the parameters.
    pub fn apply(&mut self, net: &mut Network, grads: &Gradients) -> Result<(), NetError> {
        if !grads.is_finite() {
            return Err(NetError::NonFinite("gradients"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let hyper = (self.learning_rate, self.beta1, self.beta2, self.epsilon);
        let layers = net.trunk.iter_mut().chain(net.heads.iter_mut());
        let grad_blocks = grads.trunk.iter().chain(grads.heads.iter());
        for (((layer, grad), m), v) in layers.zip(grad_blocks).zip(&mut self.m).zip(&mut self.v) {
            adam_update_weights(layer, &grad.w, &mut m.w, &mut v.w, hyper, bc1, bc2);
            adam_update_slice(&mut layer.b, &grad.b, &mut m.b, &mut v.b, hyper, bc1, bc2);
        }
        Ok(())
    }
}

fn adam_update_slice(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    (lr, beta1, beta2, eps): (f64, f64, f64, f64),
    bc1: f64,
    bc2: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Weight update; refreshes the transposed copy afterwards so the
/// element-wise pass stays vectorizable.
fn adam_update_weights(
    layer: &mut Dense,
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    hyper: (f64, f64, f64, f64),
    bc1: f64,
    bc2: f64,
) {
    adam_update_slice(&mut layer.w, grads, m, v, hyper, bc1, bc2);
    layer.rebuild_transposed();
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// On-disk training snapshot: parameters, optimizer state, exploration RNG
/// state, and the hash of the configuration that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub network: Network,
    pub adam: Option<AdamState>,
    pub rng: Option<rand_chacha::ChaCha8Rng>,
}

impl Checkpoint {
    pub fn new(network: Network, config_hash: String) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config_hash,
            network,
            adam: None,
            rng: None,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(NetError::BadFormatVersion(self.format_version));
        }
        self.network.spec.validate()?;
        self.network.shapes_match_spec()?;
        if !self.network.is_finite() {
            return Err(NetError::NonFinite("checkpoint parameters"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        self.validate()?;
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, NetError> {
        let json = std::fs::read_to_string(path)?;
        let mut checkpoint: Checkpoint = serde_json::from_str(&json)?;
        checkpoint.validate()?;
        checkpoint.network.rebuild_transposed();
        Ok(checkpoint)
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

/// Verification helpers comparing backpropagated gradients against central
/// finite differences of a scalar loss built from fixed head coefficients.
/// The finite-difference side only calls `forward`, so it is independent of
/// the backward implementation it checks.
pub mod gradcheck {
    use super::*;

    /// `L = sum_s (c1 . q1[s] + c2 . q2[s])` for fixed coefficient vectors.
    fn loss(net: &Network, x: &[f64], batch: usize, c1: &[f64], c2: &[f64]) -> f64 {
        let mut cache = BatchCache::new(&net.spec, batch);
        net.forward(x, batch, &mut cache).expect("forward in loss");
        let mut total = 0.0;
        for s in 0..batch {
            total += dot(cache.q1_row(s), c1) + dot(cache.q2_row(s), c2);
        }
        total
    }

    /// Smallest absolute trunk preactivation over the batch. Central
    /// differences straddle the ReLU kink when a preactivation sits within
    /// the probe step of zero, so callers screen test cases with this
    /// margin before comparing gradients.
    pub fn preactivation_margin(net: &Network, x: &[f64], batch: usize) -> f64 {
        let mut margin = f64::INFINITY;
        let mut current: Vec<Vec<f64>> = (0..batch)
            .map(|s| x[s * net.spec.input_dim..(s + 1) * net.spec.input_dim].to_vec())
            .collect();
        for layer in &net.trunk {
            for row in current.iter_mut() {
                let mut next = Vec::with_capacity(layer.out_dim);
                for o in 0..layer.out_dim {
                    let z = dot(row, layer.row(o)) + layer.b[o];
                    margin = margin.min(z.abs());
                    next.push(z.max(0.0));
                }
                *row = next;
            }
        }
        margin
    }

    /// Max relative error between analytic and central finite-difference
    /// gradients over every parameter of the network.
    pub fn max_relative_error(
        net: &Network,
        x: &[f64],
        batch: usize,
        c1: &[f64],
        c2: &[f64],
        step: f64,
    ) -> f64 {
        let mut cache = BatchCache::new(&net.spec, batch);
        net.forward(x, batch, &mut cache).expect("forward");
        let mut grads = Gradients::zeros_like(net);
        let mut scratch = BackwardScratch::new(&net.spec, batch);
        let gq1: Vec<f64> = (0..batch).flat_map(|_| c1.iter().copied()).collect();
        let gq2: Vec<f64> = (0..batch).flat_map(|_| c2.iter().copied()).collect();
        net.backward(&cache, &gq1, &gq2, &mut grads, &mut scratch)
            .expect("backward");

        let mut worst = 0.0f64;
        let layer_count = net.trunk.len() + 2;
        for layer_idx in 0..layer_count {
            let (in_dim, out_dim) = {
                let l = layer_ref(net, layer_idx);
                (l.in_dim(), l.out_dim())
            };
            let w_len = in_dim * out_dim;
            for param_idx in 0..w_len + out_dim {
                let analytic = {
                    let g = grad_ref(&grads, layer_idx);
                    if param_idx < w_len {
                        g.w[param_idx]
                    } else {
                        g.b[param_idx - w_len]
                    }
                };
                let probe = |delta: f64| {
                    let mut perturbed = net.clone();
                    let l = layer_mut(&mut perturbed, layer_idx);
                    if param_idx < w_len {
                        let (o, i) = (param_idx / in_dim, param_idx % in_dim);
                        l.set_weight(o, i, l.weight(o, i) + delta);
                    } else {
                        let o = param_idx - w_len;
                        l.set_bias(o, l.bias(o) + delta);
                    }
                    loss(&perturbed, x, batch, c1, c2)
                };
                let numeric = (probe(step) - probe(-step)) / (2.0 * step);
                let err = (analytic - numeric).abs();
                let scale = analytic.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(err / scale);
            }
        }
        worst
    }

    fn layer_ref(net: &Network, idx: usize) -> &Dense {
        if idx < net.trunk.len() {
            &net.trunk[idx]
        } else {
            &net.heads[idx - net.trunk.len()]
        }
    }

    fn layer_mut(net: &mut Network, idx: usize) -> &mut Dense {
        let n = net.trunk.len();
        if idx < n {
            &mut net.trunk[idx]
        } else {
            &mut net.heads[idx - n]
        }
    }

    fn grad_ref(grads: &Gradients, idx: usize) -> &DenseGrad {
        if idx < grads.trunk.len() {
            &grads.trunk[idx]
        } else {
            &grads.heads[idx - grads.trunk.len()]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            input_dim: 1,
            trunk: vec![1],
            head_widths: [1, 1],
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec = NetworkSpec::desk(21);
        let net = Network::zeros(spec.clone()).unwrap();
        let mut cache = BatchCache::new(&spec, 1);
        net.forward(&vec![0.3; 21], 1, &mut cache).unwrap();
        assert!(cache.q1_row(0).iter().all(|&v| v == 0.0));
        assert!(cache.q2_row(0).iter().all(|&v| v == 0.0));
        assert_eq!(cache.q1_row(0).len(), 101);
        assert_eq!(cache.q2_row(0).len(), 2);
    }

    #[test]
    fn identity_network_hand_computation() {
        let mut net = Network::zeros(tiny_spec()).unwrap();
        net.trunk[0].set_weight(0, 0, 1.0);
        net.heads[0].set_weight(0, 0, 1.0);
        net.heads[1].set_weight(0, 0, 1.0);
        let mut cache = BatchCache::new(&net.spec, 1);
        net.forward(&[2.0], 1, &mut cache).unwrap();
        assert_eq!(cache.q1_row(0)[0], 2.0);
        assert_eq!(cache.q2_row(0)[0], 2.0);
    }

    #[test]
    fn relu_blocks_negative_preactivations() {
        let mut net = Network::zeros(tiny_spec()).unwrap();
        net.trunk[0].set_weight(0, 0, 1.0);
        net.heads[0].set_weight(0, 0, 1.0);
        let mut cache = BatchCache::new(&net.spec, 1);
        net.forward(&[-3.0], 1, &mut cache).unwrap();
        assert_eq!(cache.q1_row(0)[0], 0.0);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let net = Network::zeros(NetworkSpec::desk(21)).unwrap();
        let mut cache = BatchCache::new(&net.spec, 1);
        assert!(matches!(
            net.forward(&[0.0; 20], 1, &mut cache),
            Err(NetError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_output_gradients_give_zero_parameter_gradients() {
        let mut rng = substream(5, Stream::Init, 0);
        let spec = NetworkSpec {
            input_dim: 4,
            trunk: vec![8],
            head_widths: [3, 2],
        };
        let net = Network::init(spec.clone(), &mut rng).unwrap();
        let mut cache = BatchCache::new(&spec, 2);
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        net.forward(&x, 2, &mut cache).unwrap();
        let mut grads = Gradients::zeros_like(&net);
        let mut scratch = BackwardScratch::new(&spec, 2);
        net.backward(&cache, &[0.0; 6], &[0.0; 4], &mut grads, &mut scratch)
            .unwrap();
        assert!(grads
            .trunk
            .iter()
            .chain(grads.heads.iter())
            .all(|g| g.w.iter().chain(&g.b).all(|&v| v == 0.0)));
    }

    #[test]
    fn backward_is_linear_in_output_gradients() {
        let mut rng = substream(6, Stream::Init, 0);
        let spec = NetworkSpec {
            input_dim: 4,
            trunk: vec![8, 8],
            head_widths: [3, 2],
        };
        let net = Network::init(spec.clone(), &mut rng).unwrap();
        let mut cache = BatchCache::new(&spec, 1);
        let x: Vec<f64> = vec![0.3, -0.2, 0.5, 0.1];
        net.forward(&x, 1, &mut cache).unwrap();
        let gq1 = vec![0.7, -1.2, 0.4];
        let gq2 = vec![0.9, -0.3];
        let k = 2.5;
        let scaled1: Vec<f64> = gq1.iter().map(|v| v * k).collect();
        let scaled2: Vec<f64> = gq2.iter().map(|v| v * k).collect();
        let mut g_base = Gradients::zeros_like(&net);
        let mut g_scaled = Gradients::zeros_like(&net);
        let mut scratch = BackwardScratch::new(&spec, 1);
        net.backward(&cache, &gq1, &gq2, &mut g_base, &mut scratch)
            .unwrap();
        net.backward(&cache, &scaled1, &scaled2, &mut g_scaled, &mut scratch)
            .unwrap();
        for (a, b) in g_base
            .trunk
            .iter()
            .chain(g_base.heads.iter())
            .zip(g_scaled.trunk.iter().chain(g_scaled.heads.iter()))
        {
            for (x, y) in a.w.iter().zip(&b.w) {
                assert!((k * x - y).abs() < 1e-12);
            }
            for (x, y) in a.b.iter().zip(&b.b) {
                assert!((k * x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_small_network() {
        let mut rng = substream(7, Stream::Init, 0);
        let spec = NetworkSpec {
            input_dim: 4,
            trunk: vec![8],
            head_widths: [3, 2],
        };
        let net = Network::init(spec.clone(), &mut rng).unwrap();
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c1: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c2: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = gradcheck::max_relative_error(&net, &x, 2, &c1, &c2, 1e-5);
        assert!(err < 1e-4, "max relative error {err:e}");
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        let mut net = Network::zeros(tiny_spec()).unwrap();
        net.trunk[0].set_weight(0, 0, 0.5);
        let mut adam = AdamState::new(&net, 1e-4);
        let mut grads = Gradients::zeros_like(&net);
        grads.trunk[0].w[0] = 1.0;
        adam.apply(&mut net, &grads).unwrap();
        let expected = 0.5 - 1e-4 / (1.0 + 1e-8);
        assert!((net.trunk[0].weight(0, 0) - expected).abs() < 1e-15);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op_that_counts() {
        let mut rng = substream(8, Stream::Init, 0);
        let spec = NetworkSpec {
            input_dim: 3,
            trunk: vec![4],
            head_widths: [2, 2],
        };
        let mut net = Network::init(spec, &mut rng).unwrap();
        let before = net.clone();
        let mut adam = AdamState::new(&net, 1e-3);
        let grads = Gradients::zeros_like(&net);
        adam.apply(&mut net, &grads).unwrap();
        assert_eq!(net, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_moves_against_gradient_sign() {
        let mut net = Network::zeros(tiny_spec()).unwrap();
        let mut adam = AdamState::new(&net, 1e-3);
        let mut grads = Gradients::zeros_like(&net);
        grads.heads[0].b[0] = 2.0;
        let mut prev = net.heads[0].bias(0);
        for _ in 0..2 {
            adam.apply(&mut net, &grads).unwrap();
            assert!(net.heads[0].bias(0) < prev);
            prev = net.heads[0].bias(0);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut net = Network::zeros(tiny_spec()).unwrap();
        let mut adam = AdamState::new(&net, 1e-3);
        let mut grads = Gradients::zeros_like(&net);
        grads.trunk[0].w[0] = f64::NAN;
        assert!(matches!(
            adam.apply(&mut net, &grads),
            Err(NetError::NonFinite(_))
        ));
    }

    #[test]
    fn clone_is_independent() {
        let mut rng = substream(9, Stream::Init, 0);
        let net = Network::init(NetworkSpec::desk(21), &mut rng).unwrap();
        let mut clone = net.clone();
        assert_eq!(net, clone);
        let bumped = clone.trunk[0].weight(0, 0) + 1.0;
        clone.trunk[0].set_weight(0, 0, bumped);
        assert_ne!(net, clone);
        assert_ne!(net.trunk[0].weight(0, 0), clone.trunk[0].weight(0, 0));
    }

    #[test]
    fn target_equals_online_after_sync() {
        let mut rng = substream(10, Stream::Init, 0);
        let online = Network::init(NetworkSpec::desk(21), &mut rng).unwrap();
        let target = online.clone();
        let mut c1 = BatchCache::new(&online.spec, 1);
        let mut c2 = BatchCache::new(&target.spec, 1);
        let x: Vec<f64> = (0..21).map(|i| (i as f64).sin()).collect();
        online.forward(&x, 1, &mut c1).unwrap();
        target.forward(&x, 1, &mut c2).unwrap();
        assert_eq!(c1.q1_row(0), c2.q1_row(0));
        assert_eq!(c1.q2_row(0), c2.q2_row(0));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = std::env::temp_dir().join("taxrl_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.json");
        let mut rng = substream(11, Stream::Init, 0);
        let net = Network::init(NetworkSpec::desk(21), &mut rng).unwrap();
        let mut adam = AdamState::new(&net, 1e-4);
        adam.step = 17;
        let mut ck = Checkpoint::new(net.clone(), "abc123".to_string());
        ck.adam = Some(adam);
        ck.rng = Some(rng.clone());
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.network, net);
        assert_eq!(loaded.config_hash, "abc123");
        assert_eq!(loaded.adam.as_ref().unwrap().step, 17);
        assert_eq!(loaded.rng.unwrap(), rng);

        // Forward agreement after the round trip.
        let mut c1 = BatchCache::new(&net.spec, 1);
        let mut c2 = BatchCache::new(&loaded.network.spec, 1);
        let x: Vec<f64> = (0..21).map(|i| (i as f64 * 0.37).cos()).collect();
        net.forward(&x, 1, &mut c1).unwrap();
        loaded.network.forward(&x, 1, &mut c2).unwrap();
        assert_eq!(c1.q1, c2.q1);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn checkpoint_rejects_bad_version_and_shapes() {
        let mut rng = substream(12, Stream::Init, 0);
        let net = Network::init(NetworkSpec::desk(21), &mut rng).unwrap();
        let mut ck = Checkpoint::new(net.clone(), String::new());
        ck.format_version = 99;
        assert!(matches!(ck.validate(), Err(NetError::BadFormatVersion(99))));

        let mut ck = Checkpoint::new(net, String::new());
        ck.network.spec.trunk[0] = 63;
        assert!(matches!(ck.validate(), Err(NetError::BadShapes(_))));
    }

    #[test]
    fn init_respects_fan_based_limits() {
        let mut rng = substream(13, Stream::Init, 0);
        let spec = NetworkSpec::desk(21);
        let net = Network::init(spec, &mut rng).unwrap();
        let limit = (6.0f64 / (21.0 + 64.0)).sqrt();
        assert!(net.trunk[0].weights().iter().all(|w| w.abs() < limit));
        assert!(net.trunk[0].biases().iter().all(|&b| b == 0.0));
    }
}
