//! Convolutional velocity network with a hand-written reverse pass.
//!
//! Layout: stem conv → `blocks` pre-activation residual blocks
//! (h ← h + conv_b(act(conv_a(act(h))))) → act → output conv. All convolutions
//! use circular padding. Inputs are the four state channels
//! [Re φ, Im φ, Re π, Im π] followed by time channels t, sin(2^j π t),
//! cos(2^j π t) for j < `time_freqs`.
//!
//! With `Frame::Position` the complex state pairs are first moved onto the
//! position lattice by a fixed unitary DFT, eight lattice-coordinate channels
//! are appended, and the output pairs are moved back to modes by the inverse
//! transform.

use std::f64::consts::PI;
use std::fmt::Debug;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};

/// Floating-point element type of the network.
pub trait Real:
    num_traits::Float + std::ops::AddAssign + std::ops::MulAssign + Default + Debug + Send + Sync + 'static
{
    const DTYPE: &'static str;
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// C ← alpha·A·B + beta·C with explicit strides (matrixmultiply conventions).
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
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

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
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

/// Row-major C (m×n) ← op(A)·op(B) + beta·C where op(A) is m×k and op(B) is k×n.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], trans_a: bool, b: &[T], trans_b: bool, beta: T, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n extents
    // checked by the assertion.
    unsafe {
        T::gemm_raw(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// x·σ(x)
    Silu,
    Identity,
}

impl Activation {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Silu => x / (T::one() + (-x).exp()),
            Activation::Identity => x,
        }
    }

    fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Identity => T::one(),
        }
    }
}

/// Coordinate system the convolutions run in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Momentum,
    Position,
}

pub const STATE_CHANNELS: usize = 4;
const POSITION_CHANNELS: usize = 8;

/// Architecture descriptor; stored verbatim in checkpoint headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Grid side K (the network acts on K×K maps).
    pub side: usize,
    pub width: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub time_freqs: usize,
    /// 4 for full or linear-residual velocities, 2 for the π-only residual.
    pub out_channels: usize,
    pub activation: Activation,
    pub frame: Frame,
}

impl ArchSpec {
    /// About 2×10⁵ parameters at K = 8.
    pub fn desk(side: usize, out_channels: usize) -> Self {
        ArchSpec {
            side,
            width: 60,
            blocks: 3,
            kernel: 3,
            time_freqs: 4,
            out_channels,
            activation: Activation::Silu,
            frame: Frame::Momentum,
        }
    }

    /// About 1.06×10⁷ parameters.
    pub fn large(side: usize, out_channels: usize) -> Self {
        ArchSpec { width: 384, blocks: 4, ..Self::desk(side, out_channels) }
    }

    pub fn time_channels(&self) -> usize {
        1 + 2 * self.time_freqs
    }

    pub fn input_channels(&self) -> usize {
        let pos = if self.frame == Frame::Position { POSITION_CHANNELS } else { 0 };
        STATE_CHANNELS + self.time_channels() + pos
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.width == 0 {
            return Err(Error::Config("network side and width must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if self.out_channels != 4 && self.out_channels != 2 {
            return Err(Error::Config(format!("output channels must be 4 or 2, got {}", self.out_channels)));
        }
        Ok(())
    }

    /// Layer shapes as (name, [c_out, c_in, k, k]) in storage order.
    fn conv_layers(&self) -> Vec<(String, [usize; 4])> {
        let (w, k) = (self.width, self.kernel);
        let mut v = vec![("stem".to_string(), [w, self.input_channels(), k, k])];
        for b in 0..self.blocks {
            v.push((format!("block{b}.conv_a"), [w, w, k, k]));
            v.push((format!("block{b}.conv_b"), [w, w, k, k]));
        }
        v.push(("out".to_string(), [self.out_channels, w, k, k]));
        v
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (w, k2) = (self.width, self.kernel * self.kernel);
        let stem = w * self.input_channels() * k2 + w;
        let block = 2 * (w * w * k2 + w);
        let out = self.out_channels * w * k2 + self.out_channels;
        stem + self.blocks * block + out
    }
}

/// Named dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { name: name.into(), shape, data: vec![T::zero(); n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Trainable parameters: for each conv layer a weight [c_out, c_in, k, k]
/// followed by a bias [c_out].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub arch: ArchSpec,
    pub tensors: Vec<Tensor<T>>,
}

/// Gradients congruent with [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct TapeGradient<T> {
    pub grads: Vec<Tensor<T>>,
}

impl<T: Real> TapeGradient<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        TapeGradient { grads: params.tensors.iter().map(|t| Tensor::zeros(t.name.clone(), t.shape.clone())).collect() }
    }

    pub fn add_assign(&mut self, other: &TapeGradient<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += *y);
        }
    }

    pub fn flat(&self) -> Vec<T> {
        self.grads.iter().flat_map(|t| t.data.iter().copied()).collect()
    }
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(arch: ArchSpec) -> Result<Self> {
        arch.validate()?;
        let mut tensors = Vec::new();
        for (name, s) in arch.conv_layers() {
            tensors.push(Tensor::zeros(format!("{name}.weight"), s.to_vec()));
            tensors.push(Tensor::zeros(format!("{name}.bias"), vec![s[0]]));
        }
        Ok(ModelParams { arch, tensors })
    }

    /// Kernels ~ N(0, 2/fan_in), biases zero.
    pub fn init<R: Rng + ?Sized>(arch: ArchSpec, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        for t in p.tensors.iter_mut().filter(|t| t.shape.len() == 4) {
            let fan_in = t.shape[1] * t.shape[2] * t.shape[3];
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            t.data.iter_mut().for_each(|w| *w = T::of(normal.sample(rng)));
        }
        Ok(p)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch,
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(shape!("expected {} parameters, got {}", self.param_count(), values.len()));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data.copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn conv(&self, layer: usize) -> Conv<'_, T> {
        let w = &self.tensors[2 * layer];
        Conv { weight: &w.data, bias: &self.tensors[2 * layer + 1].data, c_out: w.shape[0], c_in: w.shape[1] }
    }

    /// Batched forward pass. `states` holds B samples laid out [B, 4, K, K];
    /// the result is [B, out_channels, K, K].
    pub fn forward_batch(&self, states: &[T], ts: &[f64]) -> Result<Vec<T>> {
        let (out, _) = self.run(states, ts, false)?;
        Ok(out)
    }

    /// Forward pass plus ∂(Σ upstream ⊙ output)/∂θ.
    pub fn forward_backward_batch(
        &self,
        states: &[T],
        ts: &[f64],
        upstream: &[T],
    ) -> Result<(Vec<T>, TapeGradient<T>)> {
        let (out, tape) = self.forward_recorded(states, ts)?;
        let grads = self.backward_from(tape, upstream)?;
        Ok((out, grads))
    }

    /// Forward pass keeping the activations needed by [`Self::backward_from`].
    pub fn forward_recorded(&self, states: &[T], ts: &[f64]) -> Result<(Vec<T>, ForwardTape<T>)> {
        let (out, tape) = self.run(states, ts, true)?;
        Ok((out, tape.expect("tape recorded")))
    }

    pub fn backward_from(&self, tape: ForwardTape<T>, upstream: &[T]) -> Result<TapeGradient<T>> {
        let want = tape.batch * self.arch.out_channels * self.arch.side * self.arch.side;
        if upstream.len() != want {
            return Err(shape!("upstream has {} values, output has {want}", upstream.len()));
        }
        let batch = tape.batch;
        Ok(self.backward(tape, upstream, batch))
    }

    fn run(&self, states: &[T], ts: &[f64], record: bool) -> Result<(Vec<T>, Option<ForwardTape<T>>)> {
        let a = &self.arch;
        let hw = a.side * a.side;
        let batch = ts.len();
        if states.len() != batch * STATE_CHANNELS * hw {
            return Err(shape!(
                "expected {batch}x{STATE_CHANNELS}x{}x{} state values, got {}",
                a.side,
                a.side,
                states.len()
            ));
        }
        if let Some(i) = states.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite network input at flat index {i}")));
        }
        if let Some(t) = ts.iter().find(|t| !t.is_finite()) {
            return Err(Error::Numeric(format!("non-finite flow time {t}")));
        }
        let n = batch * hw;
        let geo = ConvGeometry::new(a.side, a.kernel);
        let mut x = vec![T::zero(); a.input_channels() * n];
        // state channels, moved to channel-major [C, B, HW]
        let mut st = vec![T::zero(); STATE_CHANNELS * n];
        for b in 0..batch {
            for c in 0..STATE_CHANNELS {
                let src = &states[(b * STATE_CHANNELS + c) * hw..][..hw];
                st[c * n + b * hw..][..hw].copy_from_slice(src);
            }
        }
        if a.frame == Frame::Position {
            let dft = LatticeDft::new(a.side);
            dft.to_lattice(&mut st[..2 * n], batch);
            dft.to_lattice(&mut st[2 * n..], batch);
        }
        x[..STATE_CHANNELS * n].copy_from_slice(&st);
        let mut c = STATE_CHANNELS;
        for (b, &t) in ts.iter().enumerate() {
            for (j, v) in time_features(t, a.time_freqs).into_iter().enumerate() {
                x[(c + j) * n + b * hw..][..hw].fill(T::of(v));
            }
        }
        c += a.time_channels();
        if a.frame == Frame::Position {
            let pos = position_features(a.side);
            for (j, map) in pos.iter().enumerate() {
                for b in 0..batch {
                    for (dst, v) in x[(c + j) * n + b * hw..][..hw].iter_mut().zip(map) {
                        *dst = T::of(*v);
                    }
                }
            }
        }

        let act = a.activation;
        let mut h = self.conv(0).forward(&geo, &x, n);
        let mut block_in = Vec::new();
        let mut block_mid = Vec::new();
        for blk in 0..a.blocks {
            let ah: Vec<T> = h.iter().map(|v| act.apply(*v)).collect();
            let z1 = self.conv(1 + 2 * blk).forward(&geo, &ah, n);
            let az1: Vec<T> = z1.iter().map(|v| act.apply(*v)).collect();
            let z2 = self.conv(2 + 2 * blk).forward(&geo, &az1, n);
            let next: Vec<T> = h.iter().zip(&z2).map(|(p, q)| *p + *q).collect();
            if record {
                block_in.push(std::mem::replace(&mut h, next));
                block_mid.push(z1);
            } else {
                h = next;
            }
        }
        let ah: Vec<T> = h.iter().map(|v| act.apply(*v)).collect();
        let mut o = self.conv(1 + 2 * a.blocks).forward(&geo, &ah, n);
        if a.frame == Frame::Position {
            let dft = LatticeDft::new(a.side);
            for pair in o.chunks_exact_mut(2 * n) {
                dft.to_modes(pair, batch);
            }
        }
        let co = a.out_channels;
        let mut out = vec![T::zero(); batch * co * hw];
        for ch in 0..co {
            for b in 0..batch {
                out[(b * co + ch) * hw..][..hw].copy_from_slice(&o[ch * n + b * hw..][..hw]);
            }
        }
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite network output at flat index {i}")));
        }
        let tape = record.then(|| ForwardTape { batch, input: x, block_in, block_mid, last: h });
        Ok((out, tape))
    }

    fn backward(&self, tape: ForwardTape<T>, upstream: &[T], batch: usize) -> TapeGradient<T> {
        let a = &self.arch;
        let hw = a.side * a.side;
        let n = batch * hw;
        let geo = ConvGeometry::new(a.side, a.kernel);
        let act = a.activation;
        let mut grads = TapeGradient::zeros_like(self);
        let co = a.out_channels;
        let mut d_out = vec![T::zero(); co * n];
        for ch in 0..co {
            for b in 0..batch {
                d_out[ch * n + b * hw..][..hw].copy_from_slice(&upstream[(b * co + ch) * hw..][..hw]);
            }
        }
        if a.frame == Frame::Position {
            // adjoint of the unitary lattice→mode map
            let dft = LatticeDft::new(a.side);
            for pair in d_out.chunks_exact_mut(2 * n) {
                dft.to_lattice(pair, batch);
            }
        }
        let out_layer = 1 + 2 * a.blocks;
        let ah: Vec<T> = tape.last.iter().map(|v| act.apply(*v)).collect();
        let d_ah = self.conv(out_layer).backward(&geo, &ah, &d_out, n, &mut grads, out_layer, true);
        let mut dh: Vec<T> = d_ah.unwrap().iter().zip(&tape.last).map(|(g, v)| *g * act.derivative(*v)).collect();
        for blk in (0..a.blocks).rev() {
            let h_in = &tape.block_in[blk];
            let z1 = &tape.block_mid[blk];
            let az1: Vec<T> = z1.iter().map(|v| act.apply(*v)).collect();
            let d_az1 = self.conv(2 + 2 * blk).backward(&geo, &az1, &dh, n, &mut grads, 2 + 2 * blk, true).unwrap();
            let dz1: Vec<T> = d_az1.iter().zip(z1).map(|(g, v)| *g * act.derivative(*v)).collect();
            let ah_in: Vec<T> = h_in.iter().map(|v| act.apply(*v)).collect();
            let d_ah_in =
                self.conv(1 + 2 * blk).backward(&geo, &ah_in, &dz1, n, &mut grads, 1 + 2 * blk, true).unwrap();
            for ((d, g), v) in dh.iter_mut().zip(&d_ah_in).zip(h_in) {
                *d += *g * act.derivative(*v);
            }
        }
        self.conv(0).backward(&geo, &tape.input, &dh, n, &mut grads, 0, false);
        grads
    }
}

/// Single-sample forward: `state_channels` is [4, K, K].
pub fn forward<T: Real>(params: &ModelParams<T>, state_channels: &[T], t: f64) -> Result<Vec<T>> {
    params.forward_batch(state_channels, &[t])
}

/// Single-sample forward pass and parameter gradient of Σ upstream ⊙ output.
pub fn forward_backward<T: Real>(
    params: &ModelParams<T>,
    state_channels: &[T],
    t: f64,
    upstream: &[T],
) -> Result<(Vec<T>, TapeGradient<T>)> {
    params.forward_backward_batch(state_channels, &[t], upstream)
}

/// [t, sin(2^j π t), cos(2^j π t), ...].
pub fn time_features(t: f64, freqs: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(1 + 2 * freqs);
    v.push(t);
    for j in 0..freqs {
        let w = (1u64 << j) as f64 * PI * t;
        v.push(w.sin());
        v.push(w.cos());
    }
    v
}

/// sin/cos of the first two lattice harmonics along each axis.
fn position_features(side: usize) -> Vec<Vec<f64>> {
    let coord = |n: usize| (n as f64 + 0.5) / side as f64 - 0.5;
    let mut maps = Vec::new();
    for harmonic in [1.0, 2.0] {
        for axis in 0..2 {
            for f in [f64::sin, f64::cos] {
                let mut m = Vec::with_capacity(side * side);
                for y in 0..side {
                    for x in 0..side {
                        let c = if axis == 0 { coord(y) } else { coord(x) };
                        m.push(f(2.0 * PI * harmonic * c));
                    }
                }
                maps.push(m);
            }
        }
    }
    maps
}

/// Activations recorded by a forward pass.
pub struct ForwardTape<T> {
    batch: usize,
    input: Vec<T>,
    block_in: Vec<Vec<T>>,
    block_mid: Vec<Vec<T>>,
    last: Vec<T>,
}

/// Circular-padding gather table: `src[tap * hw + pix]` is the pixel read by
/// kernel tap `tap` for output pixel `pix`.
struct ConvGeometry {
    hw: usize,
    taps: usize,
    src: Vec<usize>,
}

impl ConvGeometry {
    fn new(side: usize, kernel: usize) -> Self {
        let pad = (kernel / 2) as isize;
        let s = side as isize;
        let mut src = Vec::with_capacity(kernel * kernel * side * side);
        for dy in 0..kernel as isize {
            for dx in 0..kernel as isize {
                for y in 0..s {
                    for x in 0..s {
                        let yy = (y + dy - pad).rem_euclid(s);
                        let xx = (x + dx - pad).rem_euclid(s);
                        src.push((yy * s + xx) as usize);
                    }
                }
            }
        }
        ConvGeometry { hw: side * side, taps: kernel * kernel, src }
    }

    fn im2col<T: Real>(&self, x: &[T], c_in: usize, n: usize) -> Vec<T> {
        let batch = n / self.hw;
        let mut col = vec![T::zero(); c_in * self.taps * n];
        for c in 0..c_in {
            for tap in 0..self.taps {
                let row = &mut col[(c * self.taps + tap) * n..][..n];
                let table = &self.src[tap * self.hw..][..self.hw];
                for b in 0..batch {
                    let img = &x[c * n + b * self.hw..][..self.hw];
                    for (dst, &s) in row[b * self.hw..][..self.hw].iter_mut().zip(table) {
                        *dst = img[s];
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Real>(&self, col: &[T], c_in: usize, n: usize) -> Vec<T> {
        let batch = n / self.hw;
        let mut x = vec![T::zero(); c_in * n];
        for c in 0..c_in {
            for tap in 0..self.taps {
                let row = &col[(c * self.taps + tap) * n..][..n];
                let table = &self.src[tap * self.hw..][..self.hw];
                for b in 0..batch {
                    let img = &mut x[c * n + b * self.hw..][..self.hw];
                    for (v, &s) in row[b * self.hw..][..self.hw].iter().zip(table) {
                        img[s] += *v;
                    }
                }
            }
        }
        x
    }
}

struct Conv<'a, T> {
    weight: &'a [T],
    bias: &'a [T],
    c_out: usize,
    c_in: usize,
}

impl<T: Real> Conv<'_, T> {
    /// x: [c_in, n] → [c_out, n].
    fn forward(&self, geo: &ConvGeometry, x: &[T], n: usize) -> Vec<T> {
        let mut y = vec![T::zero(); self.c_out * n];
        for (row, b) in y.chunks_exact_mut(n).zip(self.bias) {
            row.fill(*b);
        }
        let kdim = self.c_in * geo.taps;
        if geo.taps == 1 {
            matmul(self.c_out, kdim, n, self.weight, false, x, false, T::one(), &mut y);
        } else {
            let col = geo.im2col(x, self.c_in, n);
            matmul(self.c_out, kdim, n, self.weight, false, &col, false, T::one(), &mut y);
        }
        y
    }

    /// Accumulates weight/bias gradients into `grads` and optionally returns
    /// the gradient with respect to the input.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        geo: &ConvGeometry,
        x: &[T],
        dy: &[T],
        n: usize,
        grads: &mut TapeGradient<T>,
        layer: usize,
        want_input: bool,
    ) -> Option<Vec<T>> {
        let kdim = self.c_in * geo.taps;
        let col_owned;
        let col: &[T] = if geo.taps == 1 {
            x
        } else {
            col_owned = geo.im2col(x, self.c_in, n);
            &col_owned
        };
        matmul(self.c_out, n, kdim, dy, false, col, true, T::one(), &mut grads.grads[2 * layer].data);
        for (g, row) in grads.grads[2 * layer + 1].data.iter_mut().zip(dy.chunks_exact(n)) {
            let mut s = T::zero();
            for v in row {
                s += *v;
            }
            *g += s;
        }
        if !want_input {
            return None;
        }
        let mut dcol = vec![T::zero(); kdim * n];
        matmul(kdim, self.c_out, n, self.weight, true, dy, false, T::zero(), &mut dcol);
        Some(if geo.taps == 1 { dcol } else { geo.col2im(&dcol, self.c_in, n) })
    }
}

/// Unitary separable DFT between the mode grid m ∈ [−K/2, K/2)² and the
/// cell-centred lattice, acting on (Re, Im) channel pairs laid out [2, B, K·K].
struct LatticeDft {
    side: usize,
    /// e^{i k_m x_n}/√K as (re, im), indexed [n * K + m]
    table: Vec<(f64, f64)>,
}

impl LatticeDft {
    fn new(side: usize) -> Self {
        let k = side as f64;
        let half = (side / 2) as f64;
        let mut table = Vec::with_capacity(side * side);
        for node in 0..side {
            for m in 0..side {
                let phase = 2.0 * PI * (m as f64 - half) * (node as f64 + 0.5 - k / 2.0) / k;
                table.push((phase.cos() / k.sqrt(), phase.sin() / k.sqrt()));
            }
        }
        LatticeDft { side, table }
    }

    fn apply<T: Real>(&self, pair: &mut [T], batch: usize, conj: bool) {
        let s = self.side;
        let hw = s * s;
        let n = batch * hw;
        let sign = if conj { -1.0 } else { 1.0 };
        // transform index i (input) → j (output): out_j = Σ_i M[j,i] in_i,
        // with M[node, m] = table[node*K+m] (forward) or its conjugate transpose.
        let coef = |out_idx: usize, in_idx: usize| -> (f64, f64) {
            if conj {
                let (re, im) = self.table[in_idx * s + out_idx];
                (re, sign * im)
            } else {
                self.table[out_idx * s + in_idx]
            }
        };
        let mut tmp_re = vec![0.0f64; hw];
        let mut tmp_im = vec![0.0f64; hw];
        for b in 0..batch {
            let (re_part, im_part) = pair.split_at_mut(n);
            let re = &mut re_part[b * hw..][..hw];
            let im = &mut im_part[b * hw..][..hw];
            // axis 0 (rows)
            for o in 0..s {
                for x in 0..s {
                    let (mut ar, mut ai) = (0.0, 0.0);
                    for i in 0..s {
                        let (cr, ci) = coef(o, i);
                        let (vr, vi) = (re[i * s + x].as_f64(), im[i * s + x].as_f64());
                        ar += cr * vr - ci * vi;
                        ai += cr * vi + ci * vr;
                    }
                    tmp_re[o * s + x] = ar;
                    tmp_im[o * s + x] = ai;
                }
            }
            // axis 1 (columns)
            for y in 0..s {
                for o in 0..s {
                    let (mut ar, mut ai) = (0.0, 0.0);
                    for i in 0..s {
                        let (cr, ci) = coef(o, i);
                        let (vr, vi) = (tmp_re[y * s + i], tmp_im[y * s + i]);
                        ar += cr * vr - ci * vi;
                        ai += cr * vi + ci * vr;
                    }
                    re[y * s + o] = T::of(ar);
                    im[y * s + o] = T::of(ai);
                }
            }
        }
    }

    fn to_lattice<T: Real>(&self, pair: &mut [T], batch: usize) {
        self.apply(pair, batch, false);
    }

    fn to_modes<T: Real>(&self, pair: &mut [T], batch: usize) {
        self.apply(pair, batch, true);
    }
}
