//! Residual networks with sinusoid activations, evaluated together with their
//! exact spatial derivatives.
//!
//! Every network is a stack of ResNet blocks. A block applies two fully
//! connected layers, each followed by a sine, and adds the block input back
//! when the widths line up; a final linear layer maps to the output
//! dimension. The first dense layer of the first block doubles as the input
//! embedding, which is what makes the parameter counts work out (781 for the
//! width-15/two-block/2-input configuration, 1361 for width-20/3-input).
//!
//! Derivatives are propagated forward as per-point jets padded to a
//! SIMD-friendly stride. Two jet depths exist: the full Hessian (public
//! [`forward_jets`], finite-difference checks) and a leaner
//! value/gradient/Laplacian triple used by the training losses, which only
//! ever read the Laplacian. Parameter gradients of scalar losses are obtained
//! by a reverse sweep over the same augmented computation. Only spatial
//! coordinates are differentiated; parameter coordinates of the input ride
//! along as constants.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt;

/// Largest supported spatial dimension for jets.
pub const MAX_SPATIAL_DIM: usize = 4;
/// Packed size of a symmetric `MAX_SPATIAL_DIM` square matrix.
pub const MAX_SYM: usize = MAX_SPATIAL_DIM * (MAX_SPATIAL_DIM + 1) / 2;

/// Points processed per work unit; fixed so that parallel reductions run in
/// the same order regardless of thread count.
const CHUNK: usize = 512;

/// Architecture of one approximator network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub num_blocks: usize,
    pub width: usize,
    /// Identity skip around each block whose input width equals `width`.
    pub residual_connections: bool,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, output_dim: usize, num_blocks: usize, width: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            num_blocks,
            width,
            residual_connections: true,
        }
    }

    fn validate(&self) -> Result<(), JetError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.num_blocks == 0 || self.width == 0 {
            return Err(JetError::InvalidSpec);
        }
        Ok(())
    }

    /// Dense layers in evaluation order as (fan_in, fan_out).
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(2 * self.num_blocks + 1);
        let mut prev = self.input_dim;
        for _ in 0..self.num_blocks {
            dims.push((prev, self.width));
            dims.push((self.width, self.width));
            prev = self.width;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    /// Total number of trainable parameters (weights and biases).
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }

    /// Offset of each dense layer's weight block inside a flat parameter
    /// vector; biases follow the weights of the same layer.
    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::new();
        let mut at = 0;
        for (i, o) in self.layer_dims() {
            offsets.push(at);
            at += i * o + o;
        }
        offsets
    }

    /// Whether block `b` gets an identity skip connection.
    fn block_has_skip(&self, b: usize) -> bool {
        if !self.residual_connections {
            return false;
        }
        let in_width = if b == 0 { self.input_dim } else { self.width };
        in_width == self.width
    }

    /// sin/cos pairs cached per point (two activations per block).
    fn trig_per_point(&self) -> usize {
        4 * self.num_blocks * self.width
    }
}

/// Flat trainable-parameter storage for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self {
            values: vec![0.0; spec.param_count()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-point values, spatial gradients and spatial Hessians of a network.
///
/// `spatial_hess` stores the full `d x d` matrix per (point, component); it is
/// filled symmetrically from a packed computation, so the two triangles are
/// bitwise equal.
#[derive(Clone, Debug)]
pub struct JetBatch {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub values: Vec<f64>,
    pub spatial_grad: Vec<f64>,
    pub spatial_hess: Vec<f64>,
}

impl JetBatch {
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    pub fn grad(&self, i: usize, j: usize, k: usize) -> f64 {
        self.spatial_grad[(i * self.m + j) * self.d + k]
    }

    pub fn hess(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.spatial_hess[((i * self.m + j) * self.d + k) * self.d + l]
    }

    pub fn laplacian(&self, i: usize, j: usize) -> f64 {
        (0..self.d).map(|k| self.hess(i, j, k, k)).sum()
    }

    /// Training-depth jet of component `j` at point `i`.
    pub fn train_jet(&self, i: usize, j: usize) -> TrainJet {
        let mut t = TrainJet::zero();
        t.v = self.value(i, j);
        for k in 0..self.d {
            t.g[k] = self.grad(i, j, k);
        }
        t.lap = self.laplacian(i, j);
        t
    }
}

/// Value, spatial gradient and Laplacian of one scalar quantity at one point.
/// This is the jet depth the residual losses consume; it is also used for
/// adjoint seeds in the reverse sweep (the Laplacian seed stands for an equal
/// seed on every Hessian diagonal).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainJet {
    pub v: f64,
    pub g: [f64; MAX_SPATIAL_DIM],
    pub lap: f64,
}

impl TrainJet {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(v: f64) -> Self {
        Self {
            v,
            ..Self::default()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.lap.is_finite() && self.g.iter().all(|x| x.is_finite())
    }

    pub fn scaled_add(&mut self, scale: f64, other: &TrainJet) {
        self.v += scale * other.v;
        for k in 0..MAX_SPATIAL_DIM {
            self.g[k] += scale * other.g[k];
        }
        self.lap += scale * other.lap;
    }
}

/// Index pairs (a, b) with a <= b enumerating the packed Hessian slots for
/// spatial dimension `d`.
pub fn sym_pairs(d: usize) -> &'static [(usize, usize)] {
    const P0: [(usize, usize); 0] = [];
    const P1: [(usize, usize); 1] = [(0, 0)];
    const P2: [(usize, usize); 3] = [(0, 0), (0, 1), (1, 1)];
    const P3: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
    const P4: [(usize, usize); 10] = [
        (0, 0),
        (0, 1),
        (0, 2),
        (0, 3),
        (1, 1),
        (1, 2),
        (1, 3),
        (2, 2),
        (2, 3),
        (3, 3),
    ];
    match d {
        0 => &P0,
        1 => &P1,
        2 => &P2,
        3 => &P3,
        4 => &P4,
        _ => panic!("spatial dimension {d} out of range"),
    }
}

pub fn sym_index(d: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    sym_pairs(d)
        .iter()
        .position(|&(x, y)| x == a && y == b)
        .expect("valid pair")
}

/// How much of the jet a loss actually reads from a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JetDepth {
    /// Values only (no spatial derivatives propagated).
    Value,
    /// Value, spatial gradient and Laplacian.
    Laplacian,
}

/// A batch of evaluation points. `dim` is the full input dimension
/// (spatial + parametric); jets differentiate the first `spatial_dim`
/// coordinates only.
#[derive(Clone, Copy, Debug)]
pub struct PointBatch<'a> {
    pub coords: &'a [f64],
    pub n: usize,
    pub dim: usize,
    pub spatial_dim: usize,
}

impl<'a> PointBatch<'a> {
    pub fn new(coords: &'a [f64], dim: usize, spatial_dim: usize) -> Self {
        assert!(dim > 0 && coords.len() % dim == 0);
        assert!(spatial_dim >= 1 && spatial_dim <= MAX_SPATIAL_DIM && spatial_dim <= dim);
        Self {
            coords,
            n: coords.len() / dim,
            dim,
            spatial_dim,
        }
    }

    pub fn point(&self, i: usize) -> &'a [f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum JetError {
    InvalidSpec,
    DimensionMismatch { expected: usize, got: usize },
    ParamLength { expected: usize, got: usize },
}

impl fmt::Display for JetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JetError::InvalidSpec => write!(f, "network spec has a zero-sized field"),
            JetError::DimensionMismatch { expected, got } => {
                write!(
                    f,
                    "batch dimension {got} does not match spec input dimension {expected}"
                )
            }
            JetError::ParamLength { expected, got } => {
                write!(
                    f,
                    "parameter vector has length {got}, spec requires {expected}"
                )
            }
        }
    }
}

impl std::error::Error for JetError {}

/// Non-finite value met while assembling a loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub point_index: usize,
    pub group: usize,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "non-finite residual in group {} at collocation point {}",
            self.group, self.point_index
        )
    }
}

impl std::error::Error for Divergence {}

/// Deterministic initialization: every layer entry uniform in
/// +-sqrt(6 / fan_in), drawn from a ChaCha stream seeded by `seed`.
pub fn init_network(spec: &NetworkSpec, seed: u64) -> ParamVector {
    spec.validate().expect("valid spec");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layer_dims() {
        let scale = (6.0 / fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out + fan_out {
            values.push(rng.gen_range(-scale..scale));
        }
    }
    ParamVector { values }
}

fn check_args(spec: &NetworkSpec, params: &[f64], batch: &PointBatch) -> Result<(), JetError> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(JetError::ParamLength {
            expected: spec.param_count(),
            got: params.len(),
        });
    }
    if batch.dim != spec.input_dim {
        return Err(JetError::DimensionMismatch {
            expected: spec.input_dim,
            got: batch.dim,
        });
    }
    Ok(())
}

/// Layer views into a flat parameter slice.
struct Layers<'a> {
    dims: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    params: &'a [f64],
}

impl<'a> Layers<'a> {
    fn new(spec: &NetworkSpec, params: &'a [f64]) -> Self {
        Self {
            dims: spec.layer_dims(),
            offsets: spec.layer_offsets(),
            params,
        }
    }

    fn weights(&self, l: usize) -> &'a [f64] {
        let (i, o) = self.dims[l];
        &self.params[self.offsets[l]..self.offsets[l] + i * o]
    }

    fn biases(&self, l: usize) -> &'a [f64] {
        let (i, o) = self.dims[l];
        let at = self.offsets[l] + i * o;
        &self.params[at..at + o]
    }
}

// ---------------------------------------------------------------------------
// Padded neuron-major jet kernels.
//
// A layer state is a flat buffer `data[j * P + s]`: neuron j, jet slot s,
// padded to stride P so the inner slot loops compile to vector FMAs. Slot
// layouts by flavor:
//   value:     [v]                          (P = 1)
//   laplacian: [v, g_0..g_{d-1}, lap]       (P = 4 for d <= 2, 8 for d <= 4)
//   hessian:   [v, g_0..g_{d-1}, packed h]  (P = 8 for d <= 2, 16 for d <= 4)
// Pad slots are zero on entry to every layer and all kernels preserve that.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SlotFlavor {
    Value,
    Laplacian,
    Hessian,
}

fn layout_for(flavor: SlotFlavor, d: usize) -> (usize, usize) {
    match flavor {
        SlotFlavor::Value => (1, 1),
        SlotFlavor::Laplacian => {
            let nslots = d + 2;
            (nslots, if nslots <= 4 { 4 } else { 8 })
        }
        SlotFlavor::Hessian => {
            let nslots = 1 + d + sym_pairs(d).len();
            (nslots, if nslots <= 8 { 8 } else { 16 })
        }
    }
}

/// out[j] = sum_i w[j,i] * in[i] (+ bias on slot 0); writes every pad lane.
fn dense_forward<const P: usize>(
    w: &[f64],
    b: &[f64],
    input: &[f64],
    wi: usize,
    out: &mut [f64],
    wo: usize,
) {
    debug_assert_eq!(w.len(), wi * wo);
    let input = &input[..wi * P];
    for (j, dst) in out.chunks_exact_mut(P).take(wo).enumerate() {
        let mut acc = [0.0f64; P];
        let row = &w[j * wi..(j + 1) * wi];
        for (src, &wji) in input.chunks_exact(P).zip(row) {
            for s in 0..P {
                acc[s] += wji * src[s];
            }
        }
        acc[0] += b[j];
        dst.copy_from_slice(&acc);
    }
}

/// Transpose of `dense_forward` on adjoints. Accumulates the input adjoint
/// into `in_bar` (zeroed by caller), the weight gradient into the striped
/// buffer `wg[(j*wi+i)*P + s]` and the bias gradient into `bg`.
fn dense_backward<const P: usize>(
    w: &[f64],
    input: &[f64],
    out_bar: &[f64],
    wo: usize,
    in_bar: &mut [f64],
    wi: usize,
    wg: &mut [f64],
    bg: &mut [f64],
) {
    let input = &input[..wi * P];
    let in_bar = &mut in_bar[..wi * P];
    for j in 0..wo {
        let mut obv = [0.0f64; P];
        obv.copy_from_slice(&out_bar[j * P..j * P + P]);
        let row = &w[j * wi..(j + 1) * wi];
        let wrow = &mut wg[j * wi * P..(j + 1) * wi * P];
        let iter = input
            .chunks_exact(P)
            .zip(in_bar.chunks_exact_mut(P))
            .zip(wrow.chunks_exact_mut(P))
            .zip(row);
        for (((src, dst), gsl), &wji) in iter {
            for s in 0..P {
                dst[s] += wji * obv[s];
                gsl[s] += obv[s] * src[s];
            }
        }
        bg[j] += obv[0];
    }
}

/// sin activation with jet chain rules. `CT` = compute trig: when false the
/// sin/cos pairs are read from `sin_cos` instead of being evaluated.
fn sin_forward_value<const P: usize, const CT: bool>(
    input: &[f64],
    out: &mut [f64],
    sin_cos: &mut [f64],
    width: usize,
) {
    for j in 0..width {
        let (s, _c) = if CT {
            let sc = input[j * P].sin_cos();
            sin_cos[2 * j] = sc.0;
            sin_cos[2 * j + 1] = sc.1;
            sc
        } else {
            (sin_cos[2 * j], sin_cos[2 * j + 1])
        };
        out[j * P] = s;
    }
}

fn sin_forward_lap<const P: usize, const CT: bool>(
    d: usize,
    input: &[f64],
    out: &mut [f64],
    sin_cos: &mut [f64],
    width: usize,
) {
    for j in 0..width {
        let src = &input[j * P..j * P + P];
        let (s, c) = if CT {
            let sc = src[0].sin_cos();
            sin_cos[2 * j] = sc.0;
            sin_cos[2 * j + 1] = sc.1;
            sc
        } else {
            (sin_cos[2 * j], sin_cos[2 * j + 1])
        };
        let dst = &mut out[j * P..j * P + P];
        dst[0] = s;
        let mut gsq = 0.0;
        for k in 0..d {
            let g = src[1 + k];
            dst[1 + k] = c * g;
            gsq += g * g;
        }
        dst[1 + d] = c * src[1 + d] - s * gsq;
    }
}

fn sin_forward_hess<const P: usize, const CT: bool>(
    d: usize,
    input: &[f64],
    out: &mut [f64],
    sin_cos: &mut [f64],
    width: usize,
) {
    let pairs = sym_pairs(d);
    for j in 0..width {
        let src = &input[j * P..j * P + P];
        let (s, c) = if CT {
            let sc = src[0].sin_cos();
            sin_cos[2 * j] = sc.0;
            sin_cos[2 * j + 1] = sc.1;
            sc
        } else {
            (sin_cos[2 * j], sin_cos[2 * j + 1])
        };
        let dst = &mut out[j * P..j * P + P];
        dst[0] = s;
        for k in 0..d {
            dst[1 + k] = c * src[1 + k];
        }
        for (p, &(a, b)) in pairs.iter().enumerate() {
            dst[1 + d + p] = c * src[1 + d + p] - s * src[1 + a] * src[1 + b];
        }
    }
}

/// Adjoints of the sin kernels; `input` is the saved pre-activation state and
/// `sin_cos` the cached trig values. Accumulate into `in_bar`.
fn sin_backward_value<const P: usize>(
    input: &[f64],
    sin_cos: &[f64],
    out_bar: &[f64],
    in_bar: &mut [f64],
    width: usize,
) {
    let _ = input;
    for j in 0..width {
        in_bar[j * P] += sin_cos[2 * j + 1] * out_bar[j * P];
    }
}

fn sin_backward_lap<const P: usize>(
    d: usize,
    input: &[f64],
    sin_cos: &[f64],
    out_bar: &[f64],
    in_bar: &mut [f64],
    width: usize,
) {
    for j in 0..width {
        let src = &input[j * P..j * P + P];
        let ob = &out_bar[j * P..j * P + P];
        let dst = &mut in_bar[j * P..j * P + P];
        let s = sin_cos[2 * j];
        let c = sin_cos[2 * j + 1];
        let lb = ob[1 + d];
        let mut a_bar = c * ob[0];
        let mut gsq = 0.0;
        for k in 0..d {
            let g = src[1 + k];
            gsq += g * g;
            a_bar -= s * g * ob[1 + k];
            dst[1 + k] += c * ob[1 + k] - 2.0 * s * g * lb;
        }
        a_bar += (-s * src[1 + d] - c * gsq) * lb;
        dst[1 + d] += c * lb;
        dst[0] += a_bar;
    }
}

fn sin_backward_hess<const P: usize>(
    d: usize,
    input: &[f64],
    sin_cos: &[f64],
    out_bar: &[f64],
    in_bar: &mut [f64],
    width: usize,
) {
    let pairs = sym_pairs(d);
    for j in 0..width {
        let src = &input[j * P..j * P + P];
        let ob = &out_bar[j * P..j * P + P];
        let dst = &mut in_bar[j * P..j * P + P];
        let s = sin_cos[2 * j];
        let c = sin_cos[2 * j + 1];
        let mut a_bar = c * ob[0];
        for k in 0..d {
            a_bar -= s * src[1 + k] * ob[1 + k];
            dst[1 + k] += c * ob[1 + k];
        }
        for (p, &(pa, pb)) in pairs.iter().enumerate() {
            let hb = ob[1 + d + p];
            if hb == 0.0 {
                continue;
            }
            let ga = src[1 + pa];
            let gb = src[1 + pb];
            a_bar += (-s * src[1 + d + p] - c * ga * gb) * hb;
            dst[1 + pa] += -s * gb * hb;
            dst[1 + pb] += -s * ga * hb;
            dst[1 + d + p] += c * hb;
        }
        dst[0] += a_bar;
    }
}

/// Preallocated forward/backward buffers for one network, reused across the
/// points of a chunk.
struct Workspace {
    flavor: SlotFlavor,
    pad: usize,
    d: usize,
    /// block_in[b] is the input state of block b; the last entry is the
    /// input of the output layer.
    block_in: Vec<Vec<f64>>,
    pre_act: Vec<Vec<f64>>,
    post_act: Vec<Vec<f64>>,
    /// Output of the second dense layer (input of the second activation).
    pre_act2: Vec<Vec<f64>>,
    sin_cos: Vec<f64>,
    final_out: Vec<f64>,
    bar_cur: Vec<f64>,
    bar_next: Vec<f64>,
    bar_z: Vec<f64>,
    bar_a: Vec<f64>,
    bar_t: Vec<f64>,
    seed_state: Vec<f64>,
    /// Striped per-layer weight-gradient accumulators, `wi*wo*pad` each.
    wg_striped: Vec<Vec<f64>>,
    /// Flat per-layer bias-gradient accumulators.
    bg: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(spec: &NetworkSpec, flavor: SlotFlavor, d: usize) -> Self {
        let d_eff = if flavor == SlotFlavor::Value { 0 } else { d };
        let (_, pad) = layout_for(flavor, d_eff);
        let w = spec.width;
        let mut block_in = Vec::with_capacity(spec.num_blocks + 1);
        block_in.push(vec![0.0; spec.input_dim * pad]);
        for _ in 1..=spec.num_blocks {
            block_in.push(vec![0.0; w * pad]);
        }
        let wide = w.max(spec.input_dim);
        let dims = spec.layer_dims();
        Self {
            flavor,
            pad,
            d: d_eff,
            block_in,
            pre_act: (0..spec.num_blocks).map(|_| vec![0.0; w * pad]).collect(),
            post_act: (0..spec.num_blocks).map(|_| vec![0.0; w * pad]).collect(),
            pre_act2: (0..spec.num_blocks).map(|_| vec![0.0; w * pad]).collect(),
            sin_cos: vec![0.0; spec.trig_per_point()],
            final_out: vec![0.0; spec.output_dim * pad],
            bar_cur: vec![0.0; wide * pad],
            bar_next: vec![0.0; wide * pad],
            bar_z: vec![0.0; w * pad],
            bar_a: vec![0.0; w * pad],
            bar_t: vec![0.0; w * pad],
            seed_state: vec![0.0; spec.output_dim * pad],
            wg_striped: dims.iter().map(|&(i, o)| vec![0.0; i * o * pad]).collect(),
            bg: dims.iter().map(|&(_, o)| vec![0.0; o]).collect(),
        }
    }

    fn seed_input(&mut self, point: &[f64]) {
        let p = self.pad;
        let st = &mut self.block_in[0];
        st.iter_mut().for_each(|x| *x = 0.0);
        for (i, &x) in point.iter().enumerate() {
            st[i * p] = x;
        }
        for k in 0..self.d {
            st[k * p + 1 + k] = 1.0;
        }
    }

    fn reset_grad_accumulators(&mut self) {
        for wg in &mut self.wg_striped {
            wg.iter_mut().for_each(|x| *x = 0.0);
        }
        for bg in &mut self.bg {
            bg.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Collapse the striped accumulators into a flat parameter gradient.
    fn flush_grads(&self, spec: &NetworkSpec, grad: &mut [f64]) {
        let dims = spec.layer_dims();
        let offsets = spec.layer_offsets();
        for (l, &(wi, wo)) in dims.iter().enumerate() {
            let base = offsets[l];
            let striped = &self.wg_striped[l];
            for e in 0..wi * wo {
                let mut acc = 0.0;
                for s in 0..self.pad {
                    acc += striped[e * self.pad + s];
                }
                grad[base + e] += acc;
            }
            let bbase = base + wi * wo;
            for (j, &b) in self.bg[l].iter().enumerate() {
                grad[bbase + j] += b;
            }
        }
    }
}

/// Where the per-point trig values come from / go to.
enum TrigIo<'a> {
    Compute,
    Store(&'a mut [f64]),
    Load(&'a [f64]),
}

fn forward_point_gen<const P: usize, const CT: bool>(
    spec: &NetworkSpec,
    layers: &Layers,
    point: &[f64],
    ws: &mut Workspace,
) {
    debug_assert_eq!(ws.pad, P);
    ws.seed_input(point);
    let d = ws.d;
    let w = spec.width;
    for b in 0..spec.num_blocks {
        let l0 = 2 * b;
        let (head, tail) = ws.block_in.split_at_mut(b + 1);
        let input = &head[b];
        let wi = if b == 0 { spec.input_dim } else { w };
        dense_forward::<P>(layers.weights(l0), layers.biases(l0), input, wi, &mut ws.pre_act[b], w);
        let base = 4 * b * w;
        let (sc1, sc2) = {
            let (a, rest) = ws.sin_cos[base..base + 4 * w].split_at_mut(2 * w);
            (a, rest)
        };
        match ws.flavor {
            SlotFlavor::Value => sin_forward_value::<P, CT>(&ws.pre_act[b], &mut ws.post_act[b], sc1, w),
            SlotFlavor::Laplacian => sin_forward_lap::<P, CT>(d, &ws.pre_act[b], &mut ws.post_act[b], sc1, w),
            SlotFlavor::Hessian => sin_forward_hess::<P, CT>(d, &ws.pre_act[b], &mut ws.post_act[b], sc1, w),
        }
        dense_forward::<P>(
            layers.weights(l0 + 1),
            layers.biases(l0 + 1),
            &ws.post_act[b],
            w,
            &mut ws.pre_act2[b],
            w,
        );
        let out = &mut tail[0];
        match ws.flavor {
            SlotFlavor::Value => sin_forward_value::<P, CT>(&ws.pre_act2[b], out, sc2, w),
            SlotFlavor::Laplacian => sin_forward_lap::<P, CT>(d, &ws.pre_act2[b], out, sc2, w),
            SlotFlavor::Hessian => sin_forward_hess::<P, CT>(d, &ws.pre_act2[b], out, sc2, w),
        }
        if spec.block_has_skip(b) {
            for (o, i) in out.iter_mut().zip(input.iter()) {
                *o += *i;
            }
        }
    }
    let lout = 2 * spec.num_blocks;
    dense_forward::<P>(
        layers.weights(lout),
        layers.biases(lout),
        &ws.block_in[spec.num_blocks],
        w,
        &mut ws.final_out,
        spec.output_dim,
    );
}

fn forward_point(spec: &NetworkSpec, layers: &Layers, point: &[f64], ws: &mut Workspace, trig: TrigIo) {
    match trig {
        TrigIo::Load(src) => {
            ws.sin_cos.copy_from_slice(src);
            match ws.pad {
                1 => forward_point_gen::<1, false>(spec, layers, point, ws),
                4 => forward_point_gen::<4, false>(spec, layers, point, ws),
                8 => forward_point_gen::<8, false>(spec, layers, point, ws),
                16 => forward_point_gen::<16, false>(spec, layers, point, ws),
                _ => unreachable!("unsupported pad"),
            }
        }
        other => {
            match ws.pad {
                1 => forward_point_gen::<1, true>(spec, layers, point, ws),
                4 => forward_point_gen::<4, true>(spec, layers, point, ws),
                8 => forward_point_gen::<8, true>(spec, layers, point, ws),
                16 => forward_point_gen::<16, true>(spec, layers, point, ws),
                _ => unreachable!("unsupported pad"),
            }
            if let TrigIo::Store(dst) = other {
                dst.copy_from_slice(&ws.sin_cos);
            }
        }
    }
}

fn backward_point_gen<const P: usize>(spec: &NetworkSpec, layers: &Layers, ws: &mut Workspace) {
    debug_assert_eq!(ws.pad, P);
    let d = ws.d;
    let w = spec.width;
    let lout = 2 * spec.num_blocks;

    ws.bar_cur.iter_mut().for_each(|x| *x = 0.0);
    dense_backward::<P>(
        layers.weights(lout),
        &ws.block_in[spec.num_blocks],
        &ws.seed_state,
        spec.output_dim,
        &mut ws.bar_cur,
        w,
        &mut ws.wg_striped[lout],
        &mut ws.bg[lout],
    );

    for b in (0..spec.num_blocks).rev() {
        let l0 = 2 * b;
        let base = 4 * b * w;
        // second activation
        ws.bar_t.iter_mut().for_each(|x| *x = 0.0);
        {
            let sc2 = &ws.sin_cos[base + 2 * w..base + 4 * w];
            match ws.flavor {
                SlotFlavor::Value => sin_backward_value::<P>(&ws.pre_act2[b], sc2, &ws.bar_cur, &mut ws.bar_t, w),
                SlotFlavor::Laplacian => sin_backward_lap::<P>(d, &ws.pre_act2[b], sc2, &ws.bar_cur, &mut ws.bar_t, w),
                SlotFlavor::Hessian => sin_backward_hess::<P>(d, &ws.pre_act2[b], sc2, &ws.bar_cur, &mut ws.bar_t, w),
            }
        }
        ws.bar_z.iter_mut().for_each(|x| *x = 0.0);
        dense_backward::<P>(
            layers.weights(l0 + 1),
            &ws.post_act[b],
            &ws.bar_t,
            w,
            &mut ws.bar_z,
            w,
            &mut ws.wg_striped[l0 + 1],
            &mut ws.bg[l0 + 1],
        );
        ws.bar_a.iter_mut().for_each(|x| *x = 0.0);
        let sc = &ws.sin_cos[base..base + 2 * w];
        match ws.flavor {
            SlotFlavor::Value => sin_backward_value::<P>(&ws.pre_act[b], sc, &ws.bar_z, &mut ws.bar_a, w),
            SlotFlavor::Laplacian => sin_backward_lap::<P>(d, &ws.pre_act[b], sc, &ws.bar_z, &mut ws.bar_a, w),
            SlotFlavor::Hessian => sin_backward_hess::<P>(d, &ws.pre_act[b], sc, &ws.bar_z, &mut ws.bar_a, w),
        }
        let wi = if b == 0 { spec.input_dim } else { w };
        ws.bar_next.iter_mut().for_each(|x| *x = 0.0);
        dense_backward::<P>(
            layers.weights(l0),
            &ws.block_in[b],
            &ws.bar_a,
            w,
            &mut ws.bar_next,
            wi,
            &mut ws.wg_striped[l0],
            &mut ws.bg[l0],
        );
        if spec.block_has_skip(b) {
            for (o, i) in ws.bar_next.iter_mut().zip(ws.bar_cur.iter()).take(w * P) {
                *o += *i;
            }
        }
        std::mem::swap(&mut ws.bar_cur, &mut ws.bar_next);
    }
}

fn backward_point(spec: &NetworkSpec, layers: &Layers, ws: &mut Workspace) {
    match ws.pad {
        1 => backward_point_gen::<1>(spec, layers, ws),
        4 => backward_point_gen::<4>(spec, layers, ws),
        8 => backward_point_gen::<8>(spec, layers, ws),
        16 => backward_point_gen::<16>(spec, layers, ws),
        _ => unreachable!("unsupported pad"),
    }
}

/// Training-depth jet of output component `j` of the final state.
fn output_train_jet(ws: &Workspace, j: usize) -> TrainJet {
    let p = ws.pad;
    let d = ws.d;
    let mut t = TrainJet::zero();
    t.v = ws.final_out[j * p];
    match ws.flavor {
        SlotFlavor::Value => {}
        SlotFlavor::Laplacian => {
            for k in 0..d {
                t.g[k] = ws.final_out[j * p + 1 + k];
            }
            t.lap = ws.final_out[j * p + 1 + d];
        }
        SlotFlavor::Hessian => {
            for k in 0..d {
                t.g[k] = ws.final_out[j * p + 1 + k];
            }
            for (q, &(a, b)) in sym_pairs(d).iter().enumerate() {
                if a == b {
                    t.lap += ws.final_out[j * p + 1 + d + q];
                }
            }
        }
    }
    t
}

/// Load a training-jet seed: the `lap` component seeds every Hessian
/// diagonal equally, which is exactly how the in-scope losses differentiate.
fn load_seed(ws: &mut Workspace, seed: &TrainJet) {
    let d = ws.d;
    ws.seed_state.iter_mut().for_each(|x| *x = 0.0);
    ws.seed_state[0] = seed.v;
    match ws.flavor {
        SlotFlavor::Value => {}
        SlotFlavor::Laplacian => {
            for k in 0..d {
                ws.seed_state[1 + k] = seed.g[k];
            }
            ws.seed_state[1 + d] = seed.lap;
        }
        SlotFlavor::Hessian => {
            for k in 0..d {
                ws.seed_state[1 + k] = seed.g[k];
            }
            for (q, &(a, b)) in sym_pairs(d).iter().enumerate() {
                if a == b {
                    ws.seed_state[1 + d + q] = seed.lap;
                }
            }
        }
    }
}

/// Evaluate values, spatial gradients and spatial Hessians of the network at
/// every batch point. All derivatives are exact; nothing is finite-differenced.
pub fn forward_jets(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: &PointBatch,
) -> Result<JetBatch, JetError> {
    check_args(spec, &params.values, batch)?;
    let d = batch.spatial_dim;
    let m = spec.output_dim;
    let pairs = sym_pairs(d);
    let layers = Layers::new(spec, &params.values);
    let n = batch.n;
    let per = 1 + d + pairs.len();

    let results: Vec<Vec<f64>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut ws = Workspace::new(spec, SlotFlavor::Hessian, d);
            let mut out = Vec::with_capacity(chunk.len() * m * per);
            for &i in chunk {
                forward_point(spec, &layers, batch.point(i), &mut ws, TrigIo::Compute);
                for j in 0..m {
                    let base = j * ws.pad;
                    out.push(ws.final_out[base]);
                    for k in 0..d {
                        out.push(ws.final_out[base + 1 + k]);
                    }
                    for q in 0..pairs.len() {
                        out.push(ws.final_out[base + 1 + d + q]);
                    }
                }
            }
            out
        })
        .collect();

    let mut values = vec![0.0; n * m];
    let mut grads = vec![0.0; n * m * d];
    let mut hess = vec![0.0; n * m * d * d];
    let flat: Vec<f64> = results.concat();
    for (idx, rec) in flat.chunks_exact(per).enumerate() {
        let i = idx / m;
        let j = idx % m;
        values[i * m + j] = rec[0];
        for k in 0..d {
            grads[(i * m + j) * d + k] = rec[1 + k];
        }
        for (q, &(a, b)) in pairs.iter().enumerate() {
            hess[((i * m + j) * d + a) * d + b] = rec[1 + d + q];
            hess[((i * m + j) * d + b) * d + a] = rec[1 + d + q];
        }
    }
    Ok(JetBatch {
        n,
        m,
        d,
        values,
        spatial_grad: grads,
        spatial_hess: hess,
    })
}

/// Fast value-only evaluation (used for field dumps and error curves).
pub fn network_values(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: &PointBatch,
) -> Result<Vec<f64>, JetError> {
    check_args(spec, &params.values, batch)?;
    let layers = Layers::new(spec, &params.values);
    let n = batch.n;
    let m = spec.output_dim;
    let results: Vec<Vec<f64>> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut ws = Workspace::new(spec, SlotFlavor::Value, batch.spatial_dim);
            let mut out = Vec::with_capacity(chunk.len() * m);
            for &i in chunk {
                forward_point_gen::<1, true>(spec, &layers, batch.point(i), &mut ws);
                for j in 0..m {
                    out.push(ws.final_out[j]);
                }
            }
            out
        })
        .collect();
    Ok(results.concat())
}

/// One trained network participating in a loss.
#[derive(Clone, Copy)]
pub struct TrainSlot<'a> {
    pub spec: &'a NetworkSpec,
    pub params: &'a [f64],
}

/// Pointwise residual family defining a weighted sum of root-mean-square
/// losses. Implementations hold whatever frozen data they need; the engine
/// supplies raw jets of the trained networks per point.
pub trait ResidualProgram: Sync {
    fn n_groups(&self) -> usize {
        1
    }

    fn weight(&self, _group: usize) -> f64 {
        1.0
    }

    /// Jet depth required of each trained slot. Slots whose partials never
    /// touch gradients or Laplacians should report `Value`; the engine then
    /// skips derivative propagation for them entirely.
    fn slot_depth(&self, _slot: usize) -> JetDepth {
        JetDepth::Laplacian
    }

    /// Residual of every group at point `i`; `out` has length `n_groups()`.
    fn residuals(&self, i: usize, point: &[f64], jets: &[TrainJet], out: &mut [f64]);

    /// d residual(group, i) / d (raw jets of each trained slot). `out` is
    /// zeroed by the caller before each call.
    fn partials(&self, group: usize, i: usize, point: &[f64], jets: &[TrainJet], out: &mut [TrainJet]);
}

/// Loss evaluation result: total weighted loss, per-group RMS values and one
/// gradient per trained slot.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub total: f64,
    pub group_rms: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
}

fn slot_flavor(program: &dyn ResidualProgram, si: usize) -> SlotFlavor {
    match program.slot_depth(si) {
        JetDepth::Value => SlotFlavor::Value,
        JetDepth::Laplacian => SlotFlavor::Laplacian,
    }
}

fn make_workspaces(slots: &[TrainSlot], program: &dyn ResidualProgram, d: usize) -> Vec<Workspace> {
    slots
        .iter()
        .enumerate()
        .map(|(si, s)| Workspace::new(s.spec, slot_flavor(program, si), d))
        .collect()
}

fn loss_pass(
    slots: &[TrainSlot],
    batch: &PointBatch,
    program: &dyn ResidualProgram,
    mut trig_store: Option<&mut [Vec<f64>]>,
) -> Result<(f64, Vec<f64>), Divergence> {
    for slot in slots {
        check_args(slot.spec, slot.params, batch).expect("slot consistent with batch");
        assert_eq!(slot.spec.output_dim, 1, "loss networks are scalar-valued");
    }
    let d = batch.spatial_dim;
    let g = program.n_groups();
    let layers: Vec<Layers> = slots.iter().map(|s| Layers::new(s.spec, s.params)).collect();
    let tpp: Vec<usize> = slots.iter().map(|s| s.spec.trig_per_point()).collect();

    // Split the trig caches into per-chunk slices up front so the parallel
    // workers write disjoint regions.
    let mut trig_chunks: Vec<Vec<&mut [f64]>> = Vec::new();
    if let Some(store) = trig_store.as_deref_mut() {
        for (si, buf) in store.iter_mut().enumerate() {
            trig_chunks.push(buf.chunks_mut(CHUNK * tpp[si]).collect());
        }
    }
    // transpose: per chunk, per slot
    let n_chunks = batch.n.div_ceil(CHUNK);
    let mut per_chunk: Vec<Vec<Option<&mut [f64]>>> = (0..n_chunks)
        .map(|_| (0..slots.len()).map(|_| None).collect())
        .collect();
    for (si, cvec) in trig_chunks.into_iter().enumerate() {
        for (ci, sl) in cvec.into_iter().enumerate() {
            per_chunk[ci][si] = Some(sl);
        }
    }

    let indices: Vec<usize> = (0..batch.n).collect();
    let partials: Vec<Result<Vec<f64>, Divergence>> = indices
        .par_chunks(CHUNK)
        .zip(per_chunk.into_par_iter())
        .map(|(chunk, mut trigs)| {
            let mut spaces = make_workspaces(slots, program, d);
            let mut jets = vec![TrainJet::zero(); slots.len()];
            let mut sums = vec![0.0; g];
            let mut res = vec![0.0; g];
            for (ci, &i) in chunk.iter().enumerate() {
                let point = batch.point(i);
                for (si, slot) in slots.iter().enumerate() {
                    let io = match trigs[si].as_deref_mut() {
                        Some(buf) => TrigIo::Store(&mut buf[ci * tpp[si]..(ci + 1) * tpp[si]]),
                        None => TrigIo::Compute,
                    };
                    forward_point(slot.spec, &layers[si], point, &mut spaces[si], io);
                    jets[si] = output_train_jet(&spaces[si], 0);
                }
                program.residuals(i, point, &jets, &mut res);
                for (gi, r) in res.iter().enumerate() {
                    if !r.is_finite() {
                        return Err(Divergence {
                            point_index: i,
                            group: gi,
                        });
                    }
                    sums[gi] += r * r;
                }
            }
            Ok(sums)
        })
        .collect();

    let mut sums = vec![0.0; g];
    for part in partials {
        let part = part?;
        for (a, b) in sums.iter_mut().zip(part) {
            *a += b;
        }
    }
    let group_rms: Vec<f64> = sums.iter().map(|s| (s / batch.n as f64).sqrt()).collect();
    let total = group_rms
        .iter()
        .enumerate()
        .map(|(gi, r)| program.weight(gi) * r)
        .sum();
    Ok((total, group_rms))
}

/// Loss value only (no parameter gradients): L = sum_g w_g * RMS_g.
pub fn rms_loss(
    slots: &[TrainSlot],
    batch: &PointBatch,
    program: &dyn ResidualProgram,
) -> Result<(f64, Vec<f64>), Divergence> {
    loss_pass(slots, batch, program, None)
}

/// Loss and exact parameter gradient for every trained slot.
///
/// Two passes: the first accumulates per-group residual sums (fixed chunk
/// order keeps the reduction bit-deterministic) and caches the trig values,
/// the second replays each point and back-propagates the seed
/// w_g * r_gi / (N * RMS_g) through the jets.
pub fn rms_loss_and_grads(
    slots: &[TrainSlot],
    batch: &PointBatch,
    program: &dyn ResidualProgram,
) -> Result<LossEval, Divergence> {
    let n = batch.n;
    let mut trig: Vec<Vec<f64>> = slots
        .iter()
        .map(|s| vec![0.0; n * s.spec.trig_per_point()])
        .collect();
    let (total, group_rms) = loss_pass(slots, batch, program, Some(&mut trig))?;
    let d = batch.spatial_dim;
    let g = program.n_groups();
    let layers: Vec<Layers> = slots.iter().map(|s| Layers::new(s.spec, s.params)).collect();
    let tpp: Vec<usize> = slots.iter().map(|s| s.spec.trig_per_point()).collect();

    // d(total)/d r_gi = w_g * r_gi / (N * RMS_g); zero-RMS groups contribute
    // nothing (their residuals are identically zero).
    let mut coeff = vec![0.0; g];
    for gi in 0..g {
        if group_rms[gi] > 0.0 {
            coeff[gi] = program.weight(gi) / (n as f64 * group_rms[gi]);
        }
    }

    let param_counts: Vec<usize> = slots.iter().map(|s| s.spec.param_count()).collect();
    let indices: Vec<usize> = (0..n).collect();
    let grads_parts: Vec<Vec<Vec<f64>>> = indices
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(chunk_idx, chunk)| {
            let base = chunk_idx * CHUNK;
            let mut spaces = make_workspaces(slots, program, d);
            for ws in &mut spaces {
                ws.reset_grad_accumulators();
            }
            let mut jets = vec![TrainJet::zero(); slots.len()];
            let mut seeds = vec![TrainJet::zero(); slots.len()];
            let mut combined = vec![TrainJet::zero(); slots.len()];
            let mut res = vec![0.0; g];
            for (ci, &i) in chunk.iter().enumerate() {
                debug_assert_eq!(base + ci, i);
                let point = batch.point(i);
                for (si, slot) in slots.iter().enumerate() {
                    let tp = tpp[si];
                    let io = TrigIo::Load(&trig[si][i * tp..(i + 1) * tp]);
                    forward_point(slot.spec, &layers[si], point, &mut spaces[si], io);
                    jets[si] = output_train_jet(&spaces[si], 0);
                }
                program.residuals(i, point, &jets, &mut res);
                for c in combined.iter_mut() {
                    *c = TrainJet::zero();
                }
                let mut any = false;
                for gi in 0..g {
                    let scale = coeff[gi] * res[gi];
                    if scale == 0.0 {
                        continue;
                    }
                    for s in seeds.iter_mut() {
                        *s = TrainJet::zero();
                    }
                    program.partials(gi, i, point, &jets, &mut seeds);
                    for (cmb, sd) in combined.iter_mut().zip(&seeds) {
                        cmb.scaled_add(scale, sd);
                    }
                    any = true;
                }
                if !any {
                    continue;
                }
                for (si, slot) in slots.iter().enumerate() {
                    if combined[si] == TrainJet::zero() {
                        continue;
                    }
                    load_seed(&mut spaces[si], &combined[si]);
                    backward_point(slot.spec, &layers[si], &mut spaces[si]);
                }
            }
            slots
                .iter()
                .enumerate()
                .map(|(si, slot)| {
                    let mut grad = vec![0.0; param_counts[si]];
                    spaces[si].flush_grads(slot.spec, &mut grad);
                    grad
                })
                .collect()
        })
        .collect();

    let mut grads: Vec<Vec<f64>> = param_counts.iter().map(|&c| vec![0.0; c]).collect();
    for part in grads_parts {
        for (acc, p) in grads.iter_mut().zip(part) {
            for (a, b) in acc.iter_mut().zip(p) {
                *a += b;
            }
        }
    }

    Ok(LossEval {
        total,
        group_rms,
        grads,
    })
}


#[cfg(test)]
mod bench {
    use super::*;

    struct P;
    impl ResidualProgram for P {
        fn residuals(&self, _i: usize, _pt: &[f64], jets: &[TrainJet], out: &mut [f64]) {
            out[0] = jets[0].lap + jets[0].v;
        }
        fn partials(&self, _g: usize, _i: usize, _pt: &[f64], _j: &[TrainJet], out: &mut [TrainJet]) {
            out[0].v = 1.0;
            out[0].lap = 1.0;
        }
    }

    struct V;
    impl ResidualProgram for V {
        fn slot_depth(&self, _slot: usize) -> JetDepth {
            JetDepth::Value
        }
        fn residuals(&self, _i: usize, _pt: &[f64], jets: &[TrainJet], out: &mut [f64]) {
            out[0] = jets[0].v - 1.0;
        }
        fn partials(&self, _g: usize, _i: usize, _pt: &[f64], _j: &[TrainJet], out: &mut [TrainJet]) {
            out[0].v = 1.0;
        }
    }

    #[test]
    #[ignore]
    fn throughput_probe() {
        let spec = NetworkSpec::new(2, 1, 2, 15);
        let params = init_network(&spec, 1);
        let n = 4096;
        let coords: Vec<f64> = (0..2 * n).map(|i| ((i * 29) % 997) as f64 / 997.0).collect();
        let batch = PointBatch::new(&coords, 2, 2);
        let slots = [TrainSlot { spec: &spec, params: &params.values }];
        let t0 = std::time::Instant::now();
        let reps = 50;
        for _ in 0..reps {
            let e = rms_loss_and_grads(&slots, &batch, &P).unwrap();
            assert!(e.total.is_finite());
        }
        let dt = t0.elapsed().as_secs_f64();
        eprintln!("width15 d2 lap: {:.2} us/pt, {:.4} s/eval", 1e6 * dt / (reps * n) as f64, dt / reps as f64);

        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            let e = rms_loss_and_grads(&slots, &batch, &V).unwrap();
            assert!(e.total.is_finite());
        }
        let dt = t0.elapsed().as_secs_f64();
        eprintln!("width15 d2 value: {:.2} us/pt, {:.4} s/eval", 1e6 * dt / (reps * n) as f64, dt / reps as f64);

        let spec = NetworkSpec::new(3, 1, 3, 25);
        let params = init_network(&spec, 1);
        let n = 10000;
        let coords: Vec<f64> = (0..3 * n).map(|i| ((i * 29) % 997) as f64 / 997.0).collect();
        let batch = PointBatch::new(&coords, 3, 2);
        let slots = [TrainSlot { spec: &spec, params: &params.values }];
        let t0 = std::time::Instant::now();
        let reps = 10;
        for _ in 0..reps {
            let e = rms_loss_and_grads(&slots, &batch, &P).unwrap();
            assert!(e.total.is_finite());
        }
        let dt = t0.elapsed().as_secs_f64();
        eprintln!("width25x3 d2D1 lap: {:.2} us/pt, {:.4} s/eval", 1e6 * dt / (reps * n) as f64, dt / reps as f64);

        let spec20 = NetworkSpec::new(3, 1, 2, 20);
        let params20 = init_network(&spec20, 1);
        let slots = [TrainSlot { spec: &spec20, params: &params20.values }];
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            let e = rms_loss_and_grads(&slots, &batch, &P).unwrap();
            assert!(e.total.is_finite());
        }
        let dt = t0.elapsed().as_secs_f64();
        eprintln!("width20x2 d2D1 lap: {:.2} us/pt, {:.4} s/eval", 1e6 * dt / (reps * n) as f64, dt / reps as f64);
    }
}
