//! Parametric optimal control problem instances: residual forms, objective,
//! total derivative, boundary ansatz, admissible set and (where available)
//! the closed-form optimal triple.
//!
//! Four built-in problems:
//! - `semilinear_box` (test1): semilinear elliptic state, fixed box bounds,
//!   closed-form optimum.
//! - `semilinear_parametric_bound` (test2): same family, upper bound is the
//!   parameter.
//! - `laplace_geometry` (test4): Laplace state on a rectangle with a
//!   parametric circular hole, desired-state parameter.
//! - `semilinear_sparse` (test5): sparse L1 control on the unit disk, the
//!   sparsity weight is the parameter.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::constraints::AdmissibleSpec;
use crate::jet_engine::{
    sym_index, sym_pairs, JetBatch, JetDepth, NetworkSpec, ParamVector, PointBatch,
    ResidualProgram, TrainJet, MAX_SPATIAL_DIM, MAX_SYM,
};
use crate::sampling::{DomainSpec, SampleSet};

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type FieldFn = Arc<dyn Fn(&[f64]) -> FieldJet + Send + Sync>;

/// Value, gradient and full packed Hessian of an analytic scalar field at one
/// point (spatial derivatives only).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FieldJet {
    pub v: f64,
    pub g: [f64; MAX_SPATIAL_DIM],
    pub h: [f64; MAX_SYM],
}

impl FieldJet {
    pub fn constant(v: f64) -> Self {
        Self {
            v,
            ..Self::default()
        }
    }

    /// Jet of the coordinate function x_k.
    pub fn coord(point: &[f64], k: usize) -> Self {
        let mut j = Self::constant(point[k]);
        j.g[k] = 1.0;
        j
    }

    pub fn lap(&self, d: usize) -> f64 {
        (0..d).map(|k| self.h[sym_index(d, k, k)]).sum()
    }

    pub fn train(&self, d: usize) -> TrainJet {
        let mut t = TrainJet::zero();
        t.v = self.v;
        t.g[..MAX_SPATIAL_DIM].copy_from_slice(&self.g);
        t.lap = self.lap(d);
        t
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = *self;
        out.v *= s;
        out.g.iter_mut().for_each(|x| *x *= s);
        out.h.iter_mut().for_each(|x| *x *= s);
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = *self;
        out.v += other.v;
        for k in 0..MAX_SPATIAL_DIM {
            out.g[k] += other.g[k];
        }
        for p in 0..MAX_SYM {
            out.h[p] += other.h[p];
        }
        out
    }

    /// Product rule for two full jets in spatial dimension `d`.
    pub fn mul(&self, other: &Self, d: usize) -> Self {
        let mut out = Self::constant(self.v * other.v);
        for k in 0..d {
            out.g[k] = self.v * other.g[k] + other.v * self.g[k];
        }
        for (p, &(a, b)) in sym_pairs(d).iter().enumerate() {
            out.h[p] = self.v * other.h[p]
                + other.v * self.h[p]
                + self.g[a] * other.g[b]
                + self.g[b] * other.g[a];
        }
        out
    }

    /// Jet of sin(a * x_k).
    pub fn sin_ax(point: &[f64], k: usize, a: f64, d: usize) -> Self {
        let (s, c) = (a * point[k]).sin_cos();
        let mut out = Self::constant(s);
        out.g[k] = a * c;
        out.h[sym_index(d, k, k)] = -a * a * s;
        out
    }
}

/// PDE family of the state equation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PdeForm {
    /// -lap(y) + y^3 = u + f, homogeneous Dirichlet handled by the ansatz.
    SemilinearCubic,
    /// -lap(y) = u, Dirichlet data handled by the ansatz.
    Poisson,
}

/// Source of the L1 sparsity weight beta.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SparsityWeight {
    None,
    Fixed(f64),
    /// beta = mu[index]
    Param(usize),
}

/// Which field an ansatz composition produces. The state uses the problem's
/// boundary lift; the adjoint always lifts zero (p = 0 on the boundary for
/// every in-scope problem).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    State,
    Adjoint,
}

/// Closed-form optimal triple, values plus full jets of y* and p* for the
/// oracle checks.
#[derive(Clone)]
pub struct AnalyticTriple {
    pub y: ScalarFn,
    pub u: ScalarFn,
    pub p: ScalarFn,
    pub y_jet: FieldFn,
    pub p_jet: FieldFn,
}

/// One parametric optimal control problem instance.
#[derive(Clone)]
pub struct ProblemDef {
    pub name: String,
    pub d: usize,
    pub dp: usize,
    pub domain: DomainSpec,
    pub pde: PdeForm,
    /// Tikhonov weight.
    pub alpha: f64,
    pub sparsity: SparsityWeight,
    pub desired_state: ScalarFn,
    /// Source term f; None means zero.
    pub source: Option<ScalarFn>,
    /// Length factor, vanishing exactly on the spatial boundary.
    pub length_factor: FieldFn,
    /// Boundary lift for the state field.
    pub boundary_lift: FieldFn,
    pub admissible: AdmissibleSpec,
    pub analytic: Option<AnalyticTriple>,
}

impl ProblemDef {
    pub fn beta_at(&self, point: &[f64]) -> f64 {
        match self.sparsity {
            SparsityWeight::None => 0.0,
            SparsityWeight::Fixed(b) => b,
            SparsityWeight::Param(i) => point[self.d + i],
        }
    }

    pub fn source_at(&self, point: &[f64]) -> f64 {
        self.source.as_ref().map_or(0.0, |f| f(point))
    }

    pub fn lift_jet(&self, kind: FieldKind, point: &[f64]) -> FieldJet {
        match kind {
            FieldKind::State => (self.boundary_lift)(point),
            FieldKind::Adjoint => FieldJet::constant(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemError {
    EmptySample,
    NoAnalyticSolution,
}

impl fmt::Display for ProblemError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProblemError::EmptySample => write!(f, "objective estimate needs a nonempty sample"),
            ProblemError::NoAnalyticSolution => {
                write!(f, "problem provides no closed-form optimal triple")
            }
        }
    }
}

impl std::error::Error for ProblemError {}

/// sign with sign(0) = 0, the minimal-norm subgradient element of |u|.
pub fn sign0(u: f64) -> f64 {
    if u > 0.0 {
        1.0
    } else if u < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Per-point residual kernels (single source of truth for the formulas).
// ---------------------------------------------------------------------------

pub fn state_residual_at(pde: PdeForm, y: &TrainJet, u: f64, f: f64) -> f64 {
    match pde {
        PdeForm::SemilinearCubic => -y.lap + y.v * y.v * y.v - u - f,
        PdeForm::Poisson => -y.lap - u,
    }
}

pub fn adjoint_residual_at(pde: PdeForm, y_value: f64, p: &TrainJet, y_desired: f64) -> f64 {
    match pde {
        PdeForm::SemilinearCubic => {
            -p.lap + 3.0 * p.v * y_value * y_value - (y_value - y_desired)
        }
        PdeForm::Poisson => -p.lap - (y_value - y_desired),
    }
}

pub fn total_derivative_at(alpha: f64, beta: f64, u: f64, p: f64) -> f64 {
    alpha * u + p + beta * sign0(u)
}

/// Ansatz composition on training jets: lift + l * raw.
pub fn compose_train(l: &FieldJet, lift: &FieldJet, raw: &TrainJet, d: usize) -> TrainJet {
    let mut out = TrainJet::zero();
    out.v = lift.v + l.v * raw.v;
    let mut cross = 0.0;
    for k in 0..d {
        out.g[k] = lift.g[k] + l.v * raw.g[k] + raw.v * l.g[k];
        cross += l.g[k] * raw.g[k];
    }
    out.lap = lift.lap(d) + l.v * raw.lap + 2.0 * cross + raw.v * l.lap(d);
    out
}

/// Transpose of `compose_train` in the raw-jet arguments: maps a seed on the
/// composed jet to a seed on the raw network jet.
pub fn pullback_train(l: &FieldJet, seed: &TrainJet, d: usize) -> TrainJet {
    let mut out = TrainJet::zero();
    out.v = l.v * seed.v + l.lap(d) * seed.lap;
    for k in 0..d {
        out.v += l.g[k] * seed.g[k];
        out.g[k] = l.v * seed.g[k] + 2.0 * l.g[k] * seed.lap;
    }
    out.lap = l.v * seed.lap;
    out
}

// ---------------------------------------------------------------------------
// Batch operations.
// ---------------------------------------------------------------------------

/// State-equation residual per point from composed state jets and control
/// values. The boundary part is enforced by the ansatz, never by a residual.
pub fn state_residual(
    problem: &ProblemDef,
    jets_y: &JetBatch,
    u_values: &[f64],
    batch: &PointBatch,
) -> Vec<f64> {
    assert_eq!(jets_y.n, batch.n);
    assert_eq!(u_values.len(), batch.n);
    (0..batch.n)
        .map(|i| {
            let y = jets_y.train_jet(i, 0);
            state_residual_at(problem.pde, &y, u_values[i], problem.source_at(batch.point(i)))
        })
        .collect()
}

/// Adjoint-equation residual per point from composed state and adjoint jets.
pub fn adjoint_residual(
    problem: &ProblemDef,
    jets_y: &JetBatch,
    jets_p: &JetBatch,
    batch: &PointBatch,
) -> Vec<f64> {
    assert_eq!(jets_y.n, batch.n);
    assert_eq!(jets_p.n, batch.n);
    (0..batch.n)
        .map(|i| {
            let p = jets_p.train_jet(i, 0);
            let yd = (problem.desired_state)(batch.point(i));
            adjoint_residual_at(problem.pde, jets_y.value(i, 0), &p, yd)
        })
        .collect()
}

/// Total derivative d_u J = alpha*u + p + beta*sign(u) per point.
pub fn total_derivative(
    problem: &ProblemDef,
    y_values: &[f64],
    p_values: &[f64],
    u_values: &[f64],
    batch: &PointBatch,
) -> Vec<f64> {
    let _ = y_values;
    (0..batch.n)
        .map(|i| {
            let beta = problem.beta_at(batch.point(i));
            total_derivative_at(problem.alpha, beta, u_values[i], p_values[i])
        })
        .collect()
}

/// Monte-Carlo estimate of the objective: sample mean of the integrand times
/// the spatial measure at each point's parameter.
pub fn objective(
    problem: &ProblemDef,
    y_values: &[f64],
    u_values: &[f64],
    sample: &SampleSet,
) -> Result<f64, ProblemError> {
    if sample.n == 0 {
        return Err(ProblemError::EmptySample);
    }
    let mut acc = 0.0;
    for i in 0..sample.n {
        let point = sample.point(i);
        let yd = (problem.desired_state)(point);
        let beta = problem.beta_at(point);
        let dy = y_values[i] - yd;
        let u = u_values[i];
        let integrand = 0.5 * dy * dy + 0.5 * problem.alpha * u * u + beta * u.abs();
        acc += integrand * (problem.domain.measure)(&point[problem.d..]);
    }
    Ok(acc / sample.n as f64)
}

/// Compose raw network jets with the problem's ansatz: lift + l * raw, full
/// Hessian product rule. On the spatial boundary the value equals the lift
/// exactly (l vanishes there).
pub fn apply_ansatz(
    problem: &ProblemDef,
    kind: FieldKind,
    jets_raw: &JetBatch,
    batch: &PointBatch,
) -> JetBatch {
    assert_eq!(jets_raw.n, batch.n);
    assert_eq!(jets_raw.m, 1);
    let d = jets_raw.d;
    let pairs = sym_pairs(d);
    let mut out = jets_raw.clone();
    for i in 0..batch.n {
        let point = batch.point(i);
        let l = (problem.length_factor)(point);
        let lift = problem.lift_jet(kind, point);
        let rv = jets_raw.value(i, 0);
        out.values[i] = lift.v + l.v * rv;
        for k in 0..d {
            out.spatial_grad[i * d + k] =
                lift.g[k] + l.v * jets_raw.grad(i, 0, k) + rv * l.g[k];
        }
        for (p, &(a, b)) in pairs.iter().enumerate() {
            let hv = lift.h[p]
                + l.v * jets_raw.hess(i, 0, a, b)
                + l.g[a] * jets_raw.grad(i, 0, b)
                + l.g[b] * jets_raw.grad(i, 0, a)
                + rv * l.h[p];
            out.spatial_hess[(i * d + a) * d + b] = hv;
            out.spatial_hess[(i * d + b) * d + a] = hv;
        }
    }
    out
}

/// Closed-form optimal (y*, u*, p*) values, the control clipped through the
/// problem's projection. None when the problem has no analytic triple.
pub fn analytic_solution(
    problem: &ProblemDef,
    batch: &PointBatch,
) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let triple = problem.analytic.as_ref()?;
    let mut y = Vec::with_capacity(batch.n);
    let mut u = Vec::with_capacity(batch.n);
    let mut p = Vec::with_capacity(batch.n);
    for i in 0..batch.n {
        let point = batch.point(i);
        y.push((triple.y)(point));
        u.push((triple.u)(point));
        p.push((triple.p)(point));
    }
    Some((y, u, p))
}

/// Composed field values (lift + l * raw) of one network over a batch.
pub fn composed_values(
    problem: &ProblemDef,
    kind: FieldKind,
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: &PointBatch,
) -> Vec<f64> {
    let raw = crate::jet_engine::network_values(spec, params, batch).expect("consistent batch");
    (0..batch.n)
        .map(|i| {
            let point = batch.point(i);
            let l = (problem.length_factor)(point);
            let lift = problem.lift_jet(kind, point);
            lift.v + l.v * raw[i]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Residual programs for the alternating scheme.
// ---------------------------------------------------------------------------

/// L_s: RMS of the state residual, trained slot = raw state network,
/// control frozen to precomputed values.
pub struct StateProgram {
    pde: PdeForm,
    d: usize,
    l: Vec<FieldJet>,
    lift: Vec<FieldJet>,
    f: Vec<f64>,
    u: Vec<f64>,
}

impl StateProgram {
    pub fn new(problem: &ProblemDef, batch: &PointBatch, u_values: Vec<f64>) -> Self {
        assert_eq!(u_values.len(), batch.n);
        let mut l = Vec::with_capacity(batch.n);
        let mut lift = Vec::with_capacity(batch.n);
        let mut f = Vec::with_capacity(batch.n);
        for i in 0..batch.n {
            let point = batch.point(i);
            l.push((problem.length_factor)(point));
            lift.push(problem.lift_jet(FieldKind::State, point));
            f.push(problem.source_at(point));
        }
        Self {
            pde: problem.pde,
            d: batch.spatial_dim,
            l,
            lift,
            f,
            u: u_values,
        }
    }

    /// Residual from a raw state jet; exposed so oracle tests can feed
    /// analytic jets directly.
    pub fn residual_at(&self, i: usize, raw_y: &TrainJet) -> f64 {
        let y = compose_train(&self.l[i], &self.lift[i], raw_y, self.d);
        state_residual_at(self.pde, &y, self.u[i], self.f[i])
    }
}

impl ResidualProgram for StateProgram {
    fn residuals(&self, i: usize, _point: &[f64], jets: &[TrainJet], out: &mut [f64]) {
        out[0] = self.residual_at(i, &jets[0]);
    }

    fn partials(&self, _g: usize, i: usize, _point: &[f64], jets: &[TrainJet], out: &mut [TrainJet]) {
        let y = compose_train(&self.l[i], &self.lift[i], &jets[0], self.d);
        let mut seed = TrainJet::zero();
        seed.lap = -1.0;
        if self.pde == PdeForm::SemilinearCubic {
            seed.v = 3.0 * y.v * y.v;
        }
        out[0] = pullback_train(&self.l[i], &seed, self.d);
    }
}

/// L_a: RMS of the adjoint residual, trained slot = raw adjoint network,
/// state values frozen.
pub struct AdjointProgram {
    pde: PdeForm,
    d: usize,
    l: Vec<FieldJet>,
    y: Vec<f64>,
    yd: Vec<f64>,
}

impl AdjointProgram {
    pub fn new(problem: &ProblemDef, batch: &PointBatch, y_composed: Vec<f64>) -> Self {
        assert_eq!(y_composed.len(), batch.n);
        let mut l = Vec::with_capacity(batch.n);
        let mut yd = Vec::with_capacity(batch.n);
        for i in 0..batch.n {
            let point = batch.point(i);
            l.push((problem.length_factor)(point));
            yd.push((problem.desired_state)(point));
        }
        Self {
            pde: problem.pde,
            d: batch.spatial_dim,
            l,
            y: y_composed,
            yd,
        }
    }

    pub fn residual_at(&self, i: usize, raw_p: &TrainJet) -> f64 {
        let zero = FieldJet::constant(0.0);
        let p = compose_train(&self.l[i], &zero, raw_p, self.d);
        adjoint_residual_at(self.pde, self.y[i], &p, self.yd[i])
    }
}

impl ResidualProgram for AdjointProgram {
    fn residuals(&self, i: usize, _point: &[f64], jets: &[TrainJet], out: &mut [f64]) {
        out[0] = self.residual_at(i, &jets[0]);
    }

    fn partials(&self, _g: usize, i: usize, _point: &[f64], _jets: &[TrainJet], out: &mut [TrainJet]) {
        let mut seed = TrainJet::zero();
        seed.lap = -1.0;
        if self.pde == PdeForm::SemilinearCubic {
            seed.v = 3.0 * self.y[i] * self.y[i];
        }
        out[0] = pullback_train(&self.l[i], &seed, self.d);
    }
}

/// L_u: RMS of (u_hat - u_step), trained slot = control network (no ansatz).
pub struct ControlFitProgram {
    targets: Vec<f64>,
}

impl ControlFitProgram {
    pub fn new(targets: Vec<f64>) -> Self {
        Self { targets }
    }
}

impl ResidualProgram for ControlFitProgram {
    fn slot_depth(&self, _slot: usize) -> JetDepth {
        JetDepth::Value
    }

    fn residuals(&self, i: usize, _point: &[f64], jets: &[TrainJet], out: &mut [f64]) {
        out[0] = jets[0].v - self.targets[i];
    }

    fn partials(&self, _g: usize, _i: usize, _point: &[f64], _jets: &[TrainJet], out: &mut [TrainJet]) {
        out[0].v = 1.0;
    }
}

// ---------------------------------------------------------------------------
// Built-in problem registry.
// ---------------------------------------------------------------------------

fn unit_square_domain(dp: usize, plo: Vec<f64>, phi: Vec<f64>) -> DomainSpec {
    let mut lower = vec![0.0, 0.0];
    let mut upper = vec![1.0, 1.0];
    lower.extend_from_slice(&plo);
    upper.extend_from_slice(&phi);
    DomainSpec {
        spatial_dim: 2,
        param_dim: dp,
        lower,
        upper,
        interior: Arc::new(|p: &[f64]| p[0] > 0.0 && p[0] < 1.0 && p[1] > 0.0 && p[1] < 1.0),
        closure: Arc::new(|p: &[f64]| {
            (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])
        }),
        slice_faces: vec![],
        measure: Arc::new(|_| 1.0),
    }
}

/// l(x) = x0 (1 - x0) x1 (1 - x1)
fn square_length_factor(point: &[f64]) -> FieldJet {
    let d = 2;
    let x0 = FieldJet::coord(point, 0);
    let x1 = FieldJet::coord(point, 1);
    let one_minus = |j: &FieldJet| FieldJet::constant(1.0).add(&j.scale(-1.0));
    x0.mul(&one_minus(&x0), d)
        .mul(&x1.mul(&one_minus(&x1), d), d)
}

/// y*(x) = sin(pi x0) sin(pi x1) with full jets.
fn exact_state_jet(point: &[f64]) -> FieldJet {
    let d = 2;
    FieldJet::sin_ax(point, 0, PI, d).mul(&FieldJet::sin_ax(point, 1, PI, d), d)
}

/// Shared pieces of the two semilinear analytic problems. `u_star` must clip
/// 2 pi^2 y* through the admissible set.
fn semilinear_analytic(alpha: f64, admissible: &AdmissibleSpec) -> AnalyticTriple {
    let adm = admissible.clone();
    let y = Arc::new(|p: &[f64]| exact_state_jet(p).v);
    let u = {
        let adm = adm.clone();
        Arc::new(move |p: &[f64]| {
            let y = exact_state_jet(p).v;
            adm.project_scalar(2.0 * PI * PI * y, p).expect("box bounds")
        })
    };
    let p_fn = Arc::new(move |p: &[f64]| -2.0 * alpha * PI * PI * exact_state_jet(p).v);
    AnalyticTriple {
        y: y.clone(),
        u,
        p: p_fn,
        y_jet: Arc::new(exact_state_jet),
        p_jet: Arc::new(move |p: &[f64]| exact_state_jet(p).scale(-2.0 * alpha * PI * PI)),
    }
}

/// Manufactured data making the analytic triple satisfy both PDEs:
/// f = 2 pi^2 y* + y*^3 - u*, y_d = (1 + 4 pi^4 alpha) y* - 3 y*^2 p*.
fn semilinear_data(alpha: f64, triple: &AnalyticTriple) -> (ScalarFn, ScalarFn) {
    let (y, u, p) = (triple.y.clone(), triple.u.clone(), triple.p.clone());
    let source: ScalarFn = Arc::new(move |pt: &[f64]| {
        let yv = y(pt);
        2.0 * PI * PI * yv + yv * yv * yv - u(pt)
    });
    let y2 = triple.y.clone();
    let desired: ScalarFn = Arc::new(move |pt: &[f64]| {
        let yv = y2(pt);
        (1.0 + 4.0 * PI.powi(4) * alpha) * yv - 3.0 * yv * yv * p(pt)
    });
    (source, desired)
}

/// Test 1: semilinear elliptic control on the unit square, bounds [0, 3],
/// alpha = 0.01, closed-form optimum.
pub fn semilinear_box() -> ProblemDef {
    let alpha = 0.01;
    let admissible = AdmissibleSpec::constant_box(0.0, 3.0);
    let triple = semilinear_analytic(alpha, &admissible);
    let (source, desired) = semilinear_data(alpha, &triple);
    ProblemDef {
        name: "test1".into(),
        d: 2,
        dp: 0,
        domain: unit_square_domain(0, vec![], vec![]),
        pde: PdeForm::SemilinearCubic,
        alpha,
        sparsity: SparsityWeight::None,
        desired_state: desired,
        source: Some(source),
        length_factor: Arc::new(square_length_factor),
        boundary_lift: Arc::new(|_| FieldJet::constant(0.0)),
        admissible,
        analytic: Some(triple),
    }
}

/// Test 1 variant with no control constraint; the unclipped triple is then a
/// KKT point (alpha u* + p* = 0 identically).
pub fn semilinear_unconstrained() -> ProblemDef {
    let mut p = semilinear_box();
    p.name = "test1_unconstrained".into();
    p.admissible = AdmissibleSpec::Unconstrained;
    let triple = semilinear_analytic(p.alpha, &p.admissible);
    let (source, desired) = semilinear_data(p.alpha, &triple);
    p.source = Some(source);
    p.desired_state = desired;
    p.analytic = Some(triple);
    p
}

/// Test 2: the upper control bound is the parameter mu in [3, 20].
pub fn semilinear_parametric_bound() -> ProblemDef {
    let alpha = 0.01;
    let admissible = AdmissibleSpec::BoxBounds {
        lower: Arc::new(|_| 0.0),
        upper: Arc::new(|p: &[f64]| p[2]),
    };
    let triple = semilinear_analytic(alpha, &admissible);
    let (source, desired) = semilinear_data(alpha, &triple);
    ProblemDef {
        name: "test2".into(),
        d: 2,
        dp: 1,
        domain: unit_square_domain(1, vec![3.0], vec![20.0]),
        pde: PdeForm::SemilinearCubic,
        alpha,
        sparsity: SparsityWeight::None,
        desired_state: desired,
        source: Some(source),
        length_factor: Arc::new(square_length_factor),
        boundary_lift: Arc::new(|_| FieldJet::constant(0.0)),
        admissible,
        analytic: Some(triple),
    }
}

/// l(x, mu) = x0 (2 - x0) x1 (1 - x1) (mu1^2 - (x0 - 1.5)^2 - (x1 - 0.5)^2);
/// vanishes on the outer rectangle and on the hole boundary, nonzero (negative)
/// inside the domain.
fn geometry_length_factor(point: &[f64]) -> FieldJet {
    let d = 2;
    let x0 = FieldJet::coord(point, 0);
    let x1 = FieldJet::coord(point, 1);
    let two_minus_x0 = FieldJet::constant(2.0).add(&x0.scale(-1.0));
    let one_minus_x1 = FieldJet::constant(1.0).add(&x1.scale(-1.0));
    let box_part = x0.mul(&two_minus_x0, d).mul(&x1.mul(&one_minus_x1, d), d);
    let mu1 = point[2];
    let dx = x0.add(&FieldJet::constant(-1.5));
    let dy = x1.add(&FieldJet::constant(-0.5));
    let ring = FieldJet::constant(mu1 * mu1)
        .add(&dx.mul(&dx, d).scale(-1.0))
        .add(&dy.mul(&dy, d).scale(-1.0));
    box_part.mul(&ring, d)
}

/// Test 4: Laplace equation on ([0,2]x[0,1]) minus a ball of radius mu1 at
/// (1.5, 0.5); y = 1 on the boundary, desired state 1 / mu2 across the two
/// halves, alpha = 0.001. Control bounds are caller-supplied (the published
/// setup leaves them unspecified); None runs unconstrained.
pub fn laplace_geometry(bounds: Option<(f64, f64)>) -> ProblemDef {
    let domain = DomainSpec {
        spatial_dim: 2,
        param_dim: 2,
        lower: vec![0.0, 0.0, 0.05, 0.5],
        upper: vec![2.0, 1.0, 0.45, 2.5],
        interior: Arc::new(|p: &[f64]| {
            p[0] > 0.0
                && p[0] < 2.0
                && p[1] > 0.0
                && p[1] < 1.0
                && (p[0] - 1.5).powi(2) + (p[1] - 0.5).powi(2) > p[2] * p[2]
        }),
        closure: Arc::new(|p: &[f64]| {
            (0.0..=2.0).contains(&p[0])
                && (0.0..=1.0).contains(&p[1])
                && (p[0] - 1.5).powi(2) + (p[1] - 0.5).powi(2) >= p[2] * p[2]
        }),
        slice_faces: vec![],
        measure: Arc::new(|mu: &[f64]| 2.0 - PI * mu[0] * mu[0]),
    };
    ProblemDef {
        name: "test4".into(),
        d: 2,
        dp: 2,
        domain,
        pde: PdeForm::Poisson,
        alpha: 0.001,
        sparsity: SparsityWeight::None,
        desired_state: Arc::new(|p: &[f64]| if p[0] <= 1.0 { 1.0 } else { p[3] }),
        source: None,
        length_factor: Arc::new(geometry_length_factor),
        boundary_lift: Arc::new(|_| FieldJet::constant(1.0)),
        admissible: bounds
            .map(|(lo, hi)| AdmissibleSpec::constant_box(lo, hi))
            .unwrap_or(AdmissibleSpec::Unconstrained),
        analytic: None,
    }
}

/// Test 5: sparse L1 control on the unit disk; the sparsity weight is the
/// parameter mu in [0, 0.128], alpha = 0.002, bounds +-12.
pub fn semilinear_sparse() -> ProblemDef {
    let mu_max = 0.128;
    let domain = DomainSpec {
        spatial_dim: 2,
        param_dim: 1,
        lower: vec![-1.0, -1.0, 0.0],
        upper: vec![1.0, 1.0, mu_max],
        interior: Arc::new(|p: &[f64]| p[0] * p[0] + p[1] * p[1] < 1.0),
        closure: Arc::new(|p: &[f64]| p[0] * p[0] + p[1] * p[1] <= 1.0),
        slice_faces: vec![(0, 0.0), (0, mu_max)],
        measure: Arc::new(|_| PI),
    };
    ProblemDef {
        name: "test5".into(),
        d: 2,
        dp: 1,
        domain,
        pde: PdeForm::SemilinearCubic,
        alpha: 0.002,
        sparsity: SparsityWeight::Param(0),
        desired_state: Arc::new(|p: &[f64]| {
            4.0 * (2.0 * PI * p[0]).sin() * (PI * p[1]).sin() * p[0].exp()
        }),
        source: None,
        length_factor: Arc::new(|p: &[f64]| {
            // l = 1 - x0^2 - x1^2
            let d = 2;
            let x0 = FieldJet::coord(p, 0);
            let x1 = FieldJet::coord(p, 1);
            FieldJet::constant(1.0)
                .add(&x0.mul(&x0, d).scale(-1.0))
                .add(&x1.mul(&x1, d).scale(-1.0))
        }),
        boundary_lift: Arc::new(|_| FieldJet::constant(0.0)),
        admissible: AdmissibleSpec::constant_box(-12.0, 12.0),
        analytic: None,
    }
}

/// Problem lookup by registry name.
pub fn by_name(name: &str, test4_bounds: Option<(f64, f64)>) -> Option<ProblemDef> {
    match name {
        "test1" => Some(semilinear_box()),
        "test1_unconstrained" => Some(semilinear_unconstrained()),
        "test2" => Some(semilinear_parametric_bound()),
        "test4" => Some(laplace_geometry(test4_bounds)),
        "test5" => Some(semilinear_sparse()),
        _ => None,
    }
}
