//! Finite-difference verification of the jet engine: spatial derivatives of
//! random networks and parameter gradients of the three training losses.
//! The oracle differentiates the value-only evaluation path, which is
//! independent of the jet propagation it checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::jet_engine::{
    forward_jets, init_network, network_values, rms_loss, rms_loss_and_grads, NetworkSpec,
    PointBatch, ResidualProgram, TrainSlot,
};
use crate::problems::{
    AdjointProgram, ControlFitProgram, FieldKind, StateProgram,
};
use crate::sampling::sample_domain;

pub const GRAD_TOL: f64 = 1e-6;
pub const HESS_TOL: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: String,
    pub max_rel: f64,
    pub tol: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel <= self.tol
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub rows: Vec<CheckRow>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::from("check                                    max_rel      tol        status\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<40} {:<12.3e} {:<10.1e} {}\n",
                r.name,
                r.max_rel,
                r.tol,
                if r.passed() { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Spatial gradient/Hessian check of one random network at one random point.
fn jet_check(spec: &NetworkSpec, d: usize, seed: u64) -> (f64, f64) {
    let params = init_network(spec, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x517e);
    let point: Vec<f64> = (0..spec.input_dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let batch = PointBatch::new(&point, spec.input_dim, d);
    let jets = forward_jets(spec, &params, &batch).expect("consistent shapes");
    // first derivatives tolerate a small h; second derivatives are
    // roundoff-limited at h = 1e-4, so they use a larger step (the
    // fourth-order stencils keep the truncation error negligible)
    let h = 1e-4;
    let h2 = 1e-3;
    let value_at = |p: &[f64]| -> f64 {
        let b = PointBatch::new(p, spec.input_dim, d);
        network_values(spec, &params, &b).unwrap()[0]
    };
    let shifted = |k: usize, delta: f64| -> f64 {
        let mut p = point.clone();
        p[k] += delta;
        value_at(&p)
    };
    let shifted2 = |a: usize, da: f64, b: usize, db: f64| -> f64 {
        let mut p = point.clone();
        p[a] += da;
        p[b] += db;
        value_at(&p)
    };
    let mut grad_err: f64 = 0.0;
    let mut hess_err: f64 = 0.0;
    for k in 0..d {
        // fourth-order central difference keeps the oracle's truncation
        // error far below the comparison tolerance
        let fd = (8.0 * (shifted(k, h) - shifted(k, -h)) - (shifted(k, 2.0 * h) - shifted(k, -2.0 * h)))
            / (12.0 * h);
        grad_err = grad_err.max(rel(fd, jets.grad(0, 0, k)));
    }
    let f0 = value_at(&point);
    for a in 0..d {
        for b in a..d {
            let fd = if a == b {
                (-shifted(a, 2.0 * h2) + 16.0 * shifted(a, h2) - 30.0 * f0
                    + 16.0 * shifted(a, -h2)
                    - shifted(a, -2.0 * h2))
                    / (12.0 * h2 * h2)
            } else {
                let cross = |hh: f64| {
                    (shifted2(a, hh, b, hh) - shifted2(a, hh, b, -hh) - shifted2(a, -hh, b, hh)
                        + shifted2(a, -hh, b, -hh))
                        / (4.0 * hh * hh)
                };
                // Richardson-extrapolated cross derivative
                (4.0 * cross(h2) - cross(2.0 * h2)) / 3.0
            };
            let ex = jets.hess(0, 0, a, b);
            hess_err = hess_err.max((fd - ex).abs() / ex.abs().max(fd.abs()).max(1e-6));
        }
    }
    (grad_err, hess_err)
}

fn loss_grad_check(
    spec: &NetworkSpec,
    batch: &PointBatch,
    program: &dyn ResidualProgram,
    seed: u64,
) -> f64 {
    let params = init_network(spec, seed);
    let slots = [TrainSlot {
        spec,
        params: &params.values,
    }];
    let eval = rms_loss_and_grads(&slots, batch, program).expect("finite loss");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let idx = rng.gen_range(0..params.len());
        let mut pp = params.clone();
        pp.values[idx] += h;
        let mut pm = params.clone();
        pm.values[idx] -= h;
        let lp = rms_loss(&[TrainSlot { spec, params: &pp.values }], batch, program)
            .unwrap()
            .0;
        let lm = rms_loss(&[TrainSlot { spec, params: &pm.values }], batch, program)
            .unwrap()
            .0;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max(rel(fd, eval.grads[0][idx]));
    }
    worst
}

/// The full finite-difference suite: 10 random (spec, params, point) triples
/// across spatial dimensions 2..4, then parameter-gradient checks of the
/// state, adjoint and control-fit losses.
pub fn run_gradcheck(seed: u64) -> CheckReport {
    let mut report = CheckReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 10 triples: 4 with d=2, 3 with d=3, 3 with d=4
    let dims = [2usize, 2, 2, 2, 3, 3, 3, 4, 4, 4];
    for (t, &d) in dims.iter().enumerate() {
        let width = rng.gen_range(6..=12);
        let blocks = rng.gen_range(1..=3);
        let extra = rng.gen_range(0..=2);
        let spec = NetworkSpec::new(d + extra, 1, blocks, width);
        let (ge, he) = jet_check(&spec, d, seed.wrapping_add(t as u64 * 101));
        report.rows.push(CheckRow {
            name: format!("jet grad d={d} w={width} b={blocks} in={}", d + extra),
            max_rel: ge,
            tol: GRAD_TOL,
        });
        report.rows.push(CheckRow {
            name: format!("jet hess d={d} w={width} b={blocks} in={}", d + extra),
            max_rel: he,
            tol: HESS_TOL,
        });
    }

    // loss gradients on the semilinear box problem
    let problem = crate::problems::semilinear_box();
    let sample = sample_domain(&problem.domain, 96, 0, 0.0).expect("sampling");
    let batch = sample.batch();
    let spec = NetworkSpec::new(2, 1, 2, 10);

    let u_vals = vec![0.4; batch.n];
    let state = StateProgram::new(&problem, &batch, u_vals);
    report.rows.push(CheckRow {
        name: "state loss parameter gradient".into(),
        max_rel: loss_grad_check(&spec, &batch, &state, seed ^ 11),
        tol: GRAD_TOL,
    });

    let y_params = init_network(&spec, seed ^ 21);
    let y_vals = crate::problems::composed_values(&problem, FieldKind::State, &spec, &y_params, &batch);
    let adjoint = AdjointProgram::new(&problem, &batch, y_vals);
    report.rows.push(CheckRow {
        name: "adjoint loss parameter gradient".into(),
        max_rel: loss_grad_check(&spec, &batch, &adjoint, seed ^ 31),
        tol: GRAD_TOL,
    });

    let mut trng = ChaCha8Rng::seed_from_u64(seed ^ 41);
    let targets: Vec<f64> = (0..batch.n).map(|_| trng.gen_range(-1.0..1.0)).collect();
    let fit = ControlFitProgram::new(targets);
    report.rows.push(CheckRow {
        name: "control fit loss parameter gradient".into(),
        max_rel: loss_grad_check(&spec, &batch, &fit, seed ^ 51),
        tol: GRAD_TOL,
    });

    report
}
