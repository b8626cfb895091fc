//! Pointwise projections onto admissible control sets and the
//! projected-gradient control update.

use std::fmt;
use std::sync::Arc;

use crate::jet_engine::PointBatch;

pub type BoundFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Admissible set for the control at each (x, mu). Bounds are evaluated per
/// point so parametric bounds (an upper bound equal to a parameter
/// coordinate) need no global tables.
#[derive(Clone)]
pub enum AdmissibleSpec {
    Unconstrained,
    BoxBounds { lower: BoundFn, upper: BoundFn },
    BallBound { radius: f64 },
}

impl AdmissibleSpec {
    pub fn constant_box(lower: f64, upper: f64) -> Self {
        AdmissibleSpec::BoxBounds {
            lower: Arc::new(move |_| lower),
            upper: Arc::new(move |_| upper),
        }
    }

    pub fn is_unconstrained(&self) -> bool {
        matches!(self, AdmissibleSpec::Unconstrained)
    }

    /// Clamp a scalar value at one point (box and unconstrained variants).
    pub fn project_scalar(&self, v: f64, point: &[f64]) -> Result<f64, ConstraintError> {
        match self {
            AdmissibleSpec::Unconstrained => Ok(v),
            AdmissibleSpec::BoxBounds { lower, upper } => {
                let lo = lower(point);
                let hi = upper(point);
                if lo > hi {
                    return Err(ConstraintError::InvertedBounds { lo, hi });
                }
                Ok(v.clamp(lo, hi))
            }
            AdmissibleSpec::BallBound { .. } => Err(ConstraintError::ScalarBall),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintError {
    InvertedBounds { lo: f64, hi: f64 },
    NonPositiveRadius(f64),
    ScalarBall,
    NonFiniteInput { point_index: usize },
    ShapeMismatch { values: usize, expected: usize },
}

impl fmt::Display for ConstraintError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintError::InvertedBounds { lo, hi } => {
                write!(f, "lower bound {lo} exceeds upper bound {hi}")
            }
            ConstraintError::NonPositiveRadius(r) => write!(f, "ball radius {r} must be positive"),
            ConstraintError::ScalarBall => {
                write!(f, "ball projection needs the vector-valued entry point")
            }
            ConstraintError::NonFiniteInput { point_index } => {
                write!(f, "non-finite control update input at point {point_index}")
            }
            ConstraintError::ShapeMismatch { values, expected } => {
                write!(f, "value array length {values}, expected {expected}")
            }
        }
    }
}

impl std::error::Error for ConstraintError {}

/// Project per-point control values (n x m, row-major) onto the admissible
/// set. Box bounds clamp each component; the ball scales each row onto the
/// radius; unconstrained is the identity.
pub fn project(
    spec: &AdmissibleSpec,
    values: &[f64],
    m: usize,
    points: &PointBatch,
) -> Result<Vec<f64>, ConstraintError> {
    let n = points.n;
    if values.len() != n * m {
        return Err(ConstraintError::ShapeMismatch {
            values: values.len(),
            expected: n * m,
        });
    }
    let mut out = values.to_vec();
    match spec {
        AdmissibleSpec::Unconstrained => {}
        AdmissibleSpec::BoxBounds { lower, upper } => {
            for i in 0..n {
                let p = points.point(i);
                let lo = lower(p);
                let hi = upper(p);
                if lo > hi {
                    return Err(ConstraintError::InvertedBounds { lo, hi });
                }
                for v in &mut out[i * m..(i + 1) * m] {
                    *v = v.clamp(lo, hi);
                }
            }
        }
        AdmissibleSpec::BallBound { radius } => {
            if *radius <= 0.0 {
                return Err(ConstraintError::NonPositiveRadius(*radius));
            }
            for row in out.chunks_exact_mut(m) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > *radius {
                    let scale = *radius / norm;
                    for v in row {
                        *v *= scale;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Projected gradient step for the control:
/// u_step = P(u - c * d_u J), always feasible.
pub fn control_step(
    u_values: &[f64],
    duj_values: &[f64],
    c: f64,
    spec: &AdmissibleSpec,
    points: &PointBatch,
) -> Result<Vec<f64>, ConstraintError> {
    assert!(c >= 0.0, "step size must be nonnegative");
    assert_eq!(u_values.len(), duj_values.len());
    let m = u_values.len() / points.n;
    let mut moved = Vec::with_capacity(u_values.len());
    for (idx, (&u, &g)) in u_values.iter().zip(duj_values).enumerate() {
        let w = u - c * g;
        if !w.is_finite() {
            return Err(ConstraintError::NonFiniteInput {
                point_index: idx / m,
            });
        }
        moved.push(w);
    }
    project(spec, &moved, m, points)
}

/// Variational residual r_v = u - P(u - c * d_u J); its RMS over a sample is
/// the verification loss. Vanishes at an optimal control for every c >= 0.
pub fn variational_residual(
    u_values: &[f64],
    duj_values: &[f64],
    c: f64,
    spec: &AdmissibleSpec,
    points: &PointBatch,
) -> Result<Vec<f64>, ConstraintError> {
    let step = control_step(u_values, duj_values, c, spec, points)?;
    Ok(u_values.iter().zip(step).map(|(&u, s)| u - s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn free_points(n: usize) -> Vec<f64> {
        (0..2 * n).map(|i| 0.1 + (i % 7) as f64 * 0.1).collect()
    }

    #[test]
    fn box_projection_clamps() {
        let spec = AdmissibleSpec::constant_box(0.0, 3.0);
        let coords = free_points(3);
        let batch = PointBatch::new(&coords, 2, 2);
        let out = project(&spec, &[5.0, -1.0, 1.5], 1, &batch).unwrap();
        assert_eq!(out, vec![3.0, 0.0, 1.5]);
    }

    #[test]
    fn ball_projection_scales() {
        let spec = AdmissibleSpec::BallBound { radius: 0.2 };
        let coords = free_points(1);
        let batch = PointBatch::new(&coords, 2, 2);
        let out = project(&spec, &[0.3, 0.4], 2, &batch).unwrap();
        assert!((out[0] - 0.12).abs() < 1e-15);
        assert!((out[1] - 0.16).abs() < 1e-15);
        // inside the ball: identity
        let out = project(&spec, &[0.1, 0.1], 2, &batch).unwrap();
        assert_eq!(out, vec![0.1, 0.1]);
    }

    #[test]
    fn inverted_bounds_error() {
        let spec = AdmissibleSpec::BoxBounds {
            lower: Arc::new(|_| 2.0),
            upper: Arc::new(|_| 1.0),
        };
        let coords = free_points(1);
        let batch = PointBatch::new(&coords, 2, 2);
        assert!(matches!(
            project(&spec, &[0.0], 1, &batch),
            Err(ConstraintError::InvertedBounds { .. })
        ));
    }

    #[test]
    fn parametric_upper_bound_reads_mu() {
        // u_b = mu, carried as the third coordinate
        let spec = AdmissibleSpec::BoxBounds {
            lower: Arc::new(|_| 0.0),
            upper: Arc::new(|p| p[2]),
        };
        let coords = vec![0.5, 0.5, 3.0, 0.5, 0.5, 20.0];
        let batch = PointBatch::new(&coords, 3, 2);
        let out = project(&spec, &[10.0, 10.0], 1, &batch).unwrap();
        assert_eq!(out, vec![3.0, 10.0]);
    }

    #[test]
    fn control_step_trivial_cases() {
        let spec = AdmissibleSpec::constant_box(0.0, 3.0);
        let coords = free_points(3);
        let batch = PointBatch::new(&coords, 2, 2);
        let u = [5.0, -1.0, 1.5];
        // zero derivative and zero step size both reduce to project(u)
        let s1 = control_step(&u, &[0.0; 3], 0.7, &spec, &batch).unwrap();
        let s2 = control_step(&u, &[1.0, 2.0, 3.0], 0.0, &spec, &batch).unwrap();
        assert_eq!(s1, vec![3.0, 0.0, 1.5]);
        assert_eq!(s2, vec![3.0, 0.0, 1.5]);
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let spec = AdmissibleSpec::Unconstrained;
        let coords = free_points(2);
        let batch = PointBatch::new(&coords, 2, 2);
        let err = control_step(&[1.0, f64::INFINITY], &[0.0, 1.0], 1.0, &spec, &batch).unwrap_err();
        assert_eq!(err, ConstraintError::NonFiniteInput { point_index: 1 });
    }

    #[test]
    fn unconstrained_residual_is_linear_in_c() {
        let spec = AdmissibleSpec::Unconstrained;
        let coords = free_points(2);
        let batch = PointBatch::new(&coords, 2, 2);
        let u = [1.0, -2.0];
        let g = [0.3, 0.7];
        for c in [0.0, 0.1, 1.0, 100.0] {
            let r = variational_residual(&u, &g, c, &spec, &batch).unwrap();
            for (ri, gi) in r.iter().zip(g) {
                assert!((ri - c * gi).abs() <= 1e-12 * (1.0 + c));
            }
        }
    }

    #[test]
    fn interior_unclipped_residual_matches_step() {
        let spec = AdmissibleSpec::constant_box(-10.0, 10.0);
        let coords = free_points(1);
        let batch = PointBatch::new(&coords, 2, 2);
        let r = variational_residual(&[1.0], &[0.5], 2.0, &spec, &batch).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-15); // c*g = 1, still inside the box
    }

    proptest! {
        #[test]
        fn box_projection_idempotent_and_nonexpansive(
            vals in proptest::collection::vec(-50.0f64..50.0, 32),
            lo in -5.0f64..0.0,
            width in 0.0f64..8.0,
        ) {
            let spec = AdmissibleSpec::constant_box(lo, lo + width);
            let coords: Vec<f64> = (0..64).map(|i| i as f64 * 0.01).collect();
            let batch = PointBatch::new(&coords, 2, 2);
            let once = project(&spec, &vals, 1, &batch).unwrap();
            let twice = project(&spec, &once, 1, &batch).unwrap();
            prop_assert_eq!(&once, &twice);
            // non-expansiveness against a shifted copy
            let shifted: Vec<f64> = vals.iter().map(|v| v + 0.25).collect();
            let q = project(&spec, &shifted, 1, &batch).unwrap();
            for ((a, b), (x, y)) in once.iter().zip(&q).zip(vals.iter().zip(&shifted)) {
                prop_assert!((a - b).abs() <= (x - y).abs() + 1e-12);
            }
        }

        #[test]
        fn ball_projection_idempotent_and_feasible(
            vals in proptest::collection::vec(-3.0f64..3.0, 32),
            radius in 0.05f64..2.0,
        ) {
            let spec = AdmissibleSpec::BallBound { radius };
            let coords: Vec<f64> = (0..32).map(|i| i as f64 * 0.01).collect();
            let batch = PointBatch::new(&coords, 2, 2);
            let once = project(&spec, &vals, 2, &batch).unwrap();
            let twice = project(&spec, &once, 2, &batch).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            for row in once.chunks(2) {
                let norm = (row[0] * row[0] + row[1] * row[1]).sqrt();
                prop_assert!(norm <= radius + 1e-12);
            }
        }

        #[test]
        fn control_step_output_is_feasible(
            u in proptest::collection::vec(-20.0f64..20.0, 16),
            g in proptest::collection::vec(-5.0f64..5.0, 16),
            c in 0.0f64..50.0,
        ) {
            let spec = AdmissibleSpec::constant_box(-2.0, 2.0);
            let coords: Vec<f64> = (0..32).map(|i| i as f64 * 0.01).collect();
            let batch = PointBatch::new(&coords, 2, 2);
            let s = control_step(&u, &g, c, &spec, &batch).unwrap();
            for v in s {
                prop_assert!((-2.0..=2.0).contains(&v));
            }
        }
    }
}
