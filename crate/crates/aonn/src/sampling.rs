//! Quasi-Monte-Carlo collocation over the joint spatio-parametric domain and
//! tensor evaluation grids for fixed-parameter slices.
//!
//! Points are drawn from a Sobol sequence mapped to the domain's bounding box
//! and kept by rejection against the domain indicator, which also covers
//! non-product domains (a parametric hole makes the joint domain no Cartesian
//! product). A configurable share of points is pinned to designated faces of
//! the parameter box.

use std::fmt;
use std::sync::Arc;

/// Degree, polynomial coefficients and initial direction numbers for Sobol
/// dimensions 2..=10 (dimension 1 is the van der Corput sequence). Classic
/// Joe-Kuo table entries.
const SOBOL_TABLE: [(usize, u64, &[u64]); 9] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
];

/// Bits of each coordinate; 53 keeps the map to f64 exact.
const SOBOL_BITS: usize = 53;

pub const MAX_SOBOL_DIMS: usize = SOBOL_TABLE.len() + 1;

#[derive(Debug, Clone, PartialEq)]
pub enum SamplingError {
    UnsupportedDims { requested: usize, max: usize },
    EmptyRequest,
    LowAcceptance { tried: usize, accepted: usize },
    NoSliceFaces,
    BadFraction(f64),
}

impl fmt::Display for SamplingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingError::UnsupportedDims { requested, max } => {
                write!(f, "{requested} dimensions requested, direction numbers cover {max}")
            }
            SamplingError::EmptyRequest => write!(f, "sample count must be positive"),
            SamplingError::LowAcceptance { tried, accepted } => write!(
                f,
                "rejection acceptance rate below 1e-3 ({accepted} of {tried}); degenerate geometry"
            ),
            SamplingError::NoSliceFaces => {
                write!(f, "boundary slice fraction is positive but the domain designates no faces")
            }
            SamplingError::BadFraction(x) => write!(f, "slice fraction {x} outside [0, 1)"),
        }
    }
}

impl std::error::Error for SamplingError {}

/// Direction numbers for one Sobol dimension, shifted to SOBOL_BITS.
fn direction_numbers(dim: usize) -> Vec<u64> {
    let mut v = vec![0u64; SOBOL_BITS];
    if dim == 0 {
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = 1u64 << (SOBOL_BITS - 1 - k);
        }
        return v;
    }
    let (s, a, m_init) = SOBOL_TABLE[dim - 1];
    let mut m = vec![0u64; SOBOL_BITS + 1];
    for k in 1..=s.min(SOBOL_BITS) {
        m[k] = m_init[k - 1];
    }
    for k in (s + 1)..=SOBOL_BITS {
        let mut mk = m[k - s] ^ (m[k - s] << s);
        for i in 1..s {
            let ai = (a >> (s - 1 - i)) & 1;
            if ai == 1 {
                mk ^= m[k - i] << i;
            }
        }
        m[k] = mk;
    }
    for k in 1..=SOBOL_BITS {
        v[k - 1] = m[k] << (SOBOL_BITS - k);
    }
    v
}

/// Streaming Sobol generator (Gray-code order, starting at index `skip`).
pub struct SobolStream {
    dims: usize,
    dirs: Vec<Vec<u64>>,
    state: Vec<u64>,
    index: u64,
}

impl SobolStream {
    pub fn new(dims: usize, skip: usize) -> Result<Self, SamplingError> {
        if dims == 0 {
            return Err(SamplingError::EmptyRequest);
        }
        if dims > MAX_SOBOL_DIMS {
            return Err(SamplingError::UnsupportedDims {
                requested: dims,
                max: MAX_SOBOL_DIMS,
            });
        }
        let dirs: Vec<Vec<u64>> = (0..dims).map(direction_numbers).collect();
        // Jump straight to the skip index: state(n) = xor of direction
        // numbers selected by the bits of gray(n).
        let n = skip as u64;
        let gray = n ^ (n >> 1);
        let mut state = vec![0u64; dims];
        for b in 0..SOBOL_BITS.min(64) {
            if (gray >> b) & 1 == 1 {
                for (d, s) in state.iter_mut().enumerate() {
                    *s ^= dirs[d][b];
                }
            }
        }
        Ok(Self {
            dims,
            dirs,
            state,
            index: n,
        })
    }

    /// Emit the next point into `out` (length `dims`), coordinates in [0, 1).
    pub fn next_point(&mut self, out: &mut [f64]) {
        const SCALE: f64 = 1.0 / ((1u64 << SOBOL_BITS) as f64);
        for (o, &s) in out.iter_mut().zip(self.state.iter()) {
            *o = s as f64 * SCALE;
        }
        let c = (self.index + 1).trailing_zeros() as usize;
        debug_assert!(c < SOBOL_BITS);
        for d in 0..self.dims {
            self.state[d] ^= self.dirs[d][c];
        }
        self.index += 1;
    }
}

/// Deterministic low-discrepancy points in the unit cube with `skip` leading
/// points dropped.
pub fn qmc_unit_points(n: usize, dims: usize, skip: usize) -> Result<Vec<f64>, SamplingError> {
    if n == 0 {
        return Err(SamplingError::EmptyRequest);
    }
    let mut stream = SobolStream::new(dims, skip)?;
    let mut out = vec![0.0; n * dims];
    for row in out.chunks_exact_mut(dims) {
        stream.next_point(row);
    }
    Ok(out)
}

type Predicate = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;
type MeasureFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Joint spatio-parametric domain: bounding box over (x, mu), membership
/// predicates and the designated parameter-box faces for boundary slices.
#[derive(Clone)]
pub struct DomainSpec {
    pub spatial_dim: usize,
    pub param_dim: usize,
    /// Bounding box over the full (x, mu) vector.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Strict-interior test used for collocation sampling.
    pub interior: Predicate,
    /// Closure test (boundary included) used for evaluation grids.
    pub closure: Predicate,
    /// (parameter index, pinned value) faces receiving boundary-slice points.
    pub slice_faces: Vec<(usize, f64)>,
    /// Spatial measure |Omega(mu)| as a function of the parameter vector.
    pub measure: MeasureFn,
}

impl DomainSpec {
    pub fn dim(&self) -> usize {
        self.spatial_dim + self.param_dim
    }

    pub fn param_box(&self) -> (&[f64], &[f64]) {
        (&self.lower[self.spatial_dim..], &self.upper[self.spatial_dim..])
    }
}

/// Origin of a collocation point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Interior,
    ParamSlice,
}

/// Collocation points in the joint domain, row-major n x (d + D).
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub points: Vec<f64>,
    pub n: usize,
    pub d: usize,
    pub dp: usize,
    pub skip: usize,
    pub provenance: Vec<Provenance>,
}

impl SampleSet {
    pub fn point(&self, i: usize) -> &[f64] {
        let dim = self.d + self.dp;
        &self.points[i * dim..(i + 1) * dim]
    }

    pub fn batch(&self) -> crate::jet_engine::PointBatch<'_> {
        crate::jet_engine::PointBatch::new(&self.points, self.d + self.dp, self.d)
    }

    /// Build a fixed-point-set sample (used for grids reinterpreted as
    /// quadrature samples and in tests).
    pub fn from_points(points: Vec<f64>, d: usize, dp: usize) -> Self {
        let dim = d + dp;
        assert!(dim > 0 && points.len() % dim == 0);
        let n = points.len() / dim;
        Self {
            points,
            n,
            d,
            dp,
            skip: 0,
            provenance: vec![Provenance::Interior; n],
        }
    }
}

/// Rejection-sample `n` indicator-true points; a `fraction` share is pinned
/// to the domain's designated parameter faces (split evenly, remainder to the
/// leading faces).
pub fn sample_domain(
    domain: &DomainSpec,
    n: usize,
    skip: usize,
    boundary_slice_fraction: f64,
) -> Result<SampleSet, SamplingError> {
    if n == 0 {
        return Err(SamplingError::EmptyRequest);
    }
    if !(0.0..1.0).contains(&boundary_slice_fraction) {
        return Err(SamplingError::BadFraction(boundary_slice_fraction));
    }
    let dim = domain.dim();
    let pinned_total = (n as f64 * boundary_slice_fraction).round() as usize;
    let faces = &domain.slice_faces;
    if pinned_total > 0 && faces.is_empty() {
        return Err(SamplingError::NoSliceFaces);
    }

    let mut stream = SobolStream::new(dim, skip)?;
    let mut unit = vec![0.0; dim];
    let mut points = Vec::with_capacity(n * dim);
    let mut provenance = Vec::with_capacity(n);
    let mut tried = 0usize;
    let mut accepted = 0usize;

    let mut draw_into = |stream: &mut SobolStream,
                         pin: Option<(usize, f64)>,
                         points: &mut Vec<f64>,
                         tried: &mut usize,
                         accepted: &mut usize|
     -> Result<bool, SamplingError> {
        stream.next_point(&mut unit);
        *tried += 1;
        let mut candidate = [0.0; 8];
        let candidate = &mut candidate[..dim];
        for k in 0..dim {
            candidate[k] = domain.lower[k] + unit[k] * (domain.upper[k] - domain.lower[k]);
        }
        if let Some((pidx, value)) = pin {
            candidate[domain.spatial_dim + pidx] = value;
        }
        let ok = (domain.interior)(candidate);
        if ok {
            *accepted += 1;
            points.extend_from_slice(candidate);
        }
        if *tried >= 10_000 && (*accepted) * 1000 < *tried {
            return Err(SamplingError::LowAcceptance {
                tried: *tried,
                accepted: *accepted,
            });
        }
        Ok(ok)
    };

    if pinned_total > 0 {
        let f = faces.len();
        for (fi, &face) in faces.iter().enumerate() {
            let want = pinned_total / f + usize::from(fi < pinned_total % f);
            let mut got = 0;
            while got < want {
                if draw_into(&mut stream, Some(face), &mut points, &mut tried, &mut accepted)? {
                    got += 1;
                    provenance.push(Provenance::ParamSlice);
                }
            }
        }
    }
    let mut got = 0;
    while got < n - pinned_total {
        if draw_into(&mut stream, None, &mut points, &mut tried, &mut accepted)? {
            got += 1;
            provenance.push(Provenance::Interior);
        }
    }

    Ok(SampleSet {
        points,
        n,
        d: domain.spatial_dim,
        dp: domain.param_dim,
        skip,
        provenance,
    })
}

/// Uniform tensor grid over the spatial bounding box at a fixed parameter,
/// node endpoints included, masked by the closure predicate.
#[derive(Clone, Debug)]
pub struct GridSet {
    pub resolution: Vec<usize>,
    pub mu: Vec<f64>,
    /// Unmasked grid points, row-major n x (d + D), parameter appended.
    pub points: Vec<f64>,
    /// One flag per tensor node in row-major node order; true = in domain.
    pub mask: Vec<bool>,
    pub d: usize,
    pub dp: usize,
}

impl GridSet {
    pub fn n_unmasked(&self) -> usize {
        self.points.len() / (self.d + self.dp)
    }

    pub fn batch(&self) -> crate::jet_engine::PointBatch<'_> {
        crate::jet_engine::PointBatch::new(&self.points, self.d + self.dp, self.d)
    }
}

pub fn eval_grid(domain: &DomainSpec, mu: &[f64], resolution: &[usize]) -> GridSet {
    assert_eq!(mu.len(), domain.param_dim, "parameter vector length");
    assert_eq!(resolution.len(), domain.spatial_dim, "per-axis resolution");
    assert!(resolution.iter().all(|&r| r >= 2), "need at least 2 nodes per axis");
    let d = domain.spatial_dim;
    let total: usize = resolution.iter().product();
    let mut mask = Vec::with_capacity(total);
    let mut points = Vec::new();
    let mut node = vec![0usize; d];
    let mut coords = vec![0.0; d + domain.param_dim];
    coords[d..].copy_from_slice(mu);
    for flat in 0..total {
        let mut rem = flat;
        // row-major: the last axis varies fastest
        for ax in (0..d).rev() {
            node[ax] = rem % resolution[ax];
            rem /= resolution[ax];
        }
        for ax in 0..d {
            let lo = domain.lower[ax];
            let hi = domain.upper[ax];
            coords[ax] = lo + node[ax] as f64 * (hi - lo) / (resolution[ax] - 1) as f64;
        }
        let inside = (domain.closure)(&coords);
        mask.push(inside);
        if inside {
            points.extend_from_slice(&coords);
        }
    }
    GridSet {
        resolution: resolution.to_vec(),
        mu: mu.to_vec(),
        points,
        mask,
        d,
        dp: domain.param_dim,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_square_domain() -> DomainSpec {
        DomainSpec {
            spatial_dim: 2,
            param_dim: 0,
            lower: vec![0.0, 0.0],
            upper: vec![1.0, 1.0],
            interior: Arc::new(|p| p[0] > 0.0 && p[0] < 1.0 && p[1] > 0.0 && p[1] < 1.0),
            closure: Arc::new(|p| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1])),
            slice_faces: vec![],
            measure: Arc::new(|_| 1.0),
        }
    }

    #[test]
    fn qmc_is_deterministic_and_in_range() {
        let a = qmc_unit_points(64, 2, 0).unwrap();
        let b = qmc_unit_points(64, 2, 0).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&x| (0.0..1.0).contains(&x)));
        // skip drops leading points
        let c = qmc_unit_points(60, 2, 4).unwrap();
        assert_eq!(&a[8..], &c[..]);
    }

    #[test]
    fn qmc_first_points_match_sobol() {
        let pts = qmc_unit_points(4, 2, 0).unwrap();
        let got: Vec<(f64, f64)> = pts.chunks(2).map(|c| (c[0], c[1])).collect();
        let expect = [(0.0, 0.0), (0.5, 0.5), (0.75, 0.25), (0.25, 0.75)];
        for e in expect {
            assert!(
                got.iter().any(|g| (g.0 - e.0).abs() < 1e-15 && (g.1 - e.1).abs() < 1e-15),
                "missing {e:?} in {got:?}"
            );
        }
    }

    #[test]
    fn unsupported_dims_error() {
        assert!(matches!(
            qmc_unit_points(4, MAX_SOBOL_DIMS + 1, 0),
            Err(SamplingError::UnsupportedDims { .. })
        ));
    }

    /// Box-count discrepancy proxy: Sobol beats the median uniform draw.
    #[test]
    fn qmc_beats_uniform_on_box_counts() {
        let n = 1024;
        let pts = qmc_unit_points(n, 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let boxes: Vec<[f64; 4]> = (0..100)
            .map(|_| {
                let x0: f64 = rng.gen_range(0.0..0.8);
                let y0: f64 = rng.gen_range(0.0..0.8);
                let x1: f64 = rng.gen_range(x0 + 0.05..1.0);
                let y1: f64 = rng.gen_range(y0 + 0.05..1.0);
                [x0, y0, x1, y1]
            })
            .collect();
        let max_dev = |pts: &[f64]| -> f64 {
            boxes
                .iter()
                .map(|b| {
                    let vol = (b[2] - b[0]) * (b[3] - b[1]);
                    let count = pts
                        .chunks(2)
                        .filter(|p| p[0] >= b[0] && p[0] < b[2] && p[1] >= b[1] && p[1] < b[3])
                        .count();
                    (count as f64 / n as f64 - vol).abs()
                })
                .fold(0.0, f64::max)
        };
        let sobol_dev = max_dev(&pts);
        let mut uniform_devs: Vec<f64> = (0..20)
            .map(|k| {
                let mut r = ChaCha8Rng::seed_from_u64(1000 + k);
                let u: Vec<f64> = (0..2 * n).map(|_| r.gen_range(0.0..1.0)).collect();
                max_dev(&u)
            })
            .collect();
        uniform_devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = uniform_devs[10];
        assert!(
            sobol_dev < median,
            "sobol dev {sobol_dev} not below uniform median {median}"
        );
    }

    #[test]
    fn sample_unit_square_strictly_inside() {
        let domain = unit_square_domain();
        let s = sample_domain(&domain, 4096, 0, 0.0).unwrap();
        assert_eq!(s.n, 4096);
        for i in 0..s.n {
            let p = s.point(i);
            assert!(p[0] > 0.0 && p[0] < 1.0 && p[1] > 0.0 && p[1] < 1.0);
            assert!((domain.interior)(p));
        }
        // bit-exact reproducibility
        let s2 = sample_domain(&domain, 4096, 0, 0.0).unwrap();
        assert_eq!(s.points, s2.points);
    }

    #[test]
    fn sample_respects_parametric_hole() {
        // hole of radius mu1 centered at (1.5, 0.5) in a 2x1 box
        let domain = DomainSpec {
            spatial_dim: 2,
            param_dim: 2,
            lower: vec![0.0, 0.0, 0.05, 0.5],
            upper: vec![2.0, 1.0, 0.45, 2.5],
            interior: Arc::new(|p| {
                p[0] > 0.0
                    && p[0] < 2.0
                    && p[1] > 0.0
                    && p[1] < 1.0
                    && (p[0] - 1.5).powi(2) + (p[1] - 0.5).powi(2) > p[2] * p[2]
            }),
            closure: Arc::new(|p| {
                (0.0..=2.0).contains(&p[0])
                    && (0.0..=1.0).contains(&p[1])
                    && (p[0] - 1.5).powi(2) + (p[1] - 0.5).powi(2) >= p[2] * p[2]
            }),
            slice_faces: vec![],
            measure: Arc::new(|mu| 2.0 - std::f64::consts::PI * mu[0] * mu[0]),
        };
        let s = sample_domain(&domain, 5000, 0, 0.0).unwrap();
        for i in 0..s.n {
            let p = s.point(i);
            assert!((p[0] - 1.5).powi(2) + (p[1] - 0.5).powi(2) >= p[2] * p[2]);
        }
    }

    #[test]
    fn slice_fraction_pins_parameter_faces() {
        let domain = DomainSpec {
            spatial_dim: 2,
            param_dim: 1,
            lower: vec![-1.0, -1.0, 0.0],
            upper: vec![1.0, 1.0, 0.128],
            interior: Arc::new(|p| p[0] * p[0] + p[1] * p[1] < 1.0),
            closure: Arc::new(|p| p[0] * p[0] + p[1] * p[1] <= 1.0),
            slice_faces: vec![(0, 0.0), (0, 0.128)],
            measure: Arc::new(|_| std::f64::consts::PI),
        };
        let s = sample_domain(&domain, 20000, 0, 0.1).unwrap();
        let pinned = s
            .provenance
            .iter()
            .filter(|&&p| p == Provenance::ParamSlice)
            .count();
        assert_eq!(pinned, 2000);
        let at_faces = (0..s.n)
            .filter(|&i| {
                let mu = s.point(i)[2];
                mu == 0.0 || mu == 0.128
            })
            .count();
        assert_eq!(at_faces, 2000);
        for i in 0..s.n {
            assert!((domain.interior)(s.point(i)));
        }
    }

    #[test]
    fn degenerate_geometry_reports_low_acceptance() {
        let mut domain = unit_square_domain();
        domain.interior = Arc::new(|_| false);
        assert!(matches!(
            sample_domain(&domain, 10, 0, 0.0),
            Err(SamplingError::LowAcceptance { .. })
        ));
    }

    #[test]
    fn grid_counts_unit_square() {
        let domain = unit_square_domain();
        let g = eval_grid(&domain, &[], &[256, 256]);
        assert_eq!(g.mask.len(), 65536);
        assert_eq!(g.n_unmasked(), 65536);
    }

    #[test]
    fn grid_2x2_hits_corners() {
        let domain = unit_square_domain();
        let g = eval_grid(&domain, &[], &[2, 2]);
        assert_eq!(g.n_unmasked(), 4);
        let pts: Vec<(f64, f64)> = g.points.chunks(2).map(|c| (c[0], c[1])).collect();
        for corner in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
            assert!(pts.contains(&corner));
        }
    }

    #[test]
    fn grid_masks_hole_area() {
        let domain = DomainSpec {
            spatial_dim: 2,
            param_dim: 2,
            lower: vec![0.0, 0.0, 0.05, 0.5],
            upper: vec![2.0, 1.0, 0.45, 2.5],
            interior: Arc::new(|p| {
                p[0] > 0.0
                    && p[0] < 2.0
                    && p[1] > 0.0
                    && p[1] < 1.0
                    && (p[0] - 1.5).powi(2) + (p[1] - 0.5).powi(2) > p[2] * p[2]
            }),
            closure: Arc::new(|p| {
                (0.0..=2.0).contains(&p[0])
                    && (0.0..=1.0).contains(&p[1])
                    && (p[0] - 1.5).powi(2) + (p[1] - 0.5).powi(2) >= p[2] * p[2]
            }),
            slice_faces: vec![],
            measure: Arc::new(|mu| 2.0 - std::f64::consts::PI * mu[0] * mu[0]),
        };
        let res = 256usize;
        let g = eval_grid(&domain, &[0.45, 1.0], &[res, res]);
        let masked = g.mask.iter().filter(|&&m| !m).count();
        let total = (res * res) as f64;
        let disk_fraction = std::f64::consts::PI * 0.45 * 0.45 / 2.0;
        let expected = total * disk_fraction;
        assert!(
            (masked as f64 - expected).abs() <= res as f64,
            "masked {masked} vs expected {expected:.1}"
        );
        // every unmasked point satisfies the closure
        for i in 0..g.n_unmasked() {
            let dim = g.d + g.dp;
            let p = &g.points[i * dim..(i + 1) * dim];
            assert!((domain.closure)(p));
        }
    }
}
