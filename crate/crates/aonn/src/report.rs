//! Error metrics against analytic solutions, sparsity profiles and file
//! outputs (iteration logs, field dumps, run manifests, network parameters).
//!
//! Every number is serialized with 17 significant digits so the text files
//! round-trip 64-bit values exactly.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::driver::{IterationRecord, SolutionBundle};
use crate::jet_engine::{network_values, NetworkSpec, ParamVector};
use crate::problems::{analytic_solution, composed_values, FieldKind, ProblemDef};
use crate::sampling::eval_grid;

/// Default support threshold for sparsity profiles (1e-2 of the control
/// bound magnitude used by the sparse problem).
pub const DEFAULT_SPARSITY_THRESHOLD: f64 = 0.12;

#[derive(Debug)]
pub enum ReportError {
    Io { path: PathBuf, source: std::io::Error },
    NoAnalyticSolution,
    BadNetworkFile { path: PathBuf, detail: String },
}

impl fmt::Display for ReportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReportError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            ReportError::NoAnalyticSolution => {
                write!(f, "problem provides no analytic triple to compare against")
            }
            ReportError::BadNetworkFile { path, detail } => {
                write!(f, "{}: {detail}", path.display())
            }
        }
    }
}

impl std::error::Error for ReportError {}

/// 17-significant-digit decimal form; round-trips f64 exactly.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Relative l2 and l-infinity errors of `pred` against `exact` over matching
/// index sets. Plain root-sum-square norms (no quadrature weights); the
/// l-infinity error is normalized by the exact field's sup norm. Zero exact
/// norms fall back to absolute errors.
pub fn l2_linf_relative(pred: &[f64], exact: &[f64]) -> (f64, f64) {
    assert_eq!(pred.len(), exact.len());
    let mut diff_sq = 0.0;
    let mut exact_sq = 0.0;
    let mut diff_max: f64 = 0.0;
    let mut exact_max: f64 = 0.0;
    for (&a, &b) in pred.iter().zip(exact) {
        let d = a - b;
        diff_sq += d * d;
        exact_sq += b * b;
        diff_max = diff_max.max(d.abs());
        exact_max = exact_max.max(b.abs());
    }
    let l2 = if exact_sq > 0.0 {
        (diff_sq / exact_sq).sqrt()
    } else {
        diff_sq.sqrt()
    };
    let linf = if exact_max > 0.0 {
        diff_max / exact_max
    } else {
        diff_max
    };
    (l2, linf)
}

/// Per-field relative errors of a bundle on the evaluation grid at a fixed
/// parameter value.
#[derive(Clone, Copy, Debug)]
pub struct FieldErrors {
    pub y: (f64, f64),
    pub u: (f64, f64),
    pub p: (f64, f64),
}

pub fn relative_errors(
    bundle: &SolutionBundle,
    problem: &ProblemDef,
    mu: &[f64],
    resolution: &[usize],
) -> Result<FieldErrors, ReportError> {
    let grid = eval_grid(&problem.domain, mu, resolution);
    let batch = grid.batch();
    let (y_exact, u_exact, p_exact) =
        analytic_solution(problem, &batch).ok_or(ReportError::NoAnalyticSolution)?;
    let y_pred = composed_values(problem, FieldKind::State, &bundle.y.spec, &bundle.y.params, &batch);
    let p_pred = composed_values(problem, FieldKind::Adjoint, &bundle.p.spec, &bundle.p.params, &batch);
    let u_pred = network_values(&bundle.u.spec, &bundle.u.params, &batch).expect("grid batch");
    Ok(FieldErrors {
        y: l2_linf_relative(&y_pred, &y_exact),
        u: l2_linf_relative(&u_pred, &u_exact),
        p: l2_linf_relative(&p_pred, &p_exact),
    })
}

/// Fraction of unmasked grid points where |u| exceeds the threshold, one
/// entry per requested parameter value.
pub fn sparsity_profile(
    bundle: &SolutionBundle,
    problem: &ProblemDef,
    mu_list: &[Vec<f64>],
    threshold: f64,
    resolution: &[usize],
) -> Vec<f64> {
    assert!(threshold > 0.0);
    mu_list
        .iter()
        .map(|mu| {
            let grid = eval_grid(&problem.domain, mu, resolution);
            let batch = grid.batch();
            let u = network_values(&bundle.u.spec, &bundle.u.params, &batch).expect("grid batch");
            if u.is_empty() {
                return 0.0;
            }
            let over = u.iter().filter(|v| v.abs() > threshold).count();
            over as f64 / u.len() as f64
        })
        .collect()
}

/// Maximum |u| of the bundle's control over the grid at a fixed parameter.
pub fn control_sup_norm(bundle: &SolutionBundle, problem: &ProblemDef, mu: &[f64], resolution: &[usize]) -> f64 {
    let grid = eval_grid(&problem.domain, mu, resolution);
    let batch = grid.batch();
    let u = network_values(&bundle.u.spec, &bundle.u.params, &batch).expect("grid batch");
    u.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Whether the wall-time column is written as measured or zeroed.
/// Zeroed is the default so that identical runs produce byte-identical logs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimingMode {
    Zeroed,
    Recorded,
}

/// Where and what to write.
#[derive(Clone, Debug)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Parameter values whose field slices get dumped.
    pub slice_mus: Vec<Vec<f64>>,
    pub resolution: Vec<usize>,
    pub timing: TimingMode,
    /// Pre-rendered run manifest (resolved config and seeds).
    pub manifest: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub const LOG_HEADER: &str =
    "iter,loss_state,loss_adjoint,loss_control,loss_verify,step_size,epochs,err_l2,err_linf,wall_seconds";

fn render_log(history: &[IterationRecord], timing: TimingMode) -> String {
    let mut out = String::with_capacity(64 + history.len() * 200);
    out.push_str(LOG_HEADER);
    out.push('\n');
    for r in history {
        let wall = match timing {
            TimingMode::Zeroed => 0.0,
            TimingMode::Recorded => r.wall_seconds,
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.iter,
            fmt_float(r.loss_state),
            fmt_float(r.loss_adjoint),
            fmt_float(r.loss_control),
            fmt_float(r.loss_verify),
            fmt_float(r.step_size),
            r.epochs,
            fmt_float(r.err_l2),
            fmt_float(r.err_linf),
            fmt_float(wall),
        ));
    }
    out
}

fn render_field_dump(bundle: &SolutionBundle, problem: &ProblemDef, mu: &[f64], resolution: &[usize]) -> String {
    let grid = eval_grid(&problem.domain, mu, resolution);
    let batch = grid.batch();
    let y = composed_values(problem, FieldKind::State, &bundle.y.spec, &bundle.y.params, &batch);
    let p = composed_values(problem, FieldKind::Adjoint, &bundle.p.spec, &bundle.p.params, &batch);
    let u = network_values(&bundle.u.spec, &bundle.u.params, &batch).expect("grid batch");
    let d = problem.d;
    let dp = problem.dp;
    let mut header = String::new();
    for k in 0..d {
        header.push_str(&format!("x{k},"));
    }
    for k in 0..dp {
        header.push_str(&format!("mu{k},"));
    }
    header.push_str("y,p,u");
    let mut out = String::with_capacity(header.len() + 1 + batch.n * 120);
    out.push_str(&header);
    out.push('\n');
    for i in 0..batch.n {
        let point = batch.point(i);
        for c in point {
            out.push_str(&fmt_float(*c));
            out.push(',');
        }
        out.push_str(&fmt_float(y[i]));
        out.push(',');
        out.push_str(&fmt_float(p[i]));
        out.push(',');
        out.push_str(&fmt_float(u[i]));
        out.push('\n');
    }
    out
}

/// Binary parameter file with a short self-describing text header followed
/// by little-endian 64-bit reals.
pub fn write_network_file(path: &Path, spec: &NetworkSpec, params: &ParamVector) -> Result<(), ReportError> {
    let mut buf = Vec::with_capacity(128 + 8 * params.len());
    let header = format!(
        "aonn-net v1\ninput_dim={} output_dim={} blocks={} width={} residual={}\ncount={}\n",
        spec.input_dim,
        spec.output_dim,
        spec.num_blocks,
        spec.width,
        u8::from(spec.residual_connections),
        params.len()
    );
    buf.extend_from_slice(header.as_bytes());
    for v in &params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_network_file(path: &Path) -> Result<(NetworkSpec, ParamVector), ReportError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |detail: &str| ReportError::BadNetworkFile {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    // header = first three newline-terminated lines
    let mut offset = 0usize;
    let mut lines = Vec::new();
    for _ in 0..3 {
        let rest = &bytes[offset..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        lines.push(String::from_utf8_lossy(&rest[..nl]).to_string());
        offset += nl + 1;
    }
    if lines[0] != "aonn-net v1" {
        return Err(bad("unknown format tag"));
    }
    let mut fields = std::collections::HashMap::new();
    for kv in lines[1].split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad("malformed spec line"))?;
        fields.insert(k.to_string(), v.parse::<usize>().map_err(|_| bad("bad spec value"))?);
    }
    let count: usize = lines[2]
        .strip_prefix("count=")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("malformed count line"))?;
    let spec = NetworkSpec {
        input_dim: *fields.get("input_dim").ok_or_else(|| bad("missing input_dim"))?,
        output_dim: *fields.get("output_dim").ok_or_else(|| bad("missing output_dim"))?,
        num_blocks: *fields.get("blocks").ok_or_else(|| bad("missing blocks"))?,
        width: *fields.get("width").ok_or_else(|| bad("missing width"))?,
        residual_connections: *fields.get("residual").unwrap_or(&1) != 0,
    };
    if spec.param_count() != count {
        return Err(bad("count does not match the architecture"));
    }
    let payload = &bytes[offset..];
    if payload.len() != 8 * count {
        return Err(bad("payload size does not match count"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((spec, ParamVector { values }))
}

/// Write the iteration log, per-slice field dumps, run manifest and network
/// parameter files. Returns the written paths.
pub fn write_outputs(
    bundle: &SolutionBundle,
    problem: &ProblemDef,
    spec: &OutputSpec,
) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(&spec.dir).map_err(io_err(&spec.dir))?;
    let mut written = Vec::new();

    let log_path = spec.dir.join("iterations.csv");
    let mut f = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    f.write_all(render_log(&bundle.history, spec.timing).as_bytes())
        .map_err(io_err(&log_path))?;
    written.push(log_path);

    for (idx, mu) in spec.slice_mus.iter().enumerate() {
        let path = spec.dir.join(format!("fields_mu{idx}.csv"));
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        f.write_all(render_field_dump(bundle, problem, mu, &spec.resolution).as_bytes())
            .map_err(io_err(&path))?;
        written.push(path);
    }

    let manifest_path = spec.dir.join("manifest.toml");
    fs::write(&manifest_path, spec.manifest.as_bytes()).map_err(io_err(&manifest_path))?;
    written.push(manifest_path);

    for (name, net) in [
        ("net_y.bin", &bundle.y),
        ("net_p.bin", &bundle.p),
        ("net_u.bin", &bundle.u),
    ] {
        let path = spec.dir.join(name);
        write_network_file(&path, &net.spec, &net.params)?;
        written.push(path);
    }
    if let Some(m) = &bundle.multipliers {
        for (name, net) in [("net_mult_lo.bin", &m.lower), ("net_mult_hi.bin", &m.upper)] {
            let path = spec.dir.join(name);
            write_network_file(&path, &net.spec, &net.params)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::TrainedNet;
    use crate::jet_engine::init_network;
    use crate::problems::{laplace_geometry, semilinear_box};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn zero_bundle(problem: &ProblemDef, width: usize, blocks: usize) -> SolutionBundle {
        let spec = NetworkSpec::new(problem.d + problem.dp, 1, blocks, width);
        let zero = ParamVector::zeros(&spec);
        SolutionBundle {
            problem: problem.name.clone(),
            y: TrainedNet {
                spec: spec.clone(),
                params: zero.clone(),
            },
            p: TrainedNet {
                spec: spec.clone(),
                params: zero.clone(),
            },
            u: TrainedNet {
                spec,
                params: zero,
            },
            multipliers: None,
            history: vec![],
        }
    }

    #[test]
    fn constant_exact_triple_gives_zero_errors() {
        // a problem whose optimum is y* = 1, u* = 0, p* = 0 and whose
        // zero-network bundle reproduces it exactly (lift = 1)
        let mut problem = laplace_geometry(None);
        problem.analytic = Some(crate::problems::AnalyticTriple {
            y: Arc::new(|_| 1.0),
            u: Arc::new(|_| 0.0),
            p: Arc::new(|_| 0.0),
            y_jet: Arc::new(|_| crate::problems::FieldJet::constant(1.0)),
            p_jet: Arc::new(|_| crate::problems::FieldJet::constant(0.0)),
        });
        let bundle = zero_bundle(&problem, 5, 1);
        let errs = relative_errors(&bundle, &problem, &[0.2, 1.0], &[33, 17]).unwrap();
        assert_eq!(errs.y, (0.0, 0.0));
        assert_eq!(errs.u, (0.0, 0.0));
        assert_eq!(errs.p, (0.0, 0.0));
    }

    #[test]
    fn constant_offset_error_matches_direct_summation() {
        // u_pred = u_exact + 0.01 on the grid: l2_rel = 0.01*sqrt(n)/||u*||
        let problem = semilinear_box();
        let grid = eval_grid(&problem.domain, &[], &[64, 64]);
        let batch = grid.batch();
        let (_, u_exact, _) = analytic_solution(&problem, &batch).unwrap();
        let u_pred: Vec<f64> = u_exact.iter().map(|v| v + 0.01).collect();
        let (l2, linf) = l2_linf_relative(&u_pred, &u_exact);
        // brute-force oracle
        let norm: f64 = u_exact.iter().map(|v| v * v).sum::<f64>().sqrt();
        let expect = 0.01 * (u_exact.len() as f64).sqrt() / norm;
        assert!((l2 - expect).abs() <= 1e-12 * expect);
        let sup = u_exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((linf - 0.01 / sup).abs() <= 1e-12);
        // metric symmetry: zero error against itself
        assert_eq!(l2_linf_relative(&u_exact, &u_exact), (0.0, 0.0));
    }

    #[test]
    fn no_analytic_triple_is_an_error() {
        let problem = laplace_geometry(None);
        let bundle = zero_bundle(&problem, 5, 1);
        assert!(matches!(
            relative_errors(&bundle, &problem, &[0.2, 1.0], &[17, 9]),
            Err(ReportError::NoAnalyticSolution)
        ));
    }

    #[test]
    fn zero_control_has_empty_support() {
        let problem = crate::problems::semilinear_sparse();
        let bundle = zero_bundle(&problem, 5, 1);
        let mus: Vec<Vec<f64>> = (0..8).map(|i| vec![0.001 * 2f64.powi(i)]).collect();
        let frac = sparsity_profile(&bundle, &problem, &mus, DEFAULT_SPARSITY_THRESHOLD, &[32, 32]);
        assert!(frac.iter().all(|&f| f == 0.0));
        assert_eq!(control_sup_norm(&bundle, &problem, &[0.128], &[32, 32]), 0.0);
    }

    #[test]
    fn outputs_are_deterministic_and_sized() {
        let problem = semilinear_box();
        let mut bundle = zero_bundle(&problem, 6, 1);
        bundle.u.params = init_network(&bundle.u.spec, 77);
        bundle.history.push(IterationRecord {
            iter: 0,
            loss_state: 0.5,
            loss_adjoint: 0.25,
            loss_control: 0.125,
            loss_verify: 0.01,
            step_size: 100.0,
            epochs: 500,
            err_l2: 0.1,
            err_linf: 0.2,
            wall_seconds: 1.25,
        });
        let dir = std::env::temp_dir().join(format!("aonn-report-{}", std::process::id()));
        let spec = OutputSpec {
            dir: dir.clone(),
            slice_mus: vec![vec![]],
            resolution: vec![256, 256],
            timing: TimingMode::Zeroed,
            manifest: "problem = \"test1\"\n".into(),
        };
        let written = write_outputs(&bundle, &problem, &spec).unwrap();
        // row count: 256*256 + header
        let dump = fs::read_to_string(dir.join("fields_mu0.csv")).unwrap();
        assert_eq!(dump.lines().count(), 65537);
        // byte-identical on rewrite
        let before: Vec<Vec<u8>> = written.iter().map(|p| fs::read(p).unwrap()).collect();
        write_outputs(&bundle, &problem, &spec).unwrap();
        for (p, b) in written.iter().zip(before) {
            assert_eq!(fs::read(p).unwrap(), b, "{} changed", p.display());
        }
        // zeroed timing hides the recorded wall time
        let log = fs::read_to_string(dir.join("iterations.csv")).unwrap();
        assert!(log.lines().nth(1).unwrap().ends_with(&fmt_float(0.0)));
        // header-only log for an empty history
        bundle.history.clear();
        write_outputs(&bundle, &problem, &spec).unwrap();
        let log = fs::read_to_string(dir.join("iterations.csv")).unwrap();
        assert_eq!(log.trim_end(), LOG_HEADER);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn network_file_roundtrip_is_exact() {
        let spec = NetworkSpec::new(3, 1, 2, 9);
        let params = init_network(&spec, 5);
        let path = std::env::temp_dir().join(format!("aonn-net-{}.bin", std::process::id()));
        write_network_file(&path, &spec, &params).unwrap();
        let (spec2, params2) = read_network_file(&path).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(params.values, params2.values);
        fs::remove_file(&path).ok();
    }

    proptest! {
        #[test]
        fn seventeen_digits_roundtrip(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            let s = fmt_float(x);
            let back: f64 = s.parse().unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }
}
