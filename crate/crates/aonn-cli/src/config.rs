//! Structured run configuration. Unknown keys are fatal everywhere, so a
//! misspelled option never falls back to a silent default. The resolved
//! configuration (all defaults filled in) serializes back to TOML as the run
//! manifest, and that manifest re-parses to an identical run.

use serde::{Deserialize, Serialize};

use aonn::constraints::AdmissibleSpec;
use aonn::driver::{preset, ErrorGrid, NetSeeds, SolverSetup, TrainSchedule};
use aonn::jet_engine::NetworkSpec;
use aonn::optim::{AdamOptions, Algorithm, OptimOptions};
use aonn::problems::{by_name, ProblemDef};
use aonn::report::TimingMode;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub name: String,
    /// Override the control bounds (or supply the unspecified test4 bounds).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounds: Option<[f64; 2]>,
    /// Drop the control constraint entirely.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unconstrained: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSections {
    #[serde(default)]
    pub y: NetSection,
    #[serde(default)]
    pub p: NetSection,
    #[serde(default)]
    pub u: NetSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_iter: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n0: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_aug: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aug_period: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify_c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub post_process: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_control_after_loop: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skip: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub boundary_slice_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    /// aonn | pinn | pinn_projection
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Joint training epochs for the baselines.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Residual-group weights for the penalized KKT baseline.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// Projection step size for the projected KKT baseline.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    /// lbfgs | bfgs | adam
    #[serde(skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<usize>>,
    /// Parameter values whose field slices get dumped; also the evaluate and
    /// sweep anchor list.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slice_mus: Option<Vec<Vec<f64>>>,
    /// Parameter value for the per-iteration error columns.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_mu: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_grid: Option<Vec<usize>>,
    /// zeroed | recorded
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<String>,
    /// Nodes per parameter axis for the sweep subcommand.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_grid: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub problem: ProblemSection,
    #[serde(default)]
    pub network: NetworkSections,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub method: MethodSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    Aonn,
    Pinn,
    PinnProjection,
}

/// Fully resolved run: problem instance plus every knob filled in.
pub struct ResolvedRun {
    pub problem: ProblemDef,
    pub schedule: TrainSchedule,
    pub setup: SolverSetup,
    pub method: MethodKind,
    pub seed: u64,
    pub epochs: usize,
    pub weights: Vec<f64>,
    pub projection_c: f64,
    pub n_points: usize,
    pub skip: usize,
    pub slice_fraction: f64,
    pub out_dir: String,
    pub grid: Vec<usize>,
    pub slice_mus: Vec<Vec<f64>>,
    pub timing: TimingMode,
    pub sweep_grid: Vec<usize>,
    /// The manifest: a config that reproduces this run exactly.
    pub manifest: ConfigFile,
}

pub fn parse_config(text: &str) -> Result<ConfigFile, ConfigError> {
    toml::from_str(text).map_err(|e| err(e.to_string()))
}

fn param_midpoint(problem: &ProblemDef) -> Vec<f64> {
    let (lo, hi) = problem.domain.param_box();
    lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect()
}

pub fn resolve(
    mut cfg: ConfigFile,
    out_override: Option<&str>,
    seed_override: Option<u64>,
) -> Result<ResolvedRun, ConfigError> {
    let name = cfg.problem.name.clone();
    let preset = preset(&name).ok_or_else(|| err(format!("unknown problem '{name}'")))?;
    let bounds = cfg.problem.bounds.map(|b| (b[0], b[1]));
    let mut problem =
        by_name(&name, bounds).ok_or_else(|| err(format!("unknown problem '{name}'")))?;
    if let Some([lo, hi]) = cfg.problem.bounds {
        if lo > hi {
            return Err(err(format!("bounds [{lo}, {hi}] are inverted")));
        }
        problem.admissible = AdmissibleSpec::constant_box(lo, hi);
    }
    if cfg.problem.unconstrained.unwrap_or(false) {
        problem.admissible = AdmissibleSpec::Unconstrained;
    }

    let sched = &cfg.schedule;
    let schedule = TrainSchedule {
        c0: sched.c0.unwrap_or(preset.schedule.c0),
        gamma: sched.gamma.unwrap_or(preset.schedule.gamma),
        n0: sched.n0.unwrap_or(preset.schedule.n0),
        n_aug: sched.n_aug.unwrap_or(preset.schedule.n_aug),
        aug_period: sched.aug_period.unwrap_or(preset.schedule.aug_period),
        n_iter: sched.n_iter.unwrap_or(preset.schedule.n_iter),
        verify_c: sched.verify_c,
        post_process: sched.post_process.unwrap_or(false),
        train_control_after_loop: sched.train_control_after_loop.unwrap_or(false),
    };
    if schedule.gamma <= 0.0 || schedule.gamma > 1.0 {
        return Err(err(format!("gamma {} outside (0, 1]", schedule.gamma)));
    }
    if schedule.c0 <= 0.0 {
        return Err(err("c0 must be positive"));
    }

    let seed = seed_override
        .or(cfg.method.seed)
        .unwrap_or(1234);
    let input_dim = problem.d + problem.dp;
    let net_spec = |sec: &NetSection| {
        NetworkSpec::new(
            input_dim,
            1,
            sec.blocks.unwrap_or(preset.blocks),
            sec.width.unwrap_or(preset.width),
        )
    };
    let method = match cfg.method.kind.as_deref().unwrap_or("aonn") {
        "aonn" => MethodKind::Aonn,
        "pinn" => MethodKind::Pinn,
        "pinn_projection" => MethodKind::PinnProjection,
        other => return Err(err(format!("unknown method '{other}'"))),
    };
    let algorithm = match cfg.optimizer.algorithm.as_deref().unwrap_or("lbfgs") {
        "lbfgs" => Algorithm::LBfgs,
        "bfgs" => Algorithm::DenseBfgs,
        "adam" => Algorithm::Adam,
        other => return Err(err(format!("unknown optimizer '{other}'"))),
    };
    let optim = OptimOptions {
        algorithm,
        max_iterations: cfg.optimizer.max_iterations.unwrap_or(100),
        c1: cfg.optimizer.c1.unwrap_or(1e-4),
        c2: cfg.optimizer.c2.unwrap_or(0.9),
        memory: cfg.optimizer.memory.unwrap_or(20),
        grad_tol: cfg.optimizer.grad_tol.unwrap_or(1e-9),
        adam: AdamOptions {
            rate: cfg.optimizer.adam_rate.unwrap_or(1e-3),
            ..AdamOptions::default()
        },
        record_steps: false,
    };
    if !(optim.c1 > 0.0 && optim.c1 < optim.c2 && optim.c2 < 1.0) {
        return Err(err("need 0 < c1 < c2 < 1"));
    }

    let error_mu = cfg
        .output
        .error_mu
        .clone()
        .unwrap_or_else(|| param_midpoint(&problem));
    if error_mu.len() != problem.dp {
        return Err(err(format!(
            "error_mu has {} entries, problem has {} parameters",
            error_mu.len(),
            problem.dp
        )));
    }
    let error_grid_res = cfg.output.error_grid.clone().unwrap_or_else(|| vec![64; problem.d]);
    let error_grid = problem.analytic.as_ref().map(|_| ErrorGrid {
        mu: error_mu.clone(),
        resolution: error_grid_res.clone(),
    });

    let setup = SolverSetup {
        y_spec: net_spec(&cfg.network.y),
        p_spec: net_spec(&cfg.network.p),
        u_spec: net_spec(&cfg.network.u),
        seeds: NetSeeds::from_base(seed),
        optim,
        error_grid,
    };

    let n_points = cfg.sampling.n.unwrap_or(preset.n_points);
    let skip = cfg.sampling.skip.unwrap_or(0);
    let slice_fraction = cfg
        .sampling
        .boundary_slice_fraction
        .unwrap_or(preset.slice_fraction);
    if n_points == 0 {
        return Err(err("sampling.n must be positive"));
    }

    let out_dir = out_override
        .map(str::to_string)
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| "out".to_string());
    let grid = cfg.output.grid.clone().unwrap_or_else(|| vec![256; problem.d]);
    if grid.len() != problem.d || grid.iter().any(|&g| g < 2) {
        return Err(err("output.grid needs one entry >= 2 per spatial axis"));
    }
    let slice_mus = cfg.output.slice_mus.clone().unwrap_or_else(|| {
        if problem.dp == 0 {
            vec![vec![]]
        } else {
            vec![param_midpoint(&problem)]
        }
    });
    for mu in &slice_mus {
        if mu.len() != problem.dp {
            return Err(err(format!(
                "slice mu {mu:?} has wrong length for {} parameters",
                problem.dp
            )));
        }
    }
    let timing = match cfg.output.timing.as_deref().unwrap_or("zeroed") {
        "zeroed" => TimingMode::Zeroed,
        "recorded" => TimingMode::Recorded,
        other => return Err(err(format!("unknown timing mode '{other}'"))),
    };
    let sweep_grid = cfg.output.sweep_grid.clone().unwrap_or_else(|| vec![5; problem.dp]);
    if sweep_grid.len() != problem.dp {
        return Err(err("output.sweep_grid needs one entry per parameter axis"));
    }

    let epochs = cfg.method.epochs.unwrap_or(schedule.n_iter.max(1) * schedule.n0);
    let weights = cfg.method.weights.clone().unwrap_or_default();
    let projection_c = cfg.method.c.unwrap_or(1.0 / problem.alpha);

    // Fill the parsed struct back in so the serialized manifest reproduces
    // this exact run.
    cfg.network.y.width = Some(setup.y_spec.width);
    cfg.network.y.blocks = Some(setup.y_spec.num_blocks);
    cfg.network.p.width = Some(setup.p_spec.width);
    cfg.network.p.blocks = Some(setup.p_spec.num_blocks);
    cfg.network.u.width = Some(setup.u_spec.width);
    cfg.network.u.blocks = Some(setup.u_spec.num_blocks);
    cfg.schedule.n_iter = Some(schedule.n_iter);
    cfg.schedule.c0 = Some(schedule.c0);
    cfg.schedule.gamma = Some(schedule.gamma);
    cfg.schedule.n0 = Some(schedule.n0);
    cfg.schedule.n_aug = Some(schedule.n_aug);
    cfg.schedule.aug_period = Some(schedule.aug_period);
    cfg.schedule.verify_c = schedule.verify_c;
    cfg.schedule.post_process = Some(schedule.post_process);
    cfg.schedule.train_control_after_loop = Some(schedule.train_control_after_loop);
    cfg.sampling.n = Some(n_points);
    cfg.sampling.skip = Some(skip);
    cfg.sampling.boundary_slice_fraction = Some(slice_fraction);
    cfg.method.kind = Some(match method {
        MethodKind::Aonn => "aonn".into(),
        MethodKind::Pinn => "pinn".into(),
        MethodKind::PinnProjection => "pinn_projection".into(),
    });
    cfg.method.seed = Some(seed);
    cfg.method.epochs = Some(epochs);
    cfg.method.weights = Some(weights.clone());
    cfg.method.c = Some(projection_c);
    cfg.optimizer.algorithm = Some(
        match setup.optim.algorithm {
            Algorithm::LBfgs => "lbfgs",
            Algorithm::DenseBfgs => "bfgs",
            Algorithm::Adam => "adam",
        }
        .into(),
    );
    cfg.optimizer.max_iterations = Some(setup.optim.max_iterations);
    cfg.optimizer.memory = Some(setup.optim.memory);
    cfg.optimizer.grad_tol = Some(setup.optim.grad_tol);
    cfg.optimizer.c1 = Some(setup.optim.c1);
    cfg.optimizer.c2 = Some(setup.optim.c2);
    cfg.optimizer.adam_rate = Some(setup.optim.adam.rate);
    cfg.output.dir = Some(out_dir.clone());
    cfg.output.grid = Some(grid.clone());
    cfg.output.slice_mus = Some(slice_mus.clone());
    cfg.output.error_mu = Some(error_mu);
    cfg.output.error_grid = Some(error_grid_res);
    cfg.output.timing = Some(
        match timing {
            TimingMode::Zeroed => "zeroed",
            TimingMode::Recorded => "recorded",
        }
        .into(),
    );
    cfg.output.sweep_grid = Some(sweep_grid.clone());

    Ok(ResolvedRun {
        problem,
        schedule,
        setup,
        method,
        seed,
        epochs,
        weights,
        projection_c,
        n_points,
        skip,
        slice_fraction,
        out_dir,
        grid,
        slice_mus,
        timing,
        sweep_grid,
        manifest: cfg,
    })
}

pub fn render_manifest(cfg: &ConfigFile) -> String {
    toml::to_string_pretty(cfg).expect("resolved config serializes")
}
