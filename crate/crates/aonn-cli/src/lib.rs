//! Batch entry point: parse a structured config, dispatch subcommands, wire
//! seeds and outputs. Exit codes: 0 success, 1 config error, 2 divergence,
//! 3 check failure.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use aonn::driver::{
    aonn_solve, pinn_projection_solve, pinn_solve, SolutionBundle, SolveError, TrainedNet,
};
use aonn::gradcheck::run_gradcheck;
use aonn::report::{fmt_float, read_network_file, relative_errors, write_outputs, OutputSpec};
use aonn::sampling::sample_domain;

use config::{parse_config, render_manifest, resolve, MethodKind, ResolvedRun};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGENCE: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "aonn", about = "All-at-once neural solvers for parametric optimal control")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the configured problem and write logs, dumps and networks.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Load a saved bundle and report errors at the configured parameters.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Relative errors over a parameter grid, written as CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference verification of jets and loss gradients.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_resolved(
    config: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<ResolvedRun, String> {
    let text = fs::read_to_string(config)
        .map_err(|e| format!("cannot read {}: {e}", config.display()))?;
    let cfg = parse_config(&text).map_err(|e| e.to_string())?;
    resolve(cfg, out.and_then(|p| p.to_str()), seed).map_err(|e| e.to_string())
}

fn write_bundle(run: &ResolvedRun, bundle: &SolutionBundle) -> Result<Vec<PathBuf>, String> {
    let spec = OutputSpec {
        dir: PathBuf::from(&run.out_dir),
        slice_mus: run.slice_mus.clone(),
        resolution: run.grid.clone(),
        timing: run.timing,
        manifest: render_manifest(&run.manifest),
    };
    write_outputs(bundle, &run.problem, &spec).map_err(|e| e.to_string())
}

fn cmd_solve(config: &Path, out: Option<&Path>, seed: Option<u64>) -> i32 {
    let run = match load_resolved(config, out, seed) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_CONFIG;
        }
    };
    let sample = match sample_domain(&run.problem.domain, run.n_points, run.skip, run.slice_fraction)
    {
        Ok(s) => s,
        Err(e) => {
            eprintln!("sampling failed: {e}");
            return EXIT_CONFIG;
        }
    };
    let result = match run.method {
        MethodKind::Aonn => aonn_solve(&run.problem, &sample, &run.schedule, &run.setup),
        MethodKind::Pinn => pinn_solve(
            &run.problem,
            &sample,
            run.weights.clone(),
            run.epochs,
            &run.setup,
        ),
        MethodKind::PinnProjection => pinn_projection_solve(
            &run.problem,
            &sample,
            run.projection_c,
            run.epochs,
            &run.setup,
        ),
    };
    match result {
        Ok(bundle) => {
            match write_bundle(&run, &bundle) {
                Ok(paths) => {
                    for p in &paths {
                        println!("wrote {}", p.display());
                    }
                }
                Err(e) => {
                    eprintln!("output failed: {e}");
                    return EXIT_CONFIG;
                }
            }
            if let Some(last) = bundle.history.last() {
                println!(
                    "final: loss_state={} loss_verify={} err_l2={}",
                    fmt_float(last.loss_state),
                    fmt_float(last.loss_verify),
                    fmt_float(last.err_l2)
                );
            }
            EXIT_OK
        }
        Err(SolveError::Divergence {
            iteration,
            detail,
            last_good,
        }) => {
            eprintln!("divergence at iteration {iteration}: {detail}");
            if let Err(e) = write_bundle(&run, &last_good) {
                eprintln!("could not save last-good bundle: {e}");
            } else {
                eprintln!("last-good bundle written to {}", run.out_dir);
            }
            EXIT_DIVERGENCE
        }
        Err(SolveError::Setup(msg)) => {
            eprintln!("{msg}");
            EXIT_CONFIG
        }
    }
}

fn load_bundle(run: &ResolvedRun) -> Result<SolutionBundle, String> {
    let dir = Path::new(&run.out_dir);
    let mut nets = Vec::new();
    for name in ["net_y.bin", "net_p.bin", "net_u.bin"] {
        let (spec, params) = read_network_file(&dir.join(name)).map_err(|e| e.to_string())?;
        nets.push(TrainedNet { spec, params });
    }
    let u = nets.pop().unwrap();
    let p = nets.pop().unwrap();
    let y = nets.pop().unwrap();
    Ok(SolutionBundle {
        problem: run.problem.name.clone(),
        y,
        p,
        u,
        multipliers: None,
        history: vec![],
    })
}

fn cmd_evaluate(config: &Path, out: Option<&Path>) -> i32 {
    let run = match load_resolved(config, out, None) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_CONFIG;
        }
    };
    let bundle = match load_bundle(&run) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_CONFIG;
        }
    };
    println!("mu                         l2_y        linf_y      l2_u        linf_u      l2_p        linf_p");
    for mu in &run.slice_mus {
        match relative_errors(&bundle, &run.problem, mu, &run.grid) {
            Ok(errs) => {
                println!(
                    "{:<26} {:<11.4e} {:<11.4e} {:<11.4e} {:<11.4e} {:<11.4e} {:<11.4e}",
                    format!("{mu:?}"),
                    errs.y.0,
                    errs.y.1,
                    errs.u.0,
                    errs.u.1,
                    errs.p.0,
                    errs.p.1
                );
            }
            Err(e) => {
                eprintln!("{e}");
                return EXIT_CONFIG;
            }
        }
    }
    EXIT_OK
}

fn cmd_sweep(config: &Path, out: Option<&Path>) -> i32 {
    let run = match load_resolved(config, out, None) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_CONFIG;
        }
    };
    let bundle = match load_bundle(&run) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_CONFIG;
        }
    };
    if run.problem.dp == 0 {
        eprintln!("sweep needs a parametric problem");
        return EXIT_CONFIG;
    }
    // tensor grid over the parameter box, endpoints included
    let (lo, hi) = run.problem.domain.param_box();
    let counts = &run.sweep_grid;
    let total: usize = counts.iter().product();
    let mut rows = String::new();
    for k in 0..run.problem.dp {
        rows.push_str(&format!("mu{k},"));
    }
    rows.push_str("l2_y,linf_y,l2_u,linf_u,l2_p,linf_p\n");
    for flat in 0..total {
        let mut rem = flat;
        let mut mu = vec![0.0; run.problem.dp];
        for ax in (0..run.problem.dp).rev() {
            let idx = rem % counts[ax];
            rem /= counts[ax];
            mu[ax] = if counts[ax] == 1 {
                0.5 * (lo[ax] + hi[ax])
            } else {
                lo[ax] + idx as f64 * (hi[ax] - lo[ax]) / (counts[ax] - 1) as f64
            };
        }
        match relative_errors(&bundle, &run.problem, &mu, &run.grid) {
            Ok(errs) => {
                for m in &mu {
                    rows.push_str(&fmt_float(*m));
                    rows.push(',');
                }
                rows.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    fmt_float(errs.y.0),
                    fmt_float(errs.y.1),
                    fmt_float(errs.u.0),
                    fmt_float(errs.u.1),
                    fmt_float(errs.p.0),
                    fmt_float(errs.p.1)
                ));
            }
            Err(e) => {
                eprintln!("{e}");
                return EXIT_CONFIG;
            }
        }
    }
    let path = Path::new(&run.out_dir).join("sweep.csv");
    if let Err(e) = fs::create_dir_all(&run.out_dir).and_then(|_| fs::write(&path, rows)) {
        eprintln!("cannot write {}: {e}", path.display());
        return EXIT_CONFIG;
    }
    println!("wrote {}", path.display());
    EXIT_OK
}

fn cmd_gradcheck(config: Option<&Path>, seed: Option<u64>) -> i32 {
    let seed = match (seed, config) {
        (Some(s), _) => s,
        (None, Some(path)) => {
            let text = match fs::read_to_string(path) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("cannot read {}: {e}", path.display());
                    return EXIT_CONFIG;
                }
            };
            match parse_config(&text) {
                Ok(cfg) => cfg.method.seed.unwrap_or(1234),
                Err(e) => {
                    eprintln!("{e}");
                    return EXIT_CONFIG;
                }
            }
        }
        (None, None) => 1234,
    };
    let report = run_gradcheck(seed);
    print!("{}", report.render_table());
    if report.passed() {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    }
}

/// Parse the argument vector and dispatch; returns the process exit code.
pub fn run<I: IntoIterator<Item = String>>(argv: I) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match cli.cmd {
        Command::Solve { config, out, seed } => cmd_solve(&config, out.as_deref(), seed),
        Command::Evaluate { config, out } => cmd_evaluate(&config, out.as_deref()),
        Command::Sweep { config, out } => cmd_sweep(&config, out.as_deref()),
        Command::Gradcheck { config, seed } => cmd_gradcheck(config.as_deref(), seed),
    }
}
