use std::path::{Path, PathBuf};
use std::process::ExitCode;

use lagrange_units::config::{require_file, ExperimentConfig, Overrides};
use lagrange_units::experiment::{
    accuracy, aggregate_runs, run_trial, train_base_xor, xor_grid, BaseNetwork, XorDatasetSpec,
};
use lagrange_units::io::{self, Checkpoint};
use lagrange_units::{solve_layer, verify, Error, LagrangeLayer};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::Command;

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_IO: u8 = 4;
pub const EXIT_VERIFY: u8 = 5;
pub const EXIT_NOT_CONVERGED: u8 = 6;

/// Side length of the held-out accuracy grid.
const ACCURACY_GRID: usize = 50;

pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Diverged { .. } | Error::HessianSolve { .. } | Error::TrainingDiverged { .. } | Error::Range { .. } => {
                EXIT_DIVERGED
            }
            Error::Io(_) => EXIT_IO,
            Error::Domain { .. }
            | Error::NonFinite { .. }
            | Error::InvalidFamily(_)
            | Error::Dimension { .. }
            | Error::RankDeficient { .. }
            | Error::TooManyConstraints { .. }
            | Error::InfeasibleTarget { .. }
            | Error::LinearSolve(_)
            | Error::Config(_)
            | Error::EpochMismatch { .. }
            | Error::Data(_)
            | Error::Json(_)
            | Error::Csv(_) => EXIT_INPUT,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<ExitCode, Failure>;

/// Reads an input file; any failure is an input error rather than I/O.
fn input<T>(path: &Path, key: &str, read: impl FnOnce(&Path) -> lagrange_units::Result<T>) -> Result<T, Failure> {
    require_file(path, key)?;
    read(path).map_err(|e| Failure {
        code: EXIT_INPUT,
        message: format!("{}: {e}", path.display()),
    })
}

fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}

pub fn dispatch(command: Command) -> Outcome {
    match command {
        Command::TrainBase { config, seed, out } => {
            let cfg = load_config(
                config.as_deref(),
                &Overrides {
                    seed,
                    out_dir: out,
                    ..Default::default()
                },
            )?;
            train_base(&cfg)
        }
        Command::TrainConstrained {
            config,
            seed,
            runs,
            out,
            solver_mode,
        } => {
            let cfg = load_config(
                config.as_deref(),
                &Overrides {
                    seed,
                    runs,
                    out_dir: out,
                    solver_mode,
                },
            )?;
            train_constrained(&cfg)
        }
        Command::Solve {
            checkpoint,
            instance,
            config,
            solver_mode,
        } => {
            let cfg = load_config(
                config.as_deref(),
                &Overrides {
                    solver_mode,
                    ..Default::default()
                },
            )?;
            solve(&cfg, &checkpoint, &instance)
        }
        Command::Verify {
            config,
            tolerance_scale,
        } => {
            let mut cfg = load_config(config.as_deref(), &Overrides::default())?;
            if let Some(s) = tolerance_scale {
                cfg.verify.tolerance_scale = s;
                cfg.validate()?;
            }
            run_verify(&cfg)
        }
        Command::Aggregate { config, out, summaries } => {
            let cfg = load_config(
                config.as_deref(),
                &Overrides {
                    out_dir: out,
                    ..Default::default()
                },
            )?;
            aggregate(&cfg, summaries)
        }
    }
}

#[derive(Serialize)]
struct BaseReport {
    checkpoint: PathBuf,
    constraints: PathBuf,
    initial_loss: f64,
    final_loss: f64,
    grid_accuracy: f64,
}

fn train_base(cfg: &ExperimentConfig) -> Outcome {
    let out = &cfg.paths.out_dir;
    let samples = match &cfg.paths.dataset {
        Some(p) => input(p, "paths.dataset", io::read_dataset)?,
        None => XorDatasetSpec {
            n_samples: cfg.data.n_samples,
            seed: cfg.seeds.base,
        }
        .generate()?,
    };
    let base = train_base_xor(&samples, &cfg.base, cfg.seeds.base)?;
    let constraints = base.constraints()?;
    let checkpoint = cfg.paths.base_checkpoint();
    let constraints_path = cfg.paths.constraints();
    Checkpoint::Mlp(base.mlp.clone()).write(&checkpoint)?;
    io::write_constraints(&constraints_path, &constraints)?;
    io::write_dataset(&out.join(io::DATASET_CSV), &samples)?;
    let report = BaseReport {
        checkpoint,
        constraints: constraints_path,
        initial_loss: base.loss_history[0],
        final_loss: base.loss_history[base.loss_history.len() - 1],
        grid_accuracy: accuracy(&base.mlp, &xor_grid(ACCURACY_GRID))?,
    };
    print_json(&report)?;
    Ok(ExitCode::SUCCESS)
}

fn train_constrained(cfg: &ExperimentConfig) -> Outcome {
    let out = &cfg.paths.out_dir;
    let checkpoint = input(&cfg.paths.base_checkpoint(), "paths.base_checkpoint", Checkpoint::read)?;
    let Checkpoint::Mlp(mlp) = checkpoint else {
        return Err(Failure {
            code: EXIT_INPUT,
            message: "base checkpoint must hold a plain network".into(),
        });
    };
    let base = BaseNetwork::from_mlp(mlp)?;
    let constraints = input(&cfg.paths.constraints(), "paths.constraints", io::read_constraints)?;
    let mut summaries = Vec::with_capacity(cfg.seeds.runs.len());
    for &seed in &cfg.seeds.runs {
        let run = run_trial(&base, &constraints, cfg.data.n_samples, &cfg.constrained, &cfg.solver, seed)?;
        io::write_epoch_stats(&out.join(io::run_epochs_csv(seed)), &run.summary.epochs)?;
        io::write_run_summary(&out.join(io::run_summary_json(seed)), &run.summary)?;
        Checkpoint::Constrained {
            trunk: run.trunk,
            layer: LagrangeLayer::new(cfg.constrained.family, constraints.clone()),
        }
        .write(&out.join(io::run_checkpoint_json(seed)))?;
        let first = &run.summary.epochs[0];
        let last = &run.summary.epochs[run.summary.epochs.len() - 1];
        eprintln!(
            "run {seed}: mean iterations {:.1} -> {:.1}, loss {:.4e} -> {:.4e} ({:.1}s)",
            first.mean_iters, last.mean_iters, first.mean_loss, last.mean_loss, run.summary.wall_clock_secs
        );
        summaries.push(run.summary);
    }
    io::write_aggregate(&out.join(io::AGGREGATE_CSV), &aggregate_runs(&summaries)?)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Instance {
    x: Vec<f64>,
    b: Option<Vec<f64>>,
    lambda0: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct SolveReport {
    lambda: Vec<f64>,
    z: Vec<f64>,
    infeasibility: f64,
    iterations: usize,
    converged: bool,
    stop: lagrange_units::StopReason,
}

fn solve(cfg: &ExperimentConfig, checkpoint: &Path, instance: &Path) -> Outcome {
    let checkpoint = input(checkpoint, "--checkpoint", Checkpoint::read)?;
    let inst: Instance = input(instance, "--instance", |p| {
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    })?;
    let x = DVector::from_vec(inst.x);
    let (layer, wx) = match checkpoint {
        Checkpoint::DualModel(m) => {
            let wx = m.wx(&x)?;
            (m.layer().clone(), wx)
        }
        Checkpoint::Constrained { trunk, layer } => (layer, trunk.predict(&x)?),
        Checkpoint::Mlp(_) => {
            return Err(Failure {
                code: EXIT_INPUT,
                message: "checkpoint has no Lagrange layer".into(),
            })
        }
    };
    let b = match (inst.b, layer.constraints().rhs()) {
        (Some(b), _) => DVector::from_vec(b),
        (None, Some(rhs)) => rhs.clone(),
        (None, None) => {
            return Err(Failure {
                code: EXIT_INPUT,
                message: "instance gives no `b` and the checkpoint stores no right-hand side".into(),
            })
        }
    };
    let lam0 = inst
        .lambda0
        .map(DVector::from_vec)
        .unwrap_or_else(|| DVector::zeros(layer.n_constraints()));
    let st = solve_layer(&layer, &wx, &b, &lam0, &cfg.solver)?;
    let z = layer.predictor(&wx, &st.lam)?;
    let report = SolveReport {
        infeasibility: layer.constraints().infeasibility(&z, &b)?,
        lambda: st.lam.as_slice().to_vec(),
        z: z.as_slice().to_vec(),
        iterations: st.iterations,
        converged: st.converged,
        stop: st.stop,
    };
    print_json(&report)?;
    Ok(if st.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_NOT_CONVERGED)
    })
}

fn run_verify(cfg: &ExperimentConfig) -> Outcome {
    let report = verify::run_suite(cfg.verify.tolerance_scale);
    println!("{report}");
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VERIFY)
    })
}

fn aggregate(cfg: &ExperimentConfig, mut files: Vec<PathBuf>) -> Outcome {
    let out = &cfg.paths.out_dir;
    if files.is_empty() {
        let entries = std::fs::read_dir(out).map_err(|e| Failure {
            code: EXIT_INPUT,
            message: format!("{}: {e}", out.display()),
        })?;
        for entry in entries {
            let path = entry.map_err(Error::from)?.path();
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if name.starts_with("run_") && name.ends_with("_summary.json") {
                files.push(path);
            }
        }
        files.sort();
    }
    if files.is_empty() {
        return Err(Failure {
            code: EXIT_INPUT,
            message: format!("no run summaries in {}", out.display()),
        });
    }
    let summaries = files
        .iter()
        .map(|p| input(p, "summary", io::read_run_summary))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = aggregate_runs(&summaries)?;
    io::write_aggregate(&out.join(io::AGGREGATE_CSV), &rows)?;
    eprintln!("aggregated {} runs over {} epochs", summaries.len(), rows.len());
    Ok(ExitCode::SUCCESS)
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure {
        code: EXIT_INTERNAL,
        message: e.to_string(),
    })?;
    println!("{text}");
    Ok(())
}
