//! Two-stage XOR protocol: train a base network, freeze its `fc3` weights as
//! the constraint matrix, then train a fresh trunk whose output layer is a
//! Lagrange layer reproducing the base network's `fc2` activations.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bregman::SigmoidFamily;
use crate::constraints::ConstraintSet;
use crate::dual::LagrangeLayer;
use crate::error::{check_dim, Error, Result};
use crate::network::{bce_with_logits, Activation, Gradients, Mlp};
use crate::solver::{solve_layer, SolverConfig};

/// Caps the worker count for per-instance solves.
pub const THREADS_ENV: &str = "LAGRANGE_UNITS_THREADS";

/// Base training stops with an error once the full-data loss exceeds this
/// multiple of its initial value.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

// Independent random streams derived from one seed.
const DATA_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XorSample {
    pub x1: f64,
    pub x2: f64,
    pub label: u8,
}

impl XorSample {
    pub fn new(x1: f64, x2: f64) -> Self {
        Self {
            x1,
            x2,
            label: u8::from(x1 * x2 > 0.0),
        }
    }

    pub fn input(&self) -> DVector<f64> {
        DVector::from_column_slice(&[self.x1, self.x2])
    }

    pub fn target(&self) -> f64 {
        f64::from(self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XorDatasetSpec {
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for XorDatasetSpec {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            seed: 0,
        }
    }
}

impl XorDatasetSpec {
    /// Generation rule; inputs are uniform on the square.
    pub const RULE: &'static str = "x ~ U([-1,1]^2), label = 1 iff x1 * x2 > 0";

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Vec<XorSample>> {
        self.validate()?;
        let mut rng = stream(self.seed, DATA_STREAM);
        Ok((0..self.n_samples)
            .map(|_| XorSample::new(rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)))
            .collect())
    }
}

/// Cell centres of a `per_axis x per_axis` grid on `[-1,1]^2`. Even
/// `per_axis` keeps every point off the axes.
pub fn xor_grid(per_axis: usize) -> Vec<XorSample> {
    let step = 2.0 / per_axis as f64;
    let coord = |i: usize| -1.0 + step * (i as f64 + 0.5);
    (0..per_axis)
        .flat_map(|i| (0..per_axis).map(move |j| XorSample::new(coord(i), coord(j))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainConfig {
    /// Layer widths, input first. The last three layers play the roles of
    /// `fc2`, `fc3` and `fc4`.
    pub dims: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            dims: vec![2, 5, 10, 4, 1],
            epochs: 500,
            batch_size: 64,
            learning_rate: 1.0,
        }
    }
}

impl BaseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 4 {
            return Err(Error::Config("dims needs an input and at least three layers".into()));
        }
        if self.dims[0] != 2 || self.dims[self.dims.len() - 1] != 1 {
            return Err(Error::Config("dims must start at 2 and end at 1".into()));
        }
        if self.dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let k = self.dims[self.dims.len() - 3];
        let i = self.dims[self.dims.len() - 2];
        if i >= k {
            return Err(Error::Config(format!(
                "constraint layer width {i} must be below the constrained width {k}"
            )));
        }
        check_training("base", self.epochs, self.batch_size, self.learning_rate)
    }

    fn activations(&self) -> Vec<Activation> {
        let n = self.dims.len() - 1;
        (0..n)
            .map(|l| if l + 1 == n { Activation::Identity } else { Activation::Logistic })
            .collect()
    }
}

fn check_training(name: &str, epochs: usize, batch_size: usize, lr: f64) -> Result<()> {
    if epochs == 0 || batch_size == 0 {
        return Err(Error::Config(format!("{name}: epochs and batch_size must be positive")));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Config(format!("{name}: learning_rate must be positive and finite")));
    }
    Ok(())
}

/// Trained base network together with its extracted constraint matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseNetwork {
    pub mlp: Mlp,
    /// Full-data loss before training, then after each epoch.
    pub loss_history: Vec<f64>,
}

impl BaseNetwork {
    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.layers().len() < 3 {
            return Err(Error::Data("base network needs at least three layers".into()));
        }
        Ok(Self {
            mlp,
            loss_history: Vec::new(),
        })
    }

    /// Index of the layer whose outputs become the constrained targets.
    pub fn target_layer(&self) -> usize {
        self.mlp.layers().len() - 3
    }

    /// `fc3` weights as an `I x K` constraint matrix.
    pub fn a_matrix(&self) -> DMatrix<f64> {
        self.mlp.layers()[self.mlp.layers().len() - 2].weights.transpose()
    }

    pub fn constraints(&self) -> Result<ConstraintSet> {
        ConstraintSet::new(self.a_matrix(), None)
    }

    /// Widths of the constrained trunk: input up to the target layer.
    pub fn trunk_dims(&self) -> Vec<usize> {
        let dims = self.mlp.dims();
        dims[..=self.target_layer() + 1].to_vec()
    }
}

pub fn dataset_loss(mlp: &Mlp, samples: &[XorSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let h = mlp.predict(&s.input())?;
        total += bce_with_logits(&h, &DVector::from_element(1, s.target()))?.0;
    }
    Ok(total / samples.len() as f64)
}

/// Fraction of samples whose logit sign matches the label.
pub fn accuracy(mlp: &Mlp, samples: &[XorSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut hits = 0usize;
    for s in samples {
        let h = mlp.predict(&s.input())?[0];
        hits += usize::from((h > 0.0) == (s.label == 1));
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Mini-batch SGD on mean binary cross entropy. Fails if the loss leaves the
/// finite range, grows past [`DIVERGENCE_FACTOR`] times its start, ends above
/// its start, or the extracted constraint matrix is rank deficient.
pub fn train_base_xor(samples: &[XorSample], cfg: &BaseTrainConfig, seed: u64) -> Result<BaseNetwork> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut mlp = Mlp::glorot(&mut stream(seed, INIT_STREAM), &cfg.dims, &cfg.activations())?;
    let mut shuffle = stream(seed, SHUFFLE_STREAM);
    let initial = dataset_loss(&mlp, samples)?;
    let mut history = vec![initial];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros_like(&mlp);
            for &idx in batch {
                let s = &samples[idx];
                let (out, tape) = mlp.forward(&s.input())?;
                let (_, dout) = bce_with_logits(&out, &DVector::from_element(1, s.target()))?;
                grads.accumulate(&mlp.backward(&tape, &dout)?);
            }
            grads.scale(1.0 / batch.len() as f64);
            mlp.sgd_step(&grads, cfg.learning_rate)?;
        }
        let loss = if mlp.is_finite() { dataset_loss(&mlp, samples)? } else { f64::NAN };
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial {
            return Err(Error::TrainingDiverged { epoch, loss });
        }
        history.push(loss);
    }
    let last = history[history.len() - 1];
    if last >= initial {
        return Err(Error::TrainingDiverged {
            epoch: cfg.epochs,
            loss: last,
        });
    }
    let mut base = BaseNetwork::from_mlp(mlp)?;
    base.loss_history = history;
    base.constraints()?;
    Ok(base)
}

/// One training pattern for the constrained phase.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangeTarget {
    pub x: DVector<f64>,
    /// Base network `fc2` activations.
    pub y: DVector<f64>,
    /// `A y`.
    pub b: DVector<f64>,
}

pub fn make_lagrange_targets(base: &BaseNetwork, samples: &[XorSample]) -> Result<Vec<LagrangeTarget>> {
    targets_with_matrix(base, &base.a_matrix(), samples)
}

/// As [`make_lagrange_targets`] with `b = a y` for a supplied `a`.
pub fn targets_with_matrix(
    base: &BaseNetwork,
    a: &DMatrix<f64>,
    samples: &[XorSample],
) -> Result<Vec<LagrangeTarget>> {
    let layer = base.target_layer();
    check_dim("constraint matrix width", base.mlp.layers()[layer].output_dim(), a.ncols())?;
    samples
        .iter()
        .map(|s| {
            let x = s.input();
            let (_, tape) = base.mlp.forward(&x)?;
            let y = tape.layer_output(layer).expect("layer index within tape").clone();
            let b = a * &y;
            Ok(LagrangeTarget { x, y, b })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstrainedTrainConfig {
    pub family: SigmoidFamily,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Start every solve from the multipliers stored for that pattern.
    pub warm_start: bool,
    /// Upper bound on solver iterations for each pattern; unset means the
    /// solver's own `max_iters`.
    pub max_solver_iters_per_batch: Option<usize>,
}

impl Default for ConstrainedTrainConfig {
    fn default() -> Self {
        Self {
            family: SigmoidFamily::Logistic,
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.05,
            warm_start: true,
            max_solver_iters_per_batch: None,
        }
    }
}

impl ConstrainedTrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_training("constrained", self.epochs, self.batch_size, self.learning_rate)?;
        if self.max_solver_iters_per_batch == Some(0) {
            return Err(Error::Config("max_solver_iters_per_batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub mean_iters: f64,
    pub min_iters: usize,
    pub max_iters: usize,
    /// Mean of the dual loss shifted by the target's negative entropy.
    pub mean_loss: f64,
    pub mean_infeasibility: f64,
    pub max_infeasibility: f64,
    pub non_converged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    pub wall_clock_secs: f64,
}

/// Output of [`train_constrained`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedRun {
    pub summary: RunSummary,
    pub trunk: Mlp,
    /// Stored multipliers, one row per pattern.
    pub lambdas: DMatrix<f64>,
}

struct Outcome {
    lam: DVector<f64>,
    iterations: usize,
    infeasibility: f64,
    converged: bool,
    loss: f64,
    grads: Gradients,
}

fn solve_pattern(
    trunk: &Mlp,
    layer: &LagrangeLayer,
    target: &LagrangeTarget,
    lam0: &DVector<f64>,
    solver: &SolverConfig,
) -> Result<Outcome> {
    let (wx, tape) = trunk.forward(&target.x)?;
    let st = solve_layer(layer, &wx, &target.b, lam0, solver)?;
    let z = layer.predictor(&wx, &st.lam)?;
    let infeasibility = layer.constraints().infeasibility(&z, &target.b)?;
    let loss = layer.anchored_loss(&wx, &target.y, &target.b, &st.lam)?;
    let grads = trunk.backward(&tape, &(z - &target.y))?;
    Ok(Outcome {
        lam: st.lam,
        iterations: st.iterations,
        infeasibility,
        converged: st.converged,
        loss,
        grads,
    })
}

/// Worker pool sized by [`THREADS_ENV`] when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => return Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Trains a fresh trunk so that the Lagrange layer on top of it reproduces
/// the targets. `constraints` stays fixed throughout. Results depend only on
/// the inputs and `seed`, never on the worker count.
pub fn train_constrained(
    targets: &[LagrangeTarget],
    constraints: &ConstraintSet,
    trunk_dims: &[usize],
    cfg: &ConstrainedTrainConfig,
    solver: &SolverConfig,
    seed: u64,
) -> Result<ConstrainedRun> {
    cfg.validate()?;
    solver.validate()?;
    if targets.is_empty() {
        return Err(Error::Data("no training targets".into()));
    }
    if trunk_dims.len() < 2 {
        return Err(Error::Config("trunk needs at least one layer".into()));
    }
    let k = constraints.n_outputs();
    let n_lam = constraints.n_constraints();
    check_dim("trunk output width", k, trunk_dims[trunk_dims.len() - 1])?;
    let layer = LagrangeLayer::new(cfg.family, constraints.clone());
    for t in targets {
        check_dim("trunk input width", trunk_dims[0], t.x.len())?;
        check_dim("target width", k, t.y.len())?;
        check_dim("target right-hand side", n_lam, t.b.len())?;
        layer.check_target(&t.y)?;
    }

    let mut solver = *solver;
    if let Some(cap) = cfg.max_solver_iters_per_batch {
        solver.max_iters = solver.max_iters.min(cap);
    }
    let pool = thread_pool()?;
    let started = Instant::now();

    let n_layers = trunk_dims.len() - 1;
    let activations: Vec<Activation> = (0..n_layers)
        .map(|l| if l + 1 == n_layers { Activation::Identity } else { Activation::Logistic })
        .collect();
    let mut trunk = Mlp::glorot(&mut stream(seed, INIT_STREAM), trunk_dims, &activations)?;
    let mut shuffle = stream(seed, SHUFFLE_STREAM);
    let mut lambdas = vec![DVector::<f64>::zeros(n_lam); targets.len()];
    let zero = DVector::<f64>::zeros(n_lam);
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut iters = Vec::with_capacity(targets.len());
        let (mut loss_sum, mut infeas_sum, mut infeas_max) = (0.0, 0.0, 0.0f64);
        let mut non_converged = 0;
        for batch in order.chunks(cfg.batch_size) {
            let outcomes: Vec<Result<Outcome>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&idx| {
                        let lam0 = if cfg.warm_start { &lambdas[idx] } else { &zero };
                        solve_pattern(&trunk, &layer, &targets[idx], lam0, &solver)
                    })
                    .collect()
            });
            let mut grads = Gradients::zeros_like(&trunk);
            for (&idx, outcome) in batch.iter().zip(outcomes) {
                let o = outcome?;
                iters.push(o.iterations);
                loss_sum += o.loss;
                infeas_sum += o.infeasibility;
                infeas_max = infeas_max.max(o.infeasibility);
                non_converged += usize::from(!o.converged);
                grads.accumulate(&o.grads);
                lambdas[idx] = o.lam;
            }
            trunk.sgd_step(&grads, cfg.learning_rate)?;
            if !trunk.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    loss: f64::NAN,
                });
            }
        }
        let n = targets.len() as f64;
        let mean_loss = loss_sum / n;
        if !mean_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss: mean_loss });
        }
        epochs.push(EpochStats {
            epoch,
            mean_iters: iters.iter().sum::<usize>() as f64 / n,
            min_iters: iters.iter().copied().min().unwrap_or(0),
            max_iters: iters.iter().copied().max().unwrap_or(0),
            mean_loss,
            mean_infeasibility: infeas_sum / n,
            max_infeasibility: infeas_max,
            non_converged,
        });
    }

    let lambdas = DMatrix::from_fn(targets.len(), n_lam, |r, c| lambdas[r][c]);
    Ok(ConstrainedRun {
        summary: RunSummary {
            seed,
            epochs,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
        trunk,
        lambdas,
    })
}

/// One repetition: a fresh dataset drawn from `seed`, labelled by the base
/// network, then constrained training from a fresh trunk.
pub fn run_trial(
    base: &BaseNetwork,
    constraints: &ConstraintSet,
    n_samples: usize,
    cfg: &ConstrainedTrainConfig,
    solver: &SolverConfig,
    seed: u64,
) -> Result<ConstrainedRun> {
    let samples = XorDatasetSpec { n_samples, seed }.generate()?;
    let targets = targets_with_matrix(base, constraints.matrix(), &samples)?;
    train_constrained(&targets, constraints, &base.trunk_dims(), cfg, solver, seed)
}

/// Per-epoch statistics across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateEpoch {
    pub epoch: usize,
    pub runs: usize,
    /// Largest single-pattern iteration count over all runs.
    pub max_iters: usize,
    pub min_iters: usize,
    /// Mean of the per-run mean iteration counts.
    pub mean_iters: f64,
    pub max_mean_iters: f64,
    pub min_mean_iters: f64,
    pub mean_loss: f64,
    pub mean_infeasibility: f64,
}

pub fn aggregate_runs(summaries: &[RunSummary]) -> Result<Vec<AggregateEpoch>> {
    let first = summaries
        .first()
        .ok_or_else(|| Error::Data("no runs to aggregate".into()))?;
    let n_epochs = first.epochs.len();
    for s in summaries {
        if s.epochs.len() != n_epochs {
            return Err(Error::EpochMismatch {
                expected: n_epochs,
                found: s.epochs.len(),
            });
        }
    }
    let runs = summaries.len();
    let mean = |f: &dyn Fn(&EpochStats) -> f64, e: usize| {
        summaries.iter().map(|s| f(&s.epochs[e])).sum::<f64>() / runs as f64
    };
    Ok((0..n_epochs)
        .map(|e| {
            AggregateEpoch {
                epoch: first.epochs[e].epoch,
                runs,
                max_iters: summaries.iter().map(|s| s.epochs[e].max_iters).max().unwrap_or(0),
                min_iters: summaries.iter().map(|s| s.epochs[e].min_iters).min().unwrap_or(0),
                mean_iters: mean(&|s| s.mean_iters, e),
                max_mean_iters: summaries.iter().map(|s| s.epochs[e].mean_iters).fold(f64::MIN, f64::max),
                min_mean_iters: summaries.iter().map(|s| s.epochs[e].mean_iters).fold(f64::MAX, f64::min),
                mean_loss: mean(&|s| s.mean_loss, e),
                mean_infeasibility: mean(&|s| s.mean_infeasibility, e),
            }
        })
        .collect())
}
