//! The alternating outer loop: train shared weights for N iterations under
//! the current sampling distribution, then refine the pruning vector with
//! M-sample gradient estimates, for K outer steps, recording a full trace.

use serde::{Deserialize, Serialize};

use crate::cost::{ConstraintSpec, CostModel, LatencyTable};
use crate::error::{Error, Result};
use crate::estimator::{
    estimate_gradient, sample_noises_with, EvaluatedSample, GaussianPolicy, LipschitzTracker,
    Schedule,
};
use crate::net::{evaluate_error, train_inner, Dataset, SgdHyper, SharedWeightStore};
use crate::rng::{DetRng, RngState};
use crate::space::{clamp, round_to_config, ArchitectureConfig, ArchitectureSpace, PruningVector};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Loss, resource cost and penalized error at one pruning vector.
#[derive(Debug, Clone, Copy)]
pub struct EvalPoint {
    pub loss: f64,
    pub cost: f64,
    pub error: f64,
}

/// Rounded architecture and its cost, for trace records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigCost {
    pub config: ArchitectureConfig,
    pub cost: f64,
}

/// Anything the outer loop can optimize over: supplies the penalized error
/// landscape, its own projection onto the feasible box, and (optionally)
/// trainable weights.
pub trait ErrorEvaluator {
    fn dim(&self) -> usize;

    /// Project an arbitrary vector onto the evaluator's feasible region.
    fn project(&self, v: &PruningVector) -> PruningVector;

    /// Train internal weights for one outer step; no-op for analytic landscapes.
    fn train(
        &mut self,
        _policy: &GaussianPolicy,
        _iterations: usize,
        _rng: &mut DetRng,
    ) -> Result<()> {
        Ok(())
    }

    /// Called once per vector update; stochastic evaluators refresh their
    /// evaluation subset here.
    fn begin_update(&mut self, _rng: &mut DetRng) {}

    fn evaluate(&mut self, v: &PruningVector) -> Result<EvalPoint>;

    /// Deterministic evaluation for trace records and cross-checks (full
    /// validation set instead of the per-update subset).
    fn evaluate_reference(&mut self, v: &PruningVector) -> Result<EvalPoint> {
        self.evaluate(v)
    }

    /// Rounded architecture for a vector, if the landscape has one.
    fn describe(&self, _v: &PruningVector) -> Result<Option<ConfigCost>> {
        Ok(None)
    }

    fn store(&self) -> Option<&SharedWeightStore> {
        None
    }
}

/// Outer-loop hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// K: outer iterations.
    pub outer_steps: usize,
    /// N: weight-training iterations per outer step.
    pub weight_iterations: usize,
    /// M: sampled configurations per vector update.
    pub samples: usize,
    pub vector_updates_per_outer: usize,
    pub sigma_schedule: Schedule,
    pub alpha_schedule: Schedule,
    /// Subtract the mean sample error before weighting noises.
    pub use_baseline: bool,
    /// Per-entry cap on |alpha * gradient| in one vector update; infinite by
    /// default. Keeps early penalty gradients from overshooting coarse
    /// rounding cells.
    pub max_step: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            outer_steps: 100,
            weight_iterations: 200,
            samples: 100,
            vector_updates_per_outer: 20,
            sigma_schedule: Schedule {
                initial: 0.0125,
                final_value: 0.0025,
                total_steps: 100,
            },
            alpha_schedule: Schedule {
                initial: 0.05,
                final_value: 0.0,
                total_steps: 100,
            },
            use_baseline: true,
            max_step: f64::INFINITY,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_steps < 1 || self.weight_iterations < 1 || self.samples < 1 {
            return Err(Error::InvalidArgument(
                "outer_steps, weight_iterations and samples must all be >= 1".into(),
            ));
        }
        if self.vector_updates_per_outer < 1 {
            return Err(Error::InvalidArgument(
                "vector_updates_per_outer must be >= 1".into(),
            ));
        }
        for s in [&self.sigma_schedule, &self.alpha_schedule] {
            if s.total_steps != self.outer_steps {
                return Err(Error::InvalidArgument(format!(
                    "schedule length {} must equal outer_steps {}",
                    s.total_steps, self.outer_steps
                )));
            }
        }
        if !(self.sigma_schedule.initial > 0.0) || !(self.sigma_schedule.final_value > 0.0) {
            return Err(Error::InvalidArgument("sigma schedule must stay > 0".into()));
        }
        if !(self.max_step > 0.0) {
            return Err(Error::InvalidArgument("max_step must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplePoint {
    pub error: f64,
    pub cost: f64,
}

/// One outer step of the run, serialized as one JSON line of the trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub schema_version: u32,
    pub outer_step: usize,
    pub mu: Vec<f64>,
    pub sigma: f64,
    pub alpha: f64,
    /// All sampled (penalized error, cost) pairs of this step, in draw order.
    pub samples: Vec<SamplePoint>,
    /// L2 norm of the last gradient estimate of the step.
    pub grad_norm: f64,
    /// Running Lipschitz lower bound.
    pub k_bound: f64,
    /// Reference evaluation at the post-update mean.
    pub mu_loss: f64,
    pub mu_cost: f64,
    pub mu_error: f64,
    pub config: Option<ArchitectureConfig>,
    pub config_cost: Option<f64>,
}

/// Side-channel for streaming traces and checkpoints out of a run.
pub trait RunHooks {
    fn on_record(&mut self, _record: &TraceRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(
        &mut self,
        _step: usize,
        _mu: &PruningVector,
        _rng: &RngState,
        _store: Option<&SharedWeightStore>,
    ) -> Result<()> {
        Ok(())
    }
}

pub struct NoHooks;

impl RunHooks for NoHooks {}

pub struct RunResult {
    pub mu: PruningVector,
    pub trace: Vec<TraceRecord>,
}

/// Run the alternating optimization from an all-ones (baseline) mean.
/// Each record is streamed through the hooks before the next step starts, so
/// an aborted run leaves a complete trace prefix behind.
pub fn run(
    cfg: &OptimizerConfig,
    evaluator: &mut dyn ErrorEvaluator,
    hooks: &mut dyn RunHooks,
) -> Result<RunResult> {
    cfg.validate()?;
    let dim = evaluator.dim();
    let mut rng = DetRng::new(cfg.seed, 0);
    let mut mu = evaluator.project(&PruningVector::all_ones(dim));
    let mut tracker = LipschitzTracker::new();
    let mut trace: Vec<TraceRecord> = Vec::with_capacity(cfg.outer_steps);

    for t in 0..cfg.outer_steps {
        let sigma = cfg.sigma_schedule.value(t)?;
        let alpha = cfg.alpha_schedule.value(t)?;
        let policy = GaussianPolicy::new(mu.clone(), sigma)?;
        evaluator.train(&policy, cfg.weight_iterations, &mut rng)?;

        let mut step_samples = Vec::with_capacity(cfg.samples * cfg.vector_updates_per_outer);
        let mut grad_norm = 0.0;
        for _ in 0..cfg.vector_updates_per_outer {
            evaluator.begin_update(&mut rng);
            let at_mu = evaluator.evaluate(&mu)?;
            let noises = sample_noises_with(dim, sigma, cfg.samples, &mut rng)?;
            let mut samples = Vec::with_capacity(cfg.samples);
            for noise in noises {
                let shifted = PruningVector::new(
                    mu.entries.iter().zip(&noise).map(|(m, n)| m + n).collect(),
                );
                let v = evaluator.project(&shifted);
                let p = evaluator.evaluate(&v)?;
                step_samples.push(SamplePoint {
                    error: p.error,
                    cost: p.cost,
                });
                samples.push(EvaluatedSample {
                    noise,
                    error: p.error,
                    cost: p.cost,
                    loss: p.loss,
                });
            }
            let grad = estimate_gradient(&samples, sigma, cfg.use_baseline)?;
            tracker.observe(&samples, at_mu.error);
            grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            let stepped = PruningVector::new(
                mu.entries
                    .iter()
                    .zip(&grad)
                    .map(|(m, g)| m - (alpha * g).clamp(-cfg.max_step, cfg.max_step))
                    .collect(),
            );
            mu = evaluator.project(&stepped);
        }

        let at_mu = evaluator.evaluate_reference(&mu)?;
        let described = evaluator.describe(&mu)?;
        let record = TraceRecord {
            schema_version: TRACE_SCHEMA_VERSION,
            outer_step: t,
            mu: mu.entries.clone(),
            sigma,
            alpha,
            samples: step_samples,
            grad_norm,
            k_bound: tracker.bound(),
            mu_loss: at_mu.loss,
            mu_cost: at_mu.cost,
            mu_error: at_mu.error,
            config: described.as_ref().map(|d| d.config.clone()),
            config_cost: described.as_ref().map(|d| d.cost),
        };
        hooks.on_record(&record)?;
        hooks.on_checkpoint(t, &mu, &rng.state(), evaluator.store())?;
        trace.push(record);
    }

    Ok(RunResult { mu, trace })
}

/// Quadratic distance to a preferred point plus a penalized linear cost:
/// `E(v) = ||v - v*||^2 + rho (a.v - target)^2`. Used as a closed-form oracle
/// for the outer loop.
#[derive(Debug, Clone)]
pub struct AnalyticQuadratic {
    pub v_star: Vec<f64>,
    pub a: Vec<f64>,
    pub target: f64,
    pub rho: f64,
    /// Projection floor of the feasible box `[lower, 1]^dim`.
    pub lower: f64,
}

impl AnalyticQuadratic {
    /// Unconstrained stationary point of the penalized objective, via the
    /// rank-one update: `a.v = (a.v* + rho T ||a||^2) / (1 + rho ||a||^2)`,
    /// then `v = v* + rho (T - a.v) a`.
    pub fn optimum(&self) -> Vec<f64> {
        let aa: f64 = self.a.iter().map(|x| x * x).sum();
        let av: f64 = self.a.iter().zip(&self.v_star).map(|(x, y)| x * y).sum();
        let g = (av + self.rho * self.target * aa) / (1.0 + self.rho * aa);
        self.v_star
            .iter()
            .zip(&self.a)
            .map(|(v, x)| v + self.rho * (self.target - g) * x)
            .collect()
    }
}

impl ErrorEvaluator for AnalyticQuadratic {
    fn dim(&self) -> usize {
        self.v_star.len()
    }

    fn project(&self, v: &PruningVector) -> PruningVector {
        PruningVector::new(
            v.entries
                .iter()
                .map(|x| x.clamp(self.lower, 1.0))
                .collect(),
        )
    }

    fn evaluate(&mut self, v: &PruningVector) -> Result<EvalPoint> {
        let loss: f64 = v
            .entries
            .iter()
            .zip(&self.v_star)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let cost: f64 = v.entries.iter().zip(&self.a).map(|(x, y)| x * y).sum();
        let d = cost - self.target;
        Ok(EvalPoint {
            loss,
            cost,
            error: loss + self.rho * d * d,
        })
    }
}

/// Affine landscape `E(v) = e0 + a.v`; its smoothed gradient is exactly `a`.
#[derive(Debug, Clone)]
pub struct AnalyticLinear {
    pub a: Vec<f64>,
    pub e0: f64,
}

impl ErrorEvaluator for AnalyticLinear {
    fn dim(&self) -> usize {
        self.a.len()
    }

    fn project(&self, v: &PruningVector) -> PruningVector {
        PruningVector::new(v.entries.iter().map(|x| x.clamp(0.0, 1.0)).collect())
    }

    fn evaluate(&mut self, v: &PruningVector) -> Result<EvalPoint> {
        let cost: f64 = v.entries.iter().zip(&self.a).map(|(x, y)| x * y).sum();
        Ok(EvalPoint {
            loss: self.e0,
            cost,
            error: self.e0 + cost,
        })
    }
}

/// The real landscape: penalized validation error of the weight-shared tiny
/// network, with the cost model supplying FLOPs or table latency.
pub struct SharedNetEvaluator {
    pub space: ArchitectureSpace,
    pub store: SharedWeightStore,
    pub cost_model: CostModel,
    pub constraint: ConstraintSpec,
    pub latency_table: Option<LatencyTable>,
    pub train_data: Dataset,
    pub val_data: Dataset,
    pub hyper: SgdHyper,
    pub batch_size: usize,
    pub eval_subset: usize,
    subset: Vec<usize>,
}

impl SharedNetEvaluator {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        space: ArchitectureSpace,
        store: SharedWeightStore,
        constraint: ConstraintSpec,
        latency_table: Option<LatencyTable>,
        train_data: Dataset,
        val_data: Dataset,
        hyper: SgdHyper,
        batch_size: usize,
        eval_subset: usize,
    ) -> Result<Self> {
        space.validate()?;
        constraint.validate()?;
        store.matches_space(&space)?;
        if batch_size < 1 || eval_subset < 1 {
            return Err(Error::InvalidArgument(
                "batch_size and eval_subset must be >= 1".into(),
            ));
        }
        let cost_model = CostModel::from_space(&space)?;
        let subset = (0..val_data.len().min(eval_subset)).collect();
        Ok(SharedNetEvaluator {
            space,
            store,
            cost_model,
            constraint,
            latency_table,
            train_data,
            val_data,
            hyper,
            batch_size,
            eval_subset,
            subset,
        })
    }

    pub fn subset_indices(&self) -> &[usize] {
        &self.subset
    }
}

impl ErrorEvaluator for SharedNetEvaluator {
    fn dim(&self) -> usize {
        self.space.dim()
    }

    fn project(&self, v: &PruningVector) -> PruningVector {
        clamp(v, &self.space)
    }

    fn train(
        &mut self,
        policy: &GaussianPolicy,
        iterations: usize,
        rng: &mut DetRng,
    ) -> Result<()> {
        train_inner(
            &mut self.store,
            &self.space,
            policy,
            &self.train_data,
            iterations,
            self.batch_size,
            &self.hyper,
            rng,
        )
    }

    fn begin_update(&mut self, rng: &mut DetRng) {
        self.subset = (0..self.eval_subset.min(self.val_data.len()))
            .map(|_| rng.next_below(self.val_data.len()))
            .collect();
    }

    fn evaluate(&mut self, v: &PruningVector) -> Result<EvalPoint> {
        let (loss, cost, error) = evaluate_error(
            &self.store,
            &self.space,
            v,
            &self.val_data,
            &self.subset,
            &self.constraint,
            &self.cost_model,
            self.latency_table.as_ref(),
        )?;
        Ok(EvalPoint { loss, cost, error })
    }

    fn evaluate_reference(&mut self, v: &PruningVector) -> Result<EvalPoint> {
        let all: Vec<usize> = (0..self.val_data.len()).collect();
        let (loss, cost, error) = evaluate_error(
            &self.store,
            &self.space,
            v,
            &self.val_data,
            &all,
            &self.constraint,
            &self.cost_model,
            self.latency_table.as_ref(),
        )?;
        Ok(EvalPoint { loss, cost, error })
    }

    fn describe(&self, v: &PruningVector) -> Result<Option<ConfigCost>> {
        let config = round_to_config(&clamp(v, &self.space), &self.space)?;
        let cost = self.cost_model.cost(
            &config,
            &self.space,
            &self.constraint,
            self.latency_table.as_ref(),
        )?;
        Ok(Some(ConfigCost { config, cost }))
    }

    fn store(&self) -> Option<&SharedWeightStore> {
        Some(&self.store)
    }
}
