//! Meta-training loop: per-task pipelines, the joint outer objective, the
//! windowed expansion criterion, continual training, and evaluation.
//!
//! Each meta-iteration samples a batch of tasks and builds one graph per
//! task. In HSML mode the pipeline is aggregate -> cluster -> gate -> gated
//! initialization -> inner adaptation -> query loss; MAML mode adapts the
//! shared initialization directly. Gradients of `query + xi * reconstruction`
//! are accumulated over the batch in task order and applied by the outer
//! optimizer to every learnable tensor.

use crate::aggregator::{self, AggregatorCfg, AggregatorKind};
use crate::autodiff::{Graph, NodeId};
use crate::cluster::{self, ClusterCfg, Structure};
use crate::error::{Error, Result};
use crate::gate;
use crate::learner::{self, LossForm, MlpArch};
use crate::params::{
    apply_update, clip_global_norm, global_norm, AdamState, BoundParams, OuterOpt, ParamStore,
};
use crate::rng::Rng;
use crate::taskgen::{self, FamilyKind, StreamSchedule, Task};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Derived-stream tags (see [`Rng::derive`]).
pub const STREAM_INIT: u64 = 1;
pub const STREAM_TASK: u64 = 2;
pub const STREAM_EXPAND: u64 = 3;
pub const STREAM_EVAL: u64 = 4;

pub const THETA0: &str = "theta0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Hsml,
    Maml,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub mode: Mode,
    pub arch: MlpArch,
    pub aggregator: AggregatorCfg,
    pub cluster: ClusterCfg,
    pub families: Vec<FamilyKind>,
    /// Support-set size n_tr.
    pub shots: usize,
    /// Query-set size n_te.
    pub query_size: usize,
    /// Inner step size alpha.
    pub inner_lr: f64,
    /// Outer step size beta.
    pub outer_lr: f64,
    pub meta_batch: usize,
    pub inner_steps: usize,
    /// Adaptation steps at meta-test time.
    pub test_inner_steps: usize,
    /// Reconstruction weight xi.
    pub recon_weight: f64,
    /// Expansion threshold mu: expand when new window avg > mu * old.
    pub expand_threshold: f64,
    /// Window length Q in meta-iterations.
    pub expand_window: u64,
    pub expansion_enabled: bool,
    /// Global-norm gradient clip; None disables.
    pub clip_norm: Option<f64>,
    pub outer_opt: OuterOpt,
    pub loss_form: LossForm,
    /// Detach inner gradients (first-order approximation).
    pub first_order: bool,
    /// Diagnostic: replace the gate output with an all-ones mask.
    pub gate_identity: bool,
    /// Number of permutations averaged when evaluating with the recurrent
    /// aggregator.
    pub eval_perms: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            mode: Mode::Hsml,
            arch: MlpArch::default(),
            aggregator: AggregatorCfg::default(),
            cluster: ClusterCfg::default(),
            families: FamilyKind::ALL.to_vec(),
            shots: 5,
            query_size: 100,
            inner_lr: 0.001,
            outer_lr: 0.001,
            meta_batch: 25,
            inner_steps: 5,
            test_inner_steps: 10,
            recon_weight: 0.01,
            expand_threshold: 1.25,
            expand_window: 1000,
            expansion_enabled: false,
            clip_norm: Some(10.0),
            outer_opt: OuterOpt::Adam,
            loss_form: LossForm::Mean,
            first_order: false,
            gate_identity: false,
            eval_perms: 5,
            seed: 0,
        }
    }
}

/// Disjoint-window loss monitor implementing the expansion criterion: every
/// Q recorded losses, compare the fresh window average against the previous
/// one and fire when it exceeds mu times the old value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionMonitor {
    pub window: u64,
    pub threshold: f64,
    pub window_sum: f64,
    pub window_count: u64,
    pub prev_avg: Option<f64>,
}

impl ExpansionMonitor {
    pub fn new(window: u64, threshold: f64) -> Self {
        assert!(window >= 1);
        ExpansionMonitor {
            window,
            threshold,
            window_sum: 0.0,
            window_count: 0,
            prev_avg: None,
        }
    }

    /// Records one per-iteration loss. At a window boundary returns the
    /// completed window's average and whether the criterion fired. The first
    /// window only establishes the baseline.
    pub fn record(&mut self, loss: f64) -> Option<(f64, bool)> {
        self.window_sum += loss;
        self.window_count += 1;
        if self.window_count < self.window {
            return None;
        }
        let avg = self.window_sum / self.window as f64;
        let fired = match self.prev_avg {
            Some(prev) => avg > self.threshold * prev,
            None => false,
        };
        self.prev_avg = Some(avg);
        self.window_sum = 0.0;
        self.window_count = 0;
        Some((avg, fired))
    }
}

/// Per-task graph outputs.
pub struct TaskNodes {
    pub query_loss: NodeId,
    pub recon_loss: Option<NodeId>,
    /// Per transition, per source cluster: assignment probability vectors.
    pub assignments: Vec<Vec<NodeId>>,
    pub theta_gated: Option<NodeId>,
    pub theta_adapted: NodeId,
}

#[derive(Clone, Debug, Default)]
pub struct StepMetrics {
    pub mean_query_loss: f64,
    pub mean_recon_loss: f64,
}

#[derive(Clone, Debug)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub mean_query_loss: f64,
    pub mean_recon_loss: f64,
    pub cluster_count: usize,
    /// Completed expansion window, if this iteration closed one.
    pub window: Option<(f64, bool)>,
    pub expanded: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskScore {
    pub family: String,
    pub mse: f64,
    pub assignment: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilyStat {
    pub family: String,
    pub n: usize,
    pub mean_mse: f64,
    /// 1.96 * sd / sqrt(n); absent with fewer than two samples.
    pub ci95: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub shots: usize,
    pub adapt_steps: usize,
    pub n_tasks: usize,
    pub seed: u64,
    pub overall: FamilyStat,
    pub per_family: Vec<FamilyStat>,
    pub tasks: Vec<TaskScore>,
}

/// Everything learnable plus progress and rng state; the unit that
/// checkpoints capture.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub cfg: TrainerConfig,
    pub structure: Structure,
    pub params: ParamStore,
    pub adam: AdamState,
    pub monitor: ExpansionMonitor,
    pub iteration: u64,
    pub task_rng: Rng,
    pub expand_rng: Rng,
}

impl TrainState {
    /// Fresh state: parameters drawn from the init stream in a fixed order
    /// (base learner, then aggregator, clustering, gate).
    pub fn new(cfg: TrainerConfig) -> Self {
        let mut init_rng = Rng::derive(cfg.seed, STREAM_INIT);
        let structure = Structure::from_cfg(&cfg.cluster);
        let mut params = ParamStore::new();
        params.insert(THETA0, learner::init_theta(&cfg.arch, &mut init_rng));
        if cfg.mode == Mode::Hsml {
            aggregator::init_params(&mut params, &cfg.aggregator, &mut init_rng);
            cluster::init_params(&mut params, &cfg.cluster, &structure, &mut init_rng);
            gate::init_params(
                &mut params,
                cfg.aggregator.repr_dim,
                cfg.arch.param_len(),
                &mut init_rng,
            );
        }
        let monitor = ExpansionMonitor::new(cfg.expand_window, cfg.expand_threshold);
        let task_rng = Rng::derive(cfg.seed, STREAM_TASK);
        let expand_rng = Rng::derive(cfg.seed, STREAM_EXPAND);
        TrainState {
            cfg,
            structure,
            params,
            adam: AdamState::default(),
            monitor,
            iteration: 0,
            task_rng,
            expand_rng,
        }
    }

    pub fn cluster_count(&self) -> usize {
        if self.cfg.mode == Mode::Hsml {
            self.structure.bottom_size()
        } else {
            0
        }
    }

    /// Builds the full per-task pipeline on `g`, differentiable in every
    /// bound parameter.
    pub fn task_step(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        task: &Task,
        perm: &[usize],
        inner_steps: usize,
    ) -> Result<TaskNodes> {
        let family = task.kind().name();
        self.task_step_inner(g, bound, task, perm, inner_steps)
            .map_err(|e| Error::TaskFailure {
                family,
                source: Box::new(e),
            })
    }

    fn task_step_inner(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        task: &Task,
        perm: &[usize],
        inner_steps: usize,
    ) -> Result<TaskNodes> {
        let cfg = &self.cfg;
        let theta0 = bound.get(THETA0)?;
        let second_order = !cfg.first_order;
        match cfg.mode {
            Mode::Maml => {
                let adapted = learner::adapt_to_dataset(
                    g,
                    theta0,
                    &task.support,
                    &cfg.arch,
                    cfg.loss_form,
                    cfg.inner_lr,
                    inner_steps,
                    second_order,
                )?;
                let query_loss =
                    learner::mse_loss(g, adapted, &task.query, &cfg.arch, cfg.loss_form)?;
                Ok(TaskNodes {
                    query_loss,
                    recon_loss: None,
                    assignments: Vec::new(),
                    theta_gated: None,
                    theta_adapted: adapted,
                })
            }
            Mode::Hsml => {
                let (task_repr, recon) =
                    aggregator::encode(g, bound, &cfg.aggregator, &task.support, perm)?;
                let (cluster_repr, assignments) =
                    cluster::forward(g, bound, &cfg.cluster, &self.structure, task_repr)?;
                let mask = if cfg.gate_identity {
                    g.leaf(Tensor::full(&[cfg.arch.param_len()], 1.0))
                } else {
                    gate::forward(g, bound, task_repr, cluster_repr)?
                };
                let theta_gated = gate::apply(g, theta0, mask)?;
                let adapted = learner::adapt_to_dataset(
                    g,
                    theta_gated,
                    &task.support,
                    &cfg.arch,
                    cfg.loss_form,
                    cfg.inner_lr,
                    inner_steps,
                    second_order,
                )?;
                let query_loss =
                    learner::mse_loss(g, adapted, &task.query, &cfg.arch, cfg.loss_form)?;
                Ok(TaskNodes {
                    query_loss,
                    recon_loss: Some(recon),
                    assignments,
                    theta_gated: Some(theta_gated),
                    theta_adapted: adapted,
                })
            }
        }
    }

    /// Per-task joint objective node: query loss plus the weighted
    /// reconstruction term (omitted entirely when the weight is zero, so a
    /// zero weight removes that gradient path exactly).
    fn total_loss(&self, g: &mut Graph, nodes: &TaskNodes) -> Result<NodeId> {
        match (nodes.recon_loss, self.cfg.recon_weight) {
            (Some(recon), w) if w != 0.0 => {
                let weighted = g.scalar_mul(recon, w)?;
                g.add(nodes.query_loss, weighted)
            }
            _ => Ok(nodes.query_loss),
        }
    }

    /// Sum of per-task joint objectives over a batch (the outer objective).
    pub fn objective_value(&self, batch: &[(Task, Vec<usize>)]) -> Result<f64> {
        let mut total = 0.0;
        for (task, perm) in batch {
            let mut g = Graph::new();
            let bound = BoundParams::bind_all(&mut g, &self.params);
            let nodes = self.task_step(&mut g, &bound, task, perm, self.cfg.inner_steps)?;
            let t = self.total_loss(&mut g, &nodes)?;
            total += g.eval(t)?.item();
        }
        Ok(total)
    }

    /// Accumulates meta-gradients of the summed objective over the batch, in
    /// task order, together with per-task loss values.
    pub fn accumulate_grads(
        &self,
        batch: &[(Task, Vec<usize>)],
    ) -> Result<(BTreeMap<String, Tensor>, StepMetrics)> {
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut query_sum = 0.0;
        let mut recon_sum = 0.0;
        for (task, perm) in batch {
            let mut g = Graph::new();
            let bound = BoundParams::bind_all(&mut g, &self.params);
            let nodes = self.task_step(&mut g, &bound, task, perm, self.cfg.inner_steps)?;
            let total = self.total_loss(&mut g, &nodes)?;
            query_sum += g.eval(nodes.query_loss)?.item();
            if let Some(r) = nodes.recon_loss {
                recon_sum += g.eval(r)?.item();
            }
            let names: Vec<String> = bound.iter().map(|(n, _)| n.clone()).collect();
            let ids: Vec<NodeId> = bound.iter().map(|(_, id)| *id).collect();
            let gs = g.grad(total, &ids)?;
            for (name, gid) in names.into_iter().zip(gs) {
                let gt = g.eval(gid)?;
                match grads.get_mut(&name) {
                    None => {
                        grads.insert(name, gt);
                    }
                    Some(acc) => {
                        let slot = acc.data_mut();
                        for (s, v) in slot.iter_mut().zip(gt.data()) {
                            *s += v;
                        }
                    }
                }
            }
        }
        let n = batch.len().max(1) as f64;
        Ok((
            grads,
            StepMetrics {
                mean_query_loss: query_sum / n,
                mean_recon_loss: recon_sum / n,
            },
        ))
    }

    /// One outer update on the batch: accumulate, check, clip, apply.
    pub fn meta_step(&mut self, batch: &[(Task, Vec<usize>)]) -> Result<StepMetrics> {
        let (mut grads, metrics) = self.accumulate_grads(batch)?;
        let norm = global_norm(&grads);
        if !norm.is_finite() {
            let param = grads
                .iter()
                .find(|(_, t)| !t.all_finite())
                .map(|(n, _)| n.clone())
                .unwrap_or_default();
            return Err(Error::NonFiniteMetaGradient { param, norm });
        }
        if let Some(clip) = self.cfg.clip_norm {
            clip_global_norm(&mut grads, clip);
        }
        apply_update(
            self.cfg.outer_opt,
            self.cfg.outer_lr,
            &mut self.params,
            &grads,
            &mut self.adam,
        )?;
        Ok(metrics)
    }

    /// Samples a meta-batch from the task stream: each task is followed by
    /// its feeding permutation, drawn in all modes so that different modes
    /// see identical task streams under the same seed.
    pub fn sample_batch(&mut self, families: &[FamilyKind]) -> Result<Vec<(Task, Vec<usize>)>> {
        let mut batch = Vec::with_capacity(self.cfg.meta_batch);
        for _ in 0..self.cfg.meta_batch {
            let task = taskgen::sample_task(
                &mut self.task_rng,
                families,
                self.cfg.shots,
                self.cfg.query_size,
            )?;
            let perm = self.task_rng.permutation(self.cfg.shots);
            batch.push((task, perm));
        }
        Ok(batch)
    }

    /// One full training iteration against the given family set: sample,
    /// update, record the loss window, and expand the bottom clustering
    /// level when the criterion fires.
    pub fn train_iteration(&mut self, families: &[FamilyKind]) -> Result<IterationMetrics> {
        let batch = self.sample_batch(families)?;
        let metrics = self.meta_step(&batch)?;
        let window = self.monitor.record(metrics.mean_query_loss);
        let mut expanded = false;
        if let Some((_, fired)) = window {
            if fired && self.cfg.expansion_enabled && self.cfg.mode == Mode::Hsml {
                cluster::expand(
                    &mut self.params,
                    &mut self.structure,
                    self.cfg.cluster.dim,
                    &mut self.expand_rng,
                );
                expanded = true;
            }
        }
        self.iteration += 1;
        Ok(IterationMetrics {
            iteration: self.iteration,
            mean_query_loss: metrics.mean_query_loss,
            mean_recon_loss: metrics.mean_recon_loss,
            cluster_count: self.cluster_count(),
            window,
            expanded,
        })
    }

    /// Continual training: the active family set follows the schedule.
    /// Returns per-iteration metrics via the sink.
    pub fn continual_train(
        &mut self,
        schedule: &StreamSchedule,
        iterations: u64,
        mut sink: impl FnMut(&IterationMetrics),
    ) -> Result<()> {
        while self.iteration < iterations {
            let families = schedule.active_families(self.iteration);
            let m = self.train_iteration(&families)?;
            sink(&m);
        }
        Ok(())
    }

    /// Evaluation-mode output for one task: adapt with the test-time step
    /// count and score the query set. With `grid`, also returns the gated
    /// initialization and dense predictions for analysis exports.
    pub fn eval_task(
        &self,
        task: &Task,
        rng: &mut Rng,
        grid: Option<&[f64]>,
    ) -> Result<EvalTaskOutput> {
        let cfg = &self.cfg;
        let mut g = Graph::new();
        let bound = BoundParams::bind_all(&mut g, &self.params);
        let theta0 = bound.get(THETA0)?;
        let (init, assignment, gated) = match cfg.mode {
            Mode::Maml => (theta0, Vec::new(), None),
            Mode::Hsml => {
                let n_perms = if cfg.aggregator.kind == AggregatorKind::Raa {
                    cfg.eval_perms.max(1)
                } else {
                    1
                };
                let perms: Vec<Vec<usize>> = (0..n_perms)
                    .map(|_| rng.permutation(task.support.len()))
                    .collect();
                let task_repr =
                    aggregator::encode_eval(&mut g, &bound, &cfg.aggregator, &task.support, &perms)?;
                let (cluster_repr, records) =
                    cluster::forward(&mut g, &bound, &cfg.cluster, &self.structure, task_repr)?;
                let mask = if cfg.gate_identity {
                    g.leaf(Tensor::full(&[cfg.arch.param_len()], 1.0))
                } else {
                    gate::forward(&mut g, &bound, task_repr, cluster_repr)?
                };
                let gated = gate::apply(&mut g, theta0, mask)?;
                let assignment = g.eval(records[0][0])?.data().to_vec();
                (gated, assignment, Some(gated))
            }
        };
        let adapted = learner::adapt_to_dataset(
            &mut g,
            init,
            &task.support,
            &cfg.arch,
            cfg.loss_form,
            cfg.inner_lr,
            cfg.test_inner_steps,
            false,
        )?;
        // Report metric: mean squared error over the query set.
        let mse_node = learner::mse_loss(&mut g, adapted, &task.query, &cfg.arch, LossForm::Mean)?;
        let mse = g.eval(mse_node)?.item();
        let extras = match grid {
            None => None,
            Some(xs) => {
                let x = g.leaf(Tensor::matrix(xs.len(), 1, xs.to_vec()));
                let pred = learner::forward(&mut g, adapted, x, &cfg.arch)?;
                let preds = g.eval(pred)?.data().to_vec();
                let gated_init = match gated {
                    Some(id) => g.eval(id)?.data().to_vec(),
                    None => g.eval(theta0)?.data().to_vec(),
                };
                Some((gated_init, preds))
            }
        };
        Ok(EvalTaskOutput {
            family: task.kind().name().to_string(),
            mse,
            assignment,
            extras,
        })
    }

    /// Samples `n_tasks` evaluation tasks (family uniform over `families`),
    /// scores each, and aggregates per-family and overall statistics.
    pub fn evaluate(
        &self,
        families: &[FamilyKind],
        n_tasks: usize,
        shots: usize,
        seed: u64,
    ) -> Result<EvalReport> {
        let mut rng = Rng::derive(seed, STREAM_EVAL);
        let mut scores = Vec::with_capacity(n_tasks);
        for _ in 0..n_tasks {
            let task = taskgen::sample_task(&mut rng, families, shots, self.cfg.query_size)?;
            let out = self.eval_task(&task, &mut rng, None)?;
            scores.push(TaskScore {
                family: out.family,
                mse: out.mse,
                assignment: out.assignment,
            });
        }
        Ok(report_from_scores(
            scores,
            shots,
            self.cfg.test_inner_steps,
            seed,
        ))
    }
}

pub struct EvalTaskOutput {
    pub family: String,
    pub mse: f64,
    pub assignment: Vec<f64>,
    /// (gated_init, grid predictions) when a grid was requested.
    pub extras: Option<(Vec<f64>, Vec<f64>)>,
}

fn stat_of(family: &str, mses: &[f64]) -> FamilyStat {
    let n = mses.len();
    let mean = mses.iter().sum::<f64>() / n.max(1) as f64;
    let ci95 = if n >= 2 {
        let var = mses.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        Some(1.96 * var.sqrt() / (n as f64).sqrt())
    } else {
        None
    };
    FamilyStat {
        family: family.to_string(),
        n,
        mean_mse: mean,
        ci95,
    }
}

/// Aggregates per-task scores into the evaluation report.
pub fn report_from_scores(
    scores: Vec<TaskScore>,
    shots: usize,
    adapt_steps: usize,
    seed: u64,
) -> EvalReport {
    let all: Vec<f64> = scores.iter().map(|s| s.mse).collect();
    let mut per_family = Vec::new();
    for kind in FamilyKind::ALL {
        let fam: Vec<f64> = scores
            .iter()
            .filter(|s| s.family == kind.name())
            .map(|s| s.mse)
            .collect();
        if !fam.is_empty() {
            per_family.push(stat_of(kind.name(), &fam));
        }
    }
    EvalReport {
        shots,
        adapt_steps,
        n_tasks: scores.len(),
        seed,
        overall: stat_of("all", &all),
        per_family,
        tasks: scores,
    }
}
