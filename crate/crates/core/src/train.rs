//! Two-phase training on synthetic flow-matching data.
//!
//! Phase 1 trains the dense backbone alone on the flow-matching loss while
//! the routers stay at their initialization. Phase 2 trains everything on
//! the combined quality and efficiency objective.

use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::elastic::{
    decision_signature, forward_train, gating_loss, init_routers_random, masked_mean_width, total_loss,
    width_loss, ElasticConfig, RouterOutput,
};
use crate::error::{Error, Result};
use crate::flow::{fm_loss, trajectory_point, FlowSample, SynthConfig, SyntheticData};
use crate::gradcheck::{grad_check, GradCheckReport, Probe};
use crate::flow::initial_noise;
use crate::infer::{denoise_with, BlockAction, FullWidth, InferenceConfig, LearnedRouting, TraceRecord};
use crate::metrics::{energy_distance, flop_reduction, trace_summary, FlopModel, TraceSummary};
use crate::model::{model_forward_dense, DiTConfig, ElasticDit};
use crate::params::{flatten, Graph, ParamGroup, ParamStore};
use crate::tape::{ReverseFault, Tape};
use crate::tensor::Tensor;
use crate::Var;

const HELD_OUT_STREAM: u64 = 0x6865_6c64_6f75_7400;
const SPOT_CHECK_STREAM: u64 = 0x7370_6f74_6368_6b00;
const ROUTER_INIT_STREAM: u64 = 0x726f_7574_6572_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterInit {
    /// Every gate open at full width.
    FullCapacity,
    /// Gate and width biases drawn from `N(0, 1)`.
    RandomBias,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total optimizer steps, both phases.
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Share of `steps` spent in the dense warm-up.
    pub warmup_fraction: f64,
    pub adam: AdamConfig,
    pub elastic: ElasticConfig,
    pub model: DiTConfig,
    pub data: SynthConfig,
    pub router_init: RouterInit,
    pub eval_every: usize,
    /// Size of the fixed held-out batch used for snapshots.
    pub eval_batch: usize,
    pub seed: u64,
    /// Finite-difference check of five gradient coordinates on the first
    /// joint-training batch.
    pub spot_check: bool,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4300,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_fraction: 0.3,
            adam: AdamConfig::default(),
            elastic: ElasticConfig::default(),
            model: DiTConfig::default(),
            data: SynthConfig::default(),
            router_init: RouterInit::FullCapacity,
            eval_every: 100,
            eval_batch: 64,
            seed: 0,
            spot_check: true,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Domain { what: "steps", value: 0.0 });
        }
        if self.batch_size == 0 {
            return Err(Error::Domain { what: "batch_size", value: 0.0 });
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain { what: "learning_rate", value: self.learning_rate });
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Domain { what: "warmup_fraction", value: self.warmup_fraction });
        }
        let a = &self.adam;
        for (what, v) in [("beta1", a.beta1), ("beta2", a.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Domain { what, value: v });
            }
        }
        if a.eps.is_nan() || a.eps <= 0.0 {
            return Err(Error::Domain { what: "eps", value: a.eps });
        }
        if a.grad_clip.is_nan() || a.grad_clip < 0.0 {
            return Err(Error::Domain { what: "grad_clip", value: a.grad_clip });
        }
        if self.eval_every == 0 {
            return Err(Error::Domain { what: "eval_every", value: 0.0 });
        }
        if self.eval_batch == 0 {
            return Err(Error::Domain { what: "eval_batch", value: 0.0 });
        }
        self.elastic.validate()?;
        self.model.validate()?;
        self.data.validate()?;
        if [self.data.tokens, self.data.dim] != [self.model.tokens, self.model.data_dim] {
            return Err(Error::shape(
                "synthetic data vs model input",
                &[self.data.tokens, self.data.dim],
                &[self.model.tokens, self.model.data_dim],
            ));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.steps as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSnapshot {
    pub step: usize,
    pub perf: f64,
    pub gating: f64,
    pub width: f64,
    pub p_bar: f64,
    /// `None` when every block of every held-out sample is skipped.
    pub r_bar: Option<f64>,
    /// Dense FLOPs over routed FLOPs implied by the held-out routing
    /// decisions, without feature reuse.
    pub flop_ratio: f64,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            cfg,
            lr,
            m: zeros.clone(),
            v: zeros,
            t: vec![0; params.len()],
        }
    }

    /// Clips `grads` of the updated parameters to the global norm limit and
    /// applies one step to every parameter in `groups`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &mut [Tensor], groups: &[ParamGroup]) -> Result<()> {
        let ids: Vec<_> = params
            .iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(id, _)| id)
            .collect();
        let norm = ids
            .iter()
            .map(|id| grads[id.index()].as_slice().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient norm" });
        }
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        for id in ids {
            let i = id.index();
            self.t[i] += 1;
            let c1 = 1.0 - b1.powi(self.t[i] as i32);
            let c2 = 1.0 - b2.powi(self.t[i] as i32);
            let g = grads[i].as_mut_slice();
            let w = params.get_mut(id).as_mut_slice();
            for k in 0..w.len() {
                let gk = g[k] * clip;
                self.m[i][k] = b1 * self.m[i][k] + (1.0 - b1) * gk;
                self.v[i][k] = b2 * self.v[i][k] + (1.0 - b2) * gk * gk;
                let mh = self.m[i][k] / c1;
                let vh = self.v[i][k] / c2;
                w[k] -= self.lr * mh / (vh.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

/// Batch-averaged loss terms and the routing of every sample.
pub struct BatchObjective {
    pub total: Var,
    pub perf: f64,
    pub gating: f64,
    pub width: f64,
    pub routing: Vec<Vec<RouterOutput>>,
}

fn name_term(term: &'static str, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { term, step },
        other => other,
    }
}

fn check_term(term: &'static str, value: f64, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { term, step })
    }
}

/// Mean over the batch of `perf + lambda * (gating + width)`, each term
/// computed per sample.
pub fn elastic_objective(
    g: &mut Graph,
    model: &ElasticDit,
    batch: &[FlowSample],
    ecfg: &ElasticConfig,
    step: usize,
) -> Result<BatchObjective> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut totals = Vec::with_capacity(batch.len());
    let (mut perf_sum, mut gating_sum, mut width_sum) = (0.0, 0.0, 0.0);
    let mut routing = Vec::with_capacity(batch.len());
    for s in batch {
        let xt = g.constant(trajectory_point(s)?);
        let x0 = g.constant(s.x0.clone());
        let x1 = g.constant(s.x1.clone());
        let f = forward_train(g, model, xt, s.t, ecfg.tau, false).map_err(name_term("perf", step))?;
        let perf = fm_loss(g, f.velocity, x0, x1).map_err(name_term("perf", step))?;
        let probs: Vec<Var> = f.routed.iter().map(|r| r.vars.gate_prob).collect();
        let gating = gating_loss(g, &probs, ecfg.rho_g).map_err(name_term("gating", step))?;
        let width = width_loss(g, &f.routed, ecfg.tau, ecfg.rho_w).map_err(name_term("width", step))?;
        perf_sum += check_term("perf", g.value(perf).item(), step)?;
        gating_sum += check_term("gating", g.value(gating).item(), step)?;
        width_sum += check_term("width", g.value(width).item(), step)?;
        totals.push(total_loss(g, perf, gating, width, ecfg.lambda).map_err(name_term("total", step))?);
        routing.push(f.routed.into_iter().map(|r| r.out).collect());
    }
    let total = mean_vars(g, &totals).map_err(name_term("total", step))?;
    let n = batch.len() as f64;
    Ok(BatchObjective {
        total,
        perf: perf_sum / n,
        gating: gating_sum / n,
        width: width_sum / n,
        routing,
    })
}

/// Mean flow-matching loss of the dense backbone.
pub fn dense_objective(g: &mut Graph, model: &ElasticDit, batch: &[FlowSample], step: usize) -> Result<Var> {
    let mut losses = Vec::with_capacity(batch.len());
    for s in batch {
        let xt = g.constant(trajectory_point(s)?);
        let x0 = g.constant(s.x0.clone());
        let x1 = g.constant(s.x1.clone());
        let v = model_forward_dense(g, model, xt, s.t).map_err(name_term("perf", step))?;
        losses.push(fm_loss(g, v, x0, x1).map_err(name_term("perf", step))?);
    }
    mean_vars(g, &losses).map_err(name_term("perf", step))
}

fn mean_vars(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    g.scale(acc, 1.0 / xs.len() as f64)
}

/// Loss terms and routing statistics of `model` on a fixed batch; no
/// gradients.
pub fn snapshot(model: &ElasticDit, batch: &[FlowSample], ecfg: &ElasticConfig, step: usize) -> Result<TrainSnapshot> {
    let mut g = Graph::new(&model.params);
    let obj = elastic_objective(&mut g, model, batch, ecfg, step)?;
    routing_snapshot(model, step, obj.perf, obj.gating, obj.width, &obj.routing, ecfg.tau)
}

fn routing_snapshot(
    model: &ElasticDit,
    step: usize,
    perf: f64,
    gating: f64,
    width: f64,
    routing: &[Vec<RouterOutput>],
    tau: f64,
) -> Result<TrainSnapshot> {
    let flops = FlopModel::new(&model.cfg, &model.widths);
    let n_p: usize = routing.iter().map(|r| r.len()).sum();
    let p_bar = routing.iter().flatten().map(|o| o.gate_prob).sum::<f64>() / n_p as f64;
    let widths: Vec<f64> = routing.iter().filter_map(|r| masked_mean_width(r, tau)).collect();
    let r_bar = (!widths.is_empty()).then(|| widths.iter().sum::<f64>() / widths.len() as f64);
    let mut trace = Vec::with_capacity(n_p);
    for outs in routing {
        for (block, o) in outs.iter().enumerate() {
            let action = if o.gate_prob < tau {
                BlockAction::Skip
            } else {
                BlockAction::Compute(o.width_ratio)
            };
            trace.push(TraceRecord {
                step: 0,
                block,
                p: o.gate_prob,
                action,
                flops: flops.action(action)?,
            });
        }
    }
    Ok(TrainSnapshot {
        step,
        perf,
        gating,
        width,
        p_bar,
        r_bar,
        flop_ratio: flop_reduction(&trace, &flops)?,
    })
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub model: ElasticDit,
    pub snapshots: Vec<TrainSnapshot>,
    pub held_out: Vec<FlowSample>,
    pub spot_check: Option<GradCheckReport>,
}

/// Runs both phases; `on_snapshot` sees every snapshot as it is taken.
pub fn train(cfg: &TrainConfig, mut on_snapshot: impl FnMut(&TrainSnapshot) -> Result<()>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = ElasticDit::new(cfg.model.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if cfg.router_init == RouterInit::RandomBias {
        // A separate stream keeps the training batches identical across inits.
        init_routers_random(&mut model, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ ROUTER_INIT_STREAM));
    }
    let data = SyntheticData::new(cfg.data.clone())?;
    let held_out = data.gen_batch(cfg.eval_batch, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ HELD_OUT_STREAM))?;
    let mut adam = Adam::new(&model.params, cfg.learning_rate, cfg.adam.clone());
    let warmup = cfg.warmup_steps();
    let mut snapshots = Vec::new();
    let mut spot = None;

    for step in 1..=cfg.steps {
        let batch = data.gen_batch(cfg.batch_size, &mut rng)?;
        let joint = step > warmup;
        let mut grads = {
            let mut g = Graph::new(&model.params);
            let loss = if joint {
                elastic_objective(&mut g, &model, &batch, &cfg.elastic, step)?.total
            } else {
                dense_objective(&mut g, &model, &batch, step)?
            };
            check_term(if joint { "total" } else { "perf" }, g.value(loss).item(), step)?;
            let grads = g.backward(loss).map_err(name_term("gradient", step))?;
            g.param_grads(&grads)
        };
        if joint && cfg.spot_check && spot.is_none() {
            spot = Some(spot_check(&model, &batch, &cfg.elastic, cfg.seed ^ SPOT_CHECK_STREAM, 5)?);
        }
        let groups: &[ParamGroup] = if joint {
            &[ParamGroup::Backbone, ParamGroup::Router]
        } else {
            &[ParamGroup::Backbone]
        };
        adam.step(&mut model.params, &mut grads, groups)
            .map_err(name_term("gradient", step))?;

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let snap = snapshot(&model, &held_out, &cfg.elastic, step)?;
            on_snapshot(&snap)?;
            snapshots.push(snap);
        }
    }
    if let Some(path) = &cfg.checkpoint {
        checkpoint::save(&model, path)?;
    }
    Ok(TrainOutcome {
        model,
        snapshots,
        held_out,
        spot_check: spot,
    })
}

/// Mean elastic objective of a batch with the gate's straight-through path
/// cut, with its flattened gradient and routing signature.
pub fn exact_objective(
    model: &ElasticDit,
    batch: &[FlowSample],
    ecfg: &ElasticConfig,
    fault: Option<ReverseFault>,
) -> Result<(f64, Vec<f64>, Vec<u32>)> {
    let mut tape = Tape::without_ste_surrogate();
    if let Some(f) = fault {
        tape.inject_fault(f);
    }
    let mut g = Graph::with_tape(&model.params, tape);
    let obj = elastic_objective(&mut g, model, batch, ecfg, 0)?;
    let grads = g.backward(obj.total)?;
    let flat = flatten(&g.param_grads(&grads));
    let decisions = obj.routing.iter().flat_map(|r| decision_signature(r, ecfg.tau)).collect();
    Ok((g.value(obj.total).item(), flat, decisions))
}

/// Central-difference check of `coords` random coordinates of the batch
/// objective's gradient.
///
/// The hard gate has zero derivative almost everywhere; the analytic side
/// is taken with the straight-through path cut so both sides differentiate
/// the same function, and coordinates whose perturbation flips a gate or
/// width decision are excluded.
pub fn spot_check(
    model: &ElasticDit,
    batch: &[FlowSample],
    ecfg: &ElasticConfig,
    seed: u64,
    coords: usize,
) -> Result<GradCheckReport> {
    let (_, analytic, _) = exact_objective(model, batch, ecfg, None)?;
    let params = model.params.to_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = (0..coords).map(|_| rng.random_range(0..params.len())).collect();
    let mut probe_model = model.clone();
    let f = |flat: &[f64]| -> Result<Probe> {
        probe_model.params.load_flat(flat)?;
        let mut g = Graph::new(&probe_model.params);
        let obj = elastic_objective(&mut g, &probe_model, batch, ecfg, 0)?;
        Ok(Probe {
            value: g.value(obj.total).item(),
            decisions: obj.routing.iter().flat_map(|r| decision_signature(r, ecfg.tau)).collect(),
        })
    };
    grad_check(f, &params, &analytic, &picks, &[], 1e-6)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub seeds: Vec<u64>,
    /// Compared coordinates required per seed.
    pub coords: usize,
    pub batch_size: usize,
    pub step: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            coords: 24,
            batch_size: 4,
            step: 1e-6,
        }
    }
}

/// Full-model check of the batch objective's gradient against central
/// differences, for a freshly initialized model per seed.
///
/// Router biases are randomized so that both open and closed gates and
/// every width occur. Coordinates are drawn uniformly over all parameters
/// until `coords` of them have been compared; draws whose perturbation
/// flips a routing decision do not count.
pub fn full_model_grad_check(
    model_cfg: &DiTConfig,
    data_cfg: &SynthConfig,
    ecfg: &ElasticConfig,
    check: &GradCheckConfig,
    fault: Option<ReverseFault>,
) -> Result<GradCheckReport> {
    let data = SyntheticData::new(data_cfg.clone())?;
    let mut report = GradCheckReport::default();
    for &seed in &check.seeds {
        let mut model = ElasticDit::new(model_cfg.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPOT_CHECK_STREAM);
        init_routers_random(&mut model, &mut rng);
        let batch = data.gen_batch(check.batch_size, &mut rng)?;
        let (_, analytic, _) = exact_objective(&model, &batch, ecfg, fault)?;
        let params = model.params.to_flat();
        let mut probe_model = model.clone();
        let mut f = |flat: &[f64]| -> Result<Probe> {
            probe_model.params.load_flat(flat)?;
            let mut g = Graph::new(&probe_model.params);
            let obj = elastic_objective(&mut g, &probe_model, &batch, ecfg, 0)?;
            Ok(Probe {
                value: g.value(obj.total).item(),
                decisions: obj.routing.iter().flat_map(|r| decision_signature(r, ecfg.tau)).collect(),
            })
        };
        let mut seed_report = GradCheckReport::default();
        let mut attempts = 0;
        while seed_report.checked < check.coords && attempts < 8 * check.coords {
            attempts += 1;
            let c = rng.random_range(0..params.len());
            seed_report.merge(grad_check(&mut f, &params, &analytic, &[c], &[], check.step)?);
        }
        report.merge(seed_report);
    }
    Ok(report)
}

/// Sampling-based evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub inference: InferenceConfig,
    pub trajectories: usize,
    pub seed: u64,
    /// Ignore the routers' width choices.
    pub full_width: bool,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub samples: Vec<Tensor>,
    pub trace: Vec<TraceRecord>,
    pub summary: TraceSummary,
    pub energy_distance: f64,
    pub flop_reduction: f64,
    /// Mean gate probability over the whole trace.
    pub p_bar: f64,
}

/// Samples `trajectories` trajectories with the cached engine and compares
/// them with as many fresh draws from `data`. Trajectories run on separate
/// threads; results are independent of the thread count.
pub fn evaluate(model: &ElasticDit, data: &SyntheticData, cfg: &EvalConfig) -> Result<Evaluation> {
    if cfg.trajectories == 0 {
        return Err(Error::Domain { what: "trajectories", value: 0.0 });
    }
    cfg.inference.validate()?;
    let seeds: Vec<u64> = (0..cfg.trajectories as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len());
    let chunk = seeds.len().div_ceil(workers);
    let runs: Vec<Result<Vec<_>>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|&seed| {
                            let noise = initial_noise(&model.sample_shape(), seed);
                            if cfg.full_width {
                                denoise_with(model, &cfg.inference, &mut FullWidth(LearnedRouting), noise)
                            } else {
                                denoise_with(model, &cfg.inference, &mut LearnedRouting, noise)
                            }
                        })
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sampling thread panicked")).collect()
    });
    let mut samples = Vec::with_capacity(seeds.len());
    let mut trace = Vec::new();
    for run in runs {
        for d in run? {
            samples.push(d.sample);
            trace.extend(d.trace);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ HELD_OUT_STREAM);
    let reference: Vec<Tensor> = (0..cfg.trajectories).map(|_| data.sample_data(&mut rng)).collect();
    let flops = FlopModel::new(&model.cfg, &model.widths);
    Ok(Evaluation {
        energy_distance: energy_distance(&samples, &reference)?,
        flop_reduction: flop_reduction(&trace, &flops)?,
        summary: trace_summary(&trace)?,
        p_bar: trace.iter().map(|r| r.p).sum::<f64>() / trace.len() as f64,
        samples,
        trace,
    })
}

/// One JSON object per line.
pub fn write_snapshot<W: Write>(mut out: W, snap: &TrainSnapshot) -> Result<()> {
    serde_json::to_writer(&mut out, snap)?;
    out.write_all(b"\n")?;
    Ok(())
}
