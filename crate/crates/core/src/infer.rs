//! Cached inference: each block is skipped, replays a cached residual, or
//! runs at the router's chosen width.
//!
//! Per block and step the router runs first. With gate probability `p`:
//!
//! * `p < tau`: skip, `x` passes through.
//! * `tau <= p <= tau + delta` with a cached residual reused fewer than `K`
//!   times since it was computed: add the cached residual to the current `x`.
//! * otherwise: run the block with the sliced MLP, cache `x_next - x` and
//!   reset the reuse counter.
//!
//! The feature bank lives for a whole trajectory, across all steps.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::elastic::{router_forward, RouterOutput};
use crate::error::{Error, Result};
use crate::flow::{euler_update, initial_noise, step_time};
use crate::metrics::{csv_error, FlopModel};
use crate::model::{block_forward, block_modulation, output_head, timestep_embed, ElasticDit, MlpMode};
use crate::params::Graph;
use crate::tensor::Tensor;
use crate::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Skip threshold.
    pub tau: f64,
    /// Width of the reuse band above `tau`.
    pub delta_margin: f64,
    /// Reuses allowed per computed residual.
    pub max_reuse: usize,
    /// Euler steps.
    pub steps: usize,
    /// Run every block at full width, ignoring the routers' decisions.
    pub dense_override: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            delta_margin: 0.1,
            max_reuse: 5,
            steps: 16,
            dense_override: false,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Domain {
                what: "tau",
                value: self.tau,
            });
        }
        if !(self.delta_margin >= 0.0 && self.tau + self.delta_margin < 1.0) {
            return Err(Error::Domain {
                what: "delta_margin",
                value: self.delta_margin,
            });
        }
        if self.steps == 0 {
            return Err(Error::Domain {
                what: "steps",
                value: 0.0,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BlockAction {
    Skip,
    Reuse,
    /// Run the block at this MLP width ratio.
    Compute(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActionKind {
    Skip,
    Reuse,
    Compute,
}

impl BlockAction {
    pub fn kind(self) -> ActionKind {
        match self {
            BlockAction::Skip => ActionKind::Skip,
            BlockAction::Reuse => ActionKind::Reuse,
            BlockAction::Compute(_) => ActionKind::Compute,
        }
    }

    pub fn width(self) -> Option<f64> {
        match self {
            BlockAction::Compute(r) => Some(r),
            _ => None,
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionKind::Skip => "skip",
            ActionKind::Reuse => "reuse",
            ActionKind::Compute => "compute",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    /// Residual `x_next - x` from the last computed step.
    pub delta: Tensor,
    pub reuse_count: usize,
}

/// One optional cached residual per block.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    entries: Vec<Option<CacheEntry>>,
}

impl FeatureBank {
    pub fn new(n_blocks: usize) -> Self {
        Self {
            entries: vec![None; n_blocks],
        }
    }

    pub fn get(&self, block: usize) -> Option<&CacheEntry> {
        self.entries[block].as_ref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    /// Euler step index; 0 is the first step, at `t = 1`.
    pub step: usize,
    pub block: usize,
    pub p: f64,
    pub action: BlockAction,
    pub flops: u64,
}

pub fn decide_action(p: f64, width: f64, cache: Option<&CacheEntry>, cfg: &InferenceConfig) -> BlockAction {
    if p < cfg.tau {
        BlockAction::Skip
    } else if p <= cfg.tau + cfg.delta_margin && cache.is_some_and(|c| c.reuse_count < cfg.max_reuse) {
        BlockAction::Reuse
    } else {
        BlockAction::Compute(width)
    }
}

/// Source of routing decisions during inference.
pub trait Routing {
    fn route(
        &mut self,
        g: &mut Graph,
        model: &ElasticDit,
        step: usize,
        block: usize,
        x: Var,
        t_emb: Var,
    ) -> Result<RouterOutput>;
}

/// The model's own routers.
#[derive(Clone, Copy, Debug, Default)]
pub struct LearnedRouting;

impl Routing for LearnedRouting {
    fn route(
        &mut self,
        g: &mut Graph,
        model: &ElasticDit,
        _step: usize,
        block: usize,
        x: Var,
        t_emb: Var,
    ) -> Result<RouterOutput> {
        Ok(router_forward(g, model, x, t_emb, &model.routers[block])?.out)
    }
}

/// Gate probabilities read from a `steps x blocks` grid; always full width.
#[derive(Clone, Debug)]
pub struct ScriptedRouting {
    pub grid: Vec<Vec<f64>>,
}

impl Routing for ScriptedRouting {
    fn route(
        &mut self,
        _g: &mut Graph,
        model: &ElasticDit,
        step: usize,
        block: usize,
        _x: Var,
        _t_emb: Var,
    ) -> Result<RouterOutput> {
        let p = *self
            .grid
            .get(step)
            .and_then(|row| row.get(block))
            .ok_or_else(|| Error::contract(format!("no scripted probability for step {step}, block {block}")))?;
        Ok(RouterOutput::scripted(p, &model.widths, model.widths.full_index()))
    }
}

/// Keeps another routing's gate decisions but always picks the full width.
#[derive(Clone, Debug)]
pub struct FullWidth<R>(pub R);

impl<R: Routing> Routing for FullWidth<R> {
    fn route(
        &mut self,
        g: &mut Graph,
        model: &ElasticDit,
        step: usize,
        block: usize,
        x: Var,
        t_emb: Var,
    ) -> Result<RouterOutput> {
        let mut out = self.0.route(g, model, step, block, x, t_emb)?;
        out.width_index = model.widths.full_index();
        out.width_ratio = 1.0;
        Ok(out)
    }
}

/// Routes block `block` and applies its action, updating `bank`.
#[allow(clippy::too_many_arguments)]
pub fn block_step(
    g: &mut Graph,
    model: &ElasticDit,
    routing: &mut dyn Routing,
    bank: &mut FeatureBank,
    cfg: &InferenceConfig,
    flops: &FlopModel,
    step: usize,
    block: usize,
    x: Var,
    t_emb: Var,
) -> Result<(Var, TraceRecord)> {
    let route = routing.route(g, model, step, block, x, t_emb)?;
    let action = if cfg.dense_override {
        BlockAction::Compute(1.0)
    } else {
        decide_action(route.gate_prob, route.width_ratio, bank.get(block), cfg)
    };
    let next = match action {
        BlockAction::Skip => x,
        BlockAction::Reuse => {
            let entry = bank.entries[block]
                .as_mut()
                .ok_or_else(|| Error::contract(format!("reuse of block {block} with an empty cache")))?;
            entry.reuse_count += 1;
            let d = g.constant(entry.delta.clone());
            g.add(x, d)?
        }
        BlockAction::Compute(r) => {
            let w = &model.blocks[block];
            let m = block_modulation(g, t_emb, w)?;
            let next = block_forward(g, model, x, &m, w, MlpMode::Sliced(r))?;
            let delta = g.value(next).zip_map(g.value(x), |a, b| a - b);
            bank.entries[block] = Some(CacheEntry {
                delta,
                reuse_count: 0,
            });
            next
        }
    };
    let record = TraceRecord {
        step,
        block,
        p: route.gate_prob,
        action,
        flops: flops.action(action)?,
    };
    Ok((next, record))
}

#[derive(Clone, Debug)]
pub struct Denoised {
    pub sample: Tensor,
    pub trace: Vec<TraceRecord>,
}

/// Full sampling trajectory from the noise drawn for `seed`.
pub fn denoise_full(model: &ElasticDit, cfg: &InferenceConfig, seed: u64) -> Result<Denoised> {
    denoise_with(model, cfg, &mut LearnedRouting, initial_noise(&model.sample_shape(), seed))
}

pub fn denoise_with(
    model: &ElasticDit,
    cfg: &InferenceConfig,
    routing: &mut dyn Routing,
    noise: Tensor,
) -> Result<Denoised> {
    cfg.validate()?;
    model.check_input(&noise)?;
    let flops = FlopModel::new(&model.cfg, &model.widths);
    let mut bank = FeatureBank::new(model.blocks.len());
    let mut trace = Vec::with_capacity(cfg.steps * model.blocks.len());
    let mut x = noise;
    let dt = 1.0 / cfg.steps as f64;
    for s in 0..cfg.steps {
        let t = step_time(s, cfg.steps);
        let mut g = Graph::new(&model.params);
        let xv = g.constant(x.clone());
        let t_emb = timestep_embed(&mut g, model, t)?;
        let mut h = model.input.forward(&mut g, xv)?;
        for i in 0..model.blocks.len() {
            let (next, rec) = block_step(&mut g, model, routing, &mut bank, cfg, &flops, s, i, h, t_emb)?;
            h = next;
            trace.push(rec);
        }
        let v = output_head(&mut g, model, h)?;
        euler_update(&mut x, g.value(v), dt);
    }
    Ok(Denoised { sample: x, trace })
}

/// Replays the engine's control flow on a `steps x blocks` probability grid
/// using only a presence flag and a counter per block.
pub fn oracle_schedule(grid: &[Vec<f64>], tau: f64, delta: f64, max_reuse: usize) -> Vec<Vec<ActionKind>> {
    let n = grid.first().map_or(0, |r| r.len());
    let mut cached = vec![false; n];
    let mut count = vec![0usize; n];
    grid.iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(i, &p)| {
                    if p < tau {
                        return ActionKind::Skip;
                    }
                    if p <= tau + delta && cached[i] && count[i] < max_reuse {
                        count[i] += 1;
                        return ActionKind::Reuse;
                    }
                    cached[i] = true;
                    count[i] = 0;
                    ActionKind::Compute
                })
                .collect()
        })
        .collect()
}

/// Engine actions arranged as a `steps x blocks` grid.
pub fn action_grid(trace: &[TraceRecord], steps: usize, blocks: usize) -> Vec<Vec<ActionKind>> {
    let mut grid = vec![vec![ActionKind::Skip; blocks]; steps];
    for r in trace {
        grid[r.step][r.block] = r.action.kind();
    }
    grid
}

#[derive(Serialize)]
struct TraceRow {
    step: usize,
    block: usize,
    p: f64,
    action: String,
    width_ratio: Option<f64>,
    flops: u64,
}

/// `step,block,p,action,width_ratio,flops`; `width_ratio` is empty unless
/// the block was computed.
pub fn write_trace_csv<W: Write>(out: W, trace: &[TraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in trace {
        w.serialize(TraceRow {
            step: r.step,
            block: r.block,
            p: r.p,
            action: r.action.kind().to_string(),
            width_ratio: r.action.width(),
            flops: r.flops,
        })
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
