//! FLOP accounting, sample-quality distance and router trace statistics.

use std::io::Write;

use serde::Serialize;

use crate::elastic::WidthMenu;
use crate::error::{Error, Result};
use crate::infer::{BlockAction, TraceRecord};
use crate::model::DiTConfig;
use crate::tensor::Tensor;

/// Per-block FLOP costs. A multiply-add counts as two FLOPs; normalization,
/// activations, modulation and the embedding and head projections are not
/// counted.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopModel {
    pub tokens: u64,
    pub dim: u64,
    pub hidden: u64,
    pub router_hidden: u64,
    pub widths: WidthMenu,
}

impl FlopModel {
    pub fn new(cfg: &DiTConfig, widths: &WidthMenu) -> Self {
        Self {
            tokens: cfg.tokens as u64,
            dim: cfg.dim as u64,
            hidden: cfg.hidden() as u64,
            router_hidden: cfg.router_hidden as u64,
            widths: widths.clone(),
        }
    }

    /// Q/K/V/O projections plus scores and weighted values over all heads.
    pub fn attention(&self) -> u64 {
        let (l, d) = (self.tokens, self.dim);
        8 * l * d * d + 4 * l * l * d
    }

    pub fn mlp(&self, ratio: f64) -> Result<u64> {
        let c = self.widths.channels(ratio, self.hidden as usize)? as u64;
        Ok(4 * self.tokens * self.dim * c)
    }

    /// Projection to the router hidden size plus the gate and width heads.
    pub fn router(&self) -> u64 {
        let (l, d, hr) = (self.tokens, self.dim, self.router_hidden);
        2 * l * d * hr + 2 * l * hr * (1 + self.widths.len() as u64)
    }

    /// Adding a cached residual.
    pub fn residual_add(&self) -> u64 {
        self.tokens * self.dim
    }

    pub fn action(&self, action: BlockAction) -> Result<u64> {
        Ok(match action {
            BlockAction::Skip => self.router(),
            BlockAction::Reuse => self.router() + self.residual_add(),
            BlockAction::Compute(r) => self.router() + self.attention() + self.mlp(r)?,
        })
    }

    /// Cost of one block with the gate open at full width.
    pub fn dense_block(&self) -> u64 {
        self.router() + self.attention() + 4 * self.tokens * self.dim * self.hidden
    }
}

/// Dense-equivalent FLOPs over the trace's (step, block) grid divided by the
/// trace's measured FLOPs.
pub fn flop_reduction(trace: &[TraceRecord], flops: &FlopModel) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::contract("FLOP reduction of an empty trace"));
    }
    let dense = trace.len() as u64 * flops.dense_block();
    let used: u64 = trace.iter().map(|r| r.flops).sum();
    Ok(dense as f64 / used as f64)
}

/// Energy distance `2 E|a - b| - E|a - a'| - E|b - b'|` between two sample
/// sets, each sample flattened. Expectations run over all ordered pairs,
/// diagonal included, so identical multisets give exactly zero.
pub fn energy_distance(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("energy distance of an empty sample set"));
    }
    let dim = a[0].len();
    if let Some(bad) = a.iter().chain(b).find(|x| x.len() != dim) {
        return Err(Error::shape("energy_distance", &[dim], &[bad.len()]));
    }
    let cross = mean_pairwise(a, b);
    let within_a = mean_pairwise(a, a);
    let within_b = mean_pairwise(b, b);
    Ok(2.0 * cross - within_a - within_b)
}

fn mean_pairwise(a: &[Tensor], b: &[Tensor]) -> f64 {
    let mut total = 0.0;
    for x in a {
        let mut row = 0.0;
        for y in b {
            row += x
                .as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
        }
        total += row;
    }
    total / (a.len() * b.len()) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockStats {
    pub block: usize,
    pub mean_p: f64,
    pub skip_rate: f64,
    pub reuse_rate: f64,
    /// Mean width ratio over computed steps; empty when never computed.
    pub mean_width: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceSummary {
    pub blocks: Vec<BlockStats>,
    pub flops: u64,
}

impl TraceSummary {
    pub fn skip_rates(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.skip_rate).collect()
    }

    pub fn reuse_rate(&self) -> f64 {
        self.blocks.iter().map(|b| b.reuse_rate).sum::<f64>() / self.blocks.len() as f64
    }
}

/// Per-block statistics over every record of every trajectory in `trace`.
pub fn trace_summary(trace: &[TraceRecord]) -> Result<TraceSummary> {
    if trace.is_empty() {
        return Err(Error::contract("summary of an empty trace"));
    }
    let n_blocks = trace.iter().map(|r| r.block).max().unwrap() + 1;
    #[derive(Default, Clone)]
    struct Acc {
        n: usize,
        p: f64,
        skip: usize,
        reuse: usize,
        computed: usize,
        width: f64,
    }
    let mut acc = vec![Acc::default(); n_blocks];
    for r in trace {
        let a = &mut acc[r.block];
        a.n += 1;
        a.p += r.p;
        match r.action {
            BlockAction::Skip => a.skip += 1,
            BlockAction::Reuse => a.reuse += 1,
            BlockAction::Compute(w) => {
                a.computed += 1;
                a.width += w;
            }
        }
    }
    let blocks = acc
        .iter()
        .enumerate()
        .map(|(block, a)| {
            let n = a.n.max(1) as f64;
            BlockStats {
                block,
                mean_p: a.p / n,
                skip_rate: a.skip as f64 / n,
                reuse_rate: a.reuse as f64 / n,
                mean_width: (a.computed > 0).then(|| a.width / a.computed as f64),
            }
        })
        .collect();
    Ok(TraceSummary {
        blocks,
        flops: trace.iter().map(|r| r.flops).sum(),
    })
}

pub fn write_summary_csv<W: Write>(out: W, summary: &TraceSummary) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for b in &summary.blocks {
        w.serialize(b).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct GridRow {
    step: usize,
    block: usize,
    p: f64,
}

/// `step,block,p` rows in trace order.
pub fn write_probability_grid_csv<W: Write>(out: W, trace: &[TraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in trace {
        w.serialize(GridRow {
            step: r.step,
            block: r.block,
            p: r.p,
        })
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::contract(format!("csv: {other:?}")),
    }
}
