//! Per-block routers, straight-through block gating, adaptive MLP width and
//! the efficiency losses.
//!
//! Each block `i` owns a router that reads the block input and the timestep
//! embedding and emits a gate probability `p` (skip the block when
//! `p < tau`) and a distribution `q` over the width menu. Training keeps the
//! graph dense: a skipped block still runs, its residual is multiplied by a
//! straight-through gate, and reduced widths are realized by masking hidden
//! channels. Inference slices the MLP weights instead.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    block_forward, block_modulation, timestep_embed, BlockWeights, DiTConfig, ElasticDit, Linear,
    MlpMode,
};
use crate::params::{Graph, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::Var;

/// Gate probability the routers start from.
pub const OPEN_GATE_PROB: f64 = 0.95;
/// Logit bias on the full-width entry at initialization.
pub const OPEN_WIDTH_BIAS: f64 = 4.0;

/// Ordered MLP width ratios; the last entry is the full width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WidthMenu {
    ratios: Vec<f64>,
}

impl Default for WidthMenu {
    fn default() -> Self {
        Self {
            ratios: vec![0.25, 0.5, 0.75, 1.0],
        }
    }
}

impl WidthMenu {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        let menu = Self { ratios };
        menu.check_order()?;
        Ok(menu)
    }

    fn check_order(&self) -> Result<()> {
        let ok = !self.ratios.is_empty()
            && self.ratios.windows(2).all(|w| w[0] < w[1])
            && self.ratios[0] > 0.0
            && *self.ratios.last().unwrap() == 1.0;
        if !ok {
            return Err(Error::contract(format!(
                "width menu must be strictly increasing in (0, 1] and end at 1, got {:?}",
                self.ratios
            )));
        }
        Ok(())
    }

    /// Checks that every ratio maps to a whole number of hidden channels.
    pub fn validate(&self, hidden: usize) -> Result<()> {
        self.check_order()?;
        for &r in &self.ratios {
            let c = r * hidden as f64;
            if c.fract() != 0.0 {
                return Err(Error::contract(format!(
                    "width ratio {r} of {hidden} channels is not integral"
                )));
            }
        }
        Ok(())
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }

    pub fn full_index(&self) -> usize {
        self.ratios.len() - 1
    }

    pub fn index_of(&self, ratio: f64) -> Result<usize> {
        self.ratios
            .iter()
            .position(|&r| r == ratio)
            .ok_or(Error::Domain {
                what: "width ratio",
                value: ratio,
            })
    }

    pub fn channels(&self, ratio: f64, hidden: usize) -> Result<usize> {
        self.index_of(ratio)?;
        Ok((ratio * hidden as f64).round() as usize)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticConfig {
    /// Skip threshold on the gate probability.
    pub tau: f64,
    /// Target mean gate probability.
    pub rho_g: f64,
    /// Target masked mean width.
    pub rho_w: f64,
    /// Weight of the efficiency losses.
    pub lambda: f64,
    pub widths: WidthMenu,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            rho_g: 0.6,
            rho_w: 0.65,
            lambda: 1.0,
            widths: WidthMenu::default(),
        }
    }
}

impl ElasticConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |what, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Domain { what, value: v })
            }
        };
        open("tau", self.tau)?;
        open("rho_g", self.rho_g)?;
        open("rho_w", self.rho_w)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Domain {
                what: "lambda",
                value: self.lambda,
            });
        }
        self.widths.check_order()
    }
}

#[derive(Clone, Debug)]
pub struct RouterWeights {
    /// `E(t)` to the concatenated `[scale | shift]`, each `D` wide.
    pub modulation: Linear,
    /// `D x H_r`.
    pub proj: ParamId,
    /// `H_r x 1`.
    pub gate_head: ParamId,
    /// `H_r x |S|`.
    pub width_head: ParamId,
    pub gate_bias: ParamId,
    pub width_bias: ParamId,
}

impl RouterWeights {
    pub(crate) fn allocate(ps: &mut ParamStore, block: usize, cfg: &DiTConfig, n_widths: usize) -> Self {
        let (d, hr) = (cfg.dim, cfg.router_hidden);
        let rt = ParamGroup::Router;
        let name = |s: &str| format!("routers.{block}.{s}");
        Self {
            modulation: Linear {
                w: ps.add(name("mod.w"), Tensor::zeros(&[d, 2 * d]), rt),
                b: Some(ps.add(name("mod.b"), Tensor::zeros(&[1, 2 * d]), rt)),
            },
            proj: ps.add(name("proj"), Tensor::zeros(&[d, hr]), rt),
            gate_head: ps.add(name("gate_head"), Tensor::zeros(&[hr, 1]), rt),
            width_head: ps.add(name("width_head"), Tensor::zeros(&[hr, n_widths]), rt),
            gate_bias: ps.add(name("gate_bias"), Tensor::zeros(&[1, 1]), rt),
            width_bias: ps.add(name("width_bias"), Tensor::zeros(&[1, n_widths]), rt),
        }
    }

    fn weight_ids(&self) -> [ParamId; 4] {
        [self.modulation.w, self.proj, self.gate_head, self.width_head]
    }
}

/// Routing result for one block at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterOutput {
    pub gate_logit: f64,
    pub gate_prob: f64,
    pub width_logits: Vec<f64>,
    pub width_probs: Vec<f64>,
    pub width_index: usize,
    pub width_ratio: f64,
    /// Expected width `sum_j q[j] * S[j]`.
    pub soft_width: f64,
}

impl RouterOutput {
    /// An output carrying a given gate probability and full width; used to
    /// drive the inference engine from scripted probabilities.
    pub fn scripted(p: f64, widths: &WidthMenu, width_index: usize) -> Self {
        let k = widths.len();
        let mut probs = vec![0.0; k];
        probs[width_index] = 1.0;
        Self {
            gate_logit: (p / (1.0 - p)).ln(),
            gate_prob: p,
            width_logits: vec![0.0; k],
            width_probs: probs,
            width_index,
            width_ratio: widths.ratios()[width_index],
            soft_width: widths.ratios()[width_index],
        }
    }
}

/// Graph handles for the differentiable router outputs.
#[derive(Clone, Copy, Debug)]
pub struct RouterVars {
    pub gate_logit: Var,
    pub gate_prob: Var,
    pub width_probs: Var,
    pub soft_width: Var,
}

#[derive(Clone, Debug)]
pub struct Routed {
    pub vars: RouterVars,
    pub out: RouterOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WidthSelection {
    pub probs: Vec<f64>,
    pub index: usize,
    pub ratio: f64,
}

/// Softmax over the width logits and argmax, ties resolved toward the
/// widest entry.
pub fn select_width(u: &[f64], widths: &WidthMenu) -> Result<WidthSelection> {
    if u.len() != widths.len() {
        return Err(Error::shape("select_width", &[u.len()], &[widths.len()]));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "select_width" });
    }
    let mut probs = u.to_vec();
    crate::tape::softmax_in_place(&mut probs);
    Ok(pick_width(probs, widths))
}

fn pick_width(probs: Vec<f64>, widths: &WidthMenu) -> WidthSelection {
    let mut index = 0;
    for (j, &q) in probs.iter().enumerate() {
        if q >= probs[index] {
            index = j;
        }
    }
    WidthSelection {
        ratio: widths.ratios()[index],
        probs,
        index,
    }
}

/// Router forward: modulated layer norm, projection, GELU, token-averaged
/// gate and width heads.
pub fn router_forward(
    g: &mut Graph,
    model: &ElasticDit,
    x: Var,
    t_emb: Var,
    w: &RouterWeights,
) -> Result<Routed> {
    let d = g.value(x).cols();
    let m = w.modulation.forward(g, t_emb)?;
    let scale = g.slice_cols(m, 0, d)?;
    let shift = g.slice_cols(m, d, 2 * d)?;
    let xt = crate::model::modulate(g, x, scale, shift)?;
    let proj = g.p(w.proj);
    let h = g.matmul(xt, proj)?;
    let h = g.gelu(h)?;

    let (gh, gb) = (g.p(w.gate_head), g.p(w.gate_bias));
    let gl = g.matmul(h, gh)?;
    let gl = g.mean_rows(gl)?;
    let gate_logit = g.add(gl, gb)?;
    let gate_prob = g.sigmoid(gate_logit)?;

    let (wh, wb) = (g.p(w.width_head), g.p(w.width_bias));
    let wl = g.matmul(h, wh)?;
    let wl = g.mean_rows(wl)?;
    let width_logits = g.add_row(wl, wb)?;
    let width_probs = g.softmax(width_logits)?;
    let menu = g.constant(Tensor::row(model.widths.ratios()));
    let weighted = g.mul(width_probs, menu)?;
    let soft_width = g.sum(weighted)?;

    let sel = pick_width(g.value(width_probs).as_slice().to_vec(), &model.widths);
    let out = RouterOutput {
        gate_logit: g.value(gate_logit).item(),
        gate_prob: g.value(gate_prob).item(),
        width_logits: g.value(width_logits).as_slice().to_vec(),
        width_probs: sel.probs,
        width_index: sel.index,
        width_ratio: sel.ratio,
        soft_width: g.value(soft_width).item(),
    };
    Ok(Routed {
        vars: RouterVars {
            gate_logit,
            gate_prob,
            width_probs,
            soft_width,
        },
        out,
    })
}

/// Straight-through gate: value `1[p >= tau]`, gradient `dg/dp = 1`.
pub fn ste_gate(g: &mut Graph, p: Var, tau: f64) -> Result<Var> {
    g.ste_threshold(p, tau)
}

/// `(GELU(z W1) * m(s)) W2` with `m(s)` keeping the first `s * H` channels.
pub fn mlp_masked(
    g: &mut Graph,
    widths: &WidthMenu,
    z: Var,
    ratio: f64,
    w: &BlockWeights,
) -> Result<Var> {
    let (w1, w2) = (g.p(w.mlp_w1), g.p(w.mlp_w2));
    let hidden = g.value(w1).cols();
    let keep = widths.channels(ratio, hidden)?;
    let h = g.matmul(z, w1)?;
    let mut h = g.gelu(h)?;
    if keep < hidden {
        let mask: Vec<f64> = (0..hidden).map(|j| if j < keep { 1.0 } else { 0.0 }).collect();
        h = g.mask_cols(h, &mask)?;
    }
    g.matmul(h, w2)
}

/// `GELU(z W1[:, :sH]) W2[:sH, :]`.
pub fn mlp_sliced(
    g: &mut Graph,
    widths: &WidthMenu,
    z: Var,
    ratio: f64,
    w: &BlockWeights,
) -> Result<Var> {
    let (mut w1, mut w2) = (g.p(w.mlp_w1), g.p(w.mlp_w2));
    let hidden = g.value(w1).cols();
    let keep = widths.channels(ratio, hidden)?;
    if keep < hidden {
        w1 = g.slice_cols(w1, 0, keep)?;
        w2 = g.slice_rows(w2, 0, keep)?;
    }
    let h = g.matmul(z, w1)?;
    let h = g.gelu(h)?;
    g.matmul(h, w2)
}

/// Routed block in training mode: `x + g * (B(x) - x)` with the masked MLP
/// at the router's width. `B(x)` is always evaluated.
pub fn gated_block_train(
    g: &mut Graph,
    model: &ElasticDit,
    block: usize,
    x: Var,
    t_emb: Var,
    tau: f64,
) -> Result<(Var, Routed)> {
    let routed = router_forward(g, model, x, t_emb, &model.routers[block])?;
    let gate = ste_gate(g, routed.vars.gate_prob, tau)?;
    let w = &model.blocks[block];
    let m = block_modulation(g, t_emb, w)?;
    let bx = block_forward(g, model, x, &m, w, MlpMode::Masked(routed.out.width_ratio))?;
    let delta = g.sub(bx, x)?;
    let gated = g.mul_scalar(delta, gate)?;
    Ok((g.add(x, gated)?, routed))
}

/// `(mean(p) - rho_g)^2` over one sample's blocks.
pub fn gating_loss(g: &mut Graph, probs: &[Var], rho_g: f64) -> Result<Var> {
    let mean = mean_of(g, probs)?;
    let d = g.offset(mean, -rho_g)?;
    g.square(d)
}

fn mean_of(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let (&first, rest) = xs
        .split_first()
        .ok_or_else(|| Error::contract("mean of an empty list"))?;
    let mut acc = first;
    for &x in rest {
        acc = g.add(acc, x)?;
    }
    g.scale(acc, 1.0 / xs.len() as f64)
}

/// `(r_bar - rho_w)^2` where `r_bar` averages soft widths over blocks with
/// `p >= tau`. Zero when no block is active.
pub fn width_loss(g: &mut Graph, routed: &[Routed], tau: f64, rho_w: f64) -> Result<Var> {
    if routed.is_empty() {
        return Err(Error::contract("width loss over no blocks"));
    }
    let active: Vec<Var> = routed
        .iter()
        .filter(|r| r.out.gate_prob >= tau)
        .map(|r| r.vars.soft_width)
        .collect();
    if active.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let r_bar = mean_of(g, &active)?;
    let d = g.offset(r_bar, -rho_w)?;
    g.square(d)
}

/// Masked mean soft width, `None` when every block is skipped.
pub fn masked_mean_width(outs: &[RouterOutput], tau: f64) -> Option<f64> {
    let active: Vec<f64> = outs
        .iter()
        .filter(|o| o.gate_prob >= tau)
        .map(|o| o.soft_width)
        .collect();
    (!active.is_empty()).then(|| active.iter().sum::<f64>() / active.len() as f64)
}

/// `perf + lambda * (gating + width)`.
pub fn total_loss(g: &mut Graph, perf: Var, gating: Var, width: Var, lambda: f64) -> Result<Var> {
    let eff = g.add(gating, width)?;
    let eff = g.scale(eff, lambda)?;
    g.add(perf, eff)
}

/// Output of the routed training forward for one sample.
#[derive(Clone, Debug)]
pub struct ElasticForward {
    pub velocity: Var,
    pub routed: Vec<Routed>,
}

/// Full routed forward in training mode. With `force_full`, every gate is
/// held open at full width (routers still run).
pub fn forward_train(
    g: &mut Graph,
    model: &ElasticDit,
    x: Var,
    t: f64,
    tau: f64,
    force_full: bool,
) -> Result<ElasticForward> {
    let t_emb = timestep_embed(g, model, t)?;
    let mut h = model.input.forward(g, x)?;
    let mut routed = Vec::with_capacity(model.blocks.len());
    for i in 0..model.blocks.len() {
        if force_full {
            let r = router_forward(g, model, h, t_emb, &model.routers[i])?;
            let w = &model.blocks[i];
            let m = block_modulation(g, t_emb, w)?;
            let bx = block_forward(g, model, h, &m, w, MlpMode::Masked(1.0))?;
            let delta = g.sub(bx, h)?;
            let one = g.constant(Tensor::scalar(1.0));
            let gated = g.mul_scalar(delta, one)?;
            h = g.add(h, gated)?;
            routed.push(r);
        } else {
            let (next, r) = gated_block_train(g, model, i, h, t_emb, tau)?;
            h = next;
            routed.push(r);
        }
    }
    let velocity = crate::model::output_head(g, model, h)?;
    Ok(ElasticForward { velocity, routed })
}

/// Discrete routing decisions in a form suitable for [`crate::gradcheck::Probe`].
pub fn decision_signature(outs: &[RouterOutput], tau: f64) -> Vec<u32> {
    outs.iter()
        .flat_map(|o| [(o.gate_prob >= tau) as u32, o.width_index as u32])
        .collect()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Starts every router fully open: weights `N(0, 0.02^2)`, gate bias at
/// `logit(0.95)`, width bias favoring the full width.
pub fn init_routers_full_capacity<R: Rng + ?Sized>(model: &mut ElasticDit, rng: &mut R) {
    for r in model.routers.clone() {
        init_router_weights(&mut model.params, &r, rng);
        let k = model.widths.len();
        let mut wb = vec![0.0; k];
        wb[k - 1] = OPEN_WIDTH_BIAS;
        set_param(&mut model.params, r.gate_bias, Tensor::scalar(logit(OPEN_GATE_PROB)));
        set_param(&mut model.params, r.width_bias, Tensor::row(&wb));
    }
}

/// Redraws gate and width biases from `N(0, 1)`, leaving router weights as
/// they are.
pub fn init_routers_random<R: Rng + ?Sized>(model: &mut ElasticDit, rng: &mut R) {
    for r in model.routers.clone() {
        let k = model.widths.len();
        let gb = rng.sample::<f64, _>(StandardNormal);
        set_param(&mut model.params, r.gate_bias, Tensor::scalar(gb));
        set_param(&mut model.params, r.width_bias, Tensor::randn(&[1, k], 1.0, rng));
    }
}

fn init_router_weights<R: Rng + ?Sized>(ps: &mut ParamStore, r: &RouterWeights, rng: &mut R) {
    for id in r.weight_ids() {
        let shape = ps.get(id).shape().to_vec();
        set_param(ps, id, Tensor::randn(&shape, 0.02, rng));
    }
    if let Some(b) = r.modulation.b {
        let shape = ps.get(b).shape().to_vec();
        set_param(ps, b, Tensor::zeros(&shape));
    }
}

fn set_param(ps: &mut ParamStore, id: ParamId, value: Tensor) {
    ps.set(id, value).expect("router parameter shape is fixed at allocation");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{block_forward_dense, mlp_dense, model_forward_dense, LN_EPS};
    use crate::tape::{gelu, sigmoid, softmax_in_place};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DiTConfig {
        DiTConfig {
            n_blocks: 3,
            dim: 8,
            width_factor: 4,
            router_hidden: 2,
            n_heads: 2,
            tokens: 2,
            data_dim: 4,
            t_max: 1000.0,
        }
    }

    fn zero_router(model: &mut ElasticDit, i: usize) {
        let r = model.routers[i].clone();
        let ids = [
            r.modulation.w,
            r.modulation.b.unwrap(),
            r.proj,
            r.gate_head,
            r.width_head,
            r.gate_bias,
            r.width_bias,
        ];
        for id in ids {
            let shape = model.params.get(id).shape().to_vec();
            model.params.set(id, Tensor::zeros(&shape)).unwrap();
        }
    }

    fn force_gate(model: &mut ElasticDit, i: usize, p: f64, width_index: usize) {
        zero_router(model, i);
        let r = model.routers[i].clone();
        model.params.set(r.gate_bias, Tensor::scalar(logit(p))).unwrap();
        let mut wb = vec![0.0; 4];
        wb[width_index] = 10.0;
        model.params.set(r.width_bias, Tensor::row(&wb)).unwrap();
    }

    #[test]
    fn width_menu_contract() {
        let m = WidthMenu::default();
        assert!(m.validate(128).is_ok());
        assert!(m.validate(6).is_err());
        assert_eq!(m.channels(0.75, 128).unwrap(), 96);
        assert!(m.channels(0.3, 128).is_err());
        assert!(WidthMenu::new(vec![0.5, 0.25, 1.0]).is_err());
        assert!(WidthMenu::new(vec![0.5, 0.75]).is_err());
    }

    #[test]
    fn elastic_config_validation() {
        assert!(ElasticConfig::default().validate().is_ok());
        let c = ElasticConfig { rho_g: 1.5, ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Domain { what: "rho_g", .. })));
        let c = ElasticConfig { lambda: -1.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_router_gives_half_gate_and_full_width() {
        let mut model = ElasticDit::new(tiny(), 0).unwrap();
        zero_router(&mut model, 0);
        let mut g = Graph::new(&model.params);
        let x = g.constant(Tensor::full(&[2, 8], 0.3));
        let e = timestep_embed(&mut g, &model, 0.5).unwrap();
        let r = router_forward(&mut g, &model, x, e, &model.routers[0]).unwrap();
        assert_eq!(r.out.gate_logit, 0.0);
        assert_eq!(r.out.gate_prob, 0.5);
        assert_eq!(r.out.width_probs, vec![0.25; 4]);
        assert_eq!(r.out.width_index, 3);
        assert_eq!(r.out.width_ratio, 1.0);
        assert!((r.out.soft_width - 0.625).abs() < 1e-15);
        // p == tau keeps the block.
        let gate = ste_gate(&mut g, r.vars.gate_prob, 0.5).unwrap();
        assert_eq!(g.value(gate).item(), 1.0);
    }

    #[test]
    fn router_matches_reference_loop() {
        let mut model = ElasticDit::new(tiny(), 1).unwrap();
        let r = model.routers[1].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for id in [r.modulation.w, r.modulation.b.unwrap(), r.proj, r.gate_head, r.width_head, r.gate_bias, r.width_bias] {
            let shape = model.params.get(id).shape().to_vec();
            model.params.set(id, Tensor::randn(&shape, 0.5, &mut rng)).unwrap();
        }
        let x = Tensor::randn(&[2, 8], 1.0, &mut rng);
        let mut g = Graph::new(&model.params);
        let xv = g.constant(x.clone());
        let e = timestep_embed(&mut g, &model, 0.25).unwrap();
        let emb = g.value(e).clone();
        let routed = router_forward(&mut g, &model, xv, e, &r).unwrap();

        let p = |id| model.params.get(id).clone();
        let (mw, mb, wp, wg, ww, gb, wb) = (
            p(r.modulation.w),
            p(r.modulation.b.unwrap()),
            p(r.proj),
            p(r.gate_head),
            p(r.width_head),
            p(r.gate_bias),
            p(r.width_bias),
        );
        let m: Vec<f64> = (0..16)
            .map(|c| mb.get(0, c) + (0..8).map(|k| emb.get(0, k) * mw.get(k, c)).sum::<f64>())
            .collect();
        let mut ell = 0.0;
        let mut u = vec![0.0; 4];
        for row in 0..2 {
            let xr = x.row_slice(row);
            let mean = xr.iter().sum::<f64>() / 8.0;
            let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            let xt: Vec<f64> = (0..8)
                .map(|c| (1.0 + m[c]) * (xr[c] - mean) / (var + LN_EPS).sqrt() + m[8 + c])
                .collect();
            let h: Vec<f64> = (0..2)
                .map(|j| gelu((0..8).map(|c| xt[c] * wp.get(c, j)).sum()))
                .collect();
            ell += (h[0] * wg.get(0, 0) + h[1] * wg.get(1, 0)) / 2.0;
            for (k, uk) in u.iter_mut().enumerate() {
                *uk += (h[0] * ww.get(0, k) + h[1] * ww.get(1, k)) / 2.0;
            }
        }
        ell += gb.item();
        for k in 0..4 {
            u[k] += wb.get(0, k);
        }
        let mut q = u.clone();
        softmax_in_place(&mut q);
        assert!((routed.out.gate_logit - ell).abs() <= 1e-12);
        assert!((routed.out.gate_prob - sigmoid(ell)).abs() <= 1e-12);
        for k in 0..4 {
            assert!((routed.out.width_logits[k] - u[k]).abs() <= 1e-12);
            assert!((routed.out.width_probs[k] - q[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn select_width_examples() {
        let m = WidthMenu::default();
        assert_eq!(select_width(&[0.0, 0.0, 0.0, 10.0], &m).unwrap().ratio, 1.0);
        let tie = select_width(&[0.0; 4], &m).unwrap();
        assert_eq!(tie.probs, vec![0.25; 4]);
        assert_eq!(tie.ratio, 1.0);
        let s = select_width(&[2.0, 1.0, 0.0, -1.0], &m).unwrap();
        assert_eq!((s.index, s.ratio), (0, 0.25));
        let z: f64 = [2.0f64, 1.0, 0.0, -1.0].iter().map(|v| v.exp()).sum();
        for (j, u) in [2.0f64, 1.0, 0.0, -1.0].iter().enumerate() {
            assert!((s.probs[j] - u.exp() / z).abs() <= 1e-12);
        }
        assert!(select_width(&[0.0; 3], &m).is_err());
    }

    #[test]
    fn ste_gate_examples() {
        for &(p, tau, v) in &[(0.7, 0.5, 1.0), (0.3, 0.5, 0.0), (0.5, 0.5, 1.0)] {
            let store = ParamStore::new();
            let mut g = Graph::new(&store);
            let pv = g.param(Tensor::scalar(p));
            let gate = ste_gate(&mut g, pv, tau).unwrap();
            assert_eq!(g.value(gate).item(), v);
            let grads = g.backward(gate).unwrap();
            assert_eq!(grads.wrt(pv).item(), 1.0);
        }
    }

    #[test]
    fn closed_gate_passes_input_through() {
        let mut model = ElasticDit::new(tiny(), 3).unwrap();
        force_gate(&mut model, 0, 0.01, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 8], 1.0, &mut rng);
        let mut g = Graph::new(&model.params);
        let xv = g.constant(x.clone());
        let e = timestep_embed(&mut g, &model, 0.5).unwrap();
        let (y, r) = gated_block_train(&mut g, &model, 0, xv, e, 0.5).unwrap();
        assert!(r.out.gate_prob < 0.5);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn open_gate_full_width_matches_dense_block() {
        let mut model = ElasticDit::new(tiny(), 3).unwrap();
        force_gate(&mut model, 0, 0.99, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 8], 1.0, &mut rng);
        let mut g = Graph::new(&model.params);
        let xv = g.constant(x);
        let e = timestep_embed(&mut g, &model, 0.5).unwrap();
        let (y, _) = gated_block_train(&mut g, &model, 0, xv, e, 0.5).unwrap();
        let dense = block_forward_dense(&mut g, &model, xv, e, &model.blocks[0]).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(dense)) <= 1e-12);
    }

    #[test]
    fn closed_gate_still_trains_gate_bias() {
        let mut model = ElasticDit::new(tiny(), 3).unwrap();
        force_gate(&mut model, 1, 0.2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let target = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let mut g = Graph::new(&model.params);
        let xv = g.constant(x);
        let tv = g.constant(target);
        let f = forward_train(&mut g, &model, xv, 0.5, 0.5, false).unwrap();
        assert!(f.routed[1].out.gate_prob < 0.5);
        let d = g.sub(f.velocity, tv).unwrap();
        let sq = g.square(d).unwrap();
        let loss = g.mean(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        let pg = g.param_grads(&grads);
        let gb = pg[model.routers[1].gate_bias.index()].item();
        assert!(gb != 0.0);

        // The STE gradient of the gate bias is dL/dg * p(1-p). Recover
        // dL/dg from a finite difference on the residual scale.
        let p = f.routed[1].out.gate_prob;
        let eval = |scale: f64| {
            let mut g = Graph::new(&model.params);
            let xv = g.constant(Tensor::randn(&[2, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(6)));
            let t_emb = timestep_embed(&mut g, &model, 0.5).unwrap();
            let mut h = model.input.forward(&mut g, xv).unwrap();
            for i in 0..3 {
                let w = &model.blocks[i];
                let (next, _) = if i == 1 {
                    let m = block_modulation(&mut g, t_emb, w).unwrap();
                    let bx = block_forward(&mut g, &model, h, &m, w, MlpMode::Masked(1.0)).unwrap();
                    let d = g.sub(bx, h).unwrap();
                    let d = g.scale(d, scale).unwrap();
                    (g.add(h, d).unwrap(), ())
                } else {
                    let (n, _) = gated_block_train(&mut g, &model, i, h, t_emb, 0.5).unwrap();
                    (n, ())
                };
                h = next;
            }
            let v = crate::model::output_head(&mut g, &model, h).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let _ = Tensor::randn(&[2, 4], 1.0, &mut rng);
            let tv = g.constant(Tensor::randn(&[2, 4], 1.0, &mut rng));
            let d = g.sub(v, tv).unwrap();
            let sq = g.square(d).unwrap();
            let l = g.mean(sq).unwrap();
            g.value(l).item()
        };
        let h = 1e-6;
        let dl_dg = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((gb - dl_dg * p * (1.0 - p)).abs() <= 1e-8 * (1.0 + gb.abs()), "{gb} vs {}", dl_dg * p * (1.0 - p));
    }

    #[test]
    fn gating_loss_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let mut consts = |ps: &[f64]| -> Vec<Var> {
            ps.iter().map(|&p| g.constant(Tensor::scalar(p))).collect()
        };
        let a = consts(&[0.6, 0.6, 0.6]);
        let b = consts(&[0.8, 0.8]);
        let c = consts(&[0.9, 0.1, 0.9, 0.1]);
        let la = gating_loss(&mut g, &a, 0.6).unwrap();
        let lb = gating_loss(&mut g, &b, 0.6).unwrap();
        let lc = gating_loss(&mut g, &c, 0.5).unwrap();
        assert!(g.value(la).item().abs() < 1e-15);
        assert!((g.value(lb).item() - 0.04).abs() < 1e-15);
        assert!(g.value(lc).item().abs() < 1e-15);
        assert!(gating_loss(&mut g, &[], 0.5).is_err());
    }

    fn routed_const(g: &mut Graph, p: f64, q: &[f64]) -> Routed {
        let menu = WidthMenu::default();
        let soft: f64 = q.iter().zip(menu.ratios()).map(|(a, b)| a * b).sum();
        let vars = RouterVars {
            gate_logit: g.constant(Tensor::scalar(logit(p))),
            gate_prob: g.constant(Tensor::scalar(p)),
            width_probs: g.constant(Tensor::row(q)),
            soft_width: g.constant(Tensor::scalar(soft)),
        };
        let sel = pick_width(q.to_vec(), &menu);
        Routed {
            vars,
            out: RouterOutput {
                gate_logit: logit(p),
                gate_prob: p,
                width_logits: q.iter().map(|v| v.ln()).collect(),
                width_probs: q.to_vec(),
                width_index: sel.index,
                width_ratio: sel.ratio,
                soft_width: soft,
            },
        }
    }

    #[test]
    fn width_loss_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let half: Vec<Routed> = (0..3).map(|_| routed_const(&mut g, 0.9, &[0.0, 1.0, 0.0, 0.0])).collect();
        let l = width_loss(&mut g, &half, 0.5, 0.5).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let uni: Vec<Routed> = (0..3).map(|_| routed_const(&mut g, 0.9, &[0.25; 4])).collect();
        let outs: Vec<RouterOutput> = uni.iter().map(|r| r.out.clone()).collect();
        assert!((masked_mean_width(&outs, 0.5).unwrap() - 0.625).abs() < 1e-15);
        let l = width_loss(&mut g, &uni, 0.5, 0.625).unwrap();
        assert!(g.value(l).item().abs() < 1e-15);

        let off: Vec<Routed> = (0..3).map(|_| routed_const(&mut g, 0.2, &[0.25; 4])).collect();
        let l = width_loss(&mut g, &off, 0.5, 0.3).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        // Skipped blocks do not count toward the mean.
        let mixed = vec![
            routed_const(&mut g, 0.9, &[1.0, 0.0, 0.0, 0.0]),
            routed_const(&mut g, 0.1, &[0.0, 0.0, 0.0, 1.0]),
        ];
        let l = width_loss(&mut g, &mixed, 0.5, 0.25).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let perf = g.constant(Tensor::scalar(1.0));
        let gate = g.constant(Tensor::scalar(0.04));
        let width = g.constant(Tensor::scalar(0.01));
        let l = total_loss(&mut g, perf, gate, width, 1.0).unwrap();
        assert!((g.value(l).item() - 1.05).abs() < 1e-15);
        let l = total_loss(&mut g, perf, gate, width, 0.0).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
    }

    #[test]
    fn efficiency_gradient_scales_with_lambda() {
        let model = ElasticDit::new(tiny(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let grads_at = |lambda: f64| {
            let mut g = Graph::new(&model.params);
            let xv = g.constant(x.clone());
            let f = forward_train(&mut g, &model, xv, 0.4, 0.5, false).unwrap();
            let probs: Vec<Var> = f.routed.iter().map(|r| r.vars.gate_prob).collect();
            let gl = gating_loss(&mut g, &probs, 0.3).unwrap();
            let wl = width_loss(&mut g, &f.routed, 0.5, 0.4).unwrap();
            let zero = g.constant(Tensor::scalar(0.0));
            let l = total_loss(&mut g, zero, gl, wl, lambda).unwrap();
            let grads = g.backward(l).unwrap();
            g.param_grads(&grads)
        };
        let (g1, g2) = (grads_at(1.0), grads_at(2.0));
        let mut nonzero = 0;
        for r in &model.routers {
            for id in [r.gate_bias, r.width_bias, r.proj] {
                for (a, b) in g1[id.index()].as_slice().iter().zip(g2[id.index()].as_slice()) {
                    assert!((2.0 * a - b).abs() <= 1e-15 * (1.0 + b.abs()));
                    nonzero += (*a != 0.0) as usize;
                }
            }
        }
        assert!(nonzero > 0);
    }

    #[test]
    fn mlp_masked_and_sliced_examples() {
        let mut model = ElasticDit::new(tiny(), 9).unwrap();
        let w = model.blocks[0].clone();
        let menu = WidthMenu::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = Tensor::randn(&[2, 8], 1.0, &mut rng);
        {
            let mut g = Graph::new(&model.params);
            let zv = g.constant(z.clone());
            let dense = mlp_dense(&mut g, zv, &w).unwrap();
            let masked = mlp_masked(&mut g, &menu, zv, 1.0, &w).unwrap();
            let sliced = mlp_sliced(&mut g, &menu, zv, 1.0, &w).unwrap();
            assert_eq!(g.value(dense), g.value(masked));
            assert_eq!(g.value(dense), g.value(sliced));
            let zero = g.constant(Tensor::zeros(&[2, 8]));
            for &r in menu.ratios() {
                let m = mlp_masked(&mut g, &menu, zero, r, &w).unwrap();
                assert!(g.value(m).as_slice().iter().all(|&v| v == 0.0));
            }
            assert!(matches!(
                mlp_masked(&mut g, &menu, zv, 0.6, &w),
                Err(Error::Domain { .. })
            ));
            assert!(mlp_sliced(&mut g, &menu, zv, 0.1, &w).is_err());
        }
        let mut w2 = model.params.get(w.mlp_w2).clone();
        for v in &mut w2.as_mut_slice()[..8 * 8] {
            *v = 0.0;
        }
        model.params.set(w.mlp_w2, w2).unwrap();
        let mut g = Graph::new(&model.params);
        let zv = g.constant(z);
        let s = mlp_sliced(&mut g, &menu, zv, 0.25, &w).unwrap();
        assert!(g.value(s).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forced_full_forward_matches_dense() {
        let model = ElasticDit::new(tiny(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let mut g = Graph::new(&model.params);
        let xv = g.constant(x);
        let f = forward_train(&mut g, &model, xv, 0.3, 0.5, true).unwrap();
        let d = model_forward_dense(&mut g, &model, xv, 0.3).unwrap();
        assert!(g.value(f.velocity).max_abs_diff(g.value(d)) <= 1e-12);
    }

    #[test]
    fn full_capacity_init_opens_every_router() {
        let model = ElasticDit::new(DiTConfig::default(), 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut min_p: f64 = 1.0;
        for s in 0..100 {
            let x = Tensor::randn(&[16, 32], 1.0, &mut rng);
            let t = s as f64 / 99.0;
            let mut g = Graph::new(&model.params);
            let xv = g.constant(x);
            let f = forward_train(&mut g, &model, xv, t, 0.5, false).unwrap();
            for r in &f.routed {
                min_p = min_p.min(r.out.gate_prob);
                assert_eq!(r.out.width_ratio, 1.0);
            }
        }
        assert!(min_p > 0.5, "{min_p}");
        assert!((sigmoid(logit(OPEN_GATE_PROB)) - 0.95).abs() < 1e-12);
        assert!((logit(OPEN_GATE_PROB) - 2.944).abs() < 1e-3);
    }
}
