//! Flat JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use elastic_dit::elastic::{ElasticConfig, WidthMenu};
use elastic_dit::infer::InferenceConfig;
use elastic_dit::train::{AdamConfig, GradCheckConfig, RouterInit, TrainConfig};
use elastic_dit::{DiTConfig, Error as CoreError, SynthConfig};

use crate::CliError;

/// Every setting of every subcommand. All keys are optional; unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub eval_every: usize,
    pub eval_batch: usize,
    pub spot_check: bool,
    pub router_init: RouterInit,

    pub tau: f64,
    pub rho_g: f64,
    pub rho_w: f64,
    pub lambda: f64,

    pub n_blocks: usize,
    pub dim: usize,
    pub width_factor: usize,
    pub router_hidden: usize,
    pub n_heads: usize,
    pub tokens: usize,
    pub data_dim: usize,
    pub t_max: f64,

    pub data_modes: usize,
    pub data_scale: f64,
    pub data_seed: u64,

    pub delta_margin: f64,
    pub max_reuse: usize,
    pub sample_steps: usize,
    pub dense_override: bool,

    /// Trajectories per `sample`, `trace` and bench point.
    pub samples: usize,
    pub bench_delta_margins: Vec<f64>,
    pub bench_max_reuse: Vec<usize>,

    pub gradcheck_seeds: Vec<u64>,
    pub gradcheck_coords: usize,
    pub gradcheck_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let i = InferenceConfig::default();
        let g = GradCheckConfig::default();
        Self {
            seed: t.seed,
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            warmup_fraction: t.warmup_fraction,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            grad_clip: t.adam.grad_clip,
            eval_every: t.eval_every,
            eval_batch: t.eval_batch,
            spot_check: t.spot_check,
            router_init: t.router_init,
            tau: t.elastic.tau,
            rho_g: t.elastic.rho_g,
            rho_w: t.elastic.rho_w,
            lambda: t.elastic.lambda,
            n_blocks: t.model.n_blocks,
            dim: t.model.dim,
            width_factor: t.model.width_factor,
            router_hidden: t.model.router_hidden,
            n_heads: t.model.n_heads,
            tokens: t.model.tokens,
            data_dim: t.model.data_dim,
            t_max: t.model.t_max,
            data_modes: t.data.modes,
            data_scale: t.data.scale,
            data_seed: t.data.seed,
            delta_margin: i.delta_margin,
            max_reuse: i.max_reuse,
            sample_steps: i.steps,
            dense_override: i.dense_override,
            samples: 64,
            bench_delta_margins: vec![0.0, 0.05, 0.1, 0.15, 0.2],
            bench_max_reuse: vec![0, 1, 2, 5, 10],
            gradcheck_seeds: g.seeds,
            gradcheck_coords: g.coords,
            gradcheck_batch: g.batch_size,
        }
    }
}

fn bad(key: &str, why: impl Into<String>) -> CliError {
    CliError::Config {
        key: key.to_string(),
        message: why.into(),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.to_string();
            // Unknown keys are reported at the document root; recover the
            // key name from the message.
            let key = if path == "." || path.is_empty() {
                msg.split('`').nth(1).unwrap_or("config").to_string()
            } else {
                path
            };
            bad(&key, msg)
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model(&self) -> DiTConfig {
        DiTConfig {
            n_blocks: self.n_blocks,
            dim: self.dim,
            width_factor: self.width_factor,
            router_hidden: self.router_hidden,
            n_heads: self.n_heads,
            tokens: self.tokens,
            data_dim: self.data_dim,
            t_max: self.t_max,
        }
    }

    pub fn data(&self) -> SynthConfig {
        SynthConfig {
            tokens: self.tokens,
            dim: self.data_dim,
            modes: self.data_modes,
            scale: self.data_scale,
            seed: self.data_seed,
        }
    }

    pub fn elastic(&self) -> ElasticConfig {
        ElasticConfig {
            tau: self.tau,
            rho_g: self.rho_g,
            rho_w: self.rho_w,
            lambda: self.lambda,
            widths: WidthMenu::default(),
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            tau: self.tau,
            delta_margin: self.delta_margin,
            max_reuse: self.max_reuse,
            steps: self.sample_steps,
            dense_override: self.dense_override,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            warmup_fraction: self.warmup_fraction,
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                grad_clip: self.grad_clip,
            },
            elastic: self.elastic(),
            model: self.model(),
            data: self.data(),
            router_init: self.router_init,
            eval_every: self.eval_every,
            eval_batch: self.eval_batch,
            seed: self.seed,
            spot_check: self.spot_check,
            checkpoint: None,
        }
    }

    pub fn gradcheck(&self) -> GradCheckConfig {
        GradCheckConfig {
            seeds: self.gradcheck_seeds.clone(),
            coords: self.gradcheck_coords,
            batch_size: self.gradcheck_batch,
            step: 1e-6,
        }
    }

    /// Checks every field, naming the first offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("eval_batch", self.eval_batch),
            ("n_blocks", self.n_blocks),
            ("dim", self.dim),
            ("width_factor", self.width_factor),
            ("router_hidden", self.router_hidden),
            ("n_heads", self.n_heads),
            ("tokens", self.tokens),
            ("data_dim", self.data_dim),
            ("data_modes", self.data_modes),
            ("sample_steps", self.sample_steps),
            ("samples", self.samples),
            ("gradcheck_coords", self.gradcheck_coords),
            ("gradcheck_batch", self.gradcheck_batch),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(bad(key, "must be at least 1"));
            }
        }
        let open_unit = [
            ("tau", self.tau),
            ("rho_g", self.rho_g),
            ("rho_w", self.rho_w),
        ];
        for (key, v) in open_unit {
            if !(v > 0.0 && v < 1.0) {
                return Err(bad(key, format!("must lie in (0, 1), got {v}")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(bad("learning_rate", format!("must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(bad("warmup_fraction", format!("must lie in [0, 1], got {}", self.warmup_fraction)));
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(bad(key, format!("must lie in [0, 1), got {v}")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(bad("eps", "must be positive"));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return Err(bad("grad_clip", "must be non-negative"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(bad("lambda", "must be non-negative"));
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(bad("t_max", "must be positive"));
        }
        if !(self.data_scale >= 0.0 && self.data_scale.is_finite()) {
            return Err(bad("data_scale", "must be non-negative"));
        }
        if !(self.delta_margin >= 0.0 && self.tau + self.delta_margin < 1.0) {
            return Err(bad("delta_margin", "must be non-negative with tau + delta_margin < 1"));
        }
        for &d in &self.bench_delta_margins {
            if !(d >= 0.0 && self.tau + d < 1.0) {
                return Err(bad("bench_delta_margins", format!("{d} is outside [0, 1 - tau)")));
            }
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return Err(bad("n_heads", format!("must divide dim = {}", self.dim)));
        }
        if !self.dim.is_multiple_of(2) {
            return Err(bad("dim", "must be even"));
        }
        if self.gradcheck_seeds.is_empty() {
            return Err(bad("gradcheck_seeds", "must not be empty"));
        }
        // Anything the per-key checks above do not cover.
        self.train().validate().map_err(|e| match e {
            CoreError::Domain { what, value } => bad(what, format!("out of domain: {value}")),
            other => bad("config", other.to_string()),
        })
    }
}
