//! Rectified-flow data path: straight-line trajectories between data
//! (`t = 0`) and noise (`t = 1`), the flow-matching loss, an Euler sampler
//! and a synthetic Gaussian-mixture token dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct FlowSample {
    /// Data endpoint.
    pub x0: Tensor,
    /// Noise endpoint.
    pub x1: Tensor,
    pub t: f64,
}

impl FlowSample {
    pub fn new(x0: Tensor, x1: Tensor, t: f64) -> Result<Self> {
        check_unit("t", t)?;
        if x0.shape() != x1.shape() {
            return Err(Error::shape("FlowSample", x0.shape(), x1.shape()));
        }
        Ok(Self { x0, x1, t })
    }

    /// The regression target `x1 - x0`.
    pub fn velocity(&self) -> Tensor {
        self.x1.zip_map(&self.x0, |a, b| a - b)
    }
}

pub(crate) fn check_unit(what: &'static str, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain { what, value: t });
    }
    Ok(())
}

/// `(1 - t) x0 + t x1`.
pub fn trajectory_point(s: &FlowSample) -> Result<Tensor> {
    check_unit("t", s.t)?;
    let t = s.t;
    Ok(s.x0.zip_map(&s.x1, |a, b| (1.0 - t) * a + t * b))
}

/// Differentiable variant of [`trajectory_point`].
pub fn trajectory_point_var(tape: &mut Tape, x0: Var, x1: Var, t: f64) -> Result<Var> {
    check_unit("t", t)?;
    let a = tape.scale(x0, 1.0 - t)?;
    let b = tape.scale(x1, t)?;
    tape.add(a, b)
}

/// Mean squared error between `predicted` and the target velocity `x1 - x0`.
pub fn fm_loss(tape: &mut Tape, predicted: Var, x0: Var, x1: Var) -> Result<Var> {
    if tape.shape(predicted) != tape.shape(x0) {
        return Err(Error::shape("fm_loss", tape.shape(predicted), tape.shape(x0)));
    }
    let target = tape.sub(x1, x0)?;
    let diff = tape.sub(predicted, target)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Standard-normal tensor drawn from `seed`. Shared by every sampler so that
/// dense and elastic runs start from the same noise.
pub fn initial_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Integrates `dx = v dt` from `t = 1` to `t = 0` in `steps` uniform Euler
/// steps, starting from `N(0, I)` noise drawn from `seed`.
pub fn euler_sample(
    mut velocity: impl FnMut(&Tensor, f64) -> Result<Tensor>,
    shape: &[usize],
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    euler_from(&mut velocity, initial_noise(shape, seed), steps)
}

pub fn euler_from(
    velocity: &mut impl FnMut(&Tensor, f64) -> Result<Tensor>,
    mut x: Tensor,
    steps: usize,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Domain {
            what: "Euler step count",
            value: 0.0,
        });
    }
    let dt = 1.0 / steps as f64;
    for s in 0..steps {
        let t = step_time(s, steps);
        let v = velocity(&x, t)?;
        if v.shape() != x.shape() {
            return Err(Error::shape("euler_sample", x.shape(), v.shape()));
        }
        euler_update(&mut x, &v, dt);
    }
    Ok(x)
}

/// Time at the start of Euler step `s` of `steps` (descending from 1).
pub fn step_time(s: usize, steps: usize) -> f64 {
    1.0 - s as f64 / steps as f64
}

pub(crate) fn euler_update(x: &mut Tensor, v: &Tensor, dt: f64) {
    for (a, b) in x.as_mut_slice().iter_mut().zip(v.as_slice()) {
        *a -= dt * b;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Tokens per sample.
    pub tokens: usize,
    /// Channels per token.
    pub dim: usize,
    pub modes: usize,
    /// Isotropic standard deviation around each mode pattern.
    pub scale: f64,
    /// Seeds the mode patterns (the fixed data distribution).
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tokens: 16,
            dim: 32,
            modes: 4,
            scale: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens < 1 || self.dim < 2 || self.modes < 1 {
            return Err(Error::contract(format!(
                "synthetic data needs tokens >= 1, dim >= 2, modes >= 1 (got {}, {}, {})",
                self.tokens, self.dim, self.modes
            )));
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::Domain {
                what: "mixture scale",
                value: self.scale,
            });
        }
        Ok(())
    }
}

/// Gaussian mixture over whole `[tokens, dim]` sequences.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    cfg: SynthConfig,
    patterns: Vec<Tensor>,
}

impl SyntheticData {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d6f_6465_7061_7474);
        let shape = [cfg.tokens, cfg.dim];
        let patterns = (0..cfg.modes)
            .map(|_| Tensor::randn(&shape, 1.0, &mut rng))
            .collect();
        Ok(Self { cfg, patterns })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.cfg.tokens, self.cfg.dim]
    }

    pub fn patterns(&self) -> &[Tensor] {
        &self.patterns
    }

    pub fn sample_data<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let mode = rng.random_range(0..self.patterns.len());
        let noise = Tensor::randn(&self.shape(), self.cfg.scale, rng);
        self.patterns[mode].zip_map(&noise, |m, e| m + e)
    }

    pub fn gen_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<FlowSample>> {
        if batch == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        Ok((0..batch)
            .map(|_| {
                let x0 = self.sample_data(rng);
                let x1 = Tensor::randn(&self.shape(), 1.0, rng);
                let t = rng.random::<f64>();
                FlowSample { x0, x1, t }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(x0: &[f64], x1: &[f64], t: f64) -> FlowSample {
        FlowSample::new(Tensor::row(x0), Tensor::row(x1), t).unwrap()
    }

    #[test]
    fn trajectory_endpoints_and_midpoint() {
        let s = sample(&[1.0, -2.0], &[3.0, 5.0], 0.0);
        assert_eq!(trajectory_point(&s).unwrap(), s.x0);
        let s = sample(&[1.0, -2.0], &[3.0, 5.0], 1.0);
        assert_eq!(trajectory_point(&s).unwrap(), s.x1);
        let s = sample(&[0.0], &[2.0], 0.5);
        assert_eq!(trajectory_point(&s).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn trajectory_rejects_t_out_of_range() {
        let s = FlowSample {
            x0: Tensor::row(&[0.0]),
            x1: Tensor::row(&[1.0]),
            t: 1.5,
        };
        assert!(matches!(trajectory_point(&s), Err(Error::Domain { .. })));
        assert!(FlowSample::new(Tensor::row(&[0.0]), Tensor::row(&[1.0]), -0.1).is_err());
    }

    #[test]
    fn fm_loss_examples() {
        let mut tape = Tape::new();
        let x0 = tape.constant(Tensor::row(&[0.0, 0.0]));
        let x1 = tape.constant(Tensor::row(&[2.0, 2.0]));
        let perfect = tape.constant(Tensor::row(&[2.0, 2.0]));
        let l = fm_loss(&mut tape, perfect, x0, x1).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let zero = tape.constant(Tensor::row(&[0.0, 0.0]));
        let l = fm_loss(&mut tape, zero, x0, x1).unwrap();
        assert_eq!(tape.value(l).item(), 4.0);
        let bad = tape.constant(Tensor::row(&[0.0]));
        assert!(fm_loss(&mut tape, bad, x0, x1).is_err());
    }

    #[test]
    fn fm_loss_matches_reference_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let a = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let mut reference = 0.0;
        for i in 0..12 {
            let d = p.as_slice()[i] - (b.as_slice()[i] - a.as_slice()[i]);
            reference += d * d;
        }
        reference /= 12.0;
        let mut tape = Tape::new();
        let (pv, av, bv) = (tape.constant(p), tape.constant(a), tape.constant(b));
        let l = fm_loss(&mut tape, pv, av, bv).unwrap();
        assert!((tape.value(l).item() - reference).abs() <= 1e-12);
    }

    #[test]
    fn euler_constant_field_recovers_data() {
        let x0 = Tensor::from_rows(&[&[0.5, -1.0], &[2.0, 0.0]]).unwrap();
        let x1 = initial_noise(&[2, 2], 11);
        let v = x1.zip_map(&x0, |a, b| a - b);
        for steps in [1, 10, 100] {
            let out = euler_sample(|_, _| Ok(v.clone()), &[2, 2], steps, 11).unwrap();
            assert!(out.max_abs_diff(&x0) <= 1e-12, "steps={steps}");
        }
    }

    #[test]
    fn euler_single_step_unrolls() {
        let field = |x: &Tensor, t: f64| Ok(x.map(|v| v * t + 0.5));
        let x1 = initial_noise(&[3, 2], 4);
        let expected = x1.zip_map(&field(&x1, 1.0).unwrap(), |a, b| a - b);
        let out = euler_sample(field, &[3, 2], 1, 4).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn euler_rejects_zero_steps() {
        assert!(euler_sample(|x, _| Ok(x.clone()), &[1, 2], 0, 0).is_err());
    }

    #[test]
    fn batches_are_deterministic() {
        let data = SyntheticData::new(SynthConfig::default()).unwrap();
        let a = data.gen_batch(4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = data.gen_batch(4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.x0, y.x0);
            assert_eq!(x.x1, y.x1);
            assert_eq!(x.t, y.t);
        }
    }

    #[test]
    fn noise_mean_is_centered() {
        let cfg = SynthConfig {
            tokens: 1,
            dim: 2,
            ..SynthConfig::default()
        };
        let data = SyntheticData::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = data.gen_batch(50_000, &mut rng).unwrap();
        let mean: f64 =
            batch.iter().flat_map(|s| s.x1.as_slice().to_vec()).sum::<f64>() / 100_000.0;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!(batch.iter().all(|s| (0.0..1.0).contains(&s.t)));
    }

    #[test]
    fn degenerate_mixture_returns_the_pattern() {
        let cfg = SynthConfig {
            modes: 1,
            scale: 0.0,
            ..SynthConfig::default()
        };
        let data = SyntheticData::new(cfg).unwrap();
        let batch = data.gen_batch(3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for s in batch {
            assert_eq!(s.x0, data.patterns()[0]);
        }
    }

    #[test]
    fn invalid_synth_config() {
        let cfg = SynthConfig {
            dim: 1,
            ..SynthConfig::default()
        };
        assert!(SyntheticData::new(cfg).is_err());
    }
}
