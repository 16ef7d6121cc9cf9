//! Noise schedules, the closed-form diffusion forward map, the straight flow
//! path and time-grid bookkeeping.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numcore::Tensor;

/// Upper clip on a single step's beta.
pub const MAX_BETA: f64 = 0.999;

/// Discrete-time DDPM coefficients, 1-indexed by step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// The sqrt schedule: betas derived from `abar(s) = 1 - sqrt(s + 1e-4)`,
    /// `beta_t = min(1 - abar(t/T) / abar((t-1)/T), MAX_BETA)`.
    pub fn sqrt(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("diffusion schedule needs at least one step"));
        }
        let abar = |s: f64| 1.0 - (s + 1e-4).sqrt();
        let betas = (0..steps)
            .map(|i| {
                let t1 = i as f64 / steps as f64;
                let t2 = (i + 1) as f64 / steps as f64;
                (1.0 - abar(t2) / abar(t1)).min(MAX_BETA)
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(invalid("betas must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t_step: usize) -> Result<()> {
        if t_step == 0 || t_step > self.steps() {
            return Err(invalid(format!(
                "diffusion step {t_step} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t_step: usize) -> f64 {
        self.betas[t_step - 1]
    }

    pub fn alpha(&self, t_step: usize) -> f64 {
        self.alphas[t_step - 1]
    }

    /// Cumulative product up to `t_step`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t_step: usize) -> f64 {
        if t_step == 0 {
            1.0
        } else {
            self.alpha_bars[t_step - 1]
        }
    }

    /// `(sqrt(abar_t), sqrt(1 - abar_t))`, the coefficients of `z0` and `eps`.
    pub fn forward_coeffs(&self, t_step: usize) -> Result<(f64, f64)> {
        self.check(t_step)?;
        let ab = self.alpha_bar(t_step);
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// `(c_z0, c_zt, variance)` of `q(z_{t-1} | z_t, z0)`.
    pub fn posterior_coeffs(&self, t_step: usize) -> Result<(f64, f64, f64)> {
        self.check(t_step)?;
        let ab = self.alpha_bar(t_step);
        let ab_prev = self.alpha_bar(t_step - 1);
        let beta = self.beta(t_step);
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = self.alpha(t_step).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
        Ok((c0, ct, var))
    }

    /// Model time input for a diffusion step: `rescale_max * t_step / T`.
    pub fn time_input(&self, t_step: usize, rescale_max: f32) -> f32 {
        (rescale_max as f64 * t_step as f64 / self.steps() as f64) as f32
    }
}

/// `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn diffusion_forward(z0: &Tensor, eps: &Tensor, t_step: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let (a, b) = sched.forward_coeffs(t_step)?;
    let (a, b) = (a as f32, b as f32);
    Ok(z0.zip_map(eps, |z, e| a * z + b * e)?)
}

/// Straight path `t z1 + (1 - t) z0`.
pub fn flow_interpolate(z0: &Tensor, z1: &Tensor, t: f32) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("flow time {t} outside [0, 1]")));
    }
    Ok(z0.zip_map(z1, |a, b| t * b + (1.0 - t) * a)?)
}

/// One reverse step of ancestral sampling. At `t_step == 1` the posterior
/// mean is returned without noise.
pub fn ancestral_posterior<R: Rng + ?Sized>(
    z_t: &Tensor,
    z0_pred: &Tensor,
    t_step: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let (c0, ct, var) = sched.posterior_coeffs(t_step)?;
    let (c0, ct) = (c0 as f32, ct as f32);
    let mean = z0_pred.zip_map(z_t, |p, z| c0 * p + ct * z)?;
    if t_step == 1 {
        return Ok(mean);
    }
    let std = var.sqrt() as f32;
    let noise = Tensor::randn(mean.shape(), std, rng);
    Ok(mean.zip_map(&noise, |m, n| m + n)?)
}

/// Flow-matching time grid `t_k = k / T`, `k = 0..=T`, with the model's
/// time input rescaled to `[0, rescale_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowTimeGrid {
    pub steps: usize,
    pub rescale_max: f32,
}

impl Default for FlowTimeGrid {
    fn default() -> Self {
        Self {
            steps: 20,
            rescale_max: 1000.0,
        }
    }
}

impl FlowTimeGrid {
    pub fn new(steps: usize, rescale_max: f32) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("flow grid needs T >= 1"));
        }
        Ok(Self { steps, rescale_max })
    }

    /// `t_step / T` as f32; `t_step` is kept integral until here.
    pub fn t(&self, t_step: usize) -> f32 {
        (t_step as f64 / self.steps as f64) as f32
    }

    pub fn dt(&self) -> f32 {
        (1.0 / self.steps as f64) as f32
    }

    pub fn rescale(&self, t_step: usize) -> Result<f32> {
        rescale_time(t_step, self.steps, self.rescale_max)
    }
}

/// `rescale_max * t_step / T` for `t_step` in `1..=T`.
pub fn rescale_time(t_step: usize, steps: usize, rescale_max: f32) -> Result<f32> {
    if t_step == 0 || t_step > steps {
        return Err(invalid(format!("time step {t_step} outside 1..={steps}")));
    }
    Ok((rescale_max as f64 * t_step as f64 / steps as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(data: &[f32]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn sqrt_schedule_invariants() {
        let s = NoiseSchedule::sqrt(200).unwrap();
        let mut prev = 1.0;
        for t in 1..=200 {
            assert!((s.alpha(t) - (1.0 - s.beta(t))).abs() < 1e-15);
            let ab = s.alpha_bar(t);
            assert!(ab > 0.0 && ab < prev, "t={t} ab={ab}");
            prev = ab;
        }
        let prod: f64 = (1..=200).map(|t| s.alpha(t)).product();
        assert!((prod - s.alpha_bar(200)).abs() < 1e-15);
    }

    #[test]
    fn forward_limits() {
        let z0 = v(&[1.0, 0.0]);
        let eps = v(&[0.0, 1.0]);
        let s = NoiseSchedule::from_betas(vec![0.36]).unwrap();
        let z = diffusion_forward(&z0, &eps, 1, &s).unwrap();
        assert!((z.data()[0] - 0.8).abs() < 1e-6 && (z.data()[1] - 0.6).abs() < 1e-6);
        let clean = NoiseSchedule::from_betas(vec![1e-12]).unwrap();
        let z = diffusion_forward(&z0, &eps, 1, &clean).unwrap();
        assert!(z.max_abs_diff(&z0).unwrap() < 1e-5);
        let noisy = NoiseSchedule::from_betas(vec![1.0 - 1e-14]).unwrap();
        let z = diffusion_forward(&z0, &eps, 1, &noisy).unwrap();
        assert!(z.max_abs_diff(&eps).unwrap() < 1e-6);
        assert!(diffusion_forward(&z0, &eps, 2, &s).is_err());
        assert!(diffusion_forward(&z0, &eps, 0, &s).is_err());
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let z0 = v(&[0.0, 2.0]);
        let z1 = v(&[2.0, 0.0]);
        assert_eq!(flow_interpolate(&z0, &z1, 0.0).unwrap(), z0);
        assert_eq!(flow_interpolate(&z0, &z1, 1.0).unwrap(), z1);
        assert_eq!(flow_interpolate(&z0, &z1, 0.5).unwrap().data(), &[1.0, 1.0]);
        assert!(flow_interpolate(&z0, &z1, 1.5).is_err());
    }

    #[test]
    fn interpolate_is_affine_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z0 = Tensor::randn(&[6], 1.0, &mut rng);
        let z1 = Tensor::randn(&[6], 1.0, &mut rng);
        let grid = FlowTimeGrid::default();
        for a in 0..=20usize {
            for b in (a..=20).step_by(2) {
                let za = flow_interpolate(&z0, &z1, grid.t(a)).unwrap();
                let zb = flow_interpolate(&z0, &z1, grid.t(b)).unwrap();
                let zm = flow_interpolate(&z0, &z1, grid.t((a + b) / 2)).unwrap();
                let avg = za.zip_map(&zb, |x, y| 0.5 * (x + y)).unwrap();
                assert!(avg.max_abs_diff(&zm).unwrap() < 1e-6);
            }
        }
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale_time(20, 20, 1000.0).unwrap(), 1000.0);
        assert_eq!(rescale_time(10, 20, 1000.0).unwrap(), 500.0);
        assert_eq!(rescale_time(1, 20, 1000.0).unwrap(), 50.0);
        assert!(rescale_time(0, 20, 1000.0).is_err());
        assert!(rescale_time(21, 20, 1000.0).is_err());
        let g = FlowTimeGrid::default();
        assert_eq!(g.dt() * g.steps as f32, 1.0);
    }

    #[test]
    fn variance_preserved() {
        let s = NoiseSchedule::sqrt(200).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        for t in [1, 50, 120, 200] {
            let z0 = Tensor::randn(&[n], 1.0, &mut rng);
            let eps = Tensor::randn(&[n], 1.0, &mut rng);
            let z = diffusion_forward(&z0, &eps, t, &s).unwrap();
            let mean = z.data().iter().map(|&x| x as f64).sum::<f64>() / n as f64;
            let var = z.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.05, "t={t} var={var}");
        }
    }

    #[test]
    fn posterior_terminal_step_is_mean() {
        let s = NoiseSchedule::sqrt(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zt = v(&[0.3, -1.2]);
        let z0 = v(&[1.0, 0.5]);
        let out = ancestral_posterior(&zt, &z0, 1, &s, &mut rng).unwrap();
        let (c0, ct, _) = s.posterior_coeffs(1).unwrap();
        for i in 0..2 {
            let m = c0 as f32 * z0.data()[i] + ct as f32 * zt.data()[i];
            assert_eq!(out.data()[i], m);
        }
        // with abar_0 = 1 the terminal mean is exactly the prediction
        assert!(out.max_abs_diff(&z0).unwrap() < 1e-6);
    }

    #[test]
    fn posterior_small_beta_limit() {
        let s = NoiseSchedule::from_betas(vec![0.5, 1e-9]).unwrap();
        let (c0, ct, var) = s.posterior_coeffs(2).unwrap();
        assert!(c0 < 1e-8 && (ct - 1.0).abs() < 1e-8 && var < 1e-8);
    }

    // Gaussian product oracle: q(z_{t-1}|z0) = N(sqrt(ab_prev) z0, 1-ab_prev),
    // q(z_t|z_{t-1}) = N(sqrt(alpha) z_{t-1}, beta). Bayes gives the posterior
    // precision as the sum of precisions and the mean as the precision-weighted
    // combination, computed here without the closed-form coefficients.
    #[test]
    fn posterior_matches_bayes_oracle() {
        let s = NoiseSchedule::sqrt(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let t = rng.random_range(2..=50);
            let z0: f64 = rng.random_range(-2.0..2.0);
            let zt: f64 = rng.random_range(-2.0..2.0);
            let ab_prev: f64 = (1..t).map(|i| 1.0 - s.beta(i)).product();
            let alpha = 1.0 - s.beta(t);
            let prior_prec = 1.0 / (1.0 - ab_prev);
            let lik_prec = alpha / s.beta(t);
            let post_var = 1.0 / (prior_prec + lik_prec);
            let post_mean =
                post_var * (prior_prec * ab_prev.sqrt() * z0 + alpha.sqrt() / s.beta(t) * zt);
            let (c0, ct, var) = s.posterior_coeffs(t).unwrap();
            assert!((c0 * z0 + ct * zt - post_mean).abs() < 1e-9);
            assert!((var - post_var).abs() < 1e-9);
        }
    }

    #[test]
    fn posterior_reconstructs_true_previous_mean() {
        // With the true z0 and the true noise, the posterior mean equals the
        // conditional expectation; summing coefficients against z0 itself
        // (z_t = sqrt(ab) z0 with zero noise) recovers sqrt(ab_prev) z0.
        let s = NoiseSchedule::sqrt(100).unwrap();
        for t in 2..=100 {
            let (c0, ct, _) = s.posterior_coeffs(t).unwrap();
            let lhs = c0 + ct * s.alpha_bar(t).sqrt();
            assert!((lhs - s.alpha_bar(t - 1).sqrt()).abs() < 1e-5, "t={t}");
        }
    }
}
