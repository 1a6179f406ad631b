//! Noise schedules, forward diffusion, DDIM stepping and inversion, DDPM
//! ancestral stepping, the clean-image estimator and posterior means.
//!
//! Step indices run `1..=T`; index `0` denotes the clean image and uses the
//! convention `alpha_bar(0) = 1`.

use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Per-step variances and their cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidSchedule(format!(
                "need at least 2 steps, got {steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "require 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        Ok(Self::from_betas(betas))
    }

    /// Linear schedule rescaled so that `steps` covers the same cumulative
    /// noise as a 1000-step `1e-4 → 0.02` run.
    pub fn scaled_linear_default(steps: usize) -> Result<Self> {
        let k = 1000.0 / steps as f64;
        Self::linear(steps, 1e-4 * k, 0.02 * k)
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Self { betas, alpha_bars }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                min,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// Cumulative product; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar(t).sqrt()
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    /// Ancestral sampling variance `beta_t (1 - ab_{t-1}) / (1 - ab_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Coefficients `(c_x0, c_xt)` of the true posterior mean.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let c0 = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c0, ct)
    }
}

/// `n` evenly spaced step indices in `1..=T`, always including 1 and `T`.
pub fn uniform_steps(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(Error::InvalidSchedule(format!(
            "cannot pick {n} distinct steps from 1..={total}"
        )));
    }
    if n == 1 {
        return Ok(vec![total]);
    }
    let steps: Vec<usize> = (0..n)
        .map(|k| (1.0 + k as f64 * (total - 1) as f64 / (n - 1) as f64).round() as usize)
        .collect();
    debug_assert!(steps.windows(2).all(|w| w[0] < w[1]));
    Ok(steps)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `sqrt(ab_t)·x0 + sqrt(1 - ab_t)·eps`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    s.check(t, 1)?;
    same_shape("forward_noise", x0, eps)?;
    let (a, b) = (s.sqrt_alpha_bar(t), s.sqrt_one_minus_alpha_bar(t));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Clean-image estimate `(x_t - sqrt(1 - ab_t)·eps_hat) / sqrt(ab_t)`.
pub fn estimate_x0(x_t: &Tensor, eps_hat: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    s.check(t, 1)?;
    same_shape("estimate_x0", x_t, eps_hat)?;
    let (a, b) = (s.sqrt_alpha_bar(t), s.sqrt_one_minus_alpha_bar(t));
    x_t.zip_map(eps_hat, |x, e| (x - b * e) / a)
}

/// Taped form of [`estimate_x0`], bit-identical in value.
pub fn estimate_x0_var<'t>(
    x_t: Var<'t>,
    eps_hat: Var<'t>,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Var<'t>> {
    s.check(t, 1)?;
    let (a, b) = (s.sqrt_alpha_bar(t), s.sqrt_one_minus_alpha_bar(t));
    Ok(x_t.sub(eps_hat.scale(b))?.div_scalar(a))
}

/// Deterministic (eta = 0) DDIM update from `t` to `t_prev < t`.
pub fn ddim_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::StepOutOfRange {
            t: t_prev,
            min: 0,
            max: t.saturating_sub(1),
        });
    }
    s.check(t_prev, 0)?;
    let x0 = estimate_x0(x_t, eps_hat, t, s)?;
    let (a, b) = (s.sqrt_alpha_bar(t_prev), s.sqrt_one_minus_alpha_bar(t_prev));
    x0.zip_map(eps_hat, |x, e| a * x + b * e)
}

/// Taped form of [`ddim_step`].
pub fn ddim_step_var<'t>(
    x_t: Var<'t>,
    eps_hat: Var<'t>,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<Var<'t>> {
    if t_prev >= t {
        return Err(Error::StepOutOfRange {
            t: t_prev,
            min: 0,
            max: t.saturating_sub(1),
        });
    }
    s.check(t_prev, 0)?;
    let x0 = estimate_x0_var(x_t, eps_hat, t, s)?;
    let (a, b) = (s.sqrt_alpha_bar(t_prev), s.sqrt_one_minus_alpha_bar(t_prev));
    x0.scale(a).add(eps_hat.scale(b))
}

/// Deterministic DDIM update in reverse-time direction, `t_prev → t` with
/// `t > t_prev`. `eps_hat` is the prediction at the current latent.
pub fn ddim_invert_step(
    x_prev: &Tensor,
    eps_hat: &Tensor,
    t_prev: usize,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    if t <= t_prev {
        return Err(Error::StepOutOfRange {
            t,
            min: t_prev + 1,
            max: s.steps(),
        });
    }
    s.check(t, 1)?;
    same_shape("ddim_invert_step", x_prev, eps_hat)?;
    let (ap, bp) = (s.sqrt_alpha_bar(t_prev), s.sqrt_one_minus_alpha_bar(t_prev));
    let (a, b) = (s.sqrt_alpha_bar(t), s.sqrt_one_minus_alpha_bar(t));
    x_prev.zip_map(eps_hat, |x, e| a * ((x - bp * e) / ap) + b * e)
}

/// DDPM ancestral update: predicted posterior mean plus `sigma_t·noise`.
/// At `t = 1` the noise is ignored.
pub fn ddpm_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    let mean = posterior_mean_predicted(x_t, eps_hat, t, s)?;
    if t == 1 {
        return Ok(mean);
    }
    same_shape("ddpm_step", x_t, noise)?;
    let sigma = s.posterior_variance(t).sqrt();
    mean.zip_map(noise, |m, z| m + sigma * z)
}

/// Mean of `q(x_{t-1} | x_t, x0)`.
pub fn posterior_mean_true(x0: &Tensor, x_t: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    s.check(t, 1)?;
    same_shape("posterior_mean_true", x0, x_t)?;
    let (c0, ct) = s.posterior_coefficients(t);
    x0.zip_map(x_t, |a, b| c0 * a + ct * b)
}

/// Posterior mean with `x0` replaced by [`estimate_x0`].
pub fn posterior_mean_predicted(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    let x0 = estimate_x0(x_t, eps_hat, t, s)?;
    posterior_mean_true(&x0, x_t, t, s)
}

/// Mean squared difference between true and predicted posterior means.
pub fn posterior_gap(
    x0: &Tensor,
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &NoiseSchedule,
) -> Result<f64> {
    let truth = posterior_mean_true(x0, x_t, t, s)?;
    let pred = posterior_mean_predicted(x_t, eps_hat, t, s)?;
    Ok(truth
        .data()
        .iter()
        .zip(pred.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / truth.numel() as f64)
}

/// A noise predictor `eps(x_t, t)`.
///
/// `reference` is the batch of original images the trajectory belongs to.
/// Unconditioned predictors ignore it; rectified predictors require it.
pub trait EpsModel {
    fn predict_eps(&self, x_t: &Tensor, t: usize, reference: Option<&Tensor>) -> Result<Tensor>;
}

impl<M: EpsModel + ?Sized> EpsModel for &M {
    fn predict_eps(&self, x_t: &Tensor, t: usize, reference: Option<&Tensor>) -> Result<Tensor> {
        (**self).predict_eps(x_t, t, reference)
    }
}

/// Adapts a closure into an [`EpsModel`].
pub struct FnEps<F>(pub F);

impl<F> EpsModel for FnEps<F>
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict_eps(&self, x_t: &Tensor, t: usize, _reference: Option<&Tensor>) -> Result<Tensor> {
        (self.0)(x_t, t)
    }
}

/// Latents and clean-image estimates from one inversion or sampling run.
///
/// For inversion, `step_indices` ascend from 0 and `latents[0]` is the input
/// image. For sampling, they descend to 0 and the last latent is the output.
/// `x0_estimates[i]` is the estimate formed from the model prediction made
/// while producing (inversion) or leaving (sampling) `latents[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub step_indices: Vec<usize>,
    pub latents: Vec<Tensor>,
    pub x0_estimates: Vec<Tensor>,
}

impl TrajectoryRecord {
    pub fn last(&self) -> &Tensor {
        self.latents.last().expect("trajectory is never empty")
    }
}

fn check_ascending(steps: &[usize], s: &NoiseSchedule) -> Result<()> {
    for w in steps.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::InvalidSchedule(format!(
                "step indices must be strictly ascending, got {steps:?}"
            )));
        }
    }
    if let Some(&first) = steps.first() {
        s.check(first, 1)?;
    }
    if let Some(&last) = steps.last() {
        s.check(last, 1)?;
    }
    Ok(())
}

/// Deterministic DDIM inversion of `x0` through `steps` (ascending).
///
/// The prediction for step `t` is evaluated at the current latent with
/// timestep `t`.
pub fn ddim_invert<M: EpsModel + ?Sized>(
    x0: &Tensor,
    model: &M,
    steps: &[usize],
    s: &NoiseSchedule,
    reference: Option<&Tensor>,
) -> Result<TrajectoryRecord> {
    check_ascending(steps, s)?;
    let mut rec = TrajectoryRecord {
        step_indices: vec![0],
        latents: vec![x0.clone()],
        x0_estimates: vec![x0.clone()],
    };
    let mut x = x0.clone();
    let mut t_prev = 0;
    for &t in steps {
        let eps = model.predict_eps(&x, t, reference)?;
        let x0_est = if t_prev == 0 {
            x.clone()
        } else {
            estimate_x0(&x, &eps, t_prev, s)?
        };
        x = ddim_invert_step(&x, &eps, t_prev, t, s)?;
        rec.step_indices.push(t);
        rec.latents.push(x.clone());
        rec.x0_estimates.push(x0_est);
        t_prev = t;
    }
    Ok(rec)
}

/// Deterministic DDIM sampling from `x_t` at the last of `steps` (ascending)
/// down to the clean image.
pub fn ddim_sample<M: EpsModel + ?Sized>(
    x_t: &Tensor,
    model: &M,
    steps: &[usize],
    s: &NoiseSchedule,
    reference: Option<&Tensor>,
) -> Result<TrajectoryRecord> {
    check_ascending(steps, s)?;
    let mut rec = TrajectoryRecord {
        step_indices: vec![],
        latents: vec![],
        x0_estimates: vec![],
    };
    let mut x = x_t.clone();
    for i in (0..steps.len()).rev() {
        let t = steps[i];
        let t_prev = if i == 0 { 0 } else { steps[i - 1] };
        let eps = model.predict_eps(&x, t, reference)?;
        rec.step_indices.push(t);
        rec.latents.push(x.clone());
        rec.x0_estimates.push(estimate_x0(&x, &eps, t, s)?);
        x = ddim_step(&x, &eps, t, t_prev, s)?;
    }
    rec.step_indices.push(0);
    rec.x0_estimates.push(x.clone());
    rec.latents.push(x);
    Ok(rec)
}

/// Monte-Carlo posterior-mean gap for each image: average over
/// `num_t_samples` draws of `t ~ U{1..T}` and forward noise.
pub fn posterior_gap_per_image<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    images: &[Tensor],
    s: &NoiseSchedule,
    num_t_samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut out = Vec::with_capacity(images.len());
    for x0 in images {
        let mut acc = 0.0;
        for _ in 0..num_t_samples {
            let t = rng.gen_range(1..=s.steps());
            let eps = Tensor::randn(x0.shape(), rng);
            let x_t = forward_noise(x0, t, &eps, s)?;
            let eps_hat = model.predict_eps(&x_t, t, Some(x0))?;
            acc += posterior_gap(x0, &x_t, &eps_hat, t, s)?;
        }
        out.push(acc / num_t_samples as f64);
    }
    Ok(out)
}

/// Dataset average of [`posterior_gap_per_image`].
pub fn posterior_gap_metric<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    images: &[Tensor],
    s: &NoiseSchedule,
    num_t_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let per = posterior_gap_per_image(model, images, s, num_t_samples, rng)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}
