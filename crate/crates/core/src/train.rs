//! Optimizer and trainers: denoiser pretraining, rectifier reconstruction
//! training (noise-fitting and the two pixel-ℓ1 variants) and the two editing
//! strategies.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::diffusion::{
    ddim_invert, ddim_sample, ddim_step_var, estimate_x0_var, forward_noise, uniform_steps,
    NoiseSchedule, TrajectoryRecord,
};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamSet};
use crate::probe::{directional_loss_var, l1_reg_var, AttributeDirection};
use crate::rectifier::{RectifiedModel, RectifierConfig, RectifierParams};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// The learning rate is multiplied by this every `decay_interval` steps.
    pub decay_factor: f64,
    pub decay_interval: usize,
}

impl AdamConfig {
    pub fn pretrain_default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decay_factor: 0.5,
            decay_interval: 2000,
        }
    }

    pub fn recon_default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-5,
            decay_factor: 0.9,
            decay_interval: 5000,
            ..Self::pretrain_default()
        }
    }

    pub fn edit_default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            decay_factor: 0.9,
            decay_interval: 10,
            ..Self::pretrain_default()
        }
    }

    /// Learning rate in effect after `step` completed updates.
    pub fn lr_at(&self, step: u64) -> f64 {
        let k = step / self.decay_interval.max(1) as u64;
        self.lr * self.decay_factor.powi(k as i32)
    }
}

/// Adam with decoupled weight decay and step-wise learning-rate decay.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        let c = &self.config;
        let lr = c.lr_at(self.step);
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gd[i];
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gd[i] * gd[i];
                let upd = (md[i] / bc1) / ((vd[i] / bc2).sqrt() + c.eps);
                pd[i] -= lr * (upd + c.weight_decay * pd[i]);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Pretrain,
    Recon,
    ReconL1,
    ReconL1Dw,
    EditSm,
    EditMarkov,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Pretrain => "pretrain",
            TrainMode::Recon => "recon",
            TrainMode::ReconL1 => "recon_l1",
            TrainMode::ReconL1Dw => "recon_l1_dw",
            TrainMode::EditSm => "edit_sm",
            TrainMode::EditMarkov => "edit_markov",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "pretrain" => TrainMode::Pretrain,
            "recon" => TrainMode::Recon,
            "recon_l1" => TrainMode::ReconL1,
            "recon_l1_dw" => TrainMode::ReconL1Dw,
            "edit_sm" => TrainMode::EditSm,
            "edit_markov" => TrainMode::EditMarkov,
            other => return Err(Error::InvalidConfig(format!("unknown mode `{other}`"))),
        })
    }

    pub fn is_recon(&self) -> bool {
        matches!(self, TrainMode::Recon | TrainMode::ReconL1 | TrainMode::ReconL1Dw)
    }

    pub fn is_edit(&self) -> bool {
        matches!(self, TrainMode::EditSm | TrainMode::EditMarkov)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub lambda_clip: f64,
    pub lambda_recon: f64,
    pub attribute: Option<String>,
    /// Weight of the mean-squared-offset term in the `recon_l1_dw` variant.
    pub dw_weight: f64,
    /// Markov baseline: chain length and how many steps gradients flow through.
    pub markov_steps: usize,
    pub markov_grad_steps: usize,
}

impl TrainConfig {
    pub fn for_mode(mode: TrainMode) -> Self {
        let optimizer = match mode {
            TrainMode::Pretrain => AdamConfig::pretrain_default(),
            m if m.is_recon() => AdamConfig::recon_default(),
            _ => AdamConfig::edit_default(),
        };
        Self {
            mode,
            steps: match mode {
                TrainMode::Pretrain => 3000,
                m if m.is_recon() => 3000,
                _ => 150,
            },
            batch_size: if mode.is_edit() { 8 } else { 16 },
            seed: 0,
            optimizer,
            lambda_clip: 1.0,
            lambda_recon: 1.0,
            attribute: mode.is_edit().then(|| "brighter".to_string()),
            dw_weight: 1e-2,
            markov_steps: 10,
            markov_grad_steps: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive");
        }
        if !(self.lambda_clip >= 0.0 && self.lambda_recon >= 0.0 && self.dw_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.optimizer.lr > 0.0) || self.optimizer.decay_interval == 0 {
            return bad("learning rate and decay interval must be positive");
        }
        if self.mode.is_edit() && self.attribute.is_none() {
            return bad("editing needs an attribute");
        }
        if self.mode == TrainMode::EditMarkov
            && (self.markov_steps == 0 || self.markov_grad_steps == 0)
        {
            return bad("markov chain and gradient window must be positive");
        }
        Ok(())
    }

    fn direction(&self) -> Result<AttributeDirection> {
        let name = self
            .attribute
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("editing needs an attribute".into()))?;
        AttributeDirection::by_name(name)
    }
}

/// Aborts on a non-finite loss, or when the moving average exceeds ten times
/// the mean of the first window.
#[derive(Clone, Debug)]
pub struct DivergenceGuard {
    window: usize,
    initial: Option<f64>,
    recent: VecDeque<f64>,
}

impl DivergenceGuard {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            initial: None,
            recent: VecDeque::new(),
        }
    }

    pub fn check(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        self.recent.push_back(loss);
        if self.recent.len() > self.window {
            self.recent.pop_front();
        }
        let avg = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
        match self.initial {
            None if self.recent.len() == self.window => self.initial = Some(avg),
            Some(init) if avg > 10.0 * init => return Err(Error::Diverged { step, loss: avg }),
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub terms: Vec<f64>,
    pub lr: f64,
    pub wallclock: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub term_names: Vec<String>,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss");
        for n in &self.term_names {
            s.push(',');
            s.push_str(n);
        }
        s.push_str(",lr,wallclock_s\n");
        for r in &self.rows {
            write!(s, "{},{:e}", r.step, r.loss).expect("string write");
            for t in &r.terms {
                write!(s, ",{t:e}").expect("string write");
            }
            writeln!(s, ",{:e},{:.3}", r.lr, r.wallclock).expect("string write");
        }
        s
    }
}

/// Shared optimisation loop. `step_fn` builds the batch loss on a fresh tape
/// and returns it with its logged components.
fn run_loop<F>(
    cfg: &TrainConfig,
    params: &mut ParamSet,
    term_names: &[&str],
    mut step_fn: F,
) -> Result<TrainLog>
where
    F: for<'a, 't> FnMut(&'t Tape, &Bound<'a, 't>, &mut ChaCha8Rng) -> Result<(Var<'t>, Vec<f64>)>,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.optimizer.clone(), params);
    let mut guard = DivergenceGuard::new(20);
    let mut log = TrainLog {
        term_names: term_names.iter().map(|s| s.to_string()).collect(),
        rows: Vec::with_capacity(cfg.steps),
    };
    let start = Instant::now();
    for step in 0..cfg.steps {
        let tape = Tape::new();
        let bound = params.bind(&tape, true);
        let (loss, terms) = step_fn(&tape, &bound, &mut rng)?;
        let value = loss.item();
        guard.check(step, value)?;
        tape.backward(loss)?;
        let grads = bound.grads(&tape);
        drop(bound);
        let lr = adam.current_lr();
        adam.step(params, &grads)?;
        log.rows.push(LogRow {
            step,
            loss: value,
            terms,
            lr,
            wallclock: start.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}

fn check_data(data: &[Tensor]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

/// One `(x0, t, ε, x_t)` draw.
fn draw_example<'d>(
    data: &'d [Tensor],
    s: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(&'d Tensor, usize, Tensor, Tensor)> {
    let x0 = &data[rng.gen_range(0..data.len())];
    let t = rng.gen_range(1..=s.steps());
    let eps = Tensor::randn(x0.shape(), rng);
    let x_t = forward_noise(x0, t, &eps, s)?;
    Ok((x0, t, eps, x_t))
}

fn batch_mean<'t>(tape: &'t Tape, parts: Vec<Var<'t>>) -> Result<Var<'t>> {
    Ok(tape.stack(&parts)?.mean())
}

/// Trains the noise predictor from scratch on `E‖ε - ε_θ(x_t)‖²`.
pub fn pretrain_denoiser(
    cfg: &TrainConfig,
    den_config: &DenoiserConfig,
    data: &[Tensor],
    s: &NoiseSchedule,
) -> Result<(DenoiserParams, TrainLog)> {
    check_data(data)?;
    let mut den = DenoiserParams::build(den_config)?;
    let arch = den.clone();
    let log = run_loop(cfg, &mut den.params, &[], |tape, bound, rng| {
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (_, t, eps, x_t) = draw_example(data, s, rng)?;
            let pred = arch.forward_sample(bound, tape.constant(x_t), t, None)?;
            losses.push(pred.sub(tape.constant(eps))?.square().mean());
        }
        Ok((batch_mean(tape, losses)?, vec![]))
    })?;
    Ok((den, log))
}

/// Edit loss `λ_CLIP·L_direction(x0 → x_edit) + λ_recon·L_ℓ1(x_edit, x0)`;
/// returns the total and both unweighted terms.
pub fn edit_loss<'t>(
    x0: Var<'t>,
    x_edit: Var<'t>,
    dir: &AttributeDirection,
    lambda_clip: f64,
    lambda_recon: f64,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let ld = directional_loss_var(x0, x_edit, dir)?;
    let l1 = l1_reg_var(x_edit, x0)?;
    Ok((ld.scale(lambda_clip).add(l1.scale(lambda_recon))?, ld, l1))
}

/// Reconstruction training of the rectifier against a frozen denoiser.
///
/// `recon` fits the noise; `recon_l1` fits the clean image through the
/// estimator; `recon_l1_dw` adds `μ·mean(Δ²)` over all offsets.
pub fn train_rectifier_recon(
    cfg: &TrainConfig,
    den: &DenoiserParams,
    rect: RectifierParams,
    data: &[Tensor],
    s: &NoiseSchedule,
) -> Result<(RectifierParams, TrainLog)> {
    if !cfg.mode.is_recon() {
        return Err(Error::InvalidConfig(format!(
            "`{}` is not a reconstruction mode",
            cfg.mode.as_str()
        )));
    }
    check_data(data)?;
    let mut rect = rect;
    let arch = rect.clone();
    let model = RectifiedModel {
        denoiser: den,
        rectifier: &arch,
        schedule: s,
    };
    let names: &[&str] = match cfg.mode {
        TrainMode::ReconL1Dw => &["l1", "dw"],
        _ => &[],
    };
    let log = run_loop(cfg, &mut rect.params, names, |tape, rb, rng| {
        let db = den.params.bind(tape, false);
        let mut losses = Vec::with_capacity(cfg.batch_size);
        let (mut l1_sum, mut dw_sum) = (0.0, 0.0);
        for _ in 0..cfg.batch_size {
            let (x0, t, eps, x_t) = draw_example(data, s, rng)?;
            let x_t = tape.constant(x_t);
            let (pred, offsets) = model.predict_sample_var(&db, rb, x0, x_t, t)?;
            let loss = match cfg.mode {
                TrainMode::Recon => pred.sub(tape.constant(eps))?.square().mean(),
                _ => {
                    let est = estimate_x0_var(x_t, pred, t, s)?;
                    let l1 = est.sub(tape.constant(x0.clone()))?.abs().mean();
                    if cfg.mode == TrainMode::ReconL1Dw {
                        let mut ids: Vec<&String> = offsets.keys().collect();
                        ids.sort();
                        let mut sq = tape.scalar(0.0);
                        let mut count = 0;
                        for id in ids {
                            let d = offsets[id];
                            count += d.value().numel();
                            sq = sq.add(d.square().sum())?;
                        }
                        let dw = sq.div_scalar(count as f64);
                        l1_sum += l1.item();
                        dw_sum += dw.item();
                        l1.add(dw.scale(cfg.dw_weight))?
                    } else {
                        l1
                    }
                }
            };
            losses.push(loss);
        }
        let b = cfg.batch_size as f64;
        let terms = if cfg.mode == TrainMode::ReconL1Dw {
            vec![l1_sum / b, dw_sum / b]
        } else {
            vec![]
        };
        Ok((batch_mean(tape, losses)?, terms))
    })?;
    Ok((rect, log))
}

/// Editing training that always starts from the true forward process of the
/// original image: each example draws `t` and `ε`, noises `x0` directly, and
/// scores the modulated clean-image estimate. Edited estimates never feed
/// back into later examples.
pub fn train_edit_score_matching(
    cfg: &TrainConfig,
    den: &DenoiserParams,
    rect_init: &RectifierParams,
    data: &[Tensor],
    s: &NoiseSchedule,
) -> Result<(RectifierParams, TrainLog)> {
    if cfg.mode != TrainMode::EditSm {
        return Err(Error::InvalidConfig("expected mode edit_sm".into()));
    }
    check_data(data)?;
    let dir = cfg.direction()?;
    let mut rect = rect_init.clone();
    let model = RectifiedModel {
        denoiser: den,
        rectifier: rect_init,
        schedule: s,
    };
    let log = run_loop(cfg, &mut rect.params, &["direction", "l1"], |tape, rb, rng| {
        let db = den.params.bind(tape, false);
        let mut losses = Vec::with_capacity(cfg.batch_size);
        let (mut ld_sum, mut l1_sum) = (0.0, 0.0);
        for _ in 0..cfg.batch_size {
            let (x0, t, _, x_t) = draw_example(data, s, rng)?;
            let x_t = tape.constant(x_t);
            let (pred, _) = model.predict_sample_var(&db, rb, x0, x_t, t)?;
            let edit = estimate_x0_var(x_t, pred, t, s)?;
            let (loss, ld, l1) = edit_loss(
                tape.constant(x0.clone()),
                edit,
                &dir,
                cfg.lambda_clip,
                cfg.lambda_recon,
            )?;
            ld_sum += ld.item();
            l1_sum += l1.item();
            losses.push(loss);
        }
        let b = cfg.batch_size as f64;
        Ok((batch_mean(tape, losses)?, vec![ld_sum / b, l1_sum / b]))
    })?;
    Ok((rect, log))
}

/// Markovian editing baseline: invert `x0` with the frozen model, then run
/// the modulated sampler down the chain, feeding each edited latent into the
/// next step and applying the edit loss at every step. Gradients flow through
/// the chain in windows of `markov_grad_steps` steps; the latent is detached
/// at each window boundary.
pub fn train_edit_markov_baseline(
    cfg: &TrainConfig,
    den: &DenoiserParams,
    rect_init: &RectifierParams,
    data: &[Tensor],
    s: &NoiseSchedule,
) -> Result<(RectifierParams, TrainLog)> {
    if cfg.mode != TrainMode::EditMarkov {
        return Err(Error::InvalidConfig("expected mode edit_markov".into()));
    }
    check_data(data)?;
    let dir = cfg.direction()?;
    let steps = uniform_steps(s.steps(), cfg.markov_steps)?;
    let mut rect = rect_init.clone();
    let model = RectifiedModel {
        denoiser: den,
        rectifier: rect_init,
        schedule: s,
    };
    let log = run_loop(cfg, &mut rect.params, &["direction", "l1"], |tape, rb, rng| {
        let db = den.params.bind(tape, false);
        let mut losses = Vec::new();
        let (mut ld_sum, mut l1_sum) = (0.0, 0.0);
        for _ in 0..cfg.batch_size {
            let x0 = &data[rng.gen_range(0..data.len())];
            let inv = ddim_invert(x0, den, &steps, s, None)?;
            let x0v = tape.constant(x0.clone());
            let mut x = tape.constant(inv.last().clone());
            for (k, i) in (0..steps.len()).rev().enumerate() {
                if k > 0 && k % cfg.markov_grad_steps == 0 {
                    x = x.detach();
                }
                let t = steps[i];
                let t_prev = if i == 0 { 0 } else { steps[i - 1] };
                let (pred, _) = model.predict_sample_var(&db, rb, x0, x, t)?;
                let edit = estimate_x0_var(x, pred, t, s)?;
                let (loss, ld, l1) =
                    edit_loss(x0v, edit, &dir, cfg.lambda_clip, cfg.lambda_recon)?;
                ld_sum += ld.item();
                l1_sum += l1.item();
                losses.push(loss);
                x = ddim_step_var(x, pred, t, t_prev, s)?;
            }
        }
        let n = losses.len() as f64;
        Ok((batch_mean(tape, losses)?, vec![ld_sum / n, l1_sum / n]))
    })?;
    Ok((rect, log))
}

/// Dispatches on `cfg.mode` for the rectifier trainers.
pub fn train_rectifier(
    cfg: &TrainConfig,
    den: &DenoiserParams,
    rect_init: &RectifierParams,
    data: &[Tensor],
    s: &NoiseSchedule,
) -> Result<(RectifierParams, TrainLog)> {
    match cfg.mode {
        m if m.is_recon() => train_rectifier_recon(cfg, den, rect_init.clone(), data, s),
        TrainMode::EditSm => train_edit_score_matching(cfg, den, rect_init, data, s),
        TrainMode::EditMarkov => train_edit_markov_baseline(cfg, den, rect_init, data, s),
        _ => Err(Error::InvalidConfig("pretraining does not take a rectifier".into())),
    }
}

/// Fresh rectifier for `den` built from `config`.
pub fn fresh_rectifier(den: &DenoiserParams, config: &RectifierConfig) -> Result<RectifierParams> {
    RectifierParams::build(den, config)
}

/// Final samples are clamped to the data range; the trajectory keeps the raw
/// latents.
pub fn clamp_image(x: &Tensor) -> Tensor {
    x.map(|v| v.clamp(-1.0, 1.0))
}

/// Invert `x0` with the frozen model, then sample back with it.
pub fn reconstruct(
    den: &DenoiserParams,
    x0: &Tensor,
    steps: &[usize],
    s: &NoiseSchedule,
) -> Result<(Tensor, TrajectoryRecord)> {
    let inv = ddim_invert(x0, den, steps, s, None)?;
    let rec = ddim_sample(inv.last(), den, steps, s, None)?;
    Ok((clamp_image(rec.last()), rec))
}

/// Invert `x0` with the frozen model, then sample back with the rectified
/// model; offsets are recomputed at every step from `x0`, the current
/// clean-image estimate and `t`. Full range, no partial inversion.
pub fn edit_sample(
    den: &DenoiserParams,
    rect: &RectifierParams,
    x0: &Tensor,
    steps: &[usize],
    s: &NoiseSchedule,
) -> Result<(Tensor, TrajectoryRecord)> {
    let inv = ddim_invert(x0, den, steps, s, None)?;
    let model = RectifiedModel {
        denoiser: den,
        rectifier: rect,
        schedule: s,
    };
    let rec = ddim_sample(inv.last(), &model, steps, s, Some(x0))?;
    Ok((clamp_image(rec.last()), rec))
}
